import numpy as np
import pytest

from shiftattn.patterns import Full, LongMixed, Local, S2, SccaFixed, SccaFlow, Sda


def all_patterns(w):
    return [Full(), Local(w), S2(w), SccaFixed(w), SccaFlow(w), Sda(2), Sda(4), LongMixed(w)]


def central_difference(f, arrays, step=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. each array in ``arrays`` (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + step
            fp = f()
            a[i] = old - step
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tagged(n, b=1, h=1, d=1):
    """[B,H,N,D] tensor whose row j holds the value j."""
    return np.broadcast_to(np.arange(n, dtype=np.float64)[None, None, :, None], (b, h, n, d)).copy()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
