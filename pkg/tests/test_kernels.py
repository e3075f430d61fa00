import math

import numpy as np
import pytest

from shiftattn import kernels
from shiftattn.analysis import masked_full_oracle
from shiftattn.kernels import (
    StateError,
    attention,
    backward,
    chunked_attention,
    full_attention,
    mixed_attention,
    s2_baseline,
    scca_fixed,
    scca_flow,
    sda,
)
from shiftattn.patterns import (
    AttnConfig,
    Full,
    HeadPlan,
    LongMixed,
    SccaFlow,
    Sda,
    build_head_plans,
    build_mask,
    plans_mask,
)
from shiftattn.tensor import ConfigError, NumericError, ShapeError

from conftest import all_patterns, central_difference, rel_err


def qkv(rng, b=1, h=2, n=8, d=4, dtype=np.float64):
    return tuple(rng.standard_normal((b, h, n, d)).astype(dtype) for _ in range(3))


def scalar_attention(q, k, v, causal):
    b, h, n, d = q.shape
    out = np.zeros_like(q)
    for bi in range(b):
        for hi in range(h):
            for i in range(n):
                keys = [j for j in range(n) if not causal or j <= i]
                logits = [sum(q[bi, hi, i, x] * k[bi, hi, j, x] for x in range(d)) / math.sqrt(d) for j in keys]
                top = max(logits)
                ws = [math.exp(s - top) for s in logits]
                z = sum(ws)
                for x in range(d):
                    out[bi, hi, i, x] = sum(wj * v[bi, hi, j, x] for wj, j in zip(ws, keys)) / z
    return out


def test_full_single_token(rng):
    q, k, v = qkv(rng, n=1)
    assert np.array_equal(full_attention(q, k, v).out, v)


def test_full_identical_keys(rng):
    q, k, v = qkv(rng, n=6)
    k[:] = k[:, :, :1]
    out = full_attention(q, k, v).out
    want = v.mean(axis=2, keepdims=True)
    assert np.max(np.abs(out - want)) < 1e-12


@pytest.mark.parametrize("causal", [False, True])
def test_full_matches_scalar_loop(rng, causal):
    q, k, v = qkv(rng, h=2, n=6, d=4)
    assert np.max(np.abs(full_attention(q, k, v, causal).out - scalar_attention(q, k, v, causal))) < 1e-10


def test_chunked_degenerate_and_locality(rng):
    q, k, v = qkv(rng, n=8)
    assert np.max(np.abs(chunked_attention(q, k, v, 8).out - full_attention(q, k, v).out)) < 1e-12
    base = chunked_attention(q, k, v, 4).out
    k2, v2 = k.copy(), v.copy()
    k2[:, :, 5] += 1.0
    v2[:, :, 5] -= 2.0
    moved = chunked_attention(q, k2, v2, 4).out
    assert np.array_equal(moved[:, :, :4], base[:, :, :4])
    assert not np.array_equal(moved[:, :, 4:], base[:, :, 4:])


def test_fixed_reduces_with_single_chunk(rng):
    q, k, v = qkv(rng, h=4, n=8)
    # one chunk: the shift only permutes keys inside it, so every head is full attention
    assert np.max(np.abs(scca_fixed(q, k, v, 8).out - full_attention(q, k, v).out)) < 1e-12


def test_fixed_shifted_head_dependencies(rng):
    q, k, v = qkv(rng, h=2, n=8)
    base = scca_fixed(q, k, v, 4).out
    changed = set()
    for row in range(8):
        k2, v2 = k.copy(), v.copy()
        k2[:, 0, row] += 0.5
        v2[:, 0, row] += 0.5
        if not np.array_equal(scca_fixed(q, k2, v2, 4).out[:, 0, 0], base[:, 0, 0]):
            changed.add(row)
    assert changed == {6, 7, 0, 1}


def test_flow_single_chunk_is_full(rng):
    q, k, v = qkv(rng, h=4, n=8)
    assert np.max(np.abs(scca_flow(q, k, v, 8).out - full_attention(q, k, v).out)) < 1e-12


def test_flow_every_key_reaches_every_query(rng):
    q, k, v = qkv(rng, h=4, n=16)
    base = scca_flow(q, k, v, 4).out
    for row in range(16):
        k2 = k.copy()
        k2[:, :, row] += 0.5
        diff = np.abs(scca_flow(q, k2, v, 4).out - base).max(axis=(0, 1, 3))
        assert (diff > 0).all(), row


def test_s2_single_chunk_is_full(rng):
    q, k, v = qkv(rng, h=2, n=8)
    assert np.max(np.abs(s2_baseline(q, k, v, 8).out - full_attention(q, k, v).out)) < 1e-12


def test_sda_theta_one_is_full(rng):
    q, k, v = qkv(rng, h=3, n=8)
    assert np.max(np.abs(sda(q, k, v, 1).out - full_attention(q, k, v).out)) < 1e-12


def test_sda_rows(rng):
    q, k, v = qkv(rng, h=2, n=8)
    out = sda(q, k, v, 2).out[:, 0]
    assert np.all(out[:, 1::2] == 0)
    sel = [0, 2, 4, 6]
    want = full_attention(q[:, :1, sel], k[:, :1, sel], v[:, :1, sel]).out[:, 0]
    assert np.max(np.abs(out[:, sel] - want)) < 1e-12


def test_mixed_compositions(rng):
    q, k, v = qkv(rng, h=4, n=16)
    local = [HeadPlan("local", 4)] * 4
    assert np.array_equal(mixed_attention(q, k, v, local).out, chunked_attention(q, k, v, 4).out)
    flow = [HeadPlan("shifted_chunk", 4, s) for s in (0, 4, 8, 12)]
    assert np.array_equal(mixed_attention(q, k, v, flow, True).out, scca_flow(q, k, v, 4, True).out)
    with pytest.raises(ConfigError):
        mixed_attention(q, k, v, local[:3])
    with pytest.raises(ConfigError):
        mixed_attention(q, k, v, [HeadPlan("local", 5)] * 4)


@pytest.mark.parametrize("causal", [False, True])
def test_mixed_h8_matches_oracle(rng, causal):
    q, k, v = qkv(rng, h=8, n=32, d=8)
    plans = (
        [HeadPlan("dilated", theta=2, offset=s) for s in (1, 2)]
        + [HeadPlan("dilated", theta=4, offset=s) for s in (1, 2, 3, 4)]
        + [HeadPlan("shifted_chunk", 8, 4), HeadPlan("local", 8)]
    )
    got = mixed_attention(q, k, v, plans, causal).out
    want = masked_full_oracle(q, k, v, plans_mask(plans, 32, causal))
    assert np.max(np.abs(got - want)) < 1e-10


@pytest.mark.parametrize("n,w,h,d", [(8, 4, 2, 4), (16, 4, 4, 8), (32, 8, 8, 8), (64, 16, 4, 16), (16, 8, 3, 4)])
@pytest.mark.parametrize("causal", [False, True])
def test_all_patterns_match_oracle(rng, n, w, h, d, causal):
    q, k, v = qkv(rng, b=2, h=h, n=n, d=d)
    cfg = AttnConfig(2, h, n, d, causal)
    for spec in all_patterns(w):
        got = attention(spec, q, k, v, causal).out
        want = masked_full_oracle(q, k, v, build_mask(spec, cfg))
        assert np.max(np.abs(got - want)) < 1e-10, spec


@pytest.mark.parametrize("causal", [False, True])
def test_perturbation_follows_mask(rng, causal):
    n, w, h = 16, 4, 4
    q, k, v = qkv(rng, h=h, n=n)
    cfg = AttnConfig(1, h, n, 4, causal)
    for spec in all_patterns(w):
        mask = build_mask(spec, cfg)
        base = attention(spec, q, k, v, causal).out
        for row in range(n):
            k2, v2 = k.copy(), v.copy()
            k2[:, :, row] += 0.3
            v2[:, :, row] -= 0.7
            moved = np.abs(attention(spec, q, k2, v2, causal).out - base).max(axis=(0, 3)) > 0
            assert np.array_equal(moved, mask[:, :, row]), (spec, row)


def test_causal_never_looks_ahead(rng):
    n = 16
    q, k, v = qkv(rng, h=4, n=n)
    for spec in all_patterns(4):
        base = attention(spec, q, k, v, True).out
        for t in (3, 7, 12):
            q2, k2, v2 = q.copy(), k.copy(), v.copy()
            for a in (q2, k2, v2):
                a[:, :, t:] += 1.0
            moved = attention(spec, q2, k2, v2, True).out
            assert np.array_equal(moved[:, :, :t], base[:, :, :t]), (spec, t)


def test_backward_zero_dout(rng):
    q, k, v = qkv(rng, h=4, n=8)
    o = scca_flow(q, k, v, 4)
    g = backward(SccaFlow(4), q, k, v, np.zeros_like(q), o.saved)
    assert not g.dq.any() and not g.dk.any() and not g.dv.any()


def fd_check(spec, q, k, v, causal, rng):
    dout = rng.standard_normal(q.shape)
    out = attention(spec, q, k, v, causal)
    g = backward(spec, q, k, v, dout, out.saved)

    def f():
        return float((attention(spec, q, k, v, causal, save=False).out * dout).sum())

    nq, nk, nv = central_difference(f, [q, k, v])
    return max(rel_err(g.dq, nq), rel_err(g.dk, nk), rel_err(g.dv, nv))


@pytest.mark.parametrize("causal", [False, True])
def test_backward_full_small(rng, causal):
    q, k, v = qkv(rng, h=1, n=3, d=2)
    assert fd_check(Full(), q, k, v, causal, rng) < 1e-6


@pytest.mark.parametrize("causal", [False, True])
def test_backward_flow(rng, causal):
    q, k, v = qkv(rng, h=4, n=8, d=4)
    assert fd_check(SccaFlow(4), q, k, v, causal, rng) < 1e-6


def test_backward_state_errors(rng):
    q, k, v = qkv(rng, h=4, n=8)
    o = scca_flow(q, k, v, 4)
    with pytest.raises(StateError):
        backward(Full(), q, k, v, q, o.saved)
    with pytest.raises(StateError):
        backward(SccaFlow(4), q + 1, k, v, q, o.saved)
    with pytest.raises(StateError):
        backward(SccaFlow(4), q, k, v, q, None)
    with pytest.raises(StateError):
        backward(SccaFlow(4), q, k, v, q, scca_flow(q, k, v, 4, save=False).saved)


@pytest.mark.parametrize("n,w,h", [(64, 16, 4), (32, 4, 8), (64, 8, 2)])
def test_chunked_score_buffers_are_linear(rng, n, w, h):
    b = 2
    q, k, v = qkv(rng, b=b, h=h, n=n)
    for spec in all_patterns(w)[1:5]:  # local, s2, scca_fixed, scca_flow
        with kernels.instrument() as events:
            attention(spec, q, k, v, True)
        sizes = [e.elements for e in events if e.op == "scores"]
        assert max(sizes) <= b * h * (n // w) * w * w
        assert sum(sizes) == b * h * n * w < b * h * n * n


def test_head_batching_does_not_change_results(rng, monkeypatch):
    q, k, v = qkv(rng, b=2, h=8, n=32, d=8)
    for spec in all_patterns(8):
        whole = attention(spec, q, k, v, True).out
        monkeypatch.setattr(kernels, "MAX_SCORE_ELEMENTS", 1)
        split = attention(spec, q, k, v, True)
        monkeypatch.undo()
        assert np.array_equal(whole, split.out), spec
        dout = np.ones_like(q)
        g = backward(spec, q, k, v, dout, split.saved)
        g2 = backward(spec, q, k, v, dout, attention(spec, q, k, v, True).saved)
        assert np.array_equal(g.dq, g2.dq)


def test_single_precision_and_input_errors(rng):
    q, k, v = qkv(rng, h=4, n=16, dtype=np.float32)
    out = scca_flow(q, k, v, 4, True).out
    assert out.dtype == np.float32
    want = masked_full_oracle(*(a.astype(np.float64) for a in (q, k, v)), build_mask(SccaFlow(4), AttnConfig(1, 4, 16, 4, True)))
    assert np.max(np.abs(out - want)) < 1e-5
    with pytest.raises(ShapeError):
        scca_flow(q, k.astype(np.float64), v, 4)
    with pytest.raises(ShapeError):
        scca_flow(q, k[:, :2], v, 4)
    q[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        full_attention(q, k, v)
    with pytest.raises(ConfigError):
        sda(k, k, v, 17)
