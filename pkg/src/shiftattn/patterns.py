"""Attention pattern descriptions, per-head plans and ground-truth masks."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .tensor import ConfigError


@dataclass(frozen=True)
class AttnConfig:
    batch: int
    heads: int
    seq_len: int
    head_dim: int
    causal: bool = False

    def __post_init__(self):
        for name in ("batch", "heads", "seq_len", "head_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.batch, self.heads, self.seq_len, self.head_dim)


@dataclass(frozen=True)
class HeadPlan:
    """What one head computes.

    kind is one of:
      ``local``          chunked attention over windows of ``window`` tokens
      ``shifted_chunk``  as local, but keys/values rolled right by ``shift``
      ``shifted_window`` queries, keys and values all rolled by ``shift``
                         (moves the window partition itself)
      ``dilated``        attention among positions ``p % theta == offset - 1``
    """

    kind: str
    window: int = 0
    shift: int = 0
    theta: int = 1
    offset: int = 1

    def validate(self, n: int) -> None:
        if self.kind in ("local", "shifted_chunk", "shifted_window"):
            if self.window < 1 or n % self.window:
                raise ConfigError(f"window w={self.window} must divide N={n}")
            if not 0 <= self.shift < n:
                raise ConfigError(f"shift {self.shift} outside [0, N={n})")
        elif self.kind == "dilated":
            if self.theta < 1:
                raise ConfigError(f"dilation theta must be >= 1, got {self.theta}")
            if self.theta > n:
                raise ConfigError(f"dilation theta={self.theta} exceeds N={n}")
            if not 1 <= self.offset <= self.theta:
                raise ConfigError(f"offset s={self.offset} outside [1, theta={self.theta}]")
        else:
            raise ConfigError(f"unknown head plan kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == "dilated":
            return f"dilated(theta={self.theta},s={self.offset})"
        if self.kind == "local":
            return f"local(w={self.window})"
        return f"{self.kind}(w={self.window},shift={self.shift})"


@dataclass(frozen=True)
class Full:
    name = "full"


@dataclass(frozen=True)
class Local:
    w: int
    name = "local"


@dataclass(frozen=True)
class S2:
    w: int
    name = "s2"


@dataclass(frozen=True)
class SccaFixed:
    w: int
    name = "scca_fixed"


@dataclass(frozen=True)
class SccaFlow:
    w: int
    name = "scca_flow"


@dataclass(frozen=True)
class Sda:
    theta: int
    name = "sda"


@dataclass(frozen=True)
class LongMixed:
    """Per-head mixture; ``plans=None`` selects the default SDA(2)/SDA(4)/SCCA_fixed split."""

    w: int
    plans: tuple[HeadPlan, ...] | None = None
    name = "longmixed"


PatternSpec = Union[Full, Local, S2, SccaFixed, SccaFlow, Sda, LongMixed]

PATTERN_NAMES = ("full", "local", "s2", "scca_fixed", "scca_flow", "sda", "longmixed")


def make_pattern(name: str, w: int | None = None, theta: int | None = None) -> PatternSpec:
    """Build a pattern from its command-line name (``sda2``/``sda4`` are accepted shorthands)."""
    key = name.lower().replace("-", "_")
    if key in ("sda2", "sda4"):
        key, theta = "sda", int(key[-1])
    if key == "full":
        return Full()
    if key == "sda":
        if theta is None:
            raise ConfigError("pattern sda needs a dilation theta")
        return Sda(theta)
    ctor = {"local": Local, "s2": S2, "scca_fixed": SccaFixed, "scca_flow": SccaFlow, "longmixed": LongMixed}.get(key)
    if ctor is None:
        raise ConfigError(f"unknown pattern {name!r}; choose from {', '.join(PATTERN_NAMES)}")
    if w is None:
        raise ConfigError(f"pattern {key} needs a window w")
    return ctor(w)


def pattern_label(spec: PatternSpec) -> str:
    if isinstance(spec, Sda):
        return f"sda{spec.theta}"
    return spec.name


def pattern_param(spec: PatternSpec, n: int) -> int:
    """The window (or dilation) that characterises ``spec``; Full reports N."""
    if isinstance(spec, Full):
        return n
    if isinstance(spec, Sda):
        return spec.theta
    return spec.w


def _check_window(w: int, n: int, even: bool = False) -> None:
    if w < 1 or n % w:
        raise ConfigError(f"window w={w} must divide N={n}")
    if even and w % 2:
        raise ConfigError(f"window w={w} must be even (half-chunk shift g=w/2)")


def _fixed_plans(h: int, w: int, kind: str) -> list[HeadPlan]:
    shifted = (h + 1) // 2
    g = w // 2
    return [HeadPlan(kind, w, g) for _ in range(shifted)] + [HeadPlan("local", w) for _ in range(h - shifted)]


def longmixed_split(h: int) -> tuple[int, int, int]:
    """Head counts (sda2, sda4, scca_fixed-style), proportional to 1/4, 1/2, 1/4."""
    n2 = h // 4
    n4 = min(2 * int(h / 4 + 0.5), h - n2)
    return n2, n4, h - n2 - n4


def build_head_plans(spec: PatternSpec, cfg: AttnConfig) -> list[HeadPlan]:
    h, n = cfg.heads, cfg.seq_len
    if isinstance(spec, Full):
        plans = [HeadPlan("local", n) for _ in range(h)]
    elif isinstance(spec, Local):
        _check_window(spec.w, n)
        plans = [HeadPlan("local", spec.w) for _ in range(h)]
    elif isinstance(spec, SccaFixed):
        _check_window(spec.w, n, even=True)
        plans = _fixed_plans(h, spec.w, "shifted_chunk")
    elif isinstance(spec, S2):
        _check_window(spec.w, n, even=True)
        plans = _fixed_plans(h, spec.w, "shifted_window")
    elif isinstance(spec, SccaFlow):
        _check_window(spec.w, n)
        m = n // spec.w
        t = h // m
        # heads past t*m (the h mod m remainder) fall back to shift 0
        plans = [
            HeadPlan("shifted_chunk", spec.w, (i // t) * spec.w if i < t * m else 0)
            for i in range(h)
        ]
    elif isinstance(spec, Sda):
        if spec.theta < 1 or spec.theta > n:
            raise ConfigError(f"dilation theta={spec.theta} must lie in [1, N={n}]")
        plans = [HeadPlan("dilated", theta=spec.theta, offset=i % spec.theta + 1) for i in range(h)]
    elif isinstance(spec, LongMixed):
        if spec.plans is not None:
            if len(spec.plans) != h:
                raise ConfigError(f"LongMixed needs exactly one plan per head: {len(spec.plans)} plans for h={h}")
            plans = list(spec.plans)
        else:
            n2, n4, nf = longmixed_split(h)
            plans = [HeadPlan("dilated", theta=2, offset=i % 2 + 1) for i in range(n2)]
            plans += [HeadPlan("dilated", theta=4, offset=i % 4 + 1) for i in range(n4)]
            if nf:
                _check_window(spec.w, n, even=True)
                plans += _fixed_plans(nf, spec.w, "shifted_chunk")
    else:
        raise ConfigError(f"not a pattern spec: {spec!r}")
    for p in plans:
        p.validate(n)
    return plans


def head_plan_mask(plan: HeadPlan, n: int, causal: bool) -> np.ndarray:
    """Boolean [N, N] attendability of one head (rows are queries)."""
    q = np.arange(n)[:, None]
    k = np.arange(n)[None, :]
    if plan.kind == "dilated":
        r = plan.offset - 1
        m = (q % plan.theta == r) & (k % plan.theta == r)
    elif plan.kind == "shifted_window":
        w, g = plan.window, plan.shift
        m = ((q + g) % n) // w == ((k + g) % n) // w
    else:
        w = plan.window
        m = q // w == ((k + plan.shift) % n) // w
    if causal:
        m = m & (k <= q)
    return m


def plans_mask(plans: list[HeadPlan], n: int, causal: bool) -> np.ndarray:
    return np.stack([head_plan_mask(p, n, causal) for p in plans])


def build_mask(spec: PatternSpec, cfg: AttnConfig) -> np.ndarray:
    """Per-head boolean mask ``M[i, q, k]`` of shape [h, N, N]."""
    return plans_mask(build_head_plans(spec, cfg), cfg.seq_len, cfg.causal)


def write_mask_pgm(mask: np.ndarray, out_dir: str | Path, prefix: str = "head") -> list[Path]:
    """One plain (P2) PGM per head; attendable cells are 255, the rest 0."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(mask):
        rows = [" ".join("255" if v else "0" for v in row) for row in m]
        text = f"P2\n{m.shape[1]} {m.shape[0]}\n255\n" + "\n".join(rows) + "\n"
        path = out_dir / f"{prefix}{i:03d}.pgm"
        path.write_text(text)
        paths.append(path)
    return paths


def read_mask_pgm(path: str | Path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array([int(v) for v in tokens[4:]], dtype=np.int64)
    if maxval != 255 or vals.size != width * height or not np.isin(vals, (0, 255)).all():
        raise ValueError(f"{path}: malformed mask PGM")
    return vals.reshape(height, width) == 255


def write_mask_csv(mask: np.ndarray, path: str | Path) -> None:
    """Attendable cells as ``head,q,k`` triples."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["head", "q", "k"])
        for i, q, k in zip(*np.nonzero(mask)):
            writer.writerow([int(i), int(q), int(k)])


def read_mask_csv(path: str | Path, heads: int, n: int) -> np.ndarray:
    mask = np.zeros((heads, n, n), dtype=bool)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            mask[int(row["head"]), int(row["q"]), int(row["k"])] = True
    return mask
