"""Reference oracle, receptive-field analysis, FLOP model and benchmarks."""
from __future__ import annotations

import csv
import io
import math
import time
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import kernels
from .patterns import (
    AttnConfig,
    Full,
    HeadPlan,
    PatternSpec,
    build_head_plans,
    build_mask,
    pattern_label,
    pattern_param,
)
from .tensor import MASK_VALUE, PRECISIONS, ShapeError


def masked_full_oracle(q, k, v, mask: np.ndarray) -> np.ndarray:
    """Dense attention where ``mask[i, q, k]`` (causality already folded in) selects the logits kept.

    Rows with no attendable key are zero.
    """
    b, h, n, d = q.shape
    if mask.shape != (h, n, n):
        raise ShapeError(f"mask shape {mask.shape} does not match [h={h}, N={n}, N={n}]")
    scores = np.einsum("bhqd,bhkd->bhqk", q, k) / math.sqrt(d)
    scores = np.where(mask[None], scores, MASK_VALUE)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.where(mask[None], np.exp(scores), 0.0)
    total = weights.sum(axis=-1, keepdims=True)
    weights = weights / np.where(total > 0, total, 1.0)
    return np.einsum("bhqk,bhkd->bhqd", weights, v)


@dataclass
class ReachabilityReport:
    """Coverage of the head-union attendability graph.

    Self-loops are added so a token's own state survives each layer (residual
    path), and heads are OR-ed together (output projection mixes heads).
    """

    n: int
    coverage: list[float]
    min_reach: list[int]
    max_reach: list[int]
    layers_to_full: int | None

    header = "head-union reachability with residual self-loops"


def union_graph(mask: np.ndarray) -> np.ndarray:
    """Boolean [N, N] adjacency: ``U[q, k]`` when some head lets q read k, plus self-loops."""
    u = mask.any(axis=0)
    return u | np.eye(u.shape[0], dtype=bool)


def _bool_step(reach: np.ndarray, u: np.ndarray) -> np.ndarray:
    return (reach.astype(np.int64) @ u.astype(np.int64)) > 0


def reachability(mask: np.ndarray, layers: int) -> ReachabilityReport:
    if layers < 1:
        raise ValueError(f"layers must be >= 1, got {layers}")
    u = union_graph(mask)
    n = u.shape[0]
    reach = u
    coverage, lo, hi = [], [], []
    full_at = None
    layer = 1
    while True:
        sizes = reach.sum(axis=1)
        if layer <= layers:
            coverage.append(float(sizes.mean() / n))
            lo.append(int(sizes.min()))
            hi.append(int(sizes.max()))
        if full_at is None and sizes.min() == n:
            full_at = layer
        if layer >= layers and full_at is not None:
            break
        nxt = _bool_step(reach, u)
        # past a fixpoint nothing changes, so full coverage is never reached
        if layer >= layers and np.array_equal(nxt, reach):
            break
        reach = nxt
        layer += 1
    return ReachabilityReport(n, coverage, lo, hi, full_at)


@dataclass
class FlopEstimate:
    score_flops: int
    weighted_sum_flops: int
    total: int
    ratio_to_full: float


def _plan_score_madds(plan: HeadPlan, n: int, d: int) -> int:
    if plan.kind == "dilated":
        selected = len(range(plan.offset - 1, n, plan.theta))
        return selected * selected * d
    m = n // plan.window
    return m * plan.window * plan.window * d


def flop_estimate(spec: PatternSpec, cfg: AttnConfig) -> FlopEstimate:
    """Closed-form multiply-add counts of one attention layer."""
    n, d = cfg.seq_len, cfg.head_dim
    plans = build_head_plans(spec, cfg)
    scores = cfg.batch * sum(_plan_score_madds(p, n, d) for p in plans)
    full = cfg.batch * cfg.heads * n * n * d
    return FlopEstimate(scores, scores, 2 * scores, (2 * scores) / (2 * full))


def counted_flops(spec: PatternSpec, cfg: AttnConfig, seed: int = 0) -> FlopEstimate:
    """Multiply-adds observed by instrumenting an actual kernel run."""
    q, k, v = make_inputs(cfg, seed)
    with kernels.instrument() as events:
        kernels.attention(spec, q, k, v, cfg.causal, save=False)
    with kernels.instrument() as full_events:
        kernels.attention(Full(), q, k, v, cfg.causal, save=False)
    scores = sum(e.madds for e in events if e.op == "scores")
    wsum = sum(e.madds for e in events if e.op == "weighted_sum")
    full = sum(e.madds for e in full_events)
    return FlopEstimate(scores, wsum, scores + wsum, (scores + wsum) / full)


def make_inputs(cfg: AttnConfig, seed: int, precision: str = "double") -> tuple[np.ndarray, ...]:
    rng = np.random.default_rng(seed)
    dtype = PRECISIONS[precision]
    return tuple(rng.standard_normal(cfg.shape).astype(dtype) for _ in range(3))


@dataclass
class BenchRow:
    pattern: str
    n: int
    w_or_theta: int
    h: int
    d: int
    precision: str
    reps: int
    mean_ns: float
    std_ns: float
    flops: int
    ratio_to_full: float
    warning: str = ""


def bench(
    spec: PatternSpec,
    cfg: AttnConfig,
    repetitions: int = 10,
    warmup: int = 1,
    precision: str = "single",
    seed: int = 0,
) -> list[BenchRow]:
    """Time the forward kernel of ``spec``; warmup runs are discarded."""
    if repetitions < 5:
        raise ValueError(f"repetitions must be >= 5, got {repetitions}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    q, k, v = make_inputs(cfg, seed, precision)
    for _ in range(warmup):
        kernels.attention(spec, q, k, v, cfg.causal, save=False)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        kernels.attention(spec, q, k, v, cfg.causal, save=False)
        times.append(time.perf_counter_ns() - t0)
    times = np.array(times, dtype=np.float64)
    est = flop_estimate(spec, cfg)
    note = ""
    resolution_ns = time.get_clock_info("perf_counter").resolution * 1e9
    if times.min() < 1000 * resolution_ns:
        note = f"timer resolution {resolution_ns:g} ns is coarse for a {times.min():g} ns run"
        warnings.warn(note)
    row = BenchRow(
        pattern_label(spec),
        cfg.seq_len,
        pattern_param(spec, cfg.seq_len),
        cfg.heads,
        cfg.head_dim,
        precision,
        repetitions,
        float(times.mean()),
        float(times.std()),
        est.total,
        est.ratio_to_full,
        note,
    )
    return [row]


BENCH_COLUMNS = ["pattern", "N", "w_or_theta", "h", "D", "precision", "reps", "mean_ns", "std_ns", "flops", "ratio_to_full"]
REACH_COLUMNS = ["pattern", "N", "w_or_theta", "h", "layer", "coverage", "min_reach", "max_reach"]


def bench_csv(rows: Iterable[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS)
    for r in rows:
        writer.writerow([r.pattern, r.n, r.w_or_theta, r.h, r.d, r.precision, r.reps,
                         repr(r.mean_ns), repr(r.std_ns), r.flops, repr(r.ratio_to_full)])
    return buf.getvalue()


def reach_csv(spec: PatternSpec, cfg: AttnConfig, report: ReachabilityReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REACH_COLUMNS)
    param = pattern_param(spec, cfg.seq_len)
    for layer, (c, lo, hi) in enumerate(zip(report.coverage, report.min_reach, report.max_reach), start=1):
        writer.writerow([pattern_label(spec), cfg.seq_len, param, cfg.heads, layer, repr(c), lo, hi])
    return buf.getvalue()


def oracle_error(spec: PatternSpec, cfg: AttnConfig, seed: int = 0) -> float:
    """Max-abs difference between the kernel and the masked dense oracle (double precision)."""
    q, k, v = make_inputs(cfg, seed)
    got = kernels.attention(spec, q, k, v, cfg.causal, save=False).out
    want = masked_full_oracle(q, k, v, build_mask(spec, cfg))
    return float(np.max(np.abs(got - want)))
