"""Forward and backward passes for the sparse attention patterns.

Every pattern compiles to per-head plans (see :mod:`shiftattn.patterns`) and
runs on one of two paths:

* chunked: roll queries and/or keys-values along the sequence, split into
  ``N/w`` windows and attend inside each window.  Score buffers are
  ``[B, heads, N/w, w, w]``; no ``N x N`` matrix is built unless ``w = N``.
* dilated: gather the positions of one congruence class, attend densely
  among them, scatter the result back (other rows stay zero).

Causality always refers to original token positions, so keys that wrapped
around from the end of the sequence are future tokens and are masked.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .patterns import (
    AttnConfig,
    Full,
    HeadPlan,
    Local,
    LongMixed,
    PatternSpec,
    S2,
    SccaFixed,
    SccaFlow,
    Sda,
    build_head_plans,
)
from .tensor import (
    MASK_VALUE,
    ConfigError,
    NumericError,
    ShapeError,
    chunk_flatten,
    chunk_reshape,
    gather_seq,
    precision_of,
    roll_seq,
    scatter_seq,
    softmax_lastdim,
)

# Largest score buffer (elements) materialised at once; bigger groups are
# processed a few heads at a time.
MAX_SCORE_ELEMENTS = 1 << 24


class StateError(RuntimeError):
    """Saved activations do not belong to the requested backward call."""


@dataclass(frozen=True)
class KernelEvent:
    op: str  # "scores" or "weighted_sum"
    elements: int  # size of the buffer produced
    madds: int  # multiply-adds spent


_hooks: list[Callable[[KernelEvent], None]] = []


@contextlib.contextmanager
def instrument() -> Iterator[list[KernelEvent]]:
    """Collect a :class:`KernelEvent` for every matrix product the kernels run."""
    events: list[KernelEvent] = []
    _hooks.append(events.append)
    try:
        yield events
    finally:
        _hooks.remove(events.append)


def _emit(op: str, a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    if _hooks:
        ev = KernelEvent(op, int(out.size), int(out.size) * int(a.shape[-1]))
        for hook in _hooks:
            hook(ev)


@dataclass
class _Group:
    heads: np.ndarray
    plan: HeadPlan
    probs: list[np.ndarray]  # one per head slice
    slices: list[np.ndarray]


@dataclass
class Saved:
    plans: tuple[HeadPlan, ...]
    causal: bool
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    groups: list[_Group] = field(default_factory=list)


@dataclass
class AttnOutput:
    out: np.ndarray
    saved: Saved | None = None


@dataclass
class AttnGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray


def _check_inputs(q, k, v) -> None:
    if q.ndim != 4 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"Q, K, V must share a [B,H,N,D] shape, got {q.shape}, {k.shape}, {v.shape}")
    precision_of(q, k, v)
    for name, t in (("Q", q), ("K", k), ("V", v)):
        if np.isnan(t).any():
            raise NumericError(f"NaN in {name}")


def _group_plans(plans: Sequence[HeadPlan]) -> list[tuple[HeadPlan, np.ndarray]]:
    order: dict[HeadPlan, list[int]] = {}
    for i, p in enumerate(plans):
        order.setdefault(p, []).append(i)
    return [(p, np.array(ix)) for p, ix in order.items()]


def _shifts(plan: HeadPlan) -> tuple[int, int]:
    """(query shift, key/value shift) of a chunked plan."""
    if plan.kind == "shifted_window":
        return plan.shift, plan.shift
    if plan.kind == "shifted_chunk":
        return 0, plan.shift
    return 0, 0


def _positions(n: int, shift: int) -> np.ndarray:
    return (np.arange(n) - shift) % n


def _chunk_allowed(plan: HeadPlan, n: int, causal: bool) -> np.ndarray | None:
    if not causal:
        return None
    qs, ks = _shifts(plan)
    w = plan.window
    pq = _positions(n, qs).reshape(n // w, w)
    pk = _positions(n, ks).reshape(n // w, w)
    return pk[:, None, :] <= pq[:, :, None]


def _dilated_index(plan: HeadPlan, n: int) -> np.ndarray:
    return np.arange(plan.offset - 1, n, plan.theta)


def _head_slices(heads: np.ndarray, per_head: int, batch: int) -> list[np.ndarray]:
    step = max(1, MAX_SCORE_ELEMENTS // max(1, per_head * batch))
    return [heads[i:i + step] for i in range(0, len(heads), step)]


def _attend(qc, kc, vc, allowed, scale):
    scores = np.matmul(qc, np.swapaxes(kc, -1, -2))
    _emit("scores", qc, kc, scores)
    scores *= scale
    if allowed is not None:
        scores = np.where(allowed, scores, MASK_VALUE)
    probs = softmax_lastdim(scores)
    out = np.matmul(probs, vc)
    _emit("weighted_sum", probs, vc, out)
    return out, probs


def _forward_group(q, k, v, plan, heads, causal, scale):
    n = q.shape[2]
    qg, kg, vg = q[:, heads], k[:, heads], v[:, heads]
    if plan.kind == "dilated":
        idx = _dilated_index(plan, n)
        allowed = np.tril(np.ones((len(idx), len(idx)), dtype=bool)) if causal else None
        o, p = _attend(gather_seq(qg, idx), gather_seq(kg, idx), gather_seq(vg, idx), allowed, scale)
        return scatter_seq(o, idx, n), p
    qs, ks = _shifts(plan)
    w = plan.window
    qc = chunk_reshape(roll_seq(qg, qs) if qs else qg, w)
    kc = chunk_reshape(roll_seq(kg, ks) if ks else kg, w)
    vc = chunk_reshape(roll_seq(vg, ks) if ks else vg, w)
    o, p = _attend(qc, kc, vc, _chunk_allowed(plan, n, causal), scale)
    o = chunk_flatten(o)
    if qs:
        o = roll_seq(o, n - qs)
    return o, p


def run_plans(q, k, v, plans: Sequence[HeadPlan], causal: bool = False, save: bool = True) -> AttnOutput:
    """Run every head according to its plan; the common engine behind all patterns."""
    _check_inputs(q, k, v)
    b, h, n, d = q.shape
    if len(plans) != h:
        raise ConfigError(f"{len(plans)} head plans for {h} heads")
    for p in plans:
        p.validate(n)
    scale = q.dtype.type(1.0 / math.sqrt(d))
    out = np.zeros_like(q)
    saved = Saved(tuple(plans), causal, q, k, v) if save else None
    for plan, heads in _group_plans(plans):
        if plan.kind == "dilated":
            per_head = len(_dilated_index(plan, n)) ** 2
        else:
            per_head = n * plan.window
        group = _Group(heads, plan, [], [])
        for sl in _head_slices(heads, per_head, b):
            o, p = _forward_group(q, k, v, plan, sl, causal, scale)
            out[:, sl] = o
            if save:
                group.probs.append(p)
                group.slices.append(sl)
        if save:
            saved.groups.append(group)
    return AttnOutput(out, saved)


def _backward_attend(qc, kc, vc, probs, doc, scale):
    dv = np.matmul(np.swapaxes(probs, -1, -2), doc)
    dp = np.matmul(doc, np.swapaxes(vc, -1, -2))
    ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
    ds *= scale
    dq = np.matmul(ds, kc)
    dk = np.matmul(np.swapaxes(ds, -1, -2), qc)
    return dq, dk, dv


def _backward_group(q, k, v, dout, plan, heads, probs, scale):
    n = q.shape[2]
    qg, kg, vg, dg = q[:, heads], k[:, heads], v[:, heads], dout[:, heads]
    if plan.kind == "dilated":
        idx = _dilated_index(plan, n)
        grads = _backward_attend(
            gather_seq(qg, idx), gather_seq(kg, idx), gather_seq(vg, idx), probs, gather_seq(dg, idx), scale
        )
        return tuple(scatter_seq(g, idx, n) for g in grads)
    qs, ks = _shifts(plan)
    w = plan.window
    roll = lambda t, s: roll_seq(t, s) if s else t  # noqa: E731
    unroll = lambda t, s: roll_seq(t, n - s) if s else t  # noqa: E731
    dq, dk, dv = _backward_attend(
        chunk_reshape(roll(qg, qs), w),
        chunk_reshape(roll(kg, ks), w),
        chunk_reshape(roll(vg, ks), w),
        probs,
        chunk_reshape(roll(dg, qs), w),
        scale,
    )
    return unroll(chunk_flatten(dq), qs), unroll(chunk_flatten(dk), ks), unroll(chunk_flatten(dv), ks)


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a is b or (a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b))


def backward_plans(plans: Sequence[HeadPlan], q, k, v, dout, saved: Saved | None) -> AttnGrads:
    if saved is None:
        raise StateError("backward needs the saved activations of a forward call run with save=True")
    if tuple(plans) != saved.plans:
        raise StateError("saved activations were produced by a different pattern")
    if not (_same(q, saved.q) and _same(k, saved.k) and _same(v, saved.v)):
        raise StateError("saved activations were produced from different Q, K, V")
    if dout.shape != q.shape or dout.dtype != q.dtype:
        raise ShapeError(f"dOut shape/dtype {dout.shape}/{dout.dtype} does not match Q {q.shape}/{q.dtype}")
    scale = q.dtype.type(1.0 / math.sqrt(q.shape[3]))
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    for group in saved.groups:
        for sl, probs in zip(group.slices, group.probs):
            gq, gk, gv = _backward_group(q, k, v, dout, group.plan, sl, probs, scale)
            dq[:, sl] = gq
            dk[:, sl] = gk
            dv[:, sl] = gv
    return AttnGrads(dq, dk, dv)


def _cfg(q, causal) -> AttnConfig:
    b, h, n, d = q.shape
    return AttnConfig(b, h, n, d, causal)


def attention(spec: PatternSpec, q, k, v, causal: bool = False, save: bool = True) -> AttnOutput:
    """Dispatch ``spec`` to the matching kernel path."""
    _check_inputs(q, k, v)
    return run_plans(q, k, v, build_head_plans(spec, _cfg(q, causal)), causal, save)


def full_attention(q, k, v, causal: bool = False, save: bool = True) -> AttnOutput:
    return attention(Full(), q, k, v, causal, save)


def chunked_attention(q, k, v, w: int, causal: bool = False, save: bool = True) -> AttnOutput:
    return attention(Local(w), q, k, v, causal, save)


def scca_fixed(q, k, v, w: int, causal: bool = False, save: bool = True) -> AttnOutput:
    return attention(SccaFixed(w), q, k, v, causal, save)


def scca_flow(q, k, v, w: int, causal: bool = False, save: bool = True) -> AttnOutput:
    return attention(SccaFlow(w), q, k, v, causal, save)


def s2_baseline(q, k, v, w: int, causal: bool = False, save: bool = True) -> AttnOutput:
    return attention(S2(w), q, k, v, causal, save)


def sda(q, k, v, theta: int, causal: bool = False, save: bool = True) -> AttnOutput:
    return attention(Sda(theta), q, k, v, causal, save)


def mixed_attention(q, k, v, plans: Sequence[HeadPlan], causal: bool = False, save: bool = True) -> AttnOutput:
    return run_plans(q, k, v, list(plans), causal, save)


def backward(pattern, q, k, v, dout, saved: Saved | None) -> AttnGrads:
    """Gradients of ``sum(dout * out)`` w.r.t. Q, K, V.

    ``pattern`` is either a pattern spec or the list of head plans given to
    :func:`mixed_attention`.
    """
    if isinstance(pattern, (Full, Local, S2, SccaFixed, SccaFlow, Sda, LongMixed)):
        causal = saved.causal if saved is not None else False
        plans = build_head_plans(pattern, _cfg(q, causal))
    else:
        plans = list(pattern)
    return backward_plans(plans, q, k, v, dout, saved)
