"""Deterministic training loop and sliding-window perplexity."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ToyLM, token_nll


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamW:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup: int = 20

    def lr_at(self, step: int) -> float:
        """Linear warmup over ``warmup`` steps, then constant."""
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        return self.lr


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    seed: int
    losses: list[float] = field(default_factory=list)


def _decays(name: str) -> bool:
    return not name.endswith("norm")


def adamw_step(model: ToyLM, state: TrainState, grads: dict[str, np.ndarray], opt: AdamW) -> None:
    b1, b2 = opt.betas
    t = state.step + 1
    lr = opt.lr_at(state.step)
    for name, g in grads.items():
        p = model.params[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        if opt.weight_decay and _decays(name):
            p -= lr * opt.weight_decay * p
        p -= lr * mhat / (np.sqrt(vhat) + opt.eps)
    state.step = t


def sample_batch(corpus: np.ndarray, context: int, batch: int, rng: np.random.Generator, align: int = 1):
    """Random windows of ``context`` inputs plus their shifted targets; starts are multiples of ``align``."""
    last = len(corpus) - context - 1
    if last < 0:
        raise ValueError(f"corpus of {len(corpus)} tokens is shorter than context {context} + 1")
    starts = rng.integers(0, last // align + 1, size=batch) * align
    x = np.stack([corpus[s:s + context] for s in starts])
    y = np.stack([corpus[s + 1:s + context + 1] for s in starts])
    return x, y


def train(
    model: ToyLM,
    corpus,
    steps: int,
    opt: AdamW | None = None,
    batch: int = 8,
    seed: int = 0,
    context: int | None = None,
    align: int = 1,
    log=None,
) -> TrainState:
    """Train ``model`` in place; ``state.losses`` holds the per-step loss curve.

    With ``steps=0`` the curve holds the single initial loss.
    """
    opt = opt or AdamW()
    corpus = np.asarray(corpus, dtype=np.int64)
    context = context or model.config.train_context
    if len(corpus) < context + 1:
        raise ValueError(f"corpus of {len(corpus)} tokens is shorter than context {context} + 1")
    rng = np.random.default_rng(seed)
    state = TrainState(
        model.params,
        {k: np.zeros_like(v) for k, v in model.params.items()},
        {k: np.zeros_like(v) for k, v in model.params.items()},
        0,
        seed,
    )
    if steps == 0:
        x, y = sample_batch(corpus, context, batch, rng, align)
        state.losses.append(model.loss(x, y))
        return state
    for step in range(steps):
        x, y = sample_batch(corpus, context, batch, rng, align)
        loss, grads = model.loss_and_grads(x, y)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {step}")
        state.losses.append(loss)
        adamw_step(model, state, grads, opt)
        if log is not None:
            log(step, loss)
    return state


@dataclass
class PplReport:
    context: int
    stride: int
    tokens: int
    nll_sum: float

    @property
    def perplexity(self) -> float:
        return math.exp(self.nll_sum / self.tokens)


def window_plan(total: int, context: int, stride: int) -> list[tuple[int, int]]:
    """``(start, scored)`` for each window over ``total`` tokens.

    Window k feeds ``tokens[start:start+context]`` and predicts the next token
    at each position.  The first window scores all ``context`` predictions,
    later ones their final ``stride``; a last window aligned to the end picks
    up any remaining predictions so every token after the first is scored once.
    """
    if not 1 <= stride <= context:
        raise ValueError(f"stride must lie in [1, context={context}], got {stride}")
    if total <= context:
        raise ValueError(f"need more than context={context} tokens, got {total}")
    predictions = total - 1
    plan = [(0, context)]
    covered = context
    start = stride
    while start + context <= predictions:
        plan.append((start, stride))
        covered = start + context
        start += stride
    if covered < predictions:
        plan.append((predictions - context, predictions - covered))
    return plan


def eval_perplexity(model: ToyLM, tokens, context: int, stride: int) -> PplReport:
    tokens = np.asarray(tokens, dtype=np.int64)
    total_nll = 0.0
    scored = 0
    for start, count in window_plan(len(tokens), context, stride):
        x = tokens[start:start + context]
        y = tokens[start + 1:start + context + 1]
        logits, _ = model.forward(x)
        nll = token_nll(logits, y)
        total_nll += float(nll[-count:].sum())
        scored += count
    return PplReport(context, stride, scored, total_nll)
