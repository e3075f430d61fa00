"""Small pre-norm decoder-only language model with hand-written backward pass.

Block layout: RMSNorm -> multi-head attention (pattern per layer, RoPE on
Q/K at absolute positions before any shift or gather) -> residual ->
RMSNorm -> SiLU MLP -> residual.  Everything runs in numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..patterns import AttnConfig, Full, PatternSpec, build_head_plans
from ..tensor import ConfigError, PRECISIONS

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    layers: int = 2
    dim: int = 64
    heads: int = 4
    train_context: int = 32
    patterns: tuple[PatternSpec, ...] = (Full(),)
    rope_base: float = 10000.0
    pi_scale: float = 1.0
    mlp_mult: int = 4
    precision: str = "double"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"model dim {self.dim} must equal heads*head_dim (heads={self.heads})")
        if self.head_dim % 2:
            raise ConfigError(f"head dim {self.head_dim} must be even for rotary embeddings")
        if self.pi_scale < 1:
            raise ConfigError(f"pi_scale must be >= 1, got {self.pi_scale}")
        if len(self.patterns) not in (1, self.layers):
            raise ConfigError(f"need 1 or {self.layers} layer patterns, got {len(self.patterns)}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def layer_pattern(self, layer: int) -> PatternSpec:
        return self.patterns[0] if len(self.patterns) == 1 else self.patterns[layer]

    def check_length(self, n: int) -> None:
        for layer in range(self.layers):
            build_head_plans(self.layer_pattern(layer), AttnConfig(1, self.heads, n, self.head_dim, True))


def rope_angles(positions, head_dim: int, base: float = 10000.0, pi_scale: float = 1.0) -> np.ndarray:
    """Rotation angle of each (position, dimension pair): ``(p / pi_scale) * base**(-2k/D)``."""
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    pos = np.asarray(positions, dtype=np.float64) / pi_scale
    return pos[:, None] * inv_freq[None, :]


def rope_apply(x: np.ndarray, positions, base: float = 10000.0, pi_scale: float = 1.0, inverse: bool = False) -> np.ndarray:
    """Rotate interleaved dimension pairs ``(2k, 2k+1)`` of ``x`` [B,H,N,D].

    ``inverse=True`` applies the transposed rotation (used by backward).
    """
    d = x.shape[-1]
    if d % 2:
        raise ConfigError(f"rotary embeddings need an even head dim, got {d}")
    if len(positions) != x.shape[-2]:
        raise ConfigError(f"{len(positions)} positions for sequence length {x.shape[-2]}")
    ang = rope_angles(positions, d, base, pi_scale)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    if inverse:
        sin = -sin
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _rmsnorm(x, gain):
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPS)
    xhat = x * inv
    return xhat * gain, (xhat, inv)


def _rmsnorm_backward(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


@dataclass
class ToyLM:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ToyLM":
        rng = np.random.default_rng(seed)
        dtype = PRECISIONS[config.precision]
        d, v, ff = config.dim, config.vocab_size, config.mlp_mult * config.dim
        resid = 0.02 / math.sqrt(2 * config.layers)

        def normal(shape, std=0.02):
            return (rng.standard_normal(shape) * std).astype(dtype)

        p = {"tok_emb": normal((v, d))}
        for l in range(config.layers):
            p[f"l{l}.attn_norm"] = np.ones(d, dtype=dtype)
            for name in ("wq", "wk", "wv"):
                p[f"l{l}.{name}"] = normal((d, d))
            p[f"l{l}.wo"] = normal((d, d), resid)
            p[f"l{l}.mlp_norm"] = np.ones(d, dtype=dtype)
            p[f"l{l}.w1"] = normal((d, ff))
            p[f"l{l}.w2"] = normal((ff, d), resid)
        p["final_norm"] = np.ones(d, dtype=dtype)
        p["lm_head"] = normal((d, v))
        return cls(config, p)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.config.heads, self.config.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, n, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)

    def forward(self, tokens, keep_cache: bool = False):
        """Logits for ``tokens`` ([N] or [B, N]); returns ``(logits, cache)``."""
        cfg, p = self.config, self.params
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
        b, n = tokens.shape
        cfg.check_length(n)
        positions = np.arange(n)
        x = p["tok_emb"][tokens]
        caches = []
        for l in range(cfg.layers):
            plans = build_head_plans(cfg.layer_pattern(l), AttnConfig(b, cfg.heads, n, cfg.head_dim, True))
            a_in, norm1 = _rmsnorm(x, p[f"l{l}.attn_norm"])
            q = rope_apply(self._split(a_in @ p[f"l{l}.wq"]), positions, cfg.rope_base, cfg.pi_scale)
            k = rope_apply(self._split(a_in @ p[f"l{l}.wk"]), positions, cfg.rope_base, cfg.pi_scale)
            v = self._split(a_in @ p[f"l{l}.wv"])
            att = kernels.run_plans(q, k, v, plans, causal=True, save=keep_cache)
            o = self._merge(att.out)
            x = x + o @ p[f"l{l}.wo"]
            m_in, norm2 = _rmsnorm(x, p[f"l{l}.mlp_norm"])
            u = m_in @ p[f"l{l}.w1"]
            s = _sigmoid(u)
            act = u * s
            x = x + act @ p[f"l{l}.w2"]
            if keep_cache:
                caches.append(dict(a_in=a_in, norm1=norm1, q=q, k=k, v=v, att=att, plans=plans,
                                   o=o, m_in=m_in, norm2=norm2, u=u, s=s, act=act))
        h_out, normf = _rmsnorm(x, p["final_norm"])
        logits = h_out @ p["lm_head"]
        cache = dict(tokens=tokens, layers=caches, h_out=h_out, normf=normf, positions=positions) if keep_cache else None
        return (logits[0] if squeeze else logits), cache

    def loss(self, inputs, targets) -> float:
        logits, _ = self.forward(inputs)
        return cross_entropy(logits, targets)[0]

    def loss_and_grads(self, inputs, targets) -> tuple[float, dict[str, np.ndarray]]:
        """Mean next-token cross-entropy and its gradient for every parameter."""
        cfg, p = self.config, self.params
        inputs = np.atleast_2d(inputs)
        targets = np.atleast_2d(targets)
        logits, cache = self.forward(inputs, keep_cache=True)
        loss, dlogits = cross_entropy(logits, targets)
        g = {}
        g["lm_head"] = cache["h_out"].reshape(-1, cfg.dim).T @ dlogits.reshape(-1, cfg.vocab_size)
        dh = dlogits @ p["lm_head"].T
        dx, g["final_norm"] = _rmsnorm_backward(dh, p["final_norm"], cache["normf"])
        positions = cache["positions"]
        for l in reversed(range(cfg.layers)):
            c = cache["layers"][l]
            # MLP branch
            g[f"l{l}.w2"] = c["act"].reshape(-1, c["act"].shape[-1]).T @ dx.reshape(-1, cfg.dim)
            dact = dx @ p[f"l{l}.w2"].T
            s, u = c["s"], c["u"]
            du = dact * s * (1.0 + u * (1.0 - s))
            g[f"l{l}.w1"] = c["m_in"].reshape(-1, cfg.dim).T @ du.reshape(-1, du.shape[-1])
            dm_in = du @ p[f"l{l}.w1"].T
            dn, g[f"l{l}.mlp_norm"] = _rmsnorm_backward(dm_in, p[f"l{l}.mlp_norm"], c["norm2"])
            dx = dx + dn
            # attention branch
            g[f"l{l}.wo"] = c["o"].reshape(-1, cfg.dim).T @ dx.reshape(-1, cfg.dim)
            do = self._split(dx @ p[f"l{l}.wo"].T)
            grads = kernels.backward_plans(c["plans"], c["q"], c["k"], c["v"], do, c["att"].saved)
            dq = self._merge(rope_apply(grads.dq, positions, cfg.rope_base, cfg.pi_scale, inverse=True))
            dk = self._merge(rope_apply(grads.dk, positions, cfg.rope_base, cfg.pi_scale, inverse=True))
            dv = self._merge(grads.dv)
            a_in = c["a_in"].reshape(-1, cfg.dim)
            g[f"l{l}.wq"] = a_in.T @ dq.reshape(-1, cfg.dim)
            g[f"l{l}.wk"] = a_in.T @ dk.reshape(-1, cfg.dim)
            g[f"l{l}.wv"] = a_in.T @ dv.reshape(-1, cfg.dim)
            da = dq @ p[f"l{l}.wq"].T + dk @ p[f"l{l}.wk"].T + dv @ p[f"l{l}.wv"].T
            dn, g[f"l{l}.attn_norm"] = _rmsnorm_backward(da, p[f"l{l}.attn_norm"], c["norm1"])
            dx = dx + dn
        demb = np.zeros_like(p["tok_emb"])
        np.add.at(demb, cache["tokens"].reshape(-1), dx.reshape(-1, cfg.dim))
        g["tok_emb"] = demb
        return loss, g


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    targets = np.asarray(targets)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    count = picked.size
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    return float(-picked.sum() / count), grad / count


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -np.take_along_axis(logp, np.asarray(targets)[..., None], axis=-1)[..., 0]


def forward(model: ToyLM, tokens) -> np.ndarray:
    return model.forward(tokens)[0]
