"""Gated history fusion, context assembly, and the chunk velocity head."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import ConfigError, CrossAttentionBlock, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Tensor

RAW_MODES = ("last", "uniform16")


class DomainError(ValueError):
    """Flow time outside [0, 1]."""


class GatedFusion(Module):
    """F' = F + sigmoid(alpha) * MHA(Q=LN(F), K=U~, V=U~)."""

    def __init__(self, d: int, heads: int, gen: np.random.Generator, alpha_init: float = -4.0):
        self.alpha = T.parameter(np.array(alpha_init))
        self.ln_q = LayerNorm(d)
        self.mha = MultiHeadAttention(d, heads, gen)

    def gate(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.alpha.data)))

    def __call__(self, F: Tensor, U_tilde: Tensor) -> Tensor:
        update = self.mha(self.ln_q(F), U_tilde)
        return F + T.sigmoid(self.alpha) * update


def assemble_context(F_prime: Tensor, e: Tensor | None) -> Tensor:
    """C = [F'; e_tok]; with ``e`` None the context is F' alone."""
    if e is None:
        return F_prime
    if e.shape[-1] != F_prime.shape[-1]:
        raise ConfigError("evidence token width differs from context width")
    B, d = e.shape
    return T.concat([F_prime, T.reshape(e, (B, 1, d))], axis=1)


def raw_history_indices(K: int, k_prime: int, mode: str) -> np.ndarray:
    """Window slots (0 = oldest) used by the raw-history baselines.

    ``last`` takes the newest ``k_prime`` frames; ``uniform16`` spaces
    ``k_prime`` slots evenly over the newest 16 with both ends included.
    """
    if mode not in RAW_MODES:
        raise ConfigError(f"unknown raw-history mode {mode!r}")
    if k_prime > K:
        raise ConfigError(f"K'={k_prime} exceeds the history window K={K}")
    if k_prime <= 0:
        return np.zeros(0, dtype=np.int64)
    if mode == "last":
        return np.arange(K - k_prime, K)
    span = min(16, K)
    lo = K - span
    return lo + np.round(np.linspace(0, span - 1, k_prime)).astype(np.int64)


def timestep_features(s: np.ndarray, dim: int = 32) -> np.ndarray:
    """Sinusoidal features of flow time ``s`` [B] -> [B, dim]."""
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = np.asarray(s, dtype=np.float64)[:, None] * 1000.0 * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class VelocityHead(Module):
    """Predicts the flow velocity of a noisy chunk given the context tokens."""

    def __init__(self, d_a: int, H: int, d: int, heads: int, blocks: int, mlp_hidden: int,
                 gen: np.random.Generator, time_dim: int = 32):
        self.H, self.d_a, self.d, self.time_dim = H, d_a, d, time_dim
        self.action_in = Linear(d_a, d, gen)
        self.pos = T.parameter(gen.standard_normal((H, d)) * 0.02)
        self.time_fc1 = Linear(time_dim, d, gen)
        self.time_fc2 = Linear(d, d, gen)
        self.blocks = [CrossAttentionBlock(d, heads, mlp_hidden, gen) for _ in range(blocks)]
        self.ln_out = LayerNorm(d)
        self.out = Linear(d, d_a, gen, zero=True)

    def __call__(self, X: Tensor, s, C: Tensor) -> Tensor:
        X = T.as_tensor(X)
        B = X.shape[0]
        s = np.broadcast_to(np.asarray(s, dtype=np.float64), (B,))
        if (s < 0).any() or (s > 1).any():
            raise DomainError("flow time must lie in [0, 1]")
        temb = self.time_fc2(T.silu(self.time_fc1(Tensor(timestep_features(s, self.time_dim)))))
        x = self.action_in(X) + self.pos + T.reshape(temb, (B, 1, self.d))
        for blk in self.blocks:
            x = blk(x, C)
        return self.out(self.ln_out(x))
