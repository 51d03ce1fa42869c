"""Current-context encoder, frozen history encoder, and the history projections."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ConfigError, LayerNorm, Linear, Module, SelfAttentionBlock, multi_head_attention
from .tensor import Tensor

TOKENS_PER_FRAME = 5        # one camera token + four register tokens
INDEX_FEATURES = 8


def frame_index_features(n: int, start: int = 0) -> np.ndarray:
    """Sinusoidal features of frame slots ``start .. start+n-1`` (shape n x 8)."""
    pos = np.arange(start, start + n, dtype=np.float64)[:, None]
    freqs = 1.0 / (4.0 ** np.arange(INDEX_FEATURES // 2))
    ang = pos * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class CurrentEncoder(Module):
    """Tokenizes an observation into one token per field group, appends an
    instruction token, and runs pre-norm self-attention blocks.

    ``groups`` is the observation layout ``[(name, start, stop), ...]``.
    """

    def __init__(self, groups, d: int, heads: int, blocks: int, mlp_hidden: int,
                 n_instructions: int, gen: np.random.Generator, n_extra_frames: int = 0):
        if len(groups) < 1:
            raise ConfigError("observation needs at least one field group")
        self.groups = [(n, int(a), int(b)) for n, a, b in groups]
        self.obs_dim = self.groups[-1][2]
        self.d = d
        self.embed = [Linear(b - a, d, gen) for _, a, b in self.groups]
        self.token_pos = T.parameter(gen.standard_normal((len(self.groups) + 1, d)) * 0.02)
        self.instruction = T.parameter(gen.standard_normal((n_instructions, d)) * 0.02)
        self.frame_slot = (T.parameter(gen.standard_normal((n_extra_frames, d)) * 0.02)
                           if n_extra_frames else None)
        self.blocks = [SelfAttentionBlock(d, heads, mlp_hidden, gen) for _ in range(blocks)]

    @property
    def n_tokens(self) -> int:
        return len(self.groups) + 1

    def tokenize(self, obs: Tensor) -> Tensor:
        """``obs`` [..., obs_dim] -> [..., groups, d] with group position embeddings."""
        if obs.shape[-1] != self.obs_dim:
            raise ConfigError(f"observation width {obs.shape[-1]} != expected {self.obs_dim}")
        toks = [T.reshape(lin(obs[..., a:b]), (*obs.shape[:-1], 1, self.d))
                for lin, (_, a, b) in zip(self.embed, self.groups)]
        return T.concat(toks, axis=-2) + self.token_pos[:len(self.groups)]

    def __call__(self, obs: Tensor, instruction: np.ndarray, extra: Tensor | None = None) -> Tensor:
        """F_t for a batch: ``obs`` [B, obs_dim], ``instruction`` [B] ints."""
        obs = T.as_tensor(obs)
        B = obs.shape[0]
        instr = self.instruction[np.asarray(instruction, dtype=np.int64)] + self.token_pos[len(self.groups)]
        parts = [self.tokenize(obs), T.reshape(instr, (B, 1, self.d))]
        if extra is not None:
            parts.append(extra)
        x = T.concat(parts, axis=1)
        for blk in self.blocks:
            x = blk(x)
        return x

    def frame_tokens(self, frames: Tensor) -> Tensor:
        """Raw-history tokens: ``frames`` [B, K', obs_dim] -> [B, K' * groups, d]."""
        B, k, _ = frames.shape
        toks = self.tokenize(frames)                     # [B, K', G, d]
        toks = toks + T.reshape(self.frame_slot[:k], (k, 1, self.d))
        return T.reshape(toks, (B, k * len(self.groups), self.d))


class HistoryEncoder(Module):
    """Frozen random featurizer producing five tokens per history frame.

    Token 0 (camera) reads the effector-pose fields, tokens 1-4 (registers)
    read the whole frame plus frame-slot features. One frozen self-attention
    layer then mixes tokens across frames. Weights are drawn once from
    N(0, 1/fan_in) and excluded from training.
    """

    frozen = True

    def __init__(self, obs_dim: int, pose: slice, K: int, d_h: int, heads: int,
                 gen: np.random.Generator):
        self.K, self.d_h, self.heads = K, d_h, heads
        self.pose = (pose.start, pose.stop)
        pd = pose.stop - pose.start
        rd = obs_dim + INDEX_FEATURES
        self.w_cam = Tensor(gen.standard_normal((pd, d_h)) / np.sqrt(pd))
        self.w_reg = Tensor(gen.standard_normal((TOKENS_PER_FRAME - 1, rd, d_h)) / np.sqrt(rd))
        self.w_q = Tensor(gen.standard_normal((d_h, d_h)) / np.sqrt(d_h))
        self.w_k = Tensor(gen.standard_normal((d_h, d_h)) / np.sqrt(d_h))
        self.w_v = Tensor(gen.standard_normal((d_h, d_h)) / np.sqrt(d_h))
        self.w_o = Tensor(gen.standard_normal((d_h, d_h)) / np.sqrt(d_h))

    def frame_tokens(self, frames: np.ndarray, start: int = 0) -> np.ndarray:
        """[..., n, obs_dim] -> [..., n, 5, d_h] before cross-frame mixing."""
        frames = np.asarray(frames, dtype=np.float64)
        n = frames.shape[-2]
        cam = np.tanh(frames[..., self.pose[0]:self.pose[1]] @ self.w_cam.data)
        idx = np.broadcast_to(frame_index_features(n, start), (*frames.shape[:-1], INDEX_FEATURES))
        inp = np.concatenate([frames, idx], axis=-1)
        reg = np.tanh(np.einsum("...i,rid->...rd", inp, self.w_reg.data))
        return np.concatenate([cam[..., None, :], reg], axis=-2)

    def __call__(self, history) -> tuple[Tensor, Tensor]:
        """``history`` [B, K, obs_dim] -> (U [B, 5K, d_h], pooled [B, d_h])."""
        h = np.asarray(history, dtype=np.float64)
        if h.shape[-2] != self.K:
            raise ConfigError(f"history has {h.shape[-2]} frames, encoder expects {self.K}")
        B = h.shape[0]
        x = self.frame_tokens(h).reshape(B, self.K * TOKENS_PER_FRAME, self.d_h)
        xn = Tensor(_plain_ln(x))
        mixed = multi_head_attention(T.matmul(xn, self.w_q), T.matmul(xn, self.w_k),
                                     T.matmul(xn, self.w_v), self.heads)
        u = x + T.matmul(mixed, self.w_o).data
        return Tensor(u), Tensor(u.mean(axis=1))

    def embed_frames(self, frames: np.ndarray) -> np.ndarray:
        """Per-frame pooled token (mean of its five tokens), frame slot K-1."""
        frames = np.asarray(frames, dtype=np.float64)
        tok = self.frame_tokens(frames[..., None, :], start=self.K - 1)[..., 0, :, :]
        return tok.mean(axis=-2)


def _plain_ln(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)


@dataclass
class ProjectedEvidence:
    tokens: Tensor      # LN(U W_h), [B, M, d]
    summary: Tensor     # pooled W_e, [B, d]


class HistoryProjection(Module):
    """Learned W_h (row-wise, then LayerNorm) and W_e (on the pooled token)."""

    def __init__(self, d_h: int, d: int, gen: np.random.Generator, with_summary: bool = True):
        self.w_h = Linear(d_h, d, gen, bias=False)
        self.ln = LayerNorm(d)
        self.w_e = Linear(d_h, d, gen, bias=False) if with_summary else None

    def __call__(self, U: Tensor, pooled: Tensor) -> ProjectedEvidence:
        tokens = self.ln(self.w_h(U))
        summary = self.w_e(pooled) if self.w_e is not None else None
        return ProjectedEvidence(tokens, summary)
