"""The chunk policy and its ablation / baseline variants.

Variants:

``intent``       frozen K-frame history, gated fusion, appended evidence token
``frame_only``   current observation and instruction only; no history parameters
``fusion_only``  gated fusion but no appended evidence token
``vggt_current`` the intent pipeline fed a one-frame window (the current frame)
``raw_last``     the newest K' raw frames appended as extra encoder tokens
``raw_uniform``  K' raw frames evenly spaced over the newest 16
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import env as E
from .encoders import CurrentEncoder, HistoryEncoder, HistoryProjection
from .fusion import GatedFusion, VelocityHead, assemble_context, raw_history_indices
from .nn import ConfigError, Module
from .rng import RngState, as_rng
from .tensor import Tensor

VARIANTS = ("intent", "frame_only", "fusion_only", "vggt_current", "raw_last", "raw_uniform")


@dataclass
class PolicyConfig:
    variant: str
    groups: list                    # observation layout [(name, start, stop), ...]
    pose: tuple[int, int]
    d_a: int
    action_scale: list[float]
    K: int = 16
    H: int = 8
    d: int = 64
    d_h: int = 64
    heads: int = 4
    enc_blocks: int = 2
    head_blocks: int = 2
    mlp_ratio: int = 2
    time_dim: int = 32
    n_instructions: int = 8
    raw_k: int = 4
    alpha_init: float = -4.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.d % self.heads or self.d_h % self.heads:
            raise ConfigError("model widths must be divisible by the head count")
        if self.K < 1 or self.H < 1:
            raise ConfigError("K and H must be positive")
        if self.variant.startswith("raw_") and self.raw_k > self.K:
            raise ConfigError(f"raw_k={self.raw_k} exceeds K={self.K}")
        self.groups = [tuple(g) for g in self.groups]
        self.pose = tuple(self.pose)

    @property
    def obs_dim(self) -> int:
        return self.groups[-1][2]

    @property
    def uses_history_encoder(self) -> bool:
        return self.variant in ("intent", "fusion_only", "vggt_current")

    @property
    def history_frames(self) -> int:
        return 1 if self.variant == "vggt_current" else self.K

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [list(g) for g in self.groups]
        d["pose"] = list(self.pose)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)

    @classmethod
    def for_task(cls, spec: E.TaskSpec, variant: str = "intent", **kw) -> "PolicyConfig":
        ps = E.pose_slice(spec)
        scale = [spec.a_max, spec.a_max, 1.0] * spec.n_effectors
        return cls(variant, E.observation_layout(spec), (ps.start, ps.stop),
                   spec.action_dim, scale, **kw)


class ChunkPolicy(Module):
    """Maps (o_t, instruction, history window) to a context C_t and a velocity field."""

    def __init__(self, config: PolicyConfig, seed=0):
        c = self.config = config
        root = as_rng(seed)
        mlp = c.mlp_ratio * c.d
        k_raw = c.raw_k if c.variant.startswith("raw_") else 0
        # every submodule draws from its own stream, so shared parts initialize
        # identically across variants built from the same seed
        self.current = CurrentEncoder(c.groups, c.d, c.heads, c.enc_blocks, mlp, c.n_instructions,
                                      root.child("current").generator(), n_extra_frames=k_raw)
        self.head = VelocityHead(c.d_a, c.H, c.d, c.heads, c.head_blocks, mlp,
                                 root.child("head").generator(), c.time_dim)
        self.history = self.projection = self.fusion = None
        if c.uses_history_encoder:
            self.history = HistoryEncoder(c.obs_dim, slice(*c.pose), c.history_frames, c.d_h,
                                          c.heads, root.child("history").generator())
            self.projection = HistoryProjection(c.d_h, c.d, root.child("projection").generator(),
                                                with_summary=c.variant != "fusion_only")
            self.fusion = GatedFusion(c.d, c.heads, root.child("fusion").generator(), c.alpha_init)
        self.action_scale = np.asarray(c.action_scale, dtype=np.float64)

    # -------------------------------------------------------------- context

    def history_input(self, obs: np.ndarray, history: np.ndarray) -> np.ndarray:
        if self.config.variant == "vggt_current":
            return np.asarray(obs)[:, None, :]
        return history

    def encode_history(self, obs, history, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Frozen-branch output (U, pooled) for many samples, computed in slices.

        The branch has no trainable inputs, so trainers compute it once per
        sample and pass it back through ``context(..., evidence=...)``.
        """
        if self.history is None:
            raise ConfigError(f"variant {self.config.variant!r} has no history encoder")
        obs, history = np.asarray(obs), np.asarray(history)
        us, ps = [], []
        for i in range(0, len(obs), batch_size):
            U, pooled = self.history(self.history_input(obs[i:i + batch_size], history[i:i + batch_size]))
            us.append(U.data)
            ps.append(pooled.data)
        return np.concatenate(us), np.concatenate(ps)

    def context(self, obs, instruction, history, ablate_history: bool = False,
                evidence: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
        """C_t for a batch. ``ablate_history`` skips every history pathway;
        ``evidence`` supplies precomputed frozen-branch output for the batch."""
        c = self.config
        obs = np.asarray(obs, dtype=np.float64)
        history = np.asarray(history, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[1] != c.obs_dim:
            raise ConfigError(f"observation batch must be [B, {c.obs_dim}], got {obs.shape}")
        if ablate_history:
            return self.current(obs, instruction)
        if c.variant.startswith("raw_"):
            idx = raw_history_indices(c.K, c.raw_k, "last" if c.variant == "raw_last" else "uniform16")
            extra = self.current.frame_tokens(Tensor(history[:, idx])) if len(idx) else None
            return self.current(obs, instruction, extra)
        F = self.current(obs, instruction)
        if self.history is None:
            return F
        if evidence is None:
            U, pooled = self.history(self.history_input(obs, history))
        else:
            U, pooled = Tensor(evidence[0]), Tensor(evidence[1])
        ev = self.projection(U, pooled)
        return assemble_context(self.fusion(F, ev.tokens), ev.summary)

    def velocity(self, X, s, C: Tensor) -> Tensor:
        return self.head(X, s, C)

    # -------------------------------------------------------------- action units

    def normalize(self, chunk: np.ndarray) -> np.ndarray:
        return np.asarray(chunk) / self.action_scale

    def denormalize(self, chunk: np.ndarray) -> np.ndarray:
        return np.asarray(chunk) * self.action_scale


def build_variant(variant: str, spec: E.TaskSpec, seed=0, **model_kw) -> ChunkPolicy:
    """Construct the model graph for ``variant`` on ``spec``'s observation layout."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    return ChunkPolicy(PolicyConfig.for_task(spec, variant, **model_kw), seed)
