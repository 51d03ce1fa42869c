"""Conditional flow matching on action chunks: linear paths from noise to data."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .dataset import ChunkBatch
from .tensor import Tensor

TIME_DISTRIBUTIONS = ("uniform01",)


class TrainingError(RuntimeError):
    """Non-finite loss."""


@dataclass(frozen=True)
class FlowConfig:
    steps: int = 10
    time_dist: str = "uniform01"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler steps must be at least 1")
        if self.time_dist not in TIME_DISTRIBUTIONS:
            raise ValueError(f"unknown flow-time distribution {self.time_dist!r}")


def interpolate(eps, tau, s):
    """X_s = (1 - s) * eps + s * tau; ``s`` broadcasts over leading axes."""
    eps, tau = np.asarray(eps, dtype=np.float64), np.asarray(tau, dtype=np.float64)
    if eps.shape != tau.shape:
        raise ValueError("noise and target shapes differ")
    s = np.asarray(s, dtype=np.float64)
    if (s < 0).any() or (s > 1).any():
        raise ValueError("s must lie in [0, 1]")
    s = s.reshape(s.shape + (1,) * (eps.ndim - s.ndim))
    return (1.0 - s) * eps + s * tau


def sample_flow_time(gen: np.random.Generator, n: int, dist: str = "uniform01") -> np.ndarray:
    if dist == "uniform01":
        return gen.uniform(0.0, 1.0, n)
    raise ValueError(f"unknown flow-time distribution {dist!r}")


def flow_loss(model, batch: ChunkBatch, gen: np.random.Generator | None = None,
              config: FlowConfig = FlowConfig(), eps: np.ndarray | None = None,
              s: np.ndarray | None = None, evidence=None) -> Tensor:
    """Batch mean of ||V(X_s, s | C) - (tau - eps)||^2, summed over the chunk.

    Targets are the batch chunks in the model's normalized action units.
    ``eps`` and ``s`` may be fixed by the caller; otherwise both come from ``gen``.
    ``evidence`` is optional precomputed frozen-history output for the batch.
    """
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    tau = model.normalize(batch.chunk)
    if eps is None:
        eps = gen.standard_normal(tau.shape)
    if s is None:
        s = sample_flow_time(gen, B, config.time_dist)
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (B,))
    C = model.context(batch.obs, batch.instruction, batch.history, evidence=evidence)
    v = model.velocity(interpolate(eps, tau, s), s, C)
    resid = v - (tau - eps)
    loss = T.sum(T.square(resid)) * (1.0 / B)
    if not np.isfinite(loss.data):
        raise TrainingError(f"non-finite flow loss; |v| max={np.abs(v.data).max():.3g}, "
                            f"|tau| max={np.abs(tau).max():.3g}")
    return loss


def euler_integrate(velocity: Callable[[np.ndarray, float], np.ndarray], eps: np.ndarray,
                    steps: int) -> np.ndarray:
    """Left-endpoint Euler from s=0 to s=1: X <- X + (1/S) v(X, i/S).

    The update is carried as X_i = eps + (i/S) * mean(v_0 .. v_{i-1}) with a
    running mean, the same recursion written so that a constant field gives
    exactly eps + v.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    eps = np.array(eps, dtype=np.float64)
    X, mean_v = eps, np.zeros_like(eps)
    for i in range(steps):
        v = np.asarray(velocity(X, i / steps), dtype=np.float64)
        mean_v = mean_v + (v - mean_v) / (i + 1)
        X = eps + ((i + 1) / steps) * mean_v
    return X


def sample_chunk(model, C: Tensor, steps: int = 10, gen: np.random.Generator | None = None,
                 eps: np.ndarray | None = None) -> np.ndarray:
    """Integrate the learned field from Gaussian noise with the context held fixed.

    Returns chunks in normalized units, shape [B, H, d_a].
    """
    B = C.shape[0]
    shape = (B, model.config.H, model.config.d_a)
    if eps is None:
        eps = gen.standard_normal(shape)
    C = C.detach()
    with T.no_grad():
        return euler_integrate(lambda X, s: model.velocity(Tensor(X), s, C).data, eps, steps)
