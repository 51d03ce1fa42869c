from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class EvaluationError(RuntimeError):
    """The checked function produced a non-finite value."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_coords: int
    worst: tuple[int, int] | None  # (param index, flat coordinate)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-4, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` is re-evaluated with each coordinate of each parameter perturbed in
    place. When ``max_coords`` is set, that many coordinates per parameter are
    sampled instead of checking all of them.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-6, 1e-4]")
    for p in params:
        # perturbation happens in place, so a 0-d numpy scalar must become an array
        p.data = np.asarray(p.data, dtype=np.float64)
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise EvaluationError("f is not finite at the given parameters")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_rel = max_abs = 0.0
    worst = None
    count = 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(f().data)
            flat[c] = orig - h
            fm = float(f().data)
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError("f is not finite near the given parameters")
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[pi].reshape(-1)[c])
            abs_err = abs(ana - num)
            rel = abs_err / max(abs(ana), abs(num), 1e-8)
            count += 1
            max_abs = max(max_abs, abs_err)
            if rel > max_rel:
                max_rel, worst = rel, (pi, int(c))
    for p in params:
        p.grad = None
    return GradCheckReport(max_rel, max_abs, count, worst)
