"""Fixed-point solvers: plain Picard iteration and the modified SAM iteration.

SAM mixes a regularizer-descent step into each Picard step,
``z_k = beta_k S_{lambda_k}(z_{k-1}) + (1 - beta_k) T(z_{k-1})`` with
``S_lambda(z) = (1 - gamma lambda) z - gamma grad R(z)``, and so drifts toward
the fixed point of ``T`` that minimizes ``R``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "SolveReport",
    "SamSchedule",
    "relative_residual",
    "picard_solve",
    "sam_solve",
    "selection_gap",
    "batch_map",
]


@dataclass
class SolveReport:
    z_star: np.ndarray
    residual: float
    iterations: int
    converged: bool
    trajectory: Optional[list] = None

    def to_dict(self):
        out = {
            "z_star": np.asarray(self.z_star).tolist(),
            "residual": float(self.residual),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }
        if self.trajectory is not None:
            out["trajectory"] = [float(r) for r in self.trajectory]
        return out


def relative_residual(z, Tz):
    """``||z - T(z)|| / max(||z||, 1)``, Frobenius norm for batches."""
    return float(np.linalg.norm(z - Tz) / max(np.linalg.norm(z), 1.0))


@dataclass(frozen=True)
class SamSchedule:
    """Step-size schedule ``beta_k = eta / k^rho``, ``lambda_k = eta / k^c``.

    ``L_z`` is the Lipschitz constant of the regularizer gradient and
    ``gamma`` defaults to ``1 / (2 L_z)``.
    """

    eta: float
    rho: float = 0.2
    c: float = 0.3
    gamma: Optional[float] = None
    L_z: float = 1.0

    @staticmethod
    def eta_bound(L_z):
        return min(math.sqrt(2.0 * L_z), L_z / 2.0, 0.5)

    @classmethod
    def default(cls, L_z=1.0, rho=0.2, c=0.3):
        return cls(eta=cls.eta_bound(L_z), rho=rho, c=c, L_z=L_z)

    @property
    def step(self):
        return self.gamma if self.gamma is not None else 1.0 / (2.0 * self.L_z)

    def validate(self):
        if not self.L_z > 0:
            raise ValueError("L_z must be positive")
        if not (self.rho > 0 and self.c > 0):
            raise ValueError("rho and c must be positive")
        if not self.rho + 2.0 * self.c < 1.0:
            raise ValueError(f"schedule needs rho + 2c < 1, got {self.rho + 2.0 * self.c}")
        bound = self.eta_bound(self.L_z)
        if not 0.0 < self.eta <= bound:
            raise ValueError(f"eta={self.eta} must lie in (0, {bound:.6g}]")
        if not self.step > 0:
            raise ValueError("gamma must be positive")

    def beta(self, k):
        return self.eta / k ** self.rho

    def lam(self, k):
        return self.eta / k ** self.c


def picard_solve(T, z0, tol, max_iter=1000, record_trajectory=False):
    """Iterate ``z <- T(z)`` until the relative residual is at most ``tol``.

    ``iterations`` counts the updates applied. Hitting ``max_iter`` returns a
    report with ``converged=False``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    z = np.asarray(z0, dtype=np.float64)
    traj = [] if record_trajectory else None
    for k in range(max_iter + 1):
        Tz = T(z)
        res = relative_residual(z, Tz)
        if traj is not None:
            traj.append(res)
        if res <= tol or k == max_iter:
            return SolveReport(z, res, k, res <= tol, traj)
        z = Tz


def _check_reg(reg, sched, allow_nonconvex):
    if not reg.smooth:
        raise ValueError(f"regularizer {reg.kind!r} has no gradient; SAM needs a smooth regularizer")
    if not reg.convex and not allow_nonconvex:
        raise ValueError(
            f"regularizer {reg.kind!r} is non-convex; pass allow_nonconvex=True "
            "to run SAM without a convergence guarantee"
        )
    lz = reg.lipschitz
    if lz is not None and sched.L_z < lz * (1.0 - 1e-12):
        raise ValueError(f"schedule L_z={sched.L_z} is below the regularizer's {lz}")


def sam_solve(T, reg, sched, z0, K, allow_nonconvex=False, record_trajectory=False):
    """Run ``K`` modified SAM steps from ``z0``.

    With ``reg=None`` every ``beta_k`` is zero and the iterates are exactly the
    Picard iterates. The reported residual is measured against ``T`` alone and
    ``converged`` is always ``False`` because SAM has no stopping tolerance;
    callers compare ``residual`` with their own threshold.
    """
    from .regularizers import reg_grad

    if K < 1:
        raise ValueError("K must be >= 1")
    if reg is not None:
        sched.validate()
        _check_reg(reg, sched, allow_nonconvex)
        gamma = sched.step
    z = np.asarray(z0, dtype=np.float64)
    traj = [] if record_trajectory else None
    for k in range(1, K + 1):
        Tz = T(z)
        if traj is not None:
            traj.append(relative_residual(z, Tz))
        if reg is None:
            z = Tz
            continue
        beta, lam = sched.beta(k), sched.lam(k)
        S = (1.0 - gamma * lam) * z - gamma * reg_grad(reg, z)
        z = beta * S + (1.0 - beta) * Tz
    res = relative_residual(z, T(z))
    if traj is not None:
        traj.append(res)
    return SolveReport(z, res, K, False, traj)


def selection_gap(T, reg, z, oracle_points, tol=1e-8):
    """``R(z) - min_p R(p)`` over sampled fixed points ``p`` of ``T``."""
    from .regularizers import reg_value

    pts = list(oracle_points)
    if not pts:
        raise ValueError("need at least one oracle point")
    for i, p in enumerate(pts):
        r = relative_residual(p, T(p))
        if r > tol:
            raise ValueError(f"oracle point {i} has residual {r:.3e} above {tol}")
    return float(reg_value(reg, z) - min(reg_value(reg, p) for p in pts))


def batch_map(fn, items):
    """Map ``fn`` over ``items``; ``OPTEQ_THREADS > 0`` enables a thread pool.

    Results keep input order, so the output does not depend on the thread count.
    """
    try:
        n = int(os.environ.get("OPTEQ_THREADS", "0") or 0)
    except ValueError:
        raise ValueError("OPTEQ_THREADS must be an integer") from None
    items = list(items)
    if n <= 0 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
