"""Feature regularizers ``R_z``.

Vectors are single samples; matrices are batches with one sample per
column. The sample-wise kinds (``l1``, ``squared_l2``, ``inverse_norm``)
sum over columns. ``decorrelation`` and ``hsic`` act on the rows of a batch
matrix and need at least two samples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

__all__ = [
    "Regularizer",
    "KINDS",
    "reg_value",
    "reg_grad",
    "reg_prox",
    "grad_expression",
    "hsic_value",
    "hsic_pairwise_penalty",
    "median_bandwidth",
    "structural_step",
    "append_structural_regularizer",
]

KINDS = ("l1", "squared_l2", "inverse_norm", "decorrelation", "hsic")
ROW_GUARD = 1e-12


@dataclass(frozen=True)
class Regularizer:
    """``lam`` scales l1 / squared_l2; ``eps`` belongs to inverse_norm;
    ``center`` shifts squared_l2 to ``lam/2 ||z - center||^2``;
    ``bandwidth`` fixes the hsic kernel width (``None`` = median heuristic)."""

    kind: str
    lam: float = 1.0
    eps: float = 1e-2
    center: Optional[tuple] = None
    bandwidth: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}; expected one of {KINDS}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def convex(self):
        return self.kind in ("l1", "squared_l2")

    @property
    def smooth(self):
        return self.kind != "l1"

    @property
    def has_prox(self):
        return self.kind in ("l1", "squared_l2")

    @property
    def batch_only(self):
        return self.kind in ("decorrelation", "hsic")

    @property
    def lipschitz(self):
        """Lipschitz constant of the gradient, ``None`` when not available."""
        if self.kind == "squared_l2":
            return self.lam
        if self.kind == "inverse_norm":
            return 2.0 / self.eps ** 2
        return None

    @classmethod
    def from_config(cls, cfg):
        if isinstance(cfg, str):
            return cls(cfg)
        cfg = dict(cfg)
        kind = cfg.pop("kind")
        unknown = set(cfg) - {"lam", "eps", "center", "bandwidth"}
        if unknown:
            raise ValueError(f"unknown regularizer fields {sorted(unknown)}")
        return cls(kind, **cfg)

    def to_config(self):
        out = {"kind": self.kind}
        if self.kind in ("l1", "squared_l2"):
            out["lam"] = self.lam
        if self.kind == "inverse_norm":
            out["eps"] = self.eps
        if self.center is not None:
            out["center"] = list(self.center)
        if self.bandwidth is not None:
            out["bandwidth"] = self.bandwidth
        return out


def _center(r, z):
    c = np.asarray(r.center, dtype=np.float64)
    if c.shape[0] != z.shape[0]:
        raise ValueError(f"center has dimension {c.shape[0]}, expected {z.shape[0]}")
    return c[:, None] if z.ndim == 2 else c


def _batch(r, Z):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] < 2:
        raise ValueError(f"{r.kind} needs a batch matrix with at least 2 columns, got shape {Z.shape}")
    return Z


def reg_value(r, Z):
    Z = np.asarray(Z, dtype=np.float64)
    k = r.kind
    if k == "l1":
        return float(r.lam * np.sum(np.abs(Z)))
    if k == "squared_l2":
        d = Z - _center(r, Z) if r.center is not None else Z
        return float(0.5 * r.lam * np.sum(d * d))
    if k == "inverse_norm":
        return float(np.sum(1.0 / (np.sum(Z * Z, axis=0) + r.eps)))
    if k == "decorrelation":
        C = _decorrelation_parts(_batch(r, Z))[1]
        E = C - np.eye(C.shape[0])
        return float(0.5 * np.sum(E * E))
    return hsic_pairwise_penalty(_batch(r, Z), bandwidth=r.bandwidth)


def grad_expression(r, z):
    """Gradient written with arithmetic only, so it also runs on autodiff nodes.

    Supports ``squared_l2`` and ``inverse_norm``.
    """
    if r.kind == "squared_l2":
        if r.center is None:
            return r.lam * z
        c = np.asarray(r.center, dtype=np.float64)
        if len(z.shape) == 2:
            c = c[:, None]
        return r.lam * (z - c)
    if r.kind == "inverse_norm":
        s = (z * z).sum(axis=0) + r.eps
        return z * (-2.0 / (s * s))
    raise NotImplementedError(f"no arithmetic gradient expression for {r.kind!r}")


def reg_grad(r, Z):
    if r.kind == "l1":
        raise ValueError("l1 is nonsmooth; use reg_prox instead of reg_grad")
    Z = np.asarray(Z, dtype=np.float64)
    if r.kind in ("squared_l2", "inverse_norm"):
        return grad_expression(r, Z)
    if r.kind == "decorrelation":
        return _decorrelation_grad(_batch(r, Z))
    return _hsic_penalty_grad(_batch(r, Z), r.bandwidth)


def reg_prox(r, z, step):
    """``argmin_u ||u - z||^2 / 2 + step R(u)`` for l1 and squared_l2."""
    if not step > 0:
        raise ValueError("step must be positive")
    z = np.asarray(z, dtype=np.float64)
    if r.kind == "l1":
        t = step * r.lam
        return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)
    if r.kind == "squared_l2":
        t = step * r.lam
        if r.center is None:
            return z / (1.0 + t)
        return (z + t * _center(r, z)) / (1.0 + t)
    raise ValueError(f"regularizer {r.kind!r} has no prox")


# ------------------------------------------------------------ decorrelation

def _decorrelation_parts(Z):
    norms = np.sqrt(np.sum(Z * Z, axis=1))
    inv = 1.0 / np.maximum(norms, ROW_GUARD)
    N = Z * inv[:, None]
    return N, N @ N.T, inv, norms


def _decorrelation_grad(Z):
    N, C, inv, norms = _decorrelation_parts(Z)
    G = 2.0 * (C - np.eye(C.shape[0])) @ N
    out = G * inv[:, None]
    active = norms > ROW_GUARD
    # the row scale depends on z_i only where the guard is inactive
    radial = np.sum(G * N, axis=1)
    out[active] -= (radial[active] * inv[active])[:, None] * N[active]
    return out


# --------------------------------------------------------------------- HSIC

def _sq_dists(X):
    # X: features x B -> B x B squared distances between columns
    sq = np.sum(X * X, axis=0)
    D = sq[:, None] + sq[None, :] - 2.0 * X.T @ X
    D = np.maximum(D, 0.0)
    np.fill_diagonal(D, 0.0)
    return D


def median_bandwidth(X):
    """Median pairwise distance between columns; 1.0 if that median is 0."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    B = X.shape[1]
    iu = np.triu_indices(B, 1)
    h = float(np.median(np.sqrt(_sq_dists(X)[iu])))
    return h if h > 0 else 1.0


def _rbf(X, h):
    return np.exp(-_sq_dists(X) / (2.0 * h * h))


def _centering(B):
    return np.eye(B) - np.full((B, B), 1.0 / B)


def hsic_value(X, Y, bandwidth=None):
    """Biased HSIC estimate ``(B-1)^{-2} tr(K_X H K_Y H)`` with Gaussian kernels."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    X = X[None, :] if X.ndim == 1 else X
    Y = Y[None, :] if Y.ndim == 1 else Y
    B = X.shape[1]
    if B < 2 or Y.shape[1] != B:
        raise ValueError(f"need matching batch sizes >= 2, got {X.shape[1]} and {Y.shape[1]}")
    hx = bandwidth if bandwidth is not None else median_bandwidth(X)
    hy = bandwidth if bandwidth is not None else median_bandwidth(Y)
    H = _centering(B)
    # centering both kernels makes the value exactly symmetric in (X, Y)
    Kx, Ky = H @ _rbf(X, hx) @ H, H @ _rbf(Y, hy) @ H
    return float(np.sum(Kx * Ky) / (B - 1) ** 2)


def _row_kernels(Z, bandwidth):
    ks, hs = [], []
    for row in Z:
        h = bandwidth if bandwidth is not None else median_bandwidth(row)
        hs.append(h)
        ks.append(_rbf(row[None, :], h))
    return ks, hs


def hsic_pairwise_penalty(Z, bandwidth=None):
    """``sum_{i<j} HSIC(Z_i, Z_j)`` over the rows of ``Z``."""
    Z = np.asarray(Z, dtype=np.float64)
    m, B = Z.shape
    if m < 2 or B < 2:
        raise ValueError(f"need at least 2 rows and 2 columns, got shape {Z.shape}")
    ks, _ = _row_kernels(Z, bandwidth)
    H = _centering(B)
    S = sum(ks)
    total = np.sum((H @ S @ H) * S) - sum(np.sum((H @ K @ H) * K) for K in ks)
    return float(0.5 * total / (B - 1) ** 2)


def _median_pairs(row):
    # pairs (p, q, weight) whose distances average to the median
    B = row.shape[0]
    iu, ju = np.triu_indices(B, 1)
    d = np.abs(row[iu] - row[ju])
    order = np.argsort(d, kind="stable")
    n = d.shape[0]
    if n % 2:
        picks = [(order[n // 2], 1.0)]
    else:
        picks = [(order[n // 2 - 1], 0.5), (order[n // 2], 0.5)]
    return [(iu[i], ju[i], w) for i, w in picks], float(np.median(d))


def _hsic_penalty_grad(Z, bandwidth):
    m, B = Z.shape
    ks, hs = _row_kernels(Z, bandwidth)
    H = _centering(B)
    S = sum(ks)
    HSH = H @ S @ H
    c = 1.0 / (B - 1) ** 2
    out = np.zeros_like(Z)
    for i, (row, K, h) in enumerate(zip(Z, ks, hs)):
        G = c * (HSH - H @ K @ H)
        Dif = row[:, None] - row[None, :]
        GK = G * K
        out[i] = -(2.0 / h ** 2) * np.sum(GK * Dif, axis=1)
        if bandwidth is None:
            pairs, med = _median_pairs(row)
            if med > 0:
                dh = np.sum(GK * Dif * Dif) / h ** 3
                for p, q, w in pairs:
                    s = np.sign(row[p] - row[q])
                    out[i, p] += dh * w * s
                    out[i, q] -= dh * w * s
    return out


# --------------------------------------------------------------- structural

def structural_step(r, gamma, z):
    """``prox_{gamma R}(z)`` when available, else ``z - gamma grad R(z)``."""
    if r.has_prox:
        return reg_prox(r, z, gamma)
    return z - gamma * reg_grad(r, z)


def append_structural_regularizer(model, r, gamma):
    """Model whose forward map is followed by the regularizer step."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if r.batch_only:
        raise ValueError(f"{r.kind} acts on batches and cannot be a per-sample layer")
    return replace(model, structural=(r, float(gamma)))
