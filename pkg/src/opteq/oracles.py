"""Independent reference computations used by the verification suites.

Nothing here calls the layer, solver or potential code under test. The convex
objectives are rebuilt from the weight matrices as explicit quadratic
programs over latent coordinates ``u = W^T s`` with ``s >= 0`` (the domain of
the ReLU potential) and minimized by an accelerated projected-gradient method
whose step comes from numpy's symmetric eigensolver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QPResult",
    "nonneg_qp",
    "prox_oracle",
    "two_block_oracle",
    "wide_oracle",
    "fd_gradient",
    "fd_jacobian",
    "orthant_fixed_points",
    "line_fixed_points",
]


@dataclass
class QPResult:
    x: np.ndarray
    value: float
    iterations: int
    gradient_mapping: float


def nonneg_qp(H, q, mask, tol=1e-12, max_iter=500_000, x0=None):
    """Minimize ``x^T H x / 2 - q^T x`` subject to ``x[mask] >= 0``.

    FISTA with gradient-based restarts and step ``1 / lambda_max(H)``. Stops
    when the projected-gradient mapping has norm at most ``tol``.
    """
    H = np.asarray(H, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    H = 0.5 * (H + H.T)
    lmax = float(np.linalg.eigvalsh(H)[-1])
    t = 1.0 / lmax

    def project(v):
        v = v.copy()
        v[mask] = np.maximum(v[mask], 0.0)
        return v

    x = project(np.zeros_like(q) if x0 is None else np.asarray(x0, dtype=np.float64))
    y, theta = x.copy(), 1.0
    gm = np.inf
    for it in range(1, max_iter + 1):
        x_new = project(y - t * (H @ y - q))
        # gradient mapping at the current iterate
        gm = float(np.linalg.norm(x - project(x - t * (H @ x - q))) / t)
        if gm <= tol:
            break
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        if (y - x_new) @ (x_new - x) > 0:
            y, theta_new = x_new.copy(), 1.0
        else:
            y = x_new + ((theta - 1.0) / theta_new) * (x_new - x)
        x, theta = x_new, theta_new
    value = float(0.5 * x @ H @ x - q @ x)
    return QPResult(x, value, it, gm)


def prox_oracle(W, c, z, tol=1e-13):
    """``argmin_u ||u - z||^2/2 + phi(u)`` for the ReLU unit-layer potential
    with weights ``W`` (square, invertible) and offset ``c = U x + b``.

    In latent coordinates the objective is
    ``||W^T s - z||^2/2 + ||s||^2/2 - c^T s - ||W^T s||^2/2`` over ``s >= 0``.
    """
    W = np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    WWt = W @ W.T
    H = WWt + np.eye(n) - WWt
    q = W @ z + c
    res = nonneg_qp(H, q, np.ones(n, dtype=bool), tol=tol)
    return W.T @ res.x


def _latent_block(W, c, mu, weight):
    # weight * [ ||W^T s - z||^2/(2 mu) + ||s||^2/2 - c^T s - ||W^T s||^2/2 ]
    n, m = W.shape
    WWt = W @ W.T
    Hss = weight * ((1.0 / mu - 1.0) * WWt + np.eye(n))
    Hsz = -weight * W / mu
    Hzz = weight * np.eye(m) / mu
    return Hss, Hsz, Hzz, weight * np.asarray(c, dtype=np.float64)


def two_block_oracle(W1, c1, W2, c2, alpha, tol=1e-12):
    """Minimize ``alpha M1(z1) + alpha M2(z0) + ||z1 - z0||^2/2`` where
    ``Mi`` is the Moreau envelope (parameter ``1 - alpha``) of the ReLU
    potential of layer ``i``.

    Returns ``(value, z1, z0)``.
    """
    mu = 1.0 - alpha
    m = W1.shape[1]
    n1, n2 = W1.shape[0], W2.shape[0]
    N = 2 * m + n1 + n2
    H = np.zeros((N, N))
    q = np.zeros(N)
    iz1, iz0 = slice(0, m), slice(m, 2 * m)
    is1, is2 = slice(2 * m, 2 * m + n1), slice(2 * m + n1, N)
    for W, c, iz, is_ in ((W1, c1, iz1, is1), (W2, c2, iz0, is2)):
        Hss, Hsz, Hzz, qs = _latent_block(W, c, mu, alpha)
        H[is_, is_] += Hss
        H[is_, iz] += Hsz
        H[iz, is_] += Hsz.T
        H[iz, iz] += Hzz
        q[is_] += qs
    H[iz1, iz1] += np.eye(m)
    H[iz0, iz0] += np.eye(m)
    H[iz1, iz0] -= np.eye(m)
    H[iz0, iz1] -= np.eye(m)
    mask = np.zeros(N, dtype=bool)
    mask[2 * m:] = True
    res = nonneg_qp(H, q, mask, tol=tol)
    return res.value, res.x[iz1], res.x[iz0]


def wide_oracle(Ws, cs, tol=1e-12):
    """Minimize ``sum_l phi_l(x_l) + ||x_l - y||^2/2`` over ``(x_l, y)``.

    Returns ``(value, y, [x_l])``.
    """
    m = Ws[0].shape[1]
    sizes = [W.shape[0] for W in Ws]
    N = sum(sizes) + m
    H = np.zeros((N, N))
    q = np.zeros(N)
    iy = slice(N - m, N)
    off = 0
    blocks = []
    for W, c, n in zip(Ws, cs, sizes):
        isl = slice(off, off + n)
        blocks.append(isl)
        # ||s||^2/2 - c^T s - ||W^T s||^2/2 + ||W^T s - y||^2/2
        H[isl, isl] += np.eye(n)
        H[isl, iy] -= W
        H[iy, isl] -= W.T
        H[iy, iy] += np.eye(m)
        q[isl] += c
        off += n
    mask = np.zeros(N, dtype=bool)
    mask[:N - m] = True
    res = nonneg_qp(H, q, mask, tol=tol)
    xs = [W.T @ res.x[b] for W, b in zip(Ws, blocks)]
    return res.value, res.x[iy], xs


def fd_gradient(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def fd_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def orthant_fixed_points(count, dim=2, scale=3.0, seed=0):
    """Seeded points of the nonnegative orthant, including axis points."""
    rng = np.random.default_rng(seed)
    pts = scale * rng.random((count, dim))
    # sprinkle exact boundary points where minimizers of shifted quadratics live
    pts[: count // 4, 0] = 0.0
    return list(pts)


def line_fixed_points(count, scale=3.0, seed=0):
    """Seeded points on the line ``z_2 = z_1``."""
    rng = np.random.default_rng(seed)
    t = scale * (2.0 * rng.random(count) - 1.0)
    return [np.array([v, v]) for v in t]
