"""Small dense linear algebra helpers.

Matrices and vectors are plain float64 numpy arrays. This module adds the few
factorizations the rest of the package needs at desk scale: a power-iteration
operator norm, a one-sided Jacobi SVD, uniform spectral rescaling and the
cyclic block permutation that couples the blocks of a multi-layer model.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ConvergenceError",
    "as_matrix",
    "as_vector",
    "spectral_norm",
    "svd",
    "spectral_project",
    "block_permutation",
    "orthonormal_complement",
]

SVD_MAX_DIM = 64
_RESTART_SEED = 20211206


class ConvergenceError(RuntimeError):
    """An iterative routine hit its iteration cap.

    The last iterate is kept on the exception so callers can inspect it.
    """

    def __init__(self, message, last_iterate=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def as_vector(v, name="vector"):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def _power_iteration(A, v, tol, max_iter):
    # Iterates on A^T A; returns (sigma, v, converged).
    sigma = 0.0
    for it in range(1, max_iter + 1):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v, True
        v = w / nw
        new_sigma = np.sqrt(nw)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            # ||A^T A v|| with unit v, so sigma^2 = nw at convergence
            return float(np.linalg.norm(A @ v)), v, True
        sigma = new_sigma
    return float(np.linalg.norm(A @ v)), v, False


def spectral_norm(A, tol=1e-12, max_iter=10_000):
    """Largest singular value of ``A`` by power iteration on ``A^T A``.

    Starts from the normalized all-ones vector. A second run from a seeded
    random vector guards against a start that is (numerically) orthogonal to
    the top singular vector or that collapses to zero; the larger estimate
    wins.

    Raises
    ------
    ConvergenceError
        If neither start converges within ``max_iter`` iterations.
    """
    A = as_matrix(A, "A")
    if A.size == 0:
        raise ValueError("spectral_norm needs a nonempty matrix")
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = A.shape[1]
    starts = [np.full(n, 1.0 / np.sqrt(n))]
    rng = np.random.default_rng(_RESTART_SEED)
    r = rng.standard_normal(n)
    starts.append(r / np.linalg.norm(r))

    best, best_v, any_ok = 0.0, starts[0], False
    for v0 in starts:
        sigma, v, ok = _power_iteration(A, v0, tol, max_iter)
        any_ok = any_ok or ok
        if sigma >= best:
            best, best_v = sigma, v
    if not any_ok:
        raise ConvergenceError(
            f"power iteration did not converge in {max_iter} iterations",
            last_iterate=best_v,
            iterations=max_iter,
        )
    return best


def _gram_schmidt_complete(Q, k):
    """Fill zero columns of ``Q`` (r x k) so that all k columns are orthonormal."""
    r = Q.shape[0]
    out = Q.copy()
    filled = [j for j in range(k) if np.linalg.norm(out[:, j]) > 0.5]
    basis = iter(np.eye(r))
    for j in range(k):
        if j in filled:
            continue
        for e in basis:
            cand = e.copy()
            for _ in range(2):
                for i in filled:
                    cand -= (out[:, i] @ cand) * out[:, i]
            nc = np.linalg.norm(cand)
            if nc > 1e-8:
                out[:, j] = cand / nc
                filled.append(j)
                break
    return out


def svd(A, tol=1e-15, max_sweeps=100):
    """Thin SVD ``A = U diag(S) V^T`` by one-sided (Hestenes) Jacobi rotations.

    ``S`` is sorted in descending order. ``U`` is rows x k and ``V`` is
    cols x k with k = min(rows, cols); both have orthonormal columns, with
    columns for zero singular values completed by Gram-Schmidt.
    """
    A = as_matrix(A, "A")
    if A.size == 0:
        raise ValueError("svd needs a nonempty matrix")
    r, c = A.shape
    if min(r, c) > SVD_MAX_DIM:
        raise ValueError(f"svd limited to min(rows, cols) <= {SVD_MAX_DIM}, got {min(r, c)}")
    if r < c:
        U, S, V = svd(A.T, tol=tol, max_sweeps=max_sweeps)
        return V, S, U

    G = A.copy()
    V = np.eye(c)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(c - 1):
            for q in range(p + 1, c):
                gp, gq = G[:, p], G[:, q]
                alpha = gp @ gp
                beta = gq @ gq
                gamma = gp @ gq
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = cs * t
                G[:, [p, q]] = np.column_stack((cs * gp - sn * gq, sn * gp + cs * gq))
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = cs * vp - sn * vq
                V[:, q] = sn * vp + cs * vq
        if not rotated:
            break
    else:
        raise ConvergenceError("Jacobi SVD did not converge", last_iterate=G)

    S = np.linalg.norm(G, axis=0)
    order = np.argsort(-S, kind="stable")
    S, G, V = S[order], G[:, order], V[:, order]
    U = np.zeros_like(G)
    scale = S[0] if S[0] > 0 else 1.0
    nz = S > 1e-14 * scale
    U[:, nz] = G[:, nz] / S[nz]
    S = np.where(nz, S, 0.0)
    if not np.all(nz):
        U = _gram_schmidt_complete(U, c)
    return U, S, V


def spectral_project(W, bound=1.0):
    """Rescale ``W`` uniformly so that its operator norm is at most ``bound``.

    Feasible input is returned unchanged (same object).
    """
    if bound <= 0:
        raise ValueError("bound must be positive")
    W = as_matrix(W, "W")
    s = spectral_norm(W)
    if s <= bound:
        return W
    return W * (bound / s)


def block_permutation(L, m):
    """Cyclic block permutation of size ``mL``.

    Block row 1 holds the identity in block column L; block row i >= 2 holds
    the identity in block column i - 1. Applied to ``[z_1, ..., z_{L-1}, z_0]``
    it yields ``[z_0, z_1, ..., z_{L-1}]``.
    """
    if L < 1 or m < 1:
        raise ValueError("L and m must be >= 1")
    P = np.zeros((L * m, L * m))
    eye = np.eye(m)
    P[0:m, (L - 1) * m:L * m] = eye
    for i in range(1, L):
        P[i * m:(i + 1) * m, (i - 1) * m:i * m] = eye
    return P


def orthonormal_complement(rows, cols, seed):
    """Seeded ``rows x cols`` matrix with orthonormal columns (rows >= cols)."""
    if rows < cols:
        raise ValueError("need rows >= cols for orthonormal columns")
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((rows, cols))
    Q, R = np.linalg.qr(G)
    return Q * np.sign(np.diag(R))
