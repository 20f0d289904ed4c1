"""The OptEq unit layer and its convex potentials.

A unit layer maps ``z -> (1/mu) W^T sigma(W z + U x + b)``. When
``mu >= L_sigma ||W||_2^2`` it is the proximal operator of a convex function
``phi = psi^* - ||.||^2/2`` where ``psi(z) = (1/mu) 1^T sigma_tilde(W z + U x + b)``.
This module evaluates the layer, its averaged (skip-connection) form, the two
potentials, Moreau envelopes, and a finite-difference check of the
prox characterization.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .activations import Activation
from .tensors import ConvergenceError, as_matrix, as_vector, spectral_norm, svd

__all__ = [
    "LayerParams",
    "UnitLayerConfig",
    "ProxReport",
    "Potential",
    "check_nonexpansive_conditions",
    "preactivation",
    "unit_forward",
    "averaged_forward",
    "psi_value",
    "phi_closed_form",
    "closed_form_potential",
    "quadratic_potential",
    "orthant_indicator",
    "moreau_envelope",
    "prox_characterization_check",
]

COND_LIMIT = 1e8
BOUNDARY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class LayerParams:
    """Weights of one layer: ``W`` (n x m), ``U`` (n x d), ``b`` (n,)."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = as_matrix(self.W, "W")
        U = as_matrix(self.U, "U")
        b = as_vector(self.b, "b")
        if U.shape[0] != W.shape[0]:
            raise ValueError(f"U has {U.shape[0]} rows, expected {W.shape[0]} (rows of W)")
        if b.shape[0] != W.shape[0]:
            raise ValueError(f"b has length {b.shape[0]}, expected {W.shape[0]} (rows of W)")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "b", b)

    @functools.cached_property
    def certified_norm(self):
        return spectral_norm(self.W)

    @property
    def width(self):
        return self.W.shape[0]

    @property
    def hidden_dim(self):
        return self.W.shape[1]

    @property
    def input_dim(self):
        return self.U.shape[1]

    def replace(self, **kw):
        args = {"W": self.W, "U": self.U, "b": self.b}
        args.update(kw)
        return LayerParams(**args)


@dataclass(frozen=True)
class UnitLayerConfig:
    mu: float = 1.0
    alpha: float = 1.0
    activation: Activation = field(default_factory=Activation)

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")


def check_nonexpansive_conditions(p, cfg):
    """Raise ``ValueError`` unless ``mu >= L_sigma ||W||_2^2``."""
    need = cfg.activation.lipschitz * p.certified_norm ** 2
    if cfg.mu < need * (1.0 - 1e-12):
        raise ValueError(
            f"mu={cfg.mu} is below L_sigma*||W||_2^2={need:.6g}; the layer is not a prox"
        )


def _bias(b, like):
    return b[:, None] if like.ndim == 2 else b


def preactivation(p, z, x):
    """``W z + U x + b`` for a vector ``z`` or a batch of columns."""
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if z.shape[0] != p.hidden_dim:
        raise ValueError(f"z has dimension {z.shape[0]}, expected {p.hidden_dim} (columns of W)")
    if x.shape[0] != p.input_dim:
        raise ValueError(f"x has dimension {x.shape[0]}, expected {p.input_dim} (columns of U)")
    if z.ndim == 2 and x.ndim == 2 and z.shape[1] != x.shape[1]:
        raise ValueError(f"z has batch {z.shape[1]} but x has batch {x.shape[1]}")
    a = p.W @ z
    ux = p.U @ x
    if a.ndim == 2 and ux.ndim == 1:
        ux = ux[:, None]
    elif a.ndim == 1 and ux.ndim == 2:
        a = a[:, None]
    return a + ux + _bias(p.b, a)


def unit_forward(p, cfg, z, x):
    """``(1/mu) W^T sigma(W z + U x + b)``."""
    a = preactivation(p, z, x)
    return p.W.T @ cfg.activation(a) / cfg.mu


def averaged_forward(p, cfg, z, x):
    """``alpha * unit_forward + (1 - alpha) z``; same fixed points as the unit layer."""
    z = np.asarray(z, dtype=np.float64)
    out = unit_forward(p, cfg, z, x)
    if cfg.alpha == 1.0:
        return out
    return cfg.alpha * out + (1.0 - cfg.alpha) * z


def psi_value(p, cfg, z, x):
    """``(1/mu) sum_i sigma_tilde((W z + U x + b)_i)``; its gradient is the unit layer."""
    a = preactivation(p, as_vector(z, "z"), x)
    return float(np.sum(cfg.activation.antiderivative(a)) / cfg.mu)


def _invert_square(W):
    if W.shape[0] != W.shape[1]:
        raise ValueError(f"closed-form phi needs square W, got shape {W.shape}")
    _, S, _ = svd(W)
    if S[-1] == 0.0 or S[0] / S[-1] > COND_LIMIT:
        raise ValueError("W is singular (condition number above 1e8)")


def phi_closed_form(p, cfg, z, x):
    """Underlying convex objective of a unit layer with square invertible ``W``.

    ``phi(z) = sum sigma_tilde^*(W^{-T} z) - <U x + b, W^{-T} z> - ||z||^2/2``.
    Returns ``inf`` outside the domain of the conjugate. Coordinates of
    ``W^{-T} z`` that are negative only at rounding level (relative 1e-9) are
    treated as zero.
    """
    if cfg.mu != 1.0:
        raise ValueError("closed-form phi is defined for mu = 1")
    act = cfg.activation
    if not act.has_conjugate:
        raise ValueError(f"no closed-form conjugate for activation {act.kind!r}")
    _invert_square(p.W)
    z = as_vector(z, "z")
    c = p.U @ np.asarray(x, dtype=np.float64) + p.b
    s = np.linalg.solve(p.W.T, z)
    # the solve is inexact: entries within rounding of the boundary count as on it
    s = np.where((s < 0) & (s > -BOUNDARY_TOL * max(1.0, np.max(np.abs(s)))), 0.0, s)
    conj = act.conjugate_antiderivative(s)
    if np.any(np.isinf(conj)):
        return np.inf
    return float(np.sum(conj) - c @ s - 0.5 * z @ z)


@dataclass
class Potential:
    """A proper convex function for the Moreau-envelope solver.

    ``grad`` is the gradient on the domain. ``cone`` is either ``None`` (the
    domain is the whole space) or a matrix ``A`` with domain
    ``{A s : s >= 0}``; then ``cone_value(s) = phi(A s)`` and its gradient
    ``cone_grad(s)`` must be given, so that boundary points never pass
    through a numerically inexact change of coordinates.
    """

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    cone: Optional[np.ndarray] = None
    cone_value: Optional[Callable[[np.ndarray], float]] = None
    cone_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.cone is not None and (self.cone_value is None or self.cone_grad is None):
            raise ValueError("a conic potential needs cone_value and cone_grad")


def quadratic_potential(scale=1.0):
    return Potential(lambda u: 0.5 * scale * float(u @ u), lambda u: scale * u)


def orthant_indicator(dim):
    def value(u):
        return 0.0 if np.all(u >= 0.0) else np.inf

    return Potential(
        value,
        lambda u: np.zeros_like(u),
        cone=np.eye(dim),
        cone_value=lambda s: 0.0,
        cone_grad=lambda s: np.zeros_like(s),
    )


def closed_form_potential(p, cfg, x):
    """:class:`Potential` wrapping :func:`phi_closed_form` for fixed input ``x``."""
    # validates mu / activation / invertibility once
    phi_closed_form(p, cfg, np.zeros(p.hidden_dim), x)
    act = cfg.activation
    c = p.U @ np.asarray(x, dtype=np.float64) + p.b
    W = p.W

    def grad(u):
        s = np.linalg.solve(W.T, u)
        return np.linalg.solve(W, act.conjugate_derivative(s) - c) - u

    if not (act.kind == "relu" or act.slope == 0.0):
        return Potential(lambda u: phi_closed_form(p, cfg, u, x), grad)

    # u = W^T s with s >= 0: phi = sum s^2/2 - <c, s> - ||W^T s||^2/2
    def cone_value(s):
        u = W.T @ s
        return float(0.5 * s @ s - c @ s - 0.5 * u @ u)

    def cone_grad(s):
        return s - c - W @ (W.T @ s)

    return Potential(lambda u: phi_closed_form(p, cfg, u, x), grad, W.T.copy(),
                     cone_value, cone_grad)


def _projected_gradient(fun, grad, s0, project, tol, max_iter):
    # Step sizes are accepted when the curvature seen along the step is at
    # most 1/t. Unlike a function-value test this stays reliable near the
    # optimum, where value differences drown in rounding error.
    s = project(s0)
    g = grad(s)
    t = 1.0
    for it in range(1, max_iter + 1):
        while True:
            s_new = project(s - t * g)
            d = s_new - s
            f_new = fun(s_new)
            if np.isfinite(f_new):
                g_new = grad(s_new)
                if (g_new - g) @ d <= (d @ d) / t * (1.0 + 1e-12):
                    break
            t *= 0.5
            if t < 1e-30:
                raise ConvergenceError("step size underflow", last_iterate=s, iterations=it)
        gm = np.linalg.norm(d) / t
        s, g = s_new, g_new
        if gm <= tol:
            return s, f_new, it
        t *= 2.0
    raise ConvergenceError(
        f"inner solver did not reach tolerance {tol} in {max_iter} iterations",
        last_iterate=s,
        iterations=max_iter,
    )


def moreau_envelope(phi, mu, x, inner_tol=1e-8, max_iter=10_000):
    """Value and minimizer of ``min_u ||u - x||^2/(2 mu) + phi(u)``.

    The minimizer is ``prox_{mu phi}(x)``. Solved by (projected) gradient
    descent with backtracking; when ``phi`` has a conic domain the iteration
    runs on the cone coordinates.

    Returns
    -------
    (value, prox_point)
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    x = as_vector(x, "x")

    def total(u):
        r = u - x
        return (r @ r) / (2.0 * mu) + phi.value(u)

    def total_grad(u):
        return (u - x) / mu + phi.grad(u)

    if phi.cone is None:
        u, f, _ = _projected_gradient(total, total_grad, x.copy(), lambda v: v, inner_tol, max_iter)
        return float(f), u

    A = phi.cone

    def cone_total(s):
        r = A @ s - x
        return (r @ r) / (2.0 * mu) + phi.cone_value(s)

    def cone_total_grad(s):
        return A.T @ (A @ s - x) / mu + phi.cone_grad(s)

    s0, *_ = np.linalg.lstsq(A, x, rcond=None)
    s, f, _ = _projected_gradient(
        cone_total,
        cone_total_grad,
        s0,
        lambda s: np.maximum(s, 0.0),
        inner_tol,
        max_iter,
    )
    return float(f), A @ s


@dataclass
class ProxReport:
    max_jacobian_asymmetry: float
    max_expansion: float
    min_eigenvalue: float
    max_eigenvalue: float


def _fd_jacobian(f, z, h=1e-5):
    m = z.shape[0]
    J = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = h
        J[:, j] = (f(z + e) - f(z - e)) / (2.0 * h)
    return J


def prox_characterization_check(p, cfg, samples=20, seed=0, scale=1.0):
    """Sampled test that the unit layer is the gradient of a convex function
    and nonexpansive, which together make it a proximal operator.

    The Jacobian is taken by central differences (step 1e-5) so the check does
    not rely on any analytic derivative. Expansion ratios are measured on
    random far pairs and on nearby pairs.
    """
    rng = np.random.default_rng(seed)
    m = p.hidden_dim
    x = rng.standard_normal(p.input_dim)

    def f(z):
        return unit_forward(p, cfg, z, x)

    asym, expansion = 0.0, 0.0
    lo, hi = np.inf, -np.inf
    for _ in range(samples):
        z = scale * rng.standard_normal(m)
        J = _fd_jacobian(f, z)
        asym = max(asym, float(np.max(np.abs(J - J.T))))
        eig = np.linalg.eigvalsh(0.5 * (J + J.T))
        lo, hi = min(lo, eig[0]), max(hi, eig[-1])
        for d in (scale * rng.standard_normal(m), 1e-3 * rng.standard_normal(m)):
            y2 = z + d
            den = np.linalg.norm(d)
            if den > 0:
                expansion = max(expansion, float(np.linalg.norm(f(y2) - f(z)) / den))
    return ProxReport(asym, expansion, float(lo), float(hi))
