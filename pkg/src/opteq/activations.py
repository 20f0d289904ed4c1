"""Monotone Lipschitz activations and their potentials.

Each activation carries its derivative, the antiderivative
``sigma_tilde(a) = int_0^a sigma(t) dt`` and, for the piecewise-linear
family, the convex conjugate of that antiderivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Activation", "KINDS", "relu", "leaky_relu", "tanh", "sigmoid_shifted"]

KINDS = ("relu", "leaky_relu", "tanh", "sigmoid_shifted")
_LOG2 = np.log(2.0)


@dataclass(frozen=True)
class Activation:
    """Elementwise activation.

    ``slope`` is only used by ``leaky_relu``. ``sigmoid_shifted`` is
    ``1/(1+exp(-a)) - 1/2`` so that it passes through the origin.
    """

    kind: str = "relu"
    slope: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "leaky_relu" and not self.slope >= 0.0:
            raise ValueError("leaky_relu slope must be >= 0 to stay monotone")

    @classmethod
    def from_config(cls, spec):
        """Build from a kind string or a ``{"kind": ..., "slope": ...}`` mapping."""
        if isinstance(spec, Activation):
            return spec
        if isinstance(spec, str):
            return cls(spec, 0.1 if spec == "leaky_relu" else 0.0)
        return cls(spec["kind"], float(spec.get("slope", 0.0)))

    def to_config(self):
        if self.kind == "leaky_relu":
            return {"kind": self.kind, "slope": self.slope}
        return {"kind": self.kind}

    @property
    def lipschitz(self):
        if self.kind == "leaky_relu":
            return max(1.0, self.slope)
        if self.kind == "sigmoid_shifted":
            return 0.25
        return 1.0

    @property
    def has_conjugate(self):
        return self.kind in ("relu", "leaky_relu")

    def __call__(self, a):
        return self.apply(a)

    def apply(self, a):
        a = np.asarray(a, dtype=np.float64)
        k = self.kind
        if k == "relu":
            return np.maximum(a, 0.0)
        if k == "leaky_relu":
            return np.where(a > 0.0, a, self.slope * a)
        if k == "tanh":
            return np.tanh(a)
        return 0.5 * np.tanh(0.5 * a)

    def derivative(self, a):
        # Kinks take the lower one-sided slope: relu'(0) = 0, leaky'(0) = slope.
        a = np.asarray(a, dtype=np.float64)
        k = self.kind
        if k == "relu":
            return (a > 0.0).astype(np.float64)
        if k == "leaky_relu":
            return np.where(a > 0.0, 1.0, self.slope)
        if k == "tanh":
            return 1.0 - np.tanh(a) ** 2
        t = np.tanh(0.5 * a)
        return 0.25 * (1.0 - t * t)

    def antiderivative(self, a):
        a = np.asarray(a, dtype=np.float64)
        k = self.kind
        if k == "relu":
            return 0.5 * np.maximum(a, 0.0) ** 2
        if k == "leaky_relu":
            return 0.5 * np.maximum(a, 0.0) ** 2 + 0.5 * self.slope * np.minimum(a, 0.0) ** 2
        if k == "tanh":
            # log cosh(a), stable for large |a|
            x = np.abs(a)
            return x + np.log1p(np.exp(-2.0 * x)) - _LOG2
        # softplus(a) - log 2 - a/2 = log cosh(a/2)
        x = np.abs(0.5 * a)
        return x + np.log1p(np.exp(-2.0 * x)) - _LOG2

    def conjugate_antiderivative(self, x):
        """Convex conjugate of :meth:`antiderivative`, possibly ``+inf``.

        Only the piecewise-linear kinds have an elementary form. For relu the
        value at ``x = 0`` is 0 (the closed, lower-semicontinuous conjugate).
        """
        if not self.has_conjugate:
            raise ValueError(f"no closed-form conjugate for activation {self.kind!r}")
        x = np.asarray(x, dtype=np.float64)
        pos = 0.5 * np.maximum(x, 0.0) ** 2
        if self.kind == "relu" or self.slope == 0.0:
            return np.where(x >= 0.0, pos, np.inf)
        return np.where(x >= 0.0, pos, 0.5 * x * x / self.slope)

    def conjugate_derivative(self, x):
        """Derivative of the conjugate on its domain (the inverse map of sigma)."""
        if not self.has_conjugate:
            raise ValueError(f"no closed-form conjugate for activation {self.kind!r}")
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "relu" or self.slope == 0.0:
            return np.where(x >= 0.0, np.maximum(x, 0.0), np.nan)
        return np.where(x >= 0.0, x, x / self.slope)


def relu():
    return Activation("relu")


def leaky_relu(slope=0.1):
    return Activation("leaky_relu", slope)


def tanh():
    return Activation("tanh")


def sigmoid_shifted():
    return Activation("sigmoid_shifted")
