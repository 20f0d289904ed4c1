"""Seeded synthetic datasets. Samples are columns of ``x0``."""

from __future__ import annotations

import numpy as np

from .activations import Activation
from .deepnet import predict, random_model
from .training import Batch

__all__ = ["GENERATORS", "make_dataset", "gaussian_blobs", "two_moons", "planted_regression"]


def gaussian_blobs(n=64, classes=2, dim=2, spread=1.0, separation=3.0, seed=0):
    """Balanced classes (label ``i % classes``) around seeded Gaussian centers."""
    if classes < 2 or n < classes:
        raise ValueError("need classes >= 2 and n >= classes")
    rng = np.random.default_rng(seed)
    centers = separation * rng.standard_normal((classes, dim))
    labels = np.arange(n) % classes
    x0 = centers[labels].T + spread * rng.standard_normal((dim, n))
    return Batch(x0, labels)


def two_moons(n=200, noise=0.1, seed=0):
    """Two interleaved half circles; the first ``ceil(n/2)`` samples are class 0."""
    rng = np.random.default_rng(seed)
    n0 = n - n // 2
    n1 = n // 2
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.vstack([np.cos(t0), np.sin(t0)])
    lower = np.vstack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x0 = np.hstack([upper, lower]) + noise * rng.standard_normal((2, n))
    labels = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    return Batch(x0, labels)


def planted_regression(n=64, input_dim=96, teacher_hidden=8, teacher_features=4,
                       output_dim=1, activation="leaky_relu", noise=0.0,
                       teacher_norm=0.5, seed=0, tol=1e-12):
    """Targets from a hidden teacher OptEq, so zero loss is attainable.

    Returns ``(batch, teacher)``; the teacher reproduces the noiseless targets
    exactly when evaluated with the same solver tolerance.
    """
    act = Activation.from_config(activation)
    rng = np.random.default_rng(seed)
    teacher = random_model(1, teacher_hidden, teacher_features, input_dim, output_dim,
                           alpha=1.0, activation=act, seed=int(rng.integers(2**31)),
                           layer_norm=teacher_norm)
    x0 = rng.standard_normal((input_dim, n))
    y, _ = predict(teacher, x0, tol=tol, max_iter=100_000)
    if noise:
        y = y + noise * rng.standard_normal(y.shape)
    return Batch(x0, y), teacher


def _planted(seed=0, **params):
    return planted_regression(seed=seed, **params)[0]


GENERATORS = {
    "gaussian_blobs": gaussian_blobs,
    "two_moons": two_moons,
    "planted_regression": _planted,
}


def make_dataset(generator, params=None, seed=0):
    if generator not in GENERATORS:
        raise ValueError(f"unknown dataset generator {generator!r}; expected one of {sorted(GENERATORS)}")
    return GENERATORS[generator](seed=seed, **(params or {}))
