"""Losses, gradients and SGD for deep OptEq models.

Two gradient paths are provided:

* unrolled: ``K`` solver steps recorded on the autodiff tape and swept in
  reverse;
* implicit (IFT): solve the equilibrium, solve the adjoint linear fixed
  point ``v = J_T^T v + dl/dz``, then contract ``v`` with the parameter
  derivatives of ``T``.

The implicit path uses hand-written, matrix-free vector-Jacobian products of
the averaged layer. The same products also give an explicit reverse sweep
through the unrolled iteration, which serves as an independent check of the
tape. Batches hold one sample per column.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .deepnet import Extractor, forward_map
from .regularizers import grad_expression, reg_value
from .solvers import SamSchedule, _check_reg, picard_solve, relative_residual
from .tensors import ConvergenceError, spectral_project
from .unitlayer import LayerParams

__all__ = [
    "LossSpec",
    "Batch",
    "GradientBundle",
    "LrSchedule",
    "EpochRecord",
    "TrainingLog",
    "TrainingDiverged",
    "params_of",
    "with_params",
    "loss_value",
    "unrolled_forward",
    "unrolled_loss",
    "equilibrium_loss",
    "unrolled_loss_and_grad",
    "explicit_unrolled_grad",
    "ift_loss_and_grad",
    "finite_diff_grad",
    "layer_vjp",
    "kronecker_layer_jacobians",
    "sgd_train",
    "relative_difference",
    "METRICS_COLUMNS",
]

METRICS_COLUMNS = ("epoch", "split", "loss", "residual_mean", "reg_value", "lr", "wallclock_ms")
FD_PARAM_LIMIT = 10_000
DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class LossSpec:
    kind: str = "squared"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("squared", "softmax_cross_entropy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class Batch:
    """``x0`` is ``input_dim x B``; ``y`` is ``output_dim x B`` for squared
    loss or an integer label vector of length ``B`` for cross-entropy."""

    x0: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        single = self.x0.ndim == 1
        if single:
            self.x0 = self.x0[:, None]
        self.y = np.asarray(self.y)
        if self.y.dtype.kind == "f" and self.y.ndim == 1:
            # one sample's target vector, or one output row across the batch
            self.y = self.y[:, None] if single else self.y[None, :]
        if self.size == 0:
            raise ValueError("batch is empty")
        n = self.y.shape[-1] if self.y.ndim == 2 else self.y.shape[0]
        if n != self.size:
            raise ValueError(f"x0 has {self.size} samples but y has {n}")

    @property
    def size(self):
        return self.x0.shape[1]

    def subset(self, idx):
        y = self.y[:, idx] if self.y.ndim == 2 else self.y[idx]
        return Batch(self.x0[:, idx], y)


@dataclass
class GradientBundle:
    """Arrays shaped like the model parameters: ``W0``, per-layer
    ``(W, U, b)`` and the readout."""

    W0: np.ndarray
    layers: list
    readout: np.ndarray

    def arrays(self):
        out = [self.W0]
        for trio in self.layers:
            out.extend(trio)
        out.append(self.readout)
        return out

    def names(self):
        out = ["W0"]
        for i in range(len(self.layers)):
            out += [f"layers[{i}].W", f"layers[{i}].U", f"layers[{i}].b"]
        out.append("readout")
        return out

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        pieces, i = [], 0
        for a in self.arrays():
            pieces.append(vec[i:i + a.size].reshape(a.shape))
            i += a.size
        if i != vec.size:
            raise ValueError("vector length does not match the bundle")
        return _bundle_from_list(pieces, len(self.layers))

    def map(self, fn, other=None):
        if other is None:
            vals = [fn(a) for a in self.arrays()]
        else:
            vals = [fn(a, b) for a, b in zip(self.arrays(), other.arrays())]
        return _bundle_from_list(vals, len(self.layers))

    def __add__(self, other):
        return self.map(np.add, other)

    def scaled(self, s):
        return self.map(lambda a: s * a)

    def norm(self):
        return float(np.linalg.norm(self.flat()))

    def all_finite(self):
        return bool(np.all(np.isfinite(self.flat())))


def _bundle_from_list(vals, L):
    layers = [tuple(vals[1 + 3 * i:4 + 3 * i]) for i in range(L)]
    return GradientBundle(vals[0], layers, vals[-1])


def relative_difference(a, b):
    """``||a - b|| / max(||b||, tiny)`` over flattened bundles."""
    fa, fb = a.flat(), b.flat()
    return float(np.linalg.norm(fa - fb) / max(np.linalg.norm(fb), 1e-300))


def params_of(model):
    return GradientBundle(
        model.extractor.W0,
        [(p.W, p.U, p.b) for p in model.layers],
        model.readout_W,
    )


def with_params(model, bundle):
    layers = tuple(LayerParams(W, U, b) for W, U, b in bundle.layers)
    return replace(
        model,
        extractor=Extractor(bundle.W0, model.extractor.nonlinearity),
        layers=layers,
        readout_W=bundle.readout,
    )


# ----------------------------------------------------------------- losses

def _per_sample_loss(yhat, y, kind):
    if kind == "squared":
        d = yhat - y
        return 0.5 * np.sum(d * d, axis=0)
    mx = yhat.max(axis=0)
    lse = np.log(np.sum(np.exp(yhat - mx), axis=0)) + mx
    return lse - yhat[y.astype(int), np.arange(yhat.shape[1])]


def _loss_output_grad(yhat, y, kind):
    B = yhat.shape[1]
    if kind == "squared":
        return (yhat - y) / B
    e = np.exp(yhat - yhat.max(axis=0))
    soft = e / e.sum(axis=0)
    soft[y.astype(int), np.arange(B)] -= 1.0
    return soft / B


def _check_finite(per_sample):
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise FloatingPointError(f"non-finite loss for sample {int(bad[0])}")


def _weight_decay(model, xi):
    if xi == 0:
        return 0.0
    return xi * float(sum(np.sum(a * a) for a in params_of(model).arrays()))


def loss_value(model, Z, batch, loss):
    """Mean data loss of equilibrium features ``Z`` plus weight decay."""
    per = _per_sample_loss(model.readout_W @ Z, batch.y, loss.kind)
    _check_finite(per)
    return float(np.mean(per)) + _weight_decay(model, loss.weight_decay)


# ------------------------------------------------------------ numpy forward

def _features(model, x0):
    return model.extractor(x0)


def unrolled_forward(model, x, reg, sched, K, z0=None):
    """``K`` SAM (or Picard, when ``reg`` is None) steps on the batch."""
    from .solvers import sam_solve

    start = np.zeros((model.hidden_dim, x.shape[1])) if z0 is None else z0
    return sam_solve(lambda z: forward_map(model, z, x), reg, sched, start, K,
                     allow_nonconvex=True)


def unrolled_loss(model, batch, reg, sched, K, loss):
    x = _features(model, batch.x0)
    rep = unrolled_forward(model, x, reg, sched, K)
    return loss_value(model, rep.z_star, batch, loss)


def equilibrium_loss(model, batch, loss, tol=1e-12, max_iter=100_000):
    x = _features(model, batch.x0)
    rep = picard_solve(lambda z: forward_map(model, z, x),
                       np.zeros((model.hidden_dim, batch.size)), tol, max_iter)
    if not rep.converged:
        raise ConvergenceError("forward solve did not converge", rep.z_star, rep.iterations)
    return loss_value(model, rep.z_star, batch, loss)


# ------------------------------------------------------------- tape forward

def _tape_structural(reg, gamma, z):
    if reg.kind == "l1":
        return ad.soft_threshold(z, gamma * reg.lam)
    if reg.kind == "squared_l2":
        t = gamma * reg.lam
        if reg.center is None:
            return z / (1.0 + t)
        c = np.asarray(reg.center)[:, None]
        return (z + t * c) / (1.0 + t)
    return z - gamma * grad_expression(reg, z)


def _tape_T(model, layer_nodes, z, x):
    act, alpha, mu = model.activation, model.alpha, model.mu
    for W, U, b in layer_nodes:
        a = W @ z + U @ x + b.reshape(-1, 1)
        out = (W.T @ ad.activation(act, a)) / mu
        z = out if alpha == 1.0 else alpha * out + (1.0 - alpha) * z
    if model.structural is not None:
        reg, gamma = model.structural
        z = _tape_structural(reg, gamma, z)
    return z


def _validate_sam(reg, sched, allow_nonconvex):
    if reg is None:
        return
    if sched is None:
        raise ValueError("a regularizer needs a SamSchedule")
    sched.validate()
    _check_reg(reg, sched, allow_nonconvex)


def unrolled_loss_and_grad(model, batch, reg=None, sched=None, K=20, loss=LossSpec(),
                           allow_nonconvex=False):
    """Loss of the ``K``-step iterate and its exact gradient by reverse mode."""
    if K < 1:
        raise ValueError("K must be >= 1")
    _validate_sam(reg, sched, allow_nonconvex)
    W0 = ad.variable(model.extractor.W0)
    layer_nodes = [(ad.variable(p.W), ad.variable(p.U), ad.variable(p.b)) for p in model.layers]
    R = ad.variable(model.readout_W)
    x = W0 @ ad.constant(batch.x0)
    if model.extractor.nonlinearity == "tanh":
        x = ad.tanh(x)
    z = ad.constant(np.zeros((model.hidden_dim, batch.size)))
    gamma = sched.step if reg is not None else 0.0
    for k in range(1, K + 1):
        Tz = _tape_T(model, layer_nodes, z, x)
        if reg is None:
            z = Tz
            continue
        beta, lam = sched.beta(k), sched.lam(k)
        S = (1.0 - gamma * lam) * z - gamma * grad_expression(reg, z)
        z = beta * S + (1.0 - beta) * Tz
    yhat = R @ z
    if loss.kind == "squared":
        d = yhat - ad.constant(batch.y)
        per = (d * d).sum(axis=0) * 0.5
    else:
        labels = batch.y.astype(int)
        per = ad.logsumexp(yhat, axis=0) - yhat[labels, np.arange(batch.size)]
    _check_finite(per.value)
    data = per.sum() / batch.size
    leaves = [W0] + [n for trio in layer_nodes for n in trio] + [R]
    grads = ad.grad(data, leaves)
    bundle = _bundle_from_list(grads, model.depth)
    value = float(data.value) + _weight_decay(model, loss.weight_decay)
    if loss.weight_decay:
        bundle = bundle + params_of(model).scaled(2.0 * loss.weight_decay)
    return value, bundle


# ---------------------------------------------------------- explicit VJPs

def layer_vjp(p, model, z, x, u, need_params=True):
    """Vector-Jacobian products of ``f(z) = alpha W^T sigma(W z + U x + b)/mu + (1-alpha) z``.

    ``u`` is the cotangent of the output. Returns ``(dz, dW, dU, db, dx)``;
    the parameter terms are ``None`` when ``need_params`` is false.
    """
    s = model.alpha / model.mu
    a = p.W @ z + p.U @ x + p.b[:, None]
    D = model.activation.derivative(a)
    delta = D * (p.W @ u)
    dz = s * (p.W.T @ delta) + (1.0 - model.alpha) * u
    if not need_params:
        return dz, None, None, None, None
    G = model.activation(a)
    dW = s * (G @ u.T + delta @ z.T)
    dU = s * (delta @ x.T)
    db = s * delta.sum(axis=1)
    dx = s * (p.U.T @ delta)
    return dz, dW, dU, db, dx


def _reg_hvp(reg, z, u):
    if reg.kind == "squared_l2":
        return reg.lam * u
    if reg.kind == "inverse_norm":
        s = np.sum(z * z, axis=0) + reg.eps
        zu = np.sum(z * u, axis=0)
        return -2.0 * u / s ** 2 + 8.0 * z * (zu / s ** 3)
    raise NotImplementedError(f"no Hessian-vector product for {reg.kind!r}")


def _structural_vjp(reg, gamma, z, u):
    if reg.kind == "l1":
        return u * (np.abs(z) > gamma * reg.lam)
    if reg.kind == "squared_l2":
        return u / (1.0 + gamma * reg.lam)
    return u - gamma * _reg_hvp(reg, z, u)


def _T_vjp(model, z, x, u, need_params=True):
    cfg = model.layer_config
    from .unitlayer import averaged_forward

    inputs = [z]
    for p in model.layers[:-1]:
        inputs.append(averaged_forward(p, cfg, inputs[-1], x))
    if model.structural is not None:
        reg, gamma = model.structural
        last = averaged_forward(model.layers[-1], cfg, inputs[-1], x)
        u = _structural_vjp(reg, gamma, last, u)
    layer_grads = [None] * model.depth
    dx = np.zeros_like(x)
    for l in range(model.depth - 1, -1, -1):
        u, dW, dU, db, dxl = layer_vjp(model.layers[l], model, inputs[l], x, u, need_params)
        if need_params:
            layer_grads[l] = (dW, dU, db)
            dx = dx + dxl
    return u, layer_grads, dx


def _extractor_grad(model, x0, x, dx):
    if model.extractor.nonlinearity == "tanh":
        dx = dx * (1.0 - x * x)
    return dx @ x0.T


def _finish_bundle(model, batch, x, Z, layer_grads, dx, gy, loss):
    bundle = GradientBundle(
        _extractor_grad(model, batch.x0, x, dx),
        layer_grads,
        gy @ Z.T,
    )
    if loss.weight_decay:
        bundle = bundle + params_of(model).scaled(2.0 * loss.weight_decay)
    return bundle


def explicit_unrolled_grad(model, batch, reg=None, sched=None, K=20, loss=LossSpec()):
    """Gradient of the ``K``-step loss by a hand-written reverse sweep.

    Independent of the autodiff tape; supports ``reg`` in
    {None, squared_l2, inverse_norm}.
    """
    x = _features(model, batch.x0)
    zs = [np.zeros((model.hidden_dim, batch.size))]
    gamma = sched.step if reg is not None else 0.0
    for k in range(1, K + 1):
        z = zs[-1]
        Tz = forward_map(model, z, x)
        if reg is None:
            zs.append(Tz)
            continue
        beta, lam = sched.beta(k), sched.lam(k)
        S = (1.0 - gamma * lam) * z - gamma * grad_expression(reg, z)
        zs.append(beta * S + (1.0 - beta) * Tz)
    Z = zs[-1]
    yhat = model.readout_W @ Z
    per = _per_sample_loss(yhat, batch.y, loss.kind)
    _check_finite(per)
    gy = _loss_output_grad(yhat, batch.y, loss.kind)
    u = model.readout_W.T @ gy
    acc = [(np.zeros_like(p.W), np.zeros_like(p.U), np.zeros_like(p.b)) for p in model.layers]
    dx = np.zeros_like(x)
    for k in range(K, 0, -1):
        z = zs[k - 1]
        beta = sched.beta(k) if reg is not None else 0.0
        dz_T, lg, dxk = _T_vjp(model, z, x, (1.0 - beta) * u)
        acc = [tuple(a + g for a, g in zip(A, G)) for A, G in zip(acc, lg)]
        dx = dx + dxk
        if reg is None:
            u = dz_T
        else:
            lam = sched.lam(k)
            u = dz_T + beta * ((1.0 - gamma * lam) * u - gamma * _reg_hvp(reg, z, u))
    value = float(np.mean(per)) + _weight_decay(model, loss.weight_decay)
    return value, _finish_bundle(model, batch, x, Z, acc, dx, gy, loss)


def ift_loss_and_grad(model, batch, tol_fwd=1e-10, tol_adj=1e-10, loss=LossSpec(),
                      max_iter=100_000):
    """Loss at the equilibrium and its implicit-function-theorem gradient.

    Returns ``(loss, gradient, forward_report)``.
    """
    x = _features(model, batch.x0)
    z0 = np.zeros((model.hidden_dim, batch.size))
    rep = picard_solve(lambda z: forward_map(model, z, x), z0, tol_fwd, max_iter)
    if not rep.converged:
        raise ConvergenceError(
            f"forward solve stopped at residual {rep.residual:.3e} (tol {tol_fwd})",
            last_iterate=rep,
            iterations=rep.iterations,
        )
    Z = rep.z_star
    yhat = model.readout_W @ Z
    per = _per_sample_loss(yhat, batch.y, loss.kind)
    _check_finite(per)
    gy = _loss_output_grad(yhat, batch.y, loss.kind)
    g = model.readout_W.T @ gy
    v = g.copy()
    for it in range(1, max_iter + 1):
        v_new = _T_vjp(model, Z, x, v, need_params=False)[0] + g
        change = np.linalg.norm(v_new - v) / max(np.linalg.norm(v_new), 1.0)
        v = v_new
        if change <= tol_adj:
            break
    else:
        raise ConvergenceError(
            f"adjoint solve did not reach {tol_adj} in {max_iter} iterations",
            last_iterate=rep,
            iterations=max_iter,
        )
    _, layer_grads, dx = _T_vjp(model, Z, x, v)
    value = float(np.mean(per)) + _weight_decay(model, loss.weight_decay)
    return value, _finish_bundle(model, batch, x, Z, layer_grads, dx, gy, loss), rep


def kronecker_layer_jacobians(p, model, Z, X):
    """Dense Jacobians of ``vec(f(Z))`` w.r.t. ``vec(W)``, ``vec(U)``, ``vec(b)``.

    ``vec`` stacks columns. Built from Kronecker products and the commutation
    matrix, so only usable at tiny sizes; meant to cross-check
    :func:`layer_vjp`.
    """
    n, m = p.W.shape
    N = Z.shape[1]
    s = model.alpha / model.mu
    A = p.W @ Z + p.U @ X + p.b[:, None]
    G = model.activation(A)
    Dg = np.diag(model.activation.derivative(A).ravel(order="F"))
    comm = np.zeros((n * m, n * m))
    for i in range(n):
        for j in range(m):
            # vec(W)[i + j n] -> vec(W^T)[j + i m]
            comm[j + i * m, i + j * n] = 1.0
    left = np.kron(np.eye(N), p.W.T) @ Dg
    JW = s * (np.kron(G.T, np.eye(m)) @ comm + left @ np.kron(Z.T, np.eye(n)))
    JU = s * (left @ np.kron(X.T, np.eye(n)))
    Jb = s * (left @ np.kron(np.ones((N, 1)), np.eye(n)))
    return JW, JU, Jb


def finite_diff_grad(model, batch, loss=LossSpec(), step=1e-5, objective=None):
    """Central differences of ``objective(model)`` coordinate by coordinate.

    The default objective is the 20-step Picard loss.
    """
    if objective is None:
        def objective(mdl):
            return unrolled_loss(mdl, batch, None, None, 20, loss)
    base = params_of(model)
    theta = base.flat()
    if theta.size > FD_PARAM_LIMIT:
        raise ValueError(f"{theta.size} parameters exceed the finite-difference limit {FD_PARAM_LIMIT}")
    g = np.empty_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += step
        tm = theta.copy()
        tm[i] -= step
        fp = objective(with_params(model, base.unflatten(tp)))
        fm = objective(with_params(model, base.unflatten(tm)))
        g[i] = (fp - fm) / (2.0 * step)
    return base.unflatten(g)


# ----------------------------------------------------------------- training

@dataclass(frozen=True)
class LrSchedule:
    """Step decay: ``initial * 0.5 ** (epoch // halve_every)``; 0 disables halving."""

    initial: float = 0.1
    halve_every: int = 30

    def __call__(self, epoch):
        if self.halve_every <= 0:
            return self.initial
        return self.initial * 0.5 ** (epoch // self.halve_every)


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    residual_mean: float
    reg_value: float
    lr: float
    wallclock_ms: float

    def row(self):
        return [
            str(self.epoch), self.split, repr(float(self.loss)), repr(float(self.residual_mean)),
            repr(float(self.reg_value)), repr(float(self.lr)), repr(float(self.wallclock_ms)),
        ]


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    model: object = None

    def losses(self, split="train"):
        return [r.loss for r in self.records if r.split == split]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()


class TrainingDiverged(RuntimeError):
    def __init__(self, message, log):
        super().__init__(message)
        self.log = log


def _evaluate(model, data, mode, reg, sched, K, loss, tol_fwd):
    x = _features(model, data.x0)
    if mode == "unrolled":
        rep = unrolled_forward(model, x, reg, sched, K)
    else:
        rep = picard_solve(lambda z: forward_map(model, z, x),
                           np.zeros((model.hidden_dim, data.size)), tol_fwd, 100_000)
    Z = rep.z_star
    per = _per_sample_loss(model.readout_W @ Z, data.y, loss.kind)
    value = float(np.mean(per)) + _weight_decay(model, loss.weight_decay)
    rv = reg_value(reg, Z) / data.size if reg is not None else 0.0
    return value, relative_residual(Z, forward_map(model, Z, x)), rv


def sgd_train(model, dataset, epochs, lr_schedule=LrSchedule(), loss=LossSpec(),
              mode="unrolled", batch_size=None, reg=None, sched=None, K=20,
              project=True, projection_bound=1.0, seed=0, tol_fwd=1e-8, tol_adj=1e-8,
              allow_nonconvex=False, record_wallclock=False, metrics_path=None,
              val_dataset=None):
    """Minibatch SGD with weight decay.

    Every epoch appends a ``train`` record (and a ``val`` record when a
    validation set is given); epoch 0 records the initial model. With
    ``project`` each ``W_l`` is rescaled back into the spectral ball after
    every step. Raises :class:`TrainingDiverged` if the loss exceeds 1e6 or
    stops being finite.
    """
    if mode not in ("unrolled", "ift"):
        raise ValueError(f"unknown training mode {mode!r}")
    if lr_schedule.initial < 0:
        raise ValueError("learning rate must be >= 0")
    _validate_sam(reg, sched, allow_nonconvex)
    if reg is not None and mode == "ift":
        raise ValueError("SAM regularization applies to unrolled training only")
    rng = np.random.default_rng(seed)
    n = dataset.size
    bs = n if batch_size is None else int(batch_size)
    if bs < 1:
        raise ValueError("batch_size must be >= 1")
    log = TrainingLog()
    t0 = time.perf_counter()
    sink = open(metrics_path, "w", encoding="utf-8", newline="") if metrics_path else None
    writer = csv.writer(sink, lineterminator="\n") if sink else None
    if writer:
        writer.writerow(METRICS_COLUMNS)

    def record(epoch, lr):
        splits = [("train", dataset)] + ([("val", val_dataset)] if val_dataset is not None else [])
        for name, data in splits:
            value, res, rv = _evaluate(model, data, mode, reg, sched, K, loss, tol_fwd)
            ms = (time.perf_counter() - t0) * 1e3 if record_wallclock else 0.0
            rec = EpochRecord(epoch, name, value, res, rv, lr, ms)
            log.records.append(rec)
            if writer:
                writer.writerow(rec.row())
                sink.flush()
            if name == "train" and (not math.isfinite(value) or value > DIVERGENCE_LOSS):
                log.model = model
                raise TrainingDiverged(f"loss {value:.3e} at epoch {epoch}", log)

    try:
        record(0, lr_schedule(0))
        for epoch in range(1, epochs + 1):
            lr = lr_schedule(epoch - 1)
            order = rng.permutation(n) if bs < n else np.arange(n)
            for start in range(0, n, bs):
                mb = dataset.subset(order[start:start + bs])
                if mode == "unrolled":
                    _, g = unrolled_loss_and_grad(model, mb, reg, sched, K, loss, allow_nonconvex)
                else:
                    _, g, _ = ift_loss_and_grad(model, mb, tol_fwd, tol_adj, loss)
                if lr == 0:
                    continue
                theta = params_of(model).map(lambda a, b: a - lr * b, g)
                if project:
                    theta.layers = [(spectral_project(W, projection_bound), U, b)
                                    for W, U, b in theta.layers]
                model = with_params(model, theta)
            record(epoch, lr)
    finally:
        if sink:
            sink.close()
    log.model = model
    return log
