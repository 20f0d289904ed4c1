"""Deep OptEq: a composition of averaged unit layers between an affine
feature extractor and a linear readout.

Besides the forward map this module holds the equivalent views of the
equilibrium: the cyclic multi-block system, the wide one-layer limit and the
convex objectives whose minimizers are the equilibria. It also builds the
factorization that rewrites a feedforward network in OptEq form, and reads
and writes model checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .activations import Activation
from .tensors import as_matrix, block_permutation, orthonormal_complement, svd
from .unitlayer import (
    LayerParams,
    UnitLayerConfig,
    averaged_forward,
    closed_form_potential,
    moreau_envelope,
    phi_closed_form,
    unit_forward,
)

__all__ = [
    "Extractor",
    "DeepOptEqModel",
    "random_model",
    "features",
    "forward_map",
    "readout",
    "predict",
    "block_lift",
    "block_system_residual",
    "wide_map",
    "wide_system_solve",
    "two_block_objective",
    "wide_joint_objective",
    "universal_factorize",
    "feedforward_output",
    "factorized_output",
    "feedforward_as_deep_opteq",
    "model_to_dict",
    "model_from_dict",
    "dumps_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "opteq-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Extractor:
    """``x = W0 x0``, optionally followed by an elementwise ``tanh``."""

    W0: np.ndarray
    nonlinearity: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "W0", as_matrix(self.W0, "W0"))
        if self.nonlinearity not in ("none", "tanh"):
            raise ValueError(f"unknown extractor nonlinearity {self.nonlinearity!r}")

    def __call__(self, x0):
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape[0] != self.W0.shape[1]:
            raise ValueError(f"x0 has dimension {x0.shape[0]}, expected {self.W0.shape[1]}")
        x = self.W0 @ x0
        return np.tanh(x) if self.nonlinearity == "tanh" else x


@dataclass(frozen=True, eq=False)
class DeepOptEqModel:
    """Parameters of a deep OptEq.

    ``structural`` optionally holds ``(regularizer, gamma)``; when set the
    forward map is followed by the regularizer's shrinkage step.
    """

    extractor: Extractor
    layers: tuple
    alpha: float
    activation: Activation
    readout_W: np.ndarray
    mu: float = 1.0
    structural: Optional[tuple] = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        m = layers[0].hidden_dim
        d = self.extractor.W0.shape[0]
        for i, p in enumerate(layers):
            if p.hidden_dim != m:
                raise ValueError(f"layer {i + 1} has hidden dim {p.hidden_dim}, expected {m}")
            if p.input_dim != d:
                raise ValueError(f"layer {i + 1} has input dim {p.input_dim}, expected {d}")
        R = as_matrix(self.readout_W, "readout_W")
        if R.shape[1] != m:
            raise ValueError(f"readout has {R.shape[1]} columns, expected hidden dim {m}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "readout_W", R)
        # raises on invalid alpha / mu
        UnitLayerConfig(self.mu, self.alpha, self.activation)

    @property
    def depth(self):
        return len(self.layers)

    @property
    def hidden_dim(self):
        return self.layers[0].hidden_dim

    @property
    def feature_dim(self):
        return self.extractor.W0.shape[0]

    @property
    def input_dim(self):
        return self.extractor.W0.shape[1]

    @property
    def output_dim(self):
        return self.readout_W.shape[0]

    @property
    def layer_config(self):
        return UnitLayerConfig(self.mu, self.alpha, self.activation)

    def with_layers(self, layers):
        return replace(self, layers=tuple(layers))


def random_model(depth, hidden, feature_dim, input_dim, output_dim, alpha=1.0,
                 activation=None, seed=0, layer_norm=0.9, width=None,
                 extractor_nonlinearity="none", square=True):
    """Seeded model with every ``||W_l||_2 = layer_norm``.

    With ``square`` (the default) each ``W_l`` is ``hidden x hidden``; else
    its row count is ``width``.
    """
    rng = np.random.default_rng(seed)
    act = activation if activation is not None else Activation()
    n = hidden if (square or width is None) else width
    layers = []
    for _ in range(depth):
        W = rng.standard_normal((n, hidden))
        W *= layer_norm / np.linalg.norm(W, 2)
        U = rng.standard_normal((n, feature_dim)) / np.sqrt(feature_dim)
        b = 0.1 * rng.standard_normal(n)
        layers.append(LayerParams(W, U, b))
    W0 = rng.standard_normal((feature_dim, input_dim)) / np.sqrt(input_dim)
    R = rng.standard_normal((output_dim, hidden)) / np.sqrt(hidden)
    return DeepOptEqModel(Extractor(W0, extractor_nonlinearity), tuple(layers), alpha, act, R)


def features(model, x0):
    return model.extractor(x0)


def forward_map(model, z, x):
    """``T(z, x) = f_L o ... o f_1 (z, x)`` (then the structural step, if any)."""
    cfg = model.layer_config
    for p in model.layers:
        z = averaged_forward(p, cfg, z, x)
    if model.structural is not None:
        from .regularizers import structural_step

        reg, gamma = model.structural
        z = structural_step(reg, gamma, z)
    return z


def readout(model, z):
    return model.readout_W @ z


def predict(model, x0, tol=1e-8, max_iter=10_000, z0=None):
    """Equilibrium readout for input ``x0`` by Picard iteration."""
    from .solvers import picard_solve

    x = features(model, x0)
    batch = x.shape[1:] if x.ndim == 2 else ()
    start = np.zeros((model.hidden_dim,) + batch) if z0 is None else z0
    rep = picard_solve(lambda z: forward_map(model, z, x), start, tol, max_iter)
    return readout(model, rep.z_star), rep


def block_lift(model, z_star, x):
    """``[f_1(z0), f_2 f_1(z0), ..., f_{L-1}...f_1(z0), z0]`` as a list of blocks."""
    cfg = model.layer_config
    blocks = []
    z = np.asarray(z_star, dtype=np.float64)
    for p in model.layers[:-1]:
        z = averaged_forward(p, cfg, z, x)
        blocks.append(z)
    blocks.append(np.asarray(z_star, dtype=np.float64))
    return blocks


def _block_matrices(model):
    Ws = [p.W for p in model.layers]
    rows = sum(W.shape[0] for W in Ws)
    m = model.hidden_dim
    Wt = np.zeros((rows, m * model.depth))
    r = 0
    for i, W in enumerate(Ws):
        Wt[r:r + W.shape[0], i * m:(i + 1) * m] = W
        r += W.shape[0]
    Ut = np.vstack([p.U for p in model.layers])
    bt = np.concatenate([p.b for p in model.layers])
    return Wt, Ut, bt


def block_system_residual(model, zt, x):
    """Relative residual of the stacked block equation on ``zt``.

    RHS is ``alpha Wt^T sigma(Wt P zt + Ut x + bt) + (1 - alpha) P zt`` with
    ``Wt`` block diagonal and ``P`` the cyclic block permutation.
    """
    zt = np.concatenate([np.asarray(b, dtype=np.float64) for b in zt])
    m, L = model.hidden_dim, model.depth
    if zt.shape[0] != m * L:
        raise ValueError(f"block vector has length {zt.shape[0]}, expected {m * L}")
    Wt, Ut, bt = _block_matrices(model)
    P = block_permutation(L, m)
    Pz = P @ zt
    a = Wt @ Pz + Ut @ np.asarray(x, dtype=np.float64) + bt
    rhs = model.alpha * Wt.T @ model.activation(a) / model.mu + (1.0 - model.alpha) * Pz
    return float(np.linalg.norm(zt - rhs) / max(np.linalg.norm(zt), 1.0))


def wide_map(model, z, x):
    """``(1/L) sum_l W_l^T sigma(W_l z + U_l x + b_l)``."""
    cfg = UnitLayerConfig(model.mu, 1.0, model.activation)
    return sum(unit_forward(p, cfg, z, x) for p in model.layers) / model.depth


def wide_system_solve(model, x, tol=1e-10, max_iter=100_000, z0=None):
    """Solve ``L z = sum_l W_l^T sigma(W_l z + U_l x + b_l)`` by Picard iteration."""
    from .solvers import picard_solve
    from .tensors import ConvergenceError

    start = np.zeros(model.hidden_dim) if z0 is None else z0
    rep = picard_solve(lambda z: wide_map(model, z, x), start, tol, max_iter)
    if not rep.converged:
        raise ConvergenceError(
            f"wide system residual {rep.residual:.3e} above {tol} after {max_iter} iterations",
            last_iterate=rep.z_star,
            iterations=rep.iterations,
        )
    return rep.z_star


def _require_closed_form(model):
    if model.activation.kind != "relu":
        raise ValueError("objective needs relu layers (closed-form phi)")
    if model.mu != 1.0:
        raise ValueError("objective needs mu = 1")
    for i, p in enumerate(model.layers):
        if p.W.shape[0] != p.W.shape[1]:
            raise ValueError(f"layer {i + 1} has non-square W; closed-form phi unavailable")


def two_block_objective(model, z1, z0, x, inner_tol=1e-10):
    """``alpha M_{phi_1}^{1-alpha}(z1) + alpha M_{phi_2}^{1-alpha}(z0) + ||z1 - z0||^2/2``.

    The minimizer over ``(z1, z0)`` is the lifted two-layer equilibrium.
    """
    if model.depth != 2:
        raise ValueError("two_block_objective needs exactly two layers")
    if not model.alpha < 1.0:
        raise ValueError("two_block_objective needs alpha < 1")
    _require_closed_form(model)
    cfg = UnitLayerConfig(1.0, 1.0, model.activation)
    mu = 1.0 - model.alpha
    total = 0.0
    for p, z in zip(model.layers, (z1, z0)):
        phi = closed_form_potential(p, cfg, x)
        val, _ = moreau_envelope(phi, mu, z, inner_tol=inner_tol)
        total += model.alpha * val
    d = np.asarray(z1) - np.asarray(z0)
    return float(total + 0.5 * d @ d)


def wide_joint_objective(model, xs, y, x):
    """``sum_l phi_l(x_l) + ||x_l - y||^2 / 2``; the minimizing ``y`` solves the wide system."""
    if len(xs) != model.depth:
        raise ValueError(f"need {model.depth} points, got {len(xs)}")
    _require_closed_form(model)
    cfg = UnitLayerConfig(1.0, 1.0, model.activation)
    y = np.asarray(y, dtype=np.float64)
    total = 0.0
    for p, xl in zip(model.layers, xs):
        xl = np.asarray(xl, dtype=np.float64)
        total += phi_closed_form(p, cfg, xl, x) + 0.5 * float((xl - y) @ (xl - y))
    return float(total)


def _complement_basis(V, seed):
    # orthonormal basis of the orthogonal complement of range(V)
    m, n = V.shape
    G = orthonormal_complement(m, m - n, seed) if m > n else np.zeros((m, 0))
    G = G - V @ (V.T @ G)
    G = G - V @ (V.T @ G)
    Q, R = np.linalg.qr(G)
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


def universal_factorize(W_seq, m, seed=0):
    """Factor ``W_k = Wbar_k Wbar_{k-1}^T`` for a chain of weight matrices.

    ``W_seq[k-1]`` is ``W_k`` with shape ``n_k x n_{k-1}``. Returns
    ``[Wbar_0, ..., Wbar_L]`` with ``Wbar_k`` of shape ``n_k x m``, each of
    full row rank. Requires ``m >= 2 max n_k``.
    """
    Ws = [as_matrix(W, f"W_{k + 1}") for k, W in enumerate(W_seq)]
    if not Ws:
        raise ValueError("need at least one matrix")
    for k in range(1, len(Ws)):
        if Ws[k].shape[1] != Ws[k - 1].shape[0]:
            raise ValueError(
                f"W_{k + 1} has {Ws[k].shape[1]} columns, expected {Ws[k - 1].shape[0]}"
            )
    widths = [Ws[0].shape[1]] + [W.shape[0] for W in Ws]
    if m < 2 * max(widths):
        raise ValueError(f"width m={m} must be at least 2*max(n_k)={2 * max(widths)}")

    A = orthonormal_complement(m, widths[0], seed).T
    out = [A]
    for k, W in enumerate(Ws, start=1):
        U, S, V = svd(A)
        n_prev = A.shape[0]
        head = (W @ U) / S  # n_k x n_prev, the columns fixed by W = B A^T
        used = S.min()
        free = orthonormal_complement(m - n_prev, W.shape[0], seed + k).T * used
        Vc = _complement_basis(V, seed + 1000 + k)
        B = head @ V.T + free @ Vc.T
        out.append(B)
        A = B
    return out


def feedforward_output(W_seq, biases, activation, z0):
    """``h_k = sigma(W_k h_{k-1} + c_k)`` for ``k < L``, ``y = W_L h_{L-1}``."""
    h = np.asarray(z0, dtype=np.float64)
    for W, c in zip(W_seq[:-1], biases):
        h = activation(W @ h + c)
    return W_seq[-1] @ h


def factorized_output(Wbar, biases, activation, z0):
    """The same network in OptEq form: ``zbar_k = Wbar_k^T sigma(Wbar_k zbar_{k-1} + c_k)``."""
    z = Wbar[0].T @ np.asarray(z0, dtype=np.float64)
    for Wb, c in zip(Wbar[1:-1], biases):
        z = Wb.T @ activation(Wb @ z + c)
    return Wbar[-1] @ z


def feedforward_as_deep_opteq(A_seq, biases, activation, m, seed=0):
    """Deep OptEq (``alpha = 1``) equal to ``y = A_L sigma(... sigma(A_1 x + c_1) ...)``.

    The first layer has ``W_1 = 0`` so the map ignores ``z`` and a single
    Picard step from any start is the equilibrium. Layer 2 injects the input
    through ``U_2 = A_1`` and the remaining ``A_k`` are factored as
    ``W_{k+1} W_k^T``. ``biases[k-1]`` is added inside the k-th activation.
    """
    A_seq = [as_matrix(A, f"A_{k + 1}") for k, A in enumerate(A_seq)]
    if len(A_seq) < 2:
        raise ValueError("need at least two matrices A_1, A_2")
    if len(biases) != len(A_seq) - 1:
        raise ValueError(f"need {len(A_seq) - 1} bias vectors, got {len(biases)}")
    d = A_seq[0].shape[1]
    Wbar = universal_factorize(A_seq[1:], m, seed)
    layers = [LayerParams(np.zeros((1, m)), np.zeros((1, d)), np.zeros(1))]
    for k, Wb in enumerate(Wbar[:-1]):
        U = A_seq[0] if k == 0 else np.zeros((Wb.shape[0], d))
        layers.append(LayerParams(Wb, U, np.asarray(biases[k], dtype=np.float64)))
    return DeepOptEqModel(Extractor(np.eye(d)), tuple(layers), 1.0, activation, Wbar[-1])


# ---------------------------------------------------------------- checkpoints

def _fmt(v):
    return format(float(v), ".16e")


def _emit(obj, indent=0):
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  {json.dumps(k)}: {_emit(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (float, int)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_emit(v) for v in obj) + "]"
        items = [pad + "  " + _emit(v, indent + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        return _fmt(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def model_to_dict(model):
    structural = None
    if model.structural is not None:
        reg, gamma = model.structural
        structural = {"regularizer": reg.to_config(), "gamma": float(gamma)}
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {
            "input": model.input_dim,
            "feature": model.feature_dim,
            "hidden": model.hidden_dim,
            "output": model.output_dim,
            "depth": model.depth,
            "widths": [p.width for p in model.layers],
        },
        "alpha": float(model.alpha),
        "mu": float(model.mu),
        "activation": model.activation.to_config(),
        "extractor": {"nonlinearity": model.extractor.nonlinearity, "W0": model.extractor.W0},
        "layers": [{"W": p.W, "U": p.U, "b": p.b} for p in model.layers],
        "readout": model.readout_W,
        "structural": structural,
    }


def _matrix(rows, shape, name):
    a = np.array(rows, dtype=np.float64)
    if a.size == 0:
        a = a.reshape(shape)
    if a.shape != shape:
        raise ValueError(f"checkpoint field {name} has shape {a.shape}, expected {shape}")
    return a


def model_from_dict(doc):
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not an opteq checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    dims = doc["dims"]
    d0, d, m, dy = dims["input"], dims["feature"], dims["hidden"], dims["output"]
    if len(doc["layers"]) != dims["depth"]:
        raise ValueError("checkpoint depth does not match its layer list")
    layers = []
    for i, (lay, n) in enumerate(zip(doc["layers"], dims["widths"])):
        layers.append(LayerParams(
            _matrix(lay["W"], (n, m), f"layers[{i}].W"),
            _matrix(lay["U"], (n, d), f"layers[{i}].U"),
            np.array(lay["b"], dtype=np.float64),
        ))
    ext = doc["extractor"]
    model = DeepOptEqModel(
        Extractor(_matrix(ext["W0"], (d, d0), "extractor.W0"), ext["nonlinearity"]),
        tuple(layers),
        float(doc["alpha"]),
        Activation.from_config(doc["activation"]),
        _matrix(doc["readout"], (dy, m), "readout"),
        mu=float(doc["mu"]),
    )
    if doc.get("structural") is not None:
        from .regularizers import Regularizer

        s = doc["structural"]
        model = replace(model, structural=(Regularizer.from_config(s["regularizer"]), float(s["gamma"])))
    return model


def dumps_checkpoint(model):
    return _emit(model_to_dict(model)) + "\n"


def save_checkpoint(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_checkpoint(model))


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
