"""Property suites that check each equivalence numerically on seeded instances.

Every check compares a measured quantity with a tolerance and records
whether it passed. Reference values come from :mod:`opteq.oracles`, which
shares no code with the implementations being checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .activations import Activation
from .deepnet import (
    DeepOptEqModel,
    Extractor,
    block_lift,
    block_system_residual,
    factorized_output,
    feedforward_as_deep_opteq,
    feedforward_output,
    forward_map,
    random_model,
    two_block_objective,
    universal_factorize,
    wide_joint_objective,
    wide_system_solve,
)
from .oracles import (
    fd_gradient,
    line_fixed_points,
    orthant_fixed_points,
    prox_oracle,
    two_block_oracle,
    wide_oracle,
)
from .regularizers import Regularizer
from .solvers import SamSchedule, picard_solve, sam_solve, selection_gap
from .training import (
    Batch,
    LossSpec,
    finite_diff_grad,
    ift_loss_and_grad,
    relative_difference,
    unrolled_forward,
    unrolled_loss,
    unrolled_loss_and_grad,
)
from .unitlayer import (
    LayerParams,
    UnitLayerConfig,
    averaged_forward,
    closed_form_potential,
    moreau_envelope,
    prox_characterization_check,
    psi_value,
    unit_forward,
)

__all__ = ["Check", "SUITES", "run_suites", "SAM_CHECK_ETA"]

# eta for the selection checks; inside the admissible range (0, 1/2]
SAM_CHECK_ETA = 0.005
SAM_CHECK_K = 100_000


@dataclass
class Check:
    suite: str
    name: str
    measured: float
    relation: str
    tolerance: float
    passed: bool

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return (f"[{tag}] {self.suite}/{self.name}: measured {self.measured:.3e} "
                f"{self.relation} {self.tolerance:.3e}")


_RELATIONS = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def _check(suite, name, measured, relation, tol):
    measured = float(measured)
    ok = bool(np.isfinite(measured) and _RELATIONS[relation](measured, tol))
    return Check(suite, name, measured, relation, float(tol), ok)


def _orthogonal(m, rng):
    Q, R = np.linalg.qr(rng.standard_normal((m, m)))
    return Q * np.sign(np.diag(R))


def invertible_layer(m, d, seed, norm=1.0, smallest=0.2):
    """Square ``W`` with singular values in ``[smallest*norm, norm]``."""
    rng = np.random.default_rng(seed)
    s = norm * np.sort(rng.uniform(smallest, 1.0, m))[::-1]
    s[0] = norm
    W = _orthogonal(m, rng) @ np.diag(s) @ _orthogonal(m, rng).T
    return LayerParams(W, rng.standard_normal((m, d)), 0.3 * rng.standard_normal(m))


# -------------------------------------------------------------------- prox

def prox_suite():
    S = "prox"
    out = []
    relu = Activation("relu")
    cfg = UnitLayerConfig(1.0, 1.0, relu)
    dims = [2, 4, 8, 2, 4, 8, 2, 4, 8, 4]
    for i, m in enumerate(dims):
        p = invertible_layer(m, 3, seed=100 + i)
        rng = np.random.default_rng(200 + i)
        x = rng.standard_normal(3)
        z = 2.0 * rng.standard_normal(m)
        c = p.U @ x + p.b
        f = unit_forward(p, cfg, z, x)
        out.append(_check(S, f"prox_identity_oracle[{i}]",
                          np.linalg.norm(f - prox_oracle(p.W, c, z)), "<=", 1e-5))
        _, u = moreau_envelope(closed_form_potential(p, cfg, x), 1.0, z)
        out.append(_check(S, f"prox_identity_envelope[{i}]", np.linalg.norm(f - u), "<=", 1e-5))

    kinds = [Activation("relu"), Activation("leaky_relu", 0.1), Activation("tanh"),
             Activation("sigmoid_shifted")]
    for i, act in enumerate(kinds):
        for j, (m, norm) in enumerate([(4, 1.0), (8, 0.9)]):
            p = invertible_layer(m, 3, seed=300 + 10 * i + j, norm=norm)
            rep = prox_characterization_check(p, UnitLayerConfig(1.0, 1.0, act), samples=20,
                                              seed=400 + i)
            tag = f"{act.kind}_m{m}"
            out.append(_check(S, f"jacobian_asymmetry[{tag}]", rep.max_jacobian_asymmetry, "<", 1e-6))
            out.append(_check(S, f"expansion[{tag}]", rep.max_expansion, "<=", 1.0 + 1e-9))
            out.append(_check(S, f"min_eigenvalue[{tag}]", rep.min_eigenvalue, ">=", -1e-6))
            out.append(_check(S, f"max_eigenvalue[{tag}]", rep.max_eigenvalue, "<=", 1.0 + 1e-6))

    p = invertible_layer(6, 3, seed=500, norm=0.9)
    rep = prox_characterization_check(p, UnitLayerConfig(1.0, 1.0, Activation("tanh")), seed=501)
    out.append(_check(S, "expansion_bound[tanh_norm0.9]", rep.max_expansion, "<=", 0.81 + 1e-6))

    rng = np.random.default_rng(600)
    bad = LayerParams(1.5 * _orthogonal(4, rng), rng.standard_normal((4, 3)), np.zeros(4))
    rep = prox_characterization_check(bad, UnitLayerConfig(1.0, 1.0, relu), seed=601)
    out.append(_check(S, "negative_control_expansion[norm1.5]", rep.max_expansion, ">", 1.0))

    for i, act in enumerate(kinds):
        p = invertible_layer(5, 3, seed=700 + i)
        rng = np.random.default_rng(710 + i)
        x, z = rng.standard_normal(3), rng.standard_normal(5)
        c1 = UnitLayerConfig(1.0, 1.0, act)
        g = fd_gradient(lambda v: psi_value(p, c1, v, x), z, h=1e-5)
        out.append(_check(S, f"psi_gradient[{act.kind}]",
                          np.max(np.abs(g - unit_forward(p, c1, z, x))), "<=", 1e-6))

    worst = 0.0
    for i in range(10):
        p = invertible_layer(4, 3, seed=800 + i, norm=0.9)
        rng = np.random.default_rng(810 + i)
        x = rng.standard_normal(3)
        rep = picard_solve(lambda v: unit_forward(p, cfg, v, x), np.zeros(4), 1e-14, 10_000)
        for a in (0.1, 0.5, 1.0):
            ca = UnitLayerConfig(1.0, a, relu)
            worst = max(worst, np.linalg.norm(rep.z_star - averaged_forward(p, ca, rep.z_star, x)))
    out.append(_check(S, "averaging_preserves_fixed_points", worst, "<", 1e-9))
    return out


# --------------------------------------------------------------- block lift

def block_lift_suite():
    S = "block-lift"
    out = []
    for L in (2, 3, 4):
        for m in (4, 8):
            model = random_model(L, m, 3, 3, 1, alpha=0.7, seed=10 * L + m, layer_norm=0.9)
            x = np.random.default_rng(L * m).standard_normal(3)
            rep = picard_solve(lambda z: forward_map(model, z, x), np.zeros(m), 1e-12, 100_000)
            res = block_system_residual(model, block_lift(model, rep.z_star, x), x)
            bound = max(10.0 * rep.residual, 1e-8)
            out.append(_check(S, f"lifted_residual[L{L}_m{m}]", res, "<=", bound))

    for seed in range(5):
        model = random_model(2, 4, 3, 3, 1, alpha=0.6, seed=900 + seed, layer_norm=0.8)
        x = np.random.default_rng(950 + seed).standard_normal(3)
        cs = [p.U @ x + p.b for p in model.layers]
        best, _, _ = two_block_oracle(model.layers[0].W, cs[0], model.layers[1].W, cs[1], model.alpha)
        rep = picard_solve(lambda z: forward_map(model, z, x), np.zeros(4), 1e-13, 100_000)
        z1, z0 = block_lift(model, rep.z_star, x)
        gap = abs(two_block_objective(model, z1, z0, x) - best)
        out.append(_check(S, f"two_block_optimality[{seed}]", gap, "<=", 1e-4))
    return out


# --------------------------------------------------------------- wide limit

WIDE_ALPHAS = (0.3, 0.1, 0.03, 0.01, 0.003)


def wide_limit_measurements(seed):
    """Inter-block spreads over ``WIDE_ALPHAS`` and distances of the limit point."""
    base = random_model(3, 4, 3, 3, 1, alpha=1.0, seed=1000 + seed, layer_norm=0.7)
    x = np.random.default_rng(1100 + seed).standard_normal(3)
    wide = wide_system_solve(base, x, tol=1e-13)
    cs = [p.U @ x + p.b for p in base.layers]
    _, y, xs = wide_oracle([p.W for p in base.layers], cs)
    spreads, z_last = [], None
    for a in WIDE_ALPHAS:
        model = replace(base, alpha=a)
        rep = picard_solve(lambda z: forward_map(model, z, x), np.zeros(4), 1e-12, 1_000_000)
        blocks = block_lift(model, rep.z_star, x)
        spreads.append(max(np.linalg.norm(b - rep.z_star) for b in blocks))
        z_last = rep.z_star
    return {
        "spreads": spreads,
        "limit_to_wide": float(np.linalg.norm(z_last - wide)),
        "limit_to_oracle": float(np.linalg.norm(z_last - y)),
        "wide_to_oracle": float(np.linalg.norm(wide - y)),
        "oracle_objective": wide_joint_objective(base, xs, y, x),
    }


def wide_limit_suite():
    S = "wide-limit"
    out = []
    for seed in range(3):
        r = wide_limit_measurements(seed)
        sp = r["spreads"]
        steps = np.diff(sp)
        out.append(_check(S, f"spread_monotone[{seed}]", np.max(steps), "<", 0.0))
        out.append(_check(S, f"spread_at_0.003[{seed}]", sp[-1], "<", 1e-2))
        out.append(_check(S, f"limit_vs_wide_solve[{seed}]", r["limit_to_wide"], "<", 1e-2))
        out.append(_check(S, f"limit_vs_joint_minimizer[{seed}]", r["limit_to_oracle"], "<", 1e-2))
        out.append(_check(S, f"wide_solve_vs_joint_minimizer[{seed}]", r["wide_to_oracle"], "<=", 1e-4))
    return out


# ------------------------------------------------------------ SAM selection

def relu_map(z):
    return np.maximum(z, 0.0)


LINE_PROJECTION = np.full((2, 2), 0.5)


def line_map(z):
    return LINE_PROJECTION @ z


def sam_orthant(eta=SAM_CHECK_ETA, K=SAM_CHECK_K):
    reg = Regularizer("squared_l2", lam=1.0, center=(-1.0, 2.0))
    sched = SamSchedule(eta=eta, L_z=1.0)
    return sam_solve(relu_map, reg, sched, np.array([3.0, -1.0]), K), reg


def sam_line(eta=SAM_CHECK_ETA, K=SAM_CHECK_K):
    reg = Regularizer("squared_l2", lam=1.0)
    sched = SamSchedule(eta=eta, L_z=1.0)
    return sam_solve(line_map, reg, sched, np.array([3.0, 1.0]), K), reg


def sam_selection_suite():
    S = "sam-selection"
    out = []
    rep, reg = sam_orthant()
    out.append(_check(S, "orthant_distance", np.linalg.norm(rep.z_star - np.array([0.0, 2.0])), "<=", 1e-3))
    gap = selection_gap(relu_map, reg, rep.z_star, orthant_fixed_points(1000, seed=5))
    out.append(_check(S, "orthant_selection_gap", gap, "<=", 1e-4))
    far = selection_gap(relu_map, reg, np.array([3.0, 3.0]), orthant_fixed_points(1000, seed=5))
    out.append(_check(S, "far_point_gap_negative_control", far, ">", 0.0))
    rep, reg = sam_line()
    out.append(_check(S, "line_distance", np.linalg.norm(rep.z_star), "<=", 1e-3))
    gap = selection_gap(line_map, reg, rep.z_star, line_fixed_points(1000, seed=6))
    out.append(_check(S, "line_selection_gap", gap, "<=", 1e-4))

    model = random_model(2, 4, 3, 3, 1, alpha=0.5, seed=7, layer_norm=0.9)
    x = np.random.default_rng(8).standard_normal(3)
    T = lambda z: forward_map(model, z, x)  # noqa: E731
    a = sam_solve(T, None, None, np.ones(4), 50, record_trajectory=True)
    b = picard_solve(T, np.ones(4), 1e-300, 50, record_trajectory=True)
    same = np.array_equal(a.z_star, b.z_star) and a.trajectory == b.trajectory
    out.append(_check(S, "zero_beta_equals_picard", 0.0 if same else 1.0, "<=", 0.0))
    return out


# ---------------------------------------------------------------- gradients

GRADIENT_CONFIGS = (
    (1, 1.0, "relu"),
    (1, 0.4, "tanh"),
    (3, 1.0, "tanh"),
    (3, 0.4, "relu"),
    (3, 0.4, "tanh"),
)


def _grad_batch(model, seed, B=4):
    rng = np.random.default_rng(seed)
    return Batch(rng.standard_normal((model.input_dim, B)),
                 rng.standard_normal((model.output_dim, B)))


def coordinate_relative_error(g, ref, floor=1e-8):
    a, b = g.flat(), ref.flat()
    mask = np.abs(b) > floor
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(a - b)[mask] / np.abs(b)[mask]))


def gradient_fd_errors(K=5):
    errs = []
    for i, (L, alpha, kind) in enumerate(GRADIENT_CONFIGS):
        model = random_model(L, 3, 2, 2, 2, alpha=alpha, activation=Activation(kind),
                             seed=40 + i, layer_norm=0.9)
        batch = _grad_batch(model, 60 + i)
        loss = LossSpec(weight_decay=1e-3)
        _, g = unrolled_loss_and_grad(model, batch, K=K, loss=loss)
        fd = finite_diff_grad(model, batch, loss, step=1e-5,
                              objective=lambda mdl: unrolled_loss(mdl, batch, None, None, K, loss))
        errs.append(((L, alpha, kind), coordinate_relative_error(g, fd)))
    return errs


def contraction_model(seed=70):
    # slow enough that K = 10, 50, 200 give visibly different gradients
    return random_model(2, 4, 3, 3, 2, alpha=0.3, activation=Activation("tanh"),
                        seed=seed, layer_norm=0.95)


def ift_vs_unrolled(Ks=(10, 50, 200), seed=70):
    model = contraction_model(seed)
    batch = _grad_batch(model, seed + 1, B=5)
    _, g_ift, _ = ift_loss_and_grad(model, batch, 1e-13, 1e-13)
    return [(K, relative_difference(unrolled_loss_and_grad(model, batch, K=K)[1], g_ift)) for K in Ks]


def residual_ordering(Ks=(5, 10, 20, 40), seed=71, thd=1e-3):
    """Relative residuals of unrolled iterates, and the implicit forward residual."""
    model = contraction_model(seed)
    batch = _grad_batch(model, seed + 1, B=8)
    x = model.extractor(batch.x0)
    res = [unrolled_forward(model, x, None, None, K).residual for K in Ks]
    _, _, rep = ift_loss_and_grad(model, batch, thd, 1e-8)
    return res, rep.residual


def gradients_suite():
    S = "gradients"
    out = []
    for (L, alpha, kind), err in gradient_fd_errors():
        out.append(_check(S, f"unrolled_vs_fd[L{L}_a{alpha}_{kind}]", err, "<", 1e-4))
    diffs = ift_vs_unrolled()
    for K, d in diffs:
        out.append(_check(S, f"ift_vs_unrolled[K{K}]", d, "<", 1e-3 if K == 200 else np.inf))
    steps = np.diff([d for _, d in diffs])
    out.append(_check(S, "ift_vs_unrolled_monotone", np.max(steps), "<", 0.0))

    model = contraction_model(72)
    batch = _grad_batch(model, 73, B=3)
    _, g_ift, _ = ift_loss_and_grad(model, batch, 1e-13, 1e-13)
    fd = finite_diff_grad(model, batch, LossSpec(), step=1e-5,
                          objective=lambda mdl: _equilibrium_loss(mdl, batch))
    out.append(_check(S, "ift_vs_fd_equilibrium", relative_difference(g_ift, fd), "<", 1e-4))

    res, ift_res = residual_ordering()
    out.append(_check(S, "unrolled_residuals_decreasing", np.max(np.diff(res)), "<", 0.0))
    out.append(_check(S, "ift_forward_residual[thd1e-3]", ift_res, "<=", 1e-3))
    return out


def _equilibrium_loss(model, batch):
    from .training import equilibrium_loss

    return equilibrium_loss(model, batch, LossSpec(), tol=1e-13)


# ------------------------------------------------------------ factorization

def factorization_chain(seed=3):
    rng = np.random.default_rng(seed)
    widths = [3, 4, 2, 3]
    Ws = [rng.standard_normal((widths[k + 1], widths[k])) for k in range(3)]
    biases = [rng.standard_normal(widths[k + 1]) for k in range(2)]
    return Ws, biases


def factorization_suite():
    S = "factorization"
    out = []
    W = np.random.default_rng(1).standard_normal((2, 3))
    Wb = universal_factorize([W], 8, seed=2)
    out.append(_check(S, "single_2x3_residual",
                      np.linalg.norm(W - Wb[1] @ Wb[0].T) / np.linalg.norm(W), "<", 1e-8))
    Z = universal_factorize([np.zeros((2, 3))], 6, seed=2)
    out.append(_check(S, "zero_target_residual", np.linalg.norm(Z[1] @ Z[0].T), "<", 1e-12))

    Ws, biases = factorization_chain()
    m = 2 * max(max(W.shape) for W in Ws)
    Wb = universal_factorize(Ws, m, seed=4)
    for k, Wk in enumerate(Ws, start=1):
        r = np.linalg.norm(Wk - Wb[k] @ Wb[k - 1].T) / np.linalg.norm(Wk)
        out.append(_check(S, f"chain_factor_residual[{k}]", r, "<", 1e-8))
        out.append(_check(S, f"chain_factor_rank[{k}]", np.linalg.matrix_rank(Wb[k]), ">=", Wb[k].shape[0]))
    relu = Activation("relu")
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        z0 = rng.standard_normal(Ws[0].shape[1])
        worst = max(worst, np.linalg.norm(feedforward_output(Ws, biases, relu, z0)
                                          - factorized_output(Wb, biases, relu, z0)))
    out.append(_check(S, "chain_forward_agreement", worst, "<", 1e-7))

    A = [rng.standard_normal((4, 3)), rng.standard_normal((3, 4)), rng.standard_normal((2, 3))]
    c = [rng.standard_normal(4), rng.standard_normal(3)]
    model = feedforward_as_deep_opteq(A, c, relu, m=8, seed=6)
    worst = 0.0
    for _ in range(10):
        x = rng.standard_normal(3)
        dnn = A[2] @ relu(A[1] @ relu(A[0] @ x + c[0]) + c[1])
        z = forward_map(model, np.zeros(8), x)
        fixed = np.linalg.norm(forward_map(model, z, x) - z)
        worst = max(worst, np.linalg.norm(model.readout_W @ z - dnn), fixed)
    out.append(_check(S, "feedforward_contained", worst, "<", 1e-7))
    return out


SUITES = {
    "prox": prox_suite,
    "block-lift": block_lift_suite,
    "wide-limit": wide_limit_suite,
    "sam-selection": sam_selection_suite,
    "gradients": gradients_suite,
    "factorization": factorization_suite,
}


def run_suites(names, echo=None):
    """Run the named suites (or all for ``["all"]``); returns ``(checks, seconds)``."""
    if list(names) == ["all"]:
        names = list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(unknown[0])
    checks = []
    t0 = time.perf_counter()
    for n in names:
        for c in SUITES[n]():
            checks.append(c)
            if echo:
                echo(c.line())
    return checks, time.perf_counter() - t0
