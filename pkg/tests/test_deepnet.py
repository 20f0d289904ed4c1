import json
from dataclasses import replace

import numpy as np
import pytest

from opteq.activations import leaky_relu, relu, tanh
from opteq.deepnet import (
    DeepOptEqModel,
    Extractor,
    block_lift,
    block_system_residual,
    dumps_checkpoint,
    factorized_output,
    feedforward_as_deep_opteq,
    feedforward_output,
    forward_map,
    load_checkpoint,
    model_from_dict,
    model_to_dict,
    predict,
    random_model,
    save_checkpoint,
    two_block_objective,
    universal_factorize,
    wide_joint_objective,
    wide_system_solve,
)
from opteq.oracles import two_block_oracle, wide_oracle
from opteq.regularizers import Regularizer, append_structural_regularizer
from opteq.solvers import picard_solve
from opteq.tensors import ConvergenceError
from opteq.unitlayer import LayerParams, UnitLayerConfig, averaged_forward, unit_forward


def solve(model, x, tol=1e-12):
    rep = picard_solve(lambda z: forward_map(model, z, x), np.zeros(model.hidden_dim), tol, 1_000_000)
    assert rep.converged
    return rep


def rand_x(model, seed):
    return np.random.default_rng(seed).standard_normal(model.feature_dim)


class TestModel:
    def test_dimensions(self):
        model = random_model(3, 6, 4, 5, 2, seed=0)
        assert (model.depth, model.hidden_dim, model.feature_dim, model.input_dim, model.output_dim) == (3, 6, 4, 5, 2)

    def test_layer_norms(self):
        model = random_model(3, 6, 4, 5, 2, seed=0, layer_norm=0.8)
        for p in model.layers:
            assert p.certified_norm == pytest.approx(0.8, abs=1e-8)

    def test_rectangular_layers(self):
        model = random_model(2, 4, 3, 3, 1, seed=1, width=7, square=False)
        assert model.layers[0].W.shape == (7, 4)

    def test_mismatched_layers_rejected(self):
        a = LayerParams(np.eye(2), np.zeros((2, 3)), np.zeros(2))
        b = LayerParams(np.eye(3), np.zeros((3, 3)), np.zeros(3))
        with pytest.raises(ValueError, match="layer 2"):
            DeepOptEqModel(Extractor(np.eye(3)), (a, b), 1.0, relu(), np.ones((1, 2)))

    def test_readout_shape(self):
        a = LayerParams(np.eye(2), np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(ValueError, match="readout"):
            DeepOptEqModel(Extractor(np.eye(3)), (a,), 1.0, relu(), np.ones((1, 5)))

    def test_invalid_alpha(self):
        a = LayerParams(np.eye(2), np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(ValueError):
            DeepOptEqModel(Extractor(np.eye(3)), (a,), 0.0, relu(), np.ones((1, 2)))

    def test_tanh_extractor(self):
        W0 = np.array([[2.0, 0.0]])
        np.testing.assert_allclose(Extractor(W0, "tanh")(np.array([1.0, 5.0])), [np.tanh(2.0)])
        with pytest.raises(ValueError):
            Extractor(W0, "sigmoid")


class TestForwardMap:
    def test_single_layer_is_averaged_layer(self):
        model = random_model(1, 4, 3, 3, 1, alpha=0.6, seed=2)
        x, z = rand_x(model, 0), np.ones(4)
        np.testing.assert_array_equal(forward_map(model, z, x),
                                      averaged_forward(model.layers[0], model.layer_config, z, x))

    def test_zero_weights(self):
        model = random_model(3, 4, 3, 3, 1, alpha=1.0, seed=3)
        model = model.with_layers([p.replace(W=np.zeros_like(p.W)) for p in model.layers])
        np.testing.assert_array_equal(forward_map(model, np.arange(4.0), rand_x(model, 1)), 0.0)

    def test_nonexpansive(self):
        model = random_model(3, 5, 3, 3, 1, alpha=0.7, seed=4, layer_norm=1.0)
        x = rand_x(model, 2)
        rng = np.random.default_rng(5)
        for _ in range(200):
            a, b = rng.standard_normal(5), rng.standard_normal(5)
            assert np.linalg.norm(forward_map(model, a, x) - forward_map(model, b, x)) <= np.linalg.norm(a - b) * (1 + 1e-12)

    def test_contraction(self):
        model = random_model(2, 5, 3, 3, 1, alpha=1.0, seed=6, layer_norm=0.9)
        x = rand_x(model, 3)
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(200):
            a, b = rng.standard_normal(5), rng.standard_normal(5)
            worst = max(worst, np.linalg.norm(forward_map(model, a, x) - forward_map(model, b, x)) / np.linalg.norm(a - b))
        assert worst < 1.0

    def test_predict_batch(self):
        model = random_model(2, 4, 3, 5, 2, seed=8)
        X0 = np.random.default_rng(9).standard_normal((5, 6))
        Y, rep = predict(model, X0, tol=1e-12)
        assert Y.shape == (2, 6) and rep.converged
        y0, _ = predict(model, X0[:, 0], tol=1e-12)
        np.testing.assert_allclose(Y[:, 0], y0, atol=1e-10)

    def test_structural_step_applied(self):
        model = random_model(2, 4, 3, 3, 1, seed=10)
        reg = Regularizer("squared_l2", lam=1.0)
        mod = append_structural_regularizer(model, reg, 1.0)
        z, x = np.ones(4), rand_x(model, 4)
        np.testing.assert_allclose(forward_map(mod, z, x), forward_map(model, z, x) / 2.0)


class TestBlockLift:
    def test_single_layer(self):
        model = random_model(1, 4, 3, 3, 1, seed=11)
        z = np.arange(4.0)
        blocks = block_lift(model, z, rand_x(model, 0))
        assert len(blocks) == 1
        np.testing.assert_array_equal(blocks[0], z)

    @pytest.mark.parametrize("L", [2, 3, 4])
    @pytest.mark.parametrize("m", [4, 8])
    def test_lifted_fixed_point(self, L, m):
        model = random_model(L, m, 3, 3, 1, alpha=0.7, seed=10 * L + m, layer_norm=0.9)
        x = rand_x(model, L)
        rep = solve(model, x)
        res = block_system_residual(model, block_lift(model, rep.z_star, x), x)
        assert res <= max(10.0 * rep.residual, 1e-8)

    def test_random_point_not_fixed(self):
        model = random_model(3, 4, 3, 3, 1, alpha=0.7, seed=12, layer_norm=0.9)
        x = rand_x(model, 5)
        zt = list(np.random.default_rng(0).standard_normal((3, 4)))
        assert block_system_residual(model, zt, x) > 1e-3

    def test_single_block_reduces_to_unit_residual(self):
        model = random_model(1, 4, 3, 3, 1, alpha=1.0, seed=13)
        x, z = rand_x(model, 6), np.random.default_rng(1).standard_normal(4)
        f = unit_forward(model.layers[0], model.layer_config, z, x)
        assert block_system_residual(model, [z], x) == pytest.approx(np.linalg.norm(z - f) / max(np.linalg.norm(z), 1))

    def test_length_checked(self):
        model = random_model(2, 4, 3, 3, 1, seed=14)
        with pytest.raises(ValueError):
            block_system_residual(model, [np.zeros(4)], rand_x(model, 0))


class TestWideSystem:
    def test_single_layer(self):
        model = random_model(1, 4, 3, 3, 1, alpha=1.0, seed=15, layer_norm=0.9)
        x = rand_x(model, 7)
        np.testing.assert_allclose(wide_system_solve(model, x, tol=1e-13), solve(model, x, 1e-13).z_star, atol=1e-11)

    def test_identical_layers(self):
        base = random_model(1, 4, 3, 3, 1, alpha=1.0, seed=16, layer_norm=0.9)
        model = base.with_layers(base.layers * 3)
        x = rand_x(base, 8)
        np.testing.assert_allclose(wide_system_solve(model, x, tol=1e-13), wide_system_solve(base, x, tol=1e-13), atol=1e-12)

    def test_matches_joint_minimizer(self):
        model = random_model(3, 4, 3, 3, 1, seed=17, layer_norm=0.7)
        x = rand_x(model, 9)
        _, y, _ = wide_oracle([p.W for p in model.layers], [p.U @ x + p.b for p in model.layers])
        np.testing.assert_allclose(wide_system_solve(model, x, tol=1e-13), y, atol=1e-4)

    def test_deep_equilibrium_approaches_wide_solution(self):
        base = random_model(3, 4, 3, 3, 1, seed=18, layer_norm=0.7)
        x = rand_x(base, 10)
        wide = wide_system_solve(base, x, tol=1e-13)
        dists = [np.linalg.norm(solve(replace(base, alpha=a), x).z_star - wide) for a in (0.1, 0.01, 0.001)]
        assert dists[-1] < 1e-2
        assert dists[0] > dists[1] > dists[2]

    def test_nonconvergence(self):
        model = random_model(2, 4, 3, 3, 1, seed=19, layer_norm=0.999)
        with pytest.raises(ConvergenceError):
            wide_system_solve(model, rand_x(model, 0), tol=1e-15, max_iter=3)


class TestObjectives:
    def _l2(self, seed, alpha=0.6):
        return random_model(2, 4, 3, 3, 1, alpha=alpha, seed=seed, layer_norm=0.8)

    def test_coupling_vanishes_on_diagonal(self):
        model = self._l2(20)
        x = rand_x(model, 0)
        z = np.abs(np.random.default_rng(0).standard_normal(4))
        cfg = UnitLayerConfig(1.0, 1.0, relu())
        from opteq.unitlayer import closed_form_potential, moreau_envelope

        expected = sum(model.alpha * moreau_envelope(closed_form_potential(p, cfg, x), 0.4, z, inner_tol=1e-10)[0]
                       for p in model.layers)
        assert two_block_objective(model, z, z, x) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_equilibrium_attains_oracle_minimum(self, seed):
        model = self._l2(900 + seed)
        x = rand_x(model, seed)
        cs = [p.U @ x + p.b for p in model.layers]
        best, z1o, z0o = two_block_oracle(model.layers[0].W, cs[0], model.layers[1].W, cs[1], model.alpha)
        z1, z0 = block_lift(model, solve(model, x, 1e-13).z_star, x)
        assert abs(two_block_objective(model, z1, z0, x) - best) <= 1e-4
        assert two_block_objective(model, z1o, z0o, x) == pytest.approx(best, abs=1e-6)

    def test_two_block_requirements(self):
        with pytest.raises(ValueError):
            two_block_objective(random_model(3, 4, 3, 3, 1, alpha=0.5, seed=0), np.zeros(4), np.zeros(4), np.zeros(3))
        with pytest.raises(ValueError):
            two_block_objective(self._l2(21, alpha=1.0), np.zeros(4), np.zeros(4), np.zeros(3))
        with pytest.raises(ValueError):
            two_block_objective(random_model(2, 4, 3, 3, 1, alpha=0.5, activation=tanh(), seed=0),
                                np.zeros(4), np.zeros(4), np.zeros(3))

    def test_wide_objective_zero(self):
        layer = LayerParams(np.eye(2), np.zeros((2, 1)), np.zeros(2))
        model = DeepOptEqModel(Extractor(np.eye(1)), (layer, layer), 1.0, relu(), np.ones((1, 2)))
        y = np.array([1.0, 2.0])
        assert wide_joint_objective(model, [y, y], y, np.zeros(1)) == pytest.approx(0.0, abs=1e-14)

    def test_wide_objective_single_layer_is_prox_objective(self):
        model = random_model(1, 3, 2, 2, 1, seed=22)
        x = rand_x(model, 11)
        p = model.layers[0]
        y = np.random.default_rng(3).standard_normal(3)
        u = unit_forward(p, UnitLayerConfig(), y, x)
        from opteq.unitlayer import phi_closed_form

        expected = phi_closed_form(p, UnitLayerConfig(), u, x) + 0.5 * np.sum((u - y) ** 2)
        assert wide_joint_objective(model, [u], y, x) == pytest.approx(expected, abs=1e-12)

    def test_wide_objective_point_count(self):
        model = random_model(2, 3, 2, 2, 1, seed=23)
        with pytest.raises(ValueError):
            wide_joint_objective(model, [np.zeros(3)], np.zeros(3), np.zeros(2))


class TestFactorization:
    def test_single_matrix(self):
        W = np.random.default_rng(0).standard_normal((2, 3))
        Wb = universal_factorize([W], 8, seed=1)
        assert [B.shape for B in Wb] == [(3, 8), (2, 8)]
        assert np.linalg.norm(W - Wb[1] @ Wb[0].T) < 1e-8 * np.linalg.norm(W)

    def test_zero_target(self):
        Wb = universal_factorize([np.zeros((2, 3))], 6)
        assert np.linalg.norm(Wb[1] @ Wb[0].T) < 1e-12
        assert np.linalg.matrix_rank(Wb[1]) == 2

    def test_width_condition(self):
        with pytest.raises(ValueError, match="at least"):
            universal_factorize([np.ones((3, 2))], 5)

    def test_chain_shapes_checked(self):
        with pytest.raises(ValueError):
            universal_factorize([np.ones((3, 2)), np.ones((2, 4))], 12)

    def test_chain_forward_agreement(self):
        rng = np.random.default_rng(2)
        widths = [3, 4, 2, 3]
        Ws = [rng.standard_normal((widths[k + 1], widths[k])) for k in range(3)]
        bs = [rng.standard_normal(widths[k + 1]) for k in range(2)]
        Wb = universal_factorize(Ws, 8, seed=3)
        for k, W in enumerate(Ws, start=1):
            assert np.linalg.norm(W - Wb[k] @ Wb[k - 1].T) < 1e-8 * np.linalg.norm(W)
            assert np.linalg.matrix_rank(Wb[k]) == Wb[k].shape[0]
        for _ in range(10):
            z0 = rng.standard_normal(3)
            for act in (relu(), tanh()):
                np.testing.assert_allclose(factorized_output(Wb, bs, act, z0), feedforward_output(Ws, bs, act, z0), atol=1e-7)

    def test_seed_determinism(self):
        W = np.random.default_rng(4).standard_normal((3, 3))
        a, b = universal_factorize([W], 6, seed=5), universal_factorize([W], 6, seed=5)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)

    def test_feedforward_network_is_an_equilibrium_model(self):
        rng = np.random.default_rng(6)
        A = [rng.standard_normal((4, 3)), rng.standard_normal((3, 4)), rng.standard_normal((2, 3))]
        c = [rng.standard_normal(4), rng.standard_normal(3)]
        act = leaky_relu(0.2)
        model = feedforward_as_deep_opteq(A, c, act, m=8, seed=7)
        for _ in range(5):
            x = rng.standard_normal(3)
            dnn = A[2] @ act(A[1] @ act(A[0] @ x + c[0]) + c[1])
            y, rep = predict(model, x, tol=1e-12)
            assert rep.iterations <= 2
            np.testing.assert_allclose(y, dnn, atol=1e-7)

    def test_feedforward_needs_two_matrices(self):
        with pytest.raises(ValueError):
            feedforward_as_deep_opteq([np.ones((2, 2))], [], relu(), 4)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = random_model(3, 5, 4, 6, 2, alpha=0.3, activation=leaky_relu(0.1), seed=30,
                             extractor_nonlinearity="tanh")
        model = replace(model, mu=1.5)
        path = tmp_path / "m.json"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        for a, b in zip(model.layers, loaded.layers):
            for u, v in ((a.W, b.W), (a.U, b.U), (a.b, b.b)):
                np.testing.assert_array_equal(u, v)
        np.testing.assert_array_equal(model.readout_W, loaded.readout_W)
        np.testing.assert_array_equal(model.extractor.W0, loaded.extractor.W0)
        assert (loaded.alpha, loaded.mu, loaded.activation, loaded.extractor.nonlinearity) == (0.3, 1.5, leaky_relu(0.1), "tanh")

    def test_second_save_byte_identical(self, tmp_path):
        model = random_model(2, 4, 3, 3, 1, seed=31)
        model = append_structural_regularizer(model, Regularizer("l1", lam=0.15), 0.5)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_checkpoint(model, a)
        save_checkpoint(load_checkpoint(a), b)
        assert a.read_bytes() == b.read_bytes()
        assert load_checkpoint(b).structural == (Regularizer("l1", lam=0.15), 0.5)

    def test_seventeen_significant_digits(self):
        model = random_model(1, 2, 2, 2, 1, seed=32)
        text = dumps_checkpoint(model)
        assert format(model.readout_W[0, 0], ".16e") in text
        assert json.loads(text)["dims"]["widths"] == [2]

    def test_rejects_foreign_documents(self):
        doc = model_to_dict(random_model(1, 2, 2, 2, 1, seed=33))
        with pytest.raises(ValueError):
            model_from_dict({**doc, "format": "other"})
        with pytest.raises(ValueError):
            model_from_dict({**doc, "version": 99})
        bad = json.loads(json.dumps(doc, default=lambda a: a.tolist()))
        bad["readout"] = [[1.0]]
        with pytest.raises(ValueError, match="readout"):
            model_from_dict(bad)
