import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opteq.activations import Activation, leaky_relu, relu, sigmoid_shifted, tanh
from opteq.oracles import fd_gradient, prox_oracle
from opteq.tensors import ConvergenceError
from opteq.unitlayer import (
    LayerParams,
    Potential,
    UnitLayerConfig,
    averaged_forward,
    check_nonexpansive_conditions,
    closed_form_potential,
    moreau_envelope,
    orthant_indicator,
    phi_closed_form,
    prox_characterization_check,
    psi_value,
    quadratic_potential,
    unit_forward,
)

RELU = UnitLayerConfig(1.0, 1.0, relu())


def invertible(m, d, seed, norm=1.0):
    rng = np.random.default_rng(seed)
    Q1, _ = np.linalg.qr(rng.standard_normal((m, m)))
    Q2, _ = np.linalg.qr(rng.standard_normal((m, m)))
    s = np.sort(rng.uniform(0.2, 1.0, m))[::-1]
    s *= norm / s[0]
    return LayerParams(Q1 @ np.diag(s) @ Q2.T, rng.standard_normal((m, d)), 0.3 * rng.standard_normal(m))


def identity_layer(m=2, d=1):
    return LayerParams(np.eye(m), np.zeros((m, d)), np.zeros(m))


class TestLayerParams:
    def test_certified_norm(self):
        p = invertible(4, 2, 0, norm=0.7)
        assert p.certified_norm == pytest.approx(0.7, abs=1e-8)

    def test_replace_recomputes_norm(self):
        p = identity_layer()
        q = p.replace(W=2.0 * np.eye(2))
        assert q.certified_norm == pytest.approx(2.0)
        assert p.certified_norm == pytest.approx(1.0)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            LayerParams(np.eye(2), np.zeros((3, 1)), np.zeros(2))
        with pytest.raises(ValueError):
            LayerParams(np.eye(2), np.zeros((2, 1)), np.zeros(3))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            UnitLayerConfig(mu=0.0)
        with pytest.raises(ValueError):
            UnitLayerConfig(alpha=0.0)
        with pytest.raises(ValueError):
            UnitLayerConfig(alpha=1.5)

    def test_nonexpansive_conditions(self):
        check_nonexpansive_conditions(identity_layer(), RELU)
        with pytest.raises(ValueError):
            check_nonexpansive_conditions(identity_layer().replace(W=1.5 * np.eye(2)), RELU)
        # mu can compensate for a large W
        check_nonexpansive_conditions(identity_layer().replace(W=1.5 * np.eye(2)),
                                 UnitLayerConfig(2.25, 1.0, relu()))


class TestUnitForward:
    def test_orthant_projection(self):
        np.testing.assert_array_equal(unit_forward(identity_layer(), RELU, np.array([-1.0, 2.0]), np.zeros(1)), [0.0, 2.0])

    def test_zero_weights(self):
        p = LayerParams(np.zeros((3, 2)), np.ones((3, 1)), np.ones(3))
        np.testing.assert_array_equal(unit_forward(p, RELU, np.array([5.0, -4.0]), np.ones(1)), 0.0)

    def test_linear_scalar(self):
        p = LayerParams(np.array([[0.5]]), np.array([[1.0]]), np.array([0.0]))
        cfg = UnitLayerConfig(1.0, 1.0, leaky_relu(1.0))
        assert unit_forward(p, cfg, np.array([2.0]), np.array([1.0]))[0] == pytest.approx(1.0)

    def test_mu_scales_output(self):
        p = invertible(3, 2, 1)
        z, x = np.ones(3), np.ones(2)
        np.testing.assert_allclose(unit_forward(p, UnitLayerConfig(2.0, 1.0, relu()), z, x),
                                   0.5 * unit_forward(p, RELU, z, x))

    def test_batch_columns_match_vectors(self):
        p = invertible(3, 2, 2)
        rng = np.random.default_rng(0)
        Z, X = rng.standard_normal((3, 5)), rng.standard_normal((2, 5))
        out = unit_forward(p, RELU, Z, X)
        for j in range(5):
            np.testing.assert_allclose(out[:, j], unit_forward(p, RELU, Z[:, j], X[:, j]))

    def test_dimension_errors_name_operand(self):
        p = invertible(3, 2, 3)
        with pytest.raises(ValueError, match="z has dimension"):
            unit_forward(p, RELU, np.ones(4), np.ones(2))
        with pytest.raises(ValueError, match="x has dimension"):
            unit_forward(p, RELU, np.ones(3), np.ones(5))


class TestAveragedForward:
    def test_alpha_one(self):
        p = invertible(3, 2, 4)
        z, x = np.arange(3.0), np.ones(2)
        np.testing.assert_array_equal(averaged_forward(p, RELU, z, x), unit_forward(p, RELU, z, x))

    def test_zero_weights_halves(self):
        p = LayerParams(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1))
        out = averaged_forward(p, UnitLayerConfig(1.0, 0.5, relu()), np.array([2.0]), np.zeros(1))
        np.testing.assert_allclose(out, [1.0])

    def test_fixed_point_preserved(self):
        p = identity_layer()
        z = np.array([0.0, 3.0])
        np.testing.assert_array_equal(averaged_forward(p, UnitLayerConfig(1.0, 0.5, relu()), z, np.zeros(1)), z)

    @pytest.mark.parametrize("seed", range(10))
    def test_fixed_points_shared(self, seed):
        p = invertible(4, 2, 10 + seed, norm=0.9)
        x = np.random.default_rng(seed).standard_normal(2)
        z = np.zeros(4)
        for _ in range(2000):
            z = unit_forward(p, RELU, z, x)
        assert np.linalg.norm(z - unit_forward(p, RELU, z, x)) < 1e-10
        for a in (0.1, 0.5, 1.0):
            assert np.linalg.norm(z - averaged_forward(p, UnitLayerConfig(1.0, a, relu()), z, x)) < 1e-9


class TestPsi:
    def test_relu_value(self):
        p = identity_layer()
        assert psi_value(p, RELU, np.array([1.0, -1.0]), np.zeros(1)) == 0.5

    def test_zero(self):
        p = invertible(3, 2, 5)
        p = p.replace(b=np.zeros(3))
        assert psi_value(p, RELU, np.zeros(3), np.zeros(2)) == 0.0

    @pytest.mark.parametrize("act", [relu(), leaky_relu(0.1), tanh(), sigmoid_shifted()], ids=lambda a: a.kind)
    def test_gradient_is_layer(self, act):
        p = invertible(5, 3, 6)
        rng = np.random.default_rng(7)
        x, z = rng.standard_normal(3), rng.standard_normal(5)
        cfg = UnitLayerConfig(1.0, 1.0, act)
        g = fd_gradient(lambda v: psi_value(p, cfg, v, x), z, h=1e-5)
        np.testing.assert_allclose(g, unit_forward(p, cfg, z, x), atol=1e-6)


class TestPhiClosedForm:
    def test_orthant_interior(self):
        assert phi_closed_form(identity_layer(), RELU, np.array([1.0, 1.0]), np.zeros(1)) == pytest.approx(0.0, abs=1e-15)

    def test_outside_domain(self):
        assert phi_closed_form(identity_layer(), RELU, np.array([-1.0, 1.0]), np.zeros(1)) == np.inf

    def test_boundary_is_finite(self):
        assert phi_closed_form(identity_layer(), RELU, np.array([0.0, 1.0]), np.zeros(1)) == pytest.approx(0.0, abs=1e-15)

    def test_singular_rejected(self):
        p = LayerParams(np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros((2, 1)), np.zeros(2))
        with pytest.raises(ValueError, match="singular"):
            phi_closed_form(p, RELU, np.ones(2), np.zeros(1))

    def test_non_square_rejected(self):
        p = LayerParams(np.ones((3, 2)), np.zeros((3, 1)), np.zeros(3))
        with pytest.raises(ValueError):
            phi_closed_form(p, RELU, np.ones(2), np.zeros(1))

    def test_unsupported_activation(self):
        with pytest.raises(ValueError):
            phi_closed_form(identity_layer(), UnitLayerConfig(1.0, 1.0, tanh()), np.ones(2), np.zeros(1))

    def test_mu_must_be_one(self):
        with pytest.raises(ValueError):
            phi_closed_form(identity_layer(), UnitLayerConfig(2.0, 1.0, relu()), np.ones(2), np.zeros(1))

    @pytest.mark.parametrize("seed", range(10))
    def test_prox_identity_against_oracle(self, seed):
        m = (2, 4, 8)[seed % 3]
        p = invertible(m, 3, 20 + seed)
        rng = np.random.default_rng(seed)
        x, z = rng.standard_normal(3), 2.0 * rng.standard_normal(m)
        f = unit_forward(p, RELU, z, x)
        assert np.linalg.norm(f - prox_oracle(p.W, p.U @ x + p.b, z)) <= 1e-5

    @pytest.mark.parametrize("slope", [0.1, 0.5])
    def test_leaky_prox_identity(self, slope):
        p = invertible(4, 2, 30)
        cfg = UnitLayerConfig(1.0, 1.0, leaky_relu(slope))
        rng = np.random.default_rng(31)
        x, z = rng.standard_normal(2), rng.standard_normal(4)
        _, u = moreau_envelope(closed_form_potential(p, cfg, x), 1.0, z, inner_tol=1e-12, max_iter=100_000)
        np.testing.assert_allclose(u, unit_forward(p, cfg, z, x), atol=1e-6)

    def test_phi_convex_along_segments(self):
        p = invertible(3, 2, 32)
        x = np.ones(2)
        rng = np.random.default_rng(33)
        for _ in range(50):
            s1, s2 = rng.uniform(0, 2, 3), rng.uniform(0, 2, 3)
            a, b = p.W.T @ s1, p.W.T @ s2
            mid = phi_closed_form(p, RELU, 0.5 * (a + b), x)
            assert mid <= 0.5 * (phi_closed_form(p, RELU, a, x) + phi_closed_form(p, RELU, b, x)) + 1e-9


class TestMoreauEnvelope:
    def test_quadratic(self):
        val, u = moreau_envelope(quadratic_potential(), 1.0, np.array([2.0, 0.0]))
        assert val == pytest.approx(1.0, abs=1e-10)
        np.testing.assert_allclose(u, [1.0, 0.0], atol=1e-8)

    def test_orthant_indicator(self):
        val, u = moreau_envelope(orthant_indicator(2), 1.0, np.array([-2.0, 3.0]))
        assert val == pytest.approx(2.0, abs=1e-10)
        np.testing.assert_allclose(u, [0.0, 3.0], atol=1e-10)

    def test_gradient_identity(self):
        p = invertible(4, 2, 40, norm=0.9)
        x = np.random.default_rng(41).standard_normal(2)
        phi = closed_form_potential(p, RELU, x)
        mu = 1.0 - 0.6
        z = np.random.default_rng(42).standard_normal(4)
        _, u = moreau_envelope(phi, mu, z, inner_tol=1e-11, max_iter=100_000)
        g = fd_gradient(lambda v: moreau_envelope(phi, mu, v, inner_tol=1e-11, max_iter=100_000)[0], z, h=1e-5)
        np.testing.assert_allclose(g, (z - u) / mu, atol=1e-5)

    def test_mu_positive(self):
        with pytest.raises(ValueError):
            moreau_envelope(quadratic_potential(), 0.0, np.ones(2))

    def test_nonconvergence(self):
        # a badly conditioned quadratic with a tiny iteration budget
        phi = Potential(lambda u: 0.5 * 1e6 * u[0] ** 2, lambda u: np.array([1e6 * u[0], 0.0]))
        with pytest.raises(ConvergenceError):
            moreau_envelope(phi, 1.0, np.array([1.0, 1.0]), inner_tol=1e-14, max_iter=1)

    def test_conic_potential_needs_cone_functions(self):
        with pytest.raises(ValueError):
            Potential(lambda u: 0.0, lambda u: u, cone=np.eye(2))


class TestProxCharacterization:
    def test_identity_projection(self):
        rep = prox_characterization_check(identity_layer(3), RELU, samples=10)
        assert rep.max_jacobian_asymmetry < 1e-8
        assert rep.max_expansion <= 1.0 + 1e-9

    def test_tanh_contraction_bound(self):
        p = invertible(5, 2, 50, norm=0.9)
        rep = prox_characterization_check(p, UnitLayerConfig(1.0, 1.0, tanh()), seed=1)
        assert rep.max_expansion <= 0.81 + 1e-6

    def test_negative_control(self):
        Q, _ = np.linalg.qr(np.random.default_rng(51).standard_normal((4, 4)))
        p = LayerParams(1.5 * Q, np.zeros((4, 1)), np.ones(4))
        rep = prox_characterization_check(p, RELU, seed=2)
        assert rep.max_expansion > 1.0

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["relu", "leaky_relu", "tanh", "sigmoid_shifted"]),
           st.floats(0.3, 1.0))
    def test_symmetric_nonexpansive_psd(self, seed, kind, norm):
        p = invertible(4, 2, seed, norm=norm)
        rep = prox_characterization_check(p, UnitLayerConfig(1.0, 1.0, Activation.from_config(kind)),
                                          samples=5, seed=seed)
        assert rep.max_jacobian_asymmetry < 1e-6
        assert rep.max_expansion <= 1.0 + 1e-9
        assert rep.min_eigenvalue >= -1e-6
        assert rep.max_eigenvalue <= 1.0 + 1e-6
