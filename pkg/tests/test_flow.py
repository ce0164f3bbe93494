import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scoreflow import ode
from scoreflow.config import REFERENCE_DEFAULTS, SolverConfig, TrainConfig
from scoreflow.flow import (CnfBlock, CnfModel, ConcatSquashLayer, NumericError, concat_squash_apply,
                            dump_model, dynamics_eval, edit_latent, forward_map, log_density,
                            log_density_reference, nll_and_grad, parse_model, reverse_map,
                            train_mapper)

LOG_2PI = math.log(2 * math.pi)


def scalar_layer(layer, x, ctx):
    """Loop-level evaluation of (Wx + b) * sigmoid(W_g c + b_g) + W_c c."""
    out = []
    for i in range(layer.d_out):
        lin = sum(layer.W[i, j] * x[j] for j in range(layer.d_in)) + layer.b[i]
        g = 1.0 / (1.0 + math.exp(-(sum(layer.W_g[i, k] * ctx[k] for k in range(2)) + layer.b_g[i])))
        out.append(lin * g + sum(layer.W_c[i, k] * ctx[k] for k in range(2)))
    return np.array(out)


def linear_model(scale_w, d=1):
    """One block, one layer, zero context weights: phi = 0.5 * scale_w * w."""
    layer = ConcatSquashLayer(scale_w * np.eye(d), np.zeros(d), np.zeros((d, 2)), np.zeros(d), np.zeros((d, 2)))
    return CnfModel([CnfBlock([layer])])


class TestConcatSquash:
    def test_gate_half(self):
        layer = ConcatSquashLayer([[2.0]], [0.0], [[0.0, 0.0]], [0.0], [[0.0, 0.0]])
        assert concat_squash_apply(layer, [3.0], (0.0, 0.0)) == pytest.approx([3.0])

    def test_zero_layer(self):
        layer = ConcatSquashLayer.zeros(3, 4)
        np.testing.assert_array_equal(concat_squash_apply(layer, [1.0, -2.0, 5.0], (0.3, 0.9)), np.zeros(4))

    def test_matches_scalar_formula(self):
        layer = ConcatSquashLayer.random(2, 2, np.random.default_rng(5))
        got = concat_squash_apply(layer, [1.0, -1.0], (0.5, 0.7))
        np.testing.assert_allclose(got, scalar_layer(layer, [1.0, -1.0], (0.5, 0.7)), rtol=1e-13)

    def test_dimension_error(self):
        layer = ConcatSquashLayer.zeros(2, 2)
        with pytest.raises(ValueError, match="dimension"):
            concat_squash_apply(layer, [1.0, 2.0, 3.0], (0.0, 0.0))
        with pytest.raises(ValueError, match="dimension"):
            ConcatSquashLayer(np.zeros((2, 2)), np.zeros(3), np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)))


class TestDynamics:
    def test_zero_model(self):
        model = CnfModel.zeros(d=4, hidden=(8,))
        np.testing.assert_array_equal(dynamics_eval(model, 2, np.ones(4), (0.4, 0.6)), np.zeros(4))

    def test_identity_pass_through(self):
        w = np.array([0.7, -1.3])
        np.testing.assert_allclose(dynamics_eval(linear_model(2.0, d=2), 0, w, (0.1, 0.2)), w, rtol=0, atol=1e-15)

    def test_two_layer_hand_evaluation(self):
        rng = np.random.default_rng(11)
        l1, l2 = ConcatSquashLayer.random(2, 5, rng), ConcatSquashLayer.random(5, 2, rng)
        model = CnfModel([CnfBlock([l1, l2])])
        w, ctx = np.array([0.3, -0.2]), (0.0, 0.5)
        hand = scalar_layer(l2, np.tanh(scalar_layer(l1, w, ctx)), ctx)
        np.testing.assert_allclose(dynamics_eval(model, 0, w, ctx), hand, rtol=1e-12)

    def test_numeric_error_names_layer(self):
        model = CnfModel.create(d=2, num_blocks=2, hidden=(4,), seed=0)
        model.blocks[1].layers[1].W[0, 0] = np.inf
        with pytest.raises(NumericError, match="block 1, layer 1"):
            dynamics_eval(model, 1, np.ones(2), (0.5, 0.5))

    def test_block_index_checked(self):
        with pytest.raises(IndexError):
            dynamics_eval(CnfModel.zeros(d=2), 4, np.zeros(2), (0.0, 0.0))


class TestIntegrate:
    def test_zero_dynamics(self):
        w0 = np.array([0.25, -4.0])
        np.testing.assert_array_equal(ode.integrate(lambda w, t, s: 0.0 * w, w0, 0.5), w0)

    def test_exponential(self):
        got = ode.integrate(lambda w, t, s: w, np.array([1.0]), 0.5, solver=SolverConfig(steps=16))
        assert abs(got[0] - math.e) < 1e-5

    def test_time_dependent_field_sees_time(self):
        # dw/dt = t integrates to 1/2 exactly under RK4
        got = ode.integrate(lambda w, t, s: np.full_like(w, t), np.zeros(1), 0.0)
        assert got[0] == pytest.approx(0.5, abs=1e-14)

    def test_reverse_inverts_forward(self):
        field = lambda w, t, s: np.sin(w) * (1 + t) + s
        w0 = np.array([0.3, -1.2, 2.0])
        back = ode.integrate(field, ode.integrate(field, w0, 0.4), 0.4, direction=ode.REVERSE)
        assert np.abs(back - w0).max() < SolverConfig().tolerance

    def test_divergence_reports_step(self):
        with pytest.raises(ode.DivergenceError) as info, np.errstate(over="ignore"):
            ode.integrate(lambda w, t, s: w ** 3, np.array([50.0]), 0.0, solver=SolverConfig(steps=4))
        assert info.value.step >= 0

    def test_bad_direction(self):
        with pytest.raises(ValueError):
            ode.integrate(lambda w, t, s: w, np.zeros(1), 0.0, direction="sideways")


class TestMaps:
    def test_zero_model_is_identity(self):
        model = CnfModel.zeros(d=3)
        z = np.random.default_rng(0).normal(size=(10, 3))
        for s in (0.0, 0.3, 1.0):
            np.testing.assert_array_equal(forward_map(model, z, s), z)

    def test_roundtrip_and_determinism(self):
        model = CnfModel.create(d=4, hidden=(16,), seed=2, out_scale=0.5)
        z = np.random.default_rng(1).normal(size=(100, 4))
        w = forward_map(model, z, 0.3)
        assert np.abs(reverse_map(model, w, 0.3) - z).max() < 1e-3
        assert np.array_equal(w, forward_map(model, z, 0.3))

    def test_score_range_checked(self):
        with pytest.raises(ValueError):
            forward_map(CnfModel.zeros(d=2), np.zeros(2), 1.5)

    def test_latent_length_checked(self):
        with pytest.raises(ValueError):
            forward_map(CnfModel.zeros(d=2), np.zeros(3), 0.5)


class TestDensity:
    def test_zero_dynamics_origin(self):
        assert log_density(CnfModel.zeros(d=2), np.zeros(2), 0.5) == pytest.approx(-LOG_2PI, abs=1e-12)
        assert -LOG_2PI == pytest.approx(-1.837877, abs=1e-6)

    def test_zero_model_matches_standard_normal(self):
        w = np.random.default_rng(3).normal(size=(20, 5))
        want = -0.5 * (w * w).sum(1) - 2.5 * LOG_2PI
        np.testing.assert_allclose(log_density(CnfModel.zeros(d=5), w, 0.2), want, rtol=0, atol=1e-12)

    def test_linear_dynamics_closed_form(self):
        model = linear_model(1.0)  # phi = 0.5 w, log-det 0.5
        for w in (0.0, 0.8, -2.1):
            z = w * math.exp(-0.5)
            want = -0.5 * z * z - 0.5 * LOG_2PI - 0.5
            assert log_density(model, np.array([w]), 0.5) == pytest.approx(want, abs=1e-4)

    def test_matches_finite_difference_jacobian(self):
        model = CnfModel.create(d=2, hidden=(16,), seed=4, out_scale=0.8)
        rng = np.random.default_rng(9)
        w = rng.normal(size=(20, 2))
        got = log_density(model, w, 0.6)
        eps = 1e-5
        for k in range(20):
            z = reverse_map(model, w[k], 0.6)
            J = np.empty((2, 2))
            for j in range(2):
                dz = np.zeros(2)
                dz[j] = eps
                J[:, j] = (forward_map(model, z + dz, 0.6) - forward_map(model, z - dz, 0.6)) / (2 * eps)
            want = -0.5 * z @ z - LOG_2PI - math.log(abs(np.linalg.det(J)))
            assert got[k] == pytest.approx(want, abs=1e-3)

    def test_fast_path_matches_reference(self):
        model = CnfModel.create(d=3, hidden=(8, 6), seed=1, out_scale=0.7)
        w = np.random.default_rng(2).normal(size=(6, 3))
        np.testing.assert_allclose(log_density(model, w, 0.4), log_density_reference(model, w, 0.4), atol=1e-10)


def relative_errors(analytic, numeric, floor=1e-8):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


class TestTraining:
    def test_gradients_match_finite_differences(self):
        model = CnfModel.create(d=3, num_blocks=4, hidden=(8,), seed=3, out_scale=1.0)
        assert model.num_parameters() <= 500
        rng = np.random.default_rng(0)
        w, s = rng.normal(size=(8, 3)), rng.random(8)
        _, grads = nll_and_grad(model, w, s)
        analytic = np.concatenate([g.ravel() for g in grads])
        theta = model.flat_parameters()
        numeric = np.empty_like(theta)
        loss = lambda: -log_density_reference(model, w, s).mean()
        h = 1e-4
        for i in range(theta.size):
            t = theta.copy()
            t[i] += h
            model.set_flat_parameters(t)
            up = loss()
            t[i] -= 2 * h
            model.set_flat_parameters(t)
            numeric[i] = (up - loss()) / (2 * h)
        model.set_flat_parameters(theta)
        assert (relative_errors(analytic, numeric) < 1e-4).mean() >= 0.99

    def test_reported_loss_is_nll(self):
        model = CnfModel.create(d=2, hidden=(4,), seed=0, out_scale=0.5)
        w, s = np.random.default_rng(1).normal(size=(5, 2)), np.full(5, 0.5)
        loss, _ = nll_and_grad(model, w, s)
        assert loss == pytest.approx(-log_density(model, w, s).mean(), abs=1e-10)

    def test_zero_iterations_keeps_init(self):
        init = CnfModel.create(d=2, hidden=(4,), seed=5)
        before = init.flat_parameters().copy()
        out = train_mapper((np.zeros((10, 2)), np.full(10, 0.5)), TrainConfig(iterations=0), model=init)
        np.testing.assert_array_equal(out.flat_parameters(), before)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_mapper([], TrainConfig(iterations=1))

    def test_non_finite_loss_reports_iteration(self):
        model = CnfModel.create(d=2, hidden=(4,), seed=0)
        data = (np.full((10, 2), 1e200), np.full(10, 0.5))
        with pytest.raises((NumericError, FloatingPointError), match="iteration 0"), np.errstate(all="ignore"):
            train_mapper(data, TrainConfig(iterations=3, batch_size=5), model=model)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        data = (rng.normal(size=(64, 2)), rng.random(64))
        cfg = TrainConfig(iterations=20, batch_size=16, seed=3)
        a = train_mapper(data, cfg, hidden=(8,))
        b = train_mapper(data, cfg, hidden=(8,))
        assert dump_model(a) == dump_model(b)
        assert a.loss_curve == b.loss_curve

    def test_two_cluster_progress(self):
        rng = np.random.default_rng(0)
        n = 2000
        s = rng.integers(0, 2, size=n).astype(float)
        w = (2 * s[:, None] - 1) * 1.5 + 0.4 * rng.normal(size=(n, 2))
        held_s = rng.integers(0, 2, size=300).astype(float)
        held_w = (2 * held_s[:, None] - 1) * 1.5 + 0.4 * rng.normal(size=(300, 2))
        model = CnfModel.create(d=2, hidden=(32,), seed=0)
        initial = -log_density(model, held_w, held_s).mean()
        model = train_mapper((w, s), TrainConfig(iterations=2000, batch_size=50), model=model)
        final = -log_density(model, held_w, held_s).mean()
        assert final <= 0.8 * initial

    def test_reference_defaults_recorded(self):
        meta = TrainConfig().reference_defaults
        assert (meta["iterations"], meta["batch_size"], meta["learning_rate"]) == (80000, 50, 1e-3)
        assert REFERENCE_DEFAULTS["num_blocks"] == 4


class TestEdit:
    model = CnfModel.create(d=3, hidden=(8,), seed=6, out_scale=0.6)

    def test_zero_delta_is_identity(self):
        w = np.random.default_rng(0).normal(size=(10, 3))
        w2, s_t = edit_latent(self.model, w, np.full(10, 0.4), 0.0)
        assert np.abs(w2 - w).max() < 1e-3
        np.testing.assert_allclose(s_t, 0.4)

    def test_target_clamped(self):
        _, s_t = edit_latent(self.model, np.zeros(3), 0.9, 0.4)
        assert s_t == 1.0
        _, s_t = edit_latent(self.model, np.zeros(3), 0.1, -0.4)
        assert s_t == 0.0

    def test_delta_range(self):
        with pytest.raises(ValueError):
            edit_latent(self.model, np.zeros(3), 0.5, 0.41)

    def test_edit_matches_manual_composition(self):
        w = np.array([0.2, -0.4, 1.0])
        w2, _ = edit_latent(self.model, w, 0.3, 0.2)
        manual = forward_map(self.model, reverse_map(self.model, w, 0.3), 0.5)
        np.testing.assert_array_equal(w2, manual)


class TestModelFile:
    def test_roundtrip_bit_identical(self):
        model = CnfModel.create(d=5, num_blocks=3, hidden=(7,), attribute="dominance", seed=1).round_to_float32()
        back = parse_model(dump_model(model))
        assert dump_model(back) == dump_model(model)
        assert back.attribute == "dominance" and back.solver == model.solver
        z = np.random.default_rng(0).normal(size=(4, 5))
        np.testing.assert_array_equal(forward_map(back, z, 0.5), forward_map(model, z, 0.5))

    def test_bad_magic(self):
        blob = dump_model(CnfModel.zeros(d=2))
        with pytest.raises(ValueError, match="magic"):
            parse_model(b"XXXXXXXX" + blob[8:])

    def test_bad_version(self):
        blob = bytearray(dump_model(CnfModel.zeros(d=2)))
        blob[8] = 9
        with pytest.raises(ValueError, match="version"):
            parse_model(bytes(blob))

    def test_truncated(self):
        blob = dump_model(CnfModel.zeros(d=2))
        with pytest.raises(ValueError):
            parse_model(blob[:-3])


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_roundtrip_property(score, seed):
    model = CnfModel.create(d=3, num_blocks=2, hidden=(6,), seed=7, out_scale=0.5)
    z = np.random.default_rng(seed).normal(size=3)
    assert np.abs(reverse_map(model, forward_map(model, z, score), score) - z).max() < 1e-3


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(steps=0)
    with pytest.raises(ValueError):
        SolverConfig(tolerance=0.0)


@pytest.mark.parametrize("attr", ["trustworthiness", "dominance", "attractiveness"])
def test_trained_flow_is_solver_converged(bundle, attr):
    model = bundle.flow(attr)
    fine = model.copy()
    fine.solver = SolverConfig(steps=2 * model.solver.steps)
    rng = np.random.default_rng(17)
    z, s = rng.normal(size=(50, model.d)), rng.random(50)
    assert np.abs(forward_map(fine, z, s) - forward_map(model, z, s)).max() < 1e-4
    w = forward_map(model, z, s)
    assert np.abs(log_density(fine, w, s) - log_density(model, w, s)).max() < 1e-4
