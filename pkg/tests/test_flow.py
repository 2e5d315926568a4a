"""Tests for velocity assembly, integration, divergence, and likelihood."""

import math

import numpy as np
import pytest

from chowflow import controlnets as cn
from chowflow import diffcore as dc
from chowflow import flow
from chowflow.diffcore import ContractError, NumericError, reverse_grad
from chowflow.fields import chain_pair, coordinate_set
from chowflow.flow import (
    LOG_2PI,
    AugmentedState,
    SolverConfig,
    build_model,
    divergence_velocity,
    integrate,
    integrate_augmented,
    log_likelihood,
    log_p0,
    rk4_solve,
    sample,
    trajectory,
    velocity,
)
from chowflow.rng import SplitMix64


def constant_control_model(values, horizon=1.0):
    """Coordinate fields with a_i identically equal to values[i]."""
    d = len(values)
    model = build_model(coordinate_set(d, d), hidden=(), seed=0, horizon=horizon)
    for net, c in zip(model.controls, values):
        net.store.view(net.bias_name(0))[:] = c
    return model


def linear_control_model(lam, d=3, horizon=1.0):
    """Coordinate fields with a_i(t, x) = lam * x_i, so v(x) = lam * x."""
    model = build_model(coordinate_set(d, d), hidden=(), seed=0, horizon=horizon)
    for i, net in enumerate(model.controls):
        w = net.store.view(net.weight_name(0))
        w[1 + i, 0] = lam  # input layout is (t, x_1, ..., x_d)
    return model


def randomized_model(seed, hidden=(16, 16), d=3, scale=0.3):
    """Chain-pair model with non-zero controls of roughly unit scale."""
    model = build_model(chain_pair(d), hidden=hidden, seed=seed)
    rng = np.random.default_rng(seed)
    for net in model.controls:
        last = len(net.spec.layer_dims()) - 1
        net.store.view(net.weight_name(last))[:] = rng.normal(
            size=net.spec.layer_dims()[last]
        ) * scale
        net.store.view(net.bias_name(last))[:] = rng.normal(size=1) * scale
    return model


class TestVelocity:
    def test_zero_at_init(self):
        model = build_model(chain_pair(3), hidden=(8,), seed=1)
        rng = np.random.default_rng(0)
        for _ in range(5):
            v = velocity(model, float(rng.uniform()), rng.normal(size=3))
            np.testing.assert_array_equal(v.value, np.zeros(3))

    def test_constant_controls_coordinate_fields(self):
        model = constant_control_model([1.5, -2.0, 0.25])
        v = velocity(model, 0.3, np.array([9.0, 9.0, 9.0]))
        np.testing.assert_allclose(v.value, [1.5, -2.0, 0.25])

    def test_chain_pair_substitution(self):
        model = build_model(chain_pair(3), hidden=(), seed=0)
        a1, a2 = model.controls
        a1.store.view(a1.bias_name(0))[:] = 1.0  # a_1 = 1, a_2 = 0
        v = velocity(model, 0.0, np.array([0.0, 4.0, 0.0]))
        np.testing.assert_allclose(v.value, [1.0, 0.0, 4.0])

    def test_graph_and_numpy_agree(self):
        model = randomized_model(3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 3))
        graph = velocity(model, 0.7, x).value
        plain = flow._velocity_np(model, 0.7, x)
        np.testing.assert_array_equal(graph, plain)

    def test_batch_and_rowwise_agree(self):
        model = randomized_model(5)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 3))
        batch = velocity(model, 0.2, x).value
        rows = np.stack([velocity(model, 0.2, xi).value for xi in x])
        np.testing.assert_allclose(batch, rows, rtol=1e-13)

    def test_dim_mismatch(self):
        model = build_model(chain_pair(3), hidden=(), seed=0)
        with pytest.raises(ContractError):
            velocity(model, 0.0, np.zeros(4))


class TestDivergence:
    def test_zero_controls(self):
        model = build_model(chain_pair(3), hidden=(8,), seed=2)
        out = divergence_velocity(model, 0.5, np.array([0.1, -0.2, 0.3]))
        assert out.value == pytest.approx(0.0)

    def test_linear_controls_give_lambda_d(self):
        lam, d = 0.37, 3
        model = linear_control_model(lam, d)
        rng = np.random.default_rng(7)
        for _ in range(5):
            out = divergence_velocity(model, float(rng.uniform()), rng.normal(size=d))
            assert out.value == pytest.approx(lam * d, rel=1e-12)

    def test_matches_fd_divergence(self):
        h = 1e-4
        worst = 0.0
        for seed in range(3):
            model = randomized_model(seed)
            rng = np.random.default_rng(100 + seed)
            for _ in range(30):
                t = float(rng.uniform())
                x = rng.normal(size=3)
                exact = float(divergence_velocity(model, t, x).value)
                fd = 0.0
                for j in range(3):
                    e = np.zeros(3)
                    e[j] = h
                    fd += (
                        flow._velocity_np(model, t, x + e)[j]
                        - flow._velocity_np(model, t, x - e)[j]
                    ) / (2 * h)
                worst = max(worst, abs(exact - fd) / (abs(fd) + 1e-12))
        assert worst < 1e-4

    def test_graph_and_numpy_divergence_agree(self):
        model = randomized_model(11)
        rng = np.random.default_rng(12)
        x = rng.normal(size=(5, 3))
        graph = divergence_velocity(model, 0.4, x).value
        _, plain = flow._velocity_div_np(model, 0.4, x)
        np.testing.assert_allclose(graph, plain, rtol=1e-14)

    def test_differentiable_wrt_params(self):
        model = randomized_model(13, hidden=(4,))
        params = model.store.leaf_nodes()
        out = divergence_velocity(model, 0.3, np.array([0.5, -1.0, 0.2]), params)
        leaves = [params[name] for name in model.store.names()]
        grads = reverse_grad(out, leaves)
        total = sum(float(np.abs(g).sum()) for g in grads)
        assert np.isfinite(total) and total > 0.0


class TestIntegrate:
    def test_identity_at_init(self):
        model = build_model(chain_pair(3), hidden=(8, 8), seed=3)
        x0 = np.array([0.3, -1.4, 2.0])
        out = integrate(model, x0, SolverConfig(steps=16, direction="forward"))
        np.testing.assert_array_equal(out, x0)

    def test_exponential_oracle(self):
        # dx/dt = x from 1 over unit time: endpoint is e
        out = rk4_solve(lambda t, y: y, 1.0, 0.0, 1.0, 16)
        assert abs(out - 2.718282) < 1e-4
        assert out == pytest.approx(math.e, rel=1e-5)

    def test_exponential_through_model(self):
        # coordinate fields with a_i = x_i realize v(x) = x
        model = linear_control_model(1.0, d=3)
        out = integrate(model, np.ones(3), SolverConfig(steps=16, direction="forward"))
        np.testing.assert_allclose(out, np.full(3, math.e), rtol=1e-6)

    def test_rk4_order(self):
        errors = {
            k: abs(rk4_solve(lambda t, y: y, 1.0, 0.0, 1.0, k) - math.e)
            for k in (4, 8, 16, 32)
        }
        for k in (4, 8, 16):
            assert errors[k] / errors[2 * k] >= 8.0

    def test_round_trip(self):
        model = randomized_model(21)
        rng = np.random.default_rng(22)
        x = rng.normal(size=(100, 3))
        z = integrate(model, x, SolverConfig(steps=64, direction="backward"))
        back = integrate(model, z, SolverConfig(steps=64, direction="forward"))
        assert np.max(np.abs(back - x)) < 1e-3

    def test_nonfinite_initial_state(self):
        model = build_model(chain_pair(3), hidden=(), seed=0)
        with pytest.raises(NumericError):
            integrate(model, np.array([np.nan, 0.0, 0.0]), SolverConfig(steps=4))

    def test_step_index_in_numeric_error(self):
        model = linear_control_model(1e40, d=3)  # overflows within a step or two
        with np.errstate(all="ignore"), pytest.raises(NumericError, match="step"):
            integrate(model, np.ones(3) * 10, SolverConfig(steps=8, direction="forward"))


class TestIntegrateAugmented:
    def test_zero_controls_zero_delta(self):
        model = build_model(chain_pair(3), hidden=(8,), seed=4)
        state = integrate_augmented(model, np.ones(3), SolverConfig(steps=16))
        assert isinstance(state, AugmentedState)
        assert state.delta == 0.0

    def test_linear_delta_exact(self):
        lam, d = 0.5, 3
        model = linear_control_model(lam, d)
        state = integrate_augmented(model, np.ones(d), SolverConfig(steps=16))
        # constant integrand: RK4 is exact
        assert state.delta == pytest.approx(lam * d, abs=1e-12)

    def test_backward_delta_sign(self):
        lam, d = 0.5, 3
        model = linear_control_model(lam, d)
        state = integrate_augmented(
            model, np.ones(d), SolverConfig(steps=16, direction="backward")
        )
        assert state.delta == pytest.approx(lam * d, abs=1e-12)

    def test_forward_backward_delta_consistency(self):
        model = randomized_model(31)
        rng = np.random.default_rng(32)
        z = rng.normal(size=(20, 3))
        fwd = integrate_augmented(model, z, SolverConfig(steps=64, direction="forward"))
        bwd = integrate_augmented(
            model, fwd.x, SolverConfig(steps=64, direction="backward")
        )
        np.testing.assert_allclose(bwd.delta, fwd.delta, atol=1e-6)


class TestLogLikelihood:
    def test_origin_zero_controls(self):
        model = build_model(chain_pair(3), hidden=(8,), seed=5)
        out = log_likelihood(model, np.zeros(3), SolverConfig.for_training())
        assert out.value == pytest.approx(-1.5 * LOG_2PI)
        assert out.value == pytest.approx(-2.75682, abs=1e-5)

    def test_identity_at_init_exact(self):
        model = build_model(chain_pair(3), hidden=(16, 16), seed=6)
        rng = np.random.default_rng(40)
        x = rng.normal(size=(50, 3))
        out = log_likelihood(model, x, SolverConfig.for_training()).value
        np.testing.assert_array_equal(out, log_p0(x))

    def test_linear_flow_closed_form(self):
        lam, d = 0.5, 3
        model = linear_control_model(lam, d)
        cfg = SolverConfig(steps=64, direction="backward")

        def closed_form(x):
            return -0.5 * d * LOG_2PI - 0.5 * np.exp(-2 * lam) * np.sum(x * x, axis=-1) - lam * d

        x_ref = np.ones(3)
        got = log_likelihood(model, x_ref, cfg).value
        assert got == pytest.approx(closed_form(x_ref), abs=1e-4)
        assert got == pytest.approx(-4.8086, abs=1e-4)

        rng = np.random.default_rng(41)
        xs = rng.normal(size=(100, 3)) * 1.5
        got = log_likelihood(model, xs, cfg).value
        np.testing.assert_allclose(got, closed_form(xs), atol=1e-4)

    def test_matches_numpy_augmented_path(self):
        model = randomized_model(51)
        rng = np.random.default_rng(52)
        x = rng.normal(size=(10, 3))
        cfg = SolverConfig(steps=16, direction="backward")
        graph = log_likelihood(model, x, cfg).value
        state = integrate_augmented(model, x, cfg)
        plain = log_p0(state.x) - state.delta
        np.testing.assert_allclose(graph, plain, rtol=1e-12)

    def test_rejects_forward_config(self):
        model = build_model(chain_pair(3), hidden=(), seed=0)
        with pytest.raises(ContractError):
            log_likelihood(model, np.zeros(3), SolverConfig(steps=4, direction="forward"))

    def test_differentiable_wrt_params(self):
        model = randomized_model(53, hidden=(4,))
        params = model.store.leaf_nodes()
        out = log_likelihood(
            model, np.array([0.4, -0.1, 0.9]), SolverConfig(steps=4, direction="backward"),
            params,
        )
        leaves = [params[name] for name in model.store.names()]
        grads = reverse_grad(out, leaves)
        assert sum(float(np.abs(g).sum()) for g in grads) > 0.0


class TestSample:
    def test_zero_controls_returns_base_draws(self):
        model = build_model(chain_pair(3), hidden=(8,), seed=7)
        got = sample(model, 50, seed=123, cfg=SolverConfig.for_sampling())
        expected = SplitMix64(123).normal((50, 3))
        np.testing.assert_array_equal(got, expected)

    def test_deterministic_given_seed(self):
        model = randomized_model(61)
        cfg = SolverConfig.for_sampling(steps=16)
        a = sample(model, 20, seed=9, cfg=cfg)
        b = sample(model, 20, seed=9, cfg=cfg)
        assert a.tobytes() == b.tobytes()

    def test_rejects_backward(self):
        model = build_model(chain_pair(3), hidden=(), seed=0)
        with pytest.raises(ContractError):
            sample(model, 5, seed=0, cfg=SolverConfig(steps=4, direction="backward"))


class TestTrajectory:
    def test_zero_controls(self):
        model = build_model(chain_pair(3), hidden=(8,), seed=8)
        x0 = np.array([1.0, 2.0, 3.0])
        times, states, deltas = trajectory(model, x0, steps=16)
        assert states.shape == (17, 3)
        assert np.all(states == x0)
        assert np.all(deltas == 0.0)
        assert times[0] == 0.0 and times[-1] == pytest.approx(1.0)

    def test_final_row_matches_integrate(self):
        model = randomized_model(71)
        x0 = np.array([0.5, -0.5, 1.0])
        _, states, deltas = trajectory(model, x0, steps=16)
        endpoint = integrate(model, x0, SolverConfig(steps=16, direction="forward"))
        np.testing.assert_array_equal(states[-1], endpoint)
        aug = integrate_augmented(model, x0, SolverConfig(steps=16, direction="forward"))
        assert deltas[-1] == pytest.approx(aug.delta, rel=1e-12)


class TestSolverConfig:
    def test_defaults(self):
        assert SolverConfig.for_training().steps == 16
        assert SolverConfig.for_training().direction == "backward"
        assert SolverConfig.for_sampling().steps == 64
        assert SolverConfig.for_sampling().direction == "forward"

    def test_validation(self):
        with pytest.raises(ContractError):
            SolverConfig(steps=0)
        with pytest.raises(ContractError):
            SolverConfig(steps=4, direction="sideways")
