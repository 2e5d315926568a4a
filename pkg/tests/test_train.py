"""Tests for the NLL training loop, clipping, and Adam."""

import math

import numpy as np
import pytest

from chowflow import diffcore as dc
from chowflow import train as tr
from chowflow.data import gen_mixture
from chowflow.diffcore import ContractError, NumericError, ParamStore
from chowflow.fields import chain_pair
from chowflow.flow import build_model
from chowflow.rng import SplitMix64
from chowflow.train import (
    AdamState,
    TrainConfig,
    TrainingAborted,
    adam_update,
    clip_by_global_norm,
    nll_batch,
    train_loop,
)


def tiny_model(seed=3, hidden=(4,), randomize=True):
    model = build_model(chain_pair(3), hidden=hidden, seed=seed)
    if randomize:
        rng = np.random.default_rng(seed + 100)
        for net in model.controls:
            last = len(net.spec.layer_dims()) - 1
            net.store.view(net.weight_name(last))[:] = (
                rng.normal(size=net.spec.layer_dims()[last]) * 0.5
            )
            net.store.view(net.bias_name(last))[:] = rng.normal(size=1) * 0.5
    return model


class TestNllBatch:
    def test_single_origin_point_zero_controls(self):
        model = build_model(chain_pair(3), hidden=(8,), seed=1)
        cfg = TrainConfig(iterations=1, batch=1, k_steps=16, seed=0)
        out = nll_batch(model, np.zeros((1, 3)), cfg)
        assert out.value == pytest.approx(1.5 * math.log(2 * math.pi))
        assert out.value == pytest.approx(2.75682, abs=1e-5)

    def test_gaussian_batch_matches_entropy(self):
        # zero controls: NLL is the sample mean of -log p0, expectation
        # (d/2) log(2 pi e) = 4.2568 for d = 3
        model = build_model(chain_pair(3), hidden=(8,), seed=2)
        batch = SplitMix64(5).normal((4096, 3))
        cfg = TrainConfig(iterations=1, batch=4096, k_steps=4, seed=0)
        got = float(nll_batch(model, batch, cfg).value)
        expected = -np.mean(
            -1.5 * math.log(2 * math.pi) - 0.5 * np.sum(batch * batch, axis=1)
        )
        assert got == pytest.approx(expected, rel=1e-12)
        assert abs(got - 1.5 * math.log(2 * math.pi * math.e)) < 0.1

    def test_parameter_gradient_matches_fd(self):
        model = tiny_model()
        cfg = TrainConfig(iterations=1, batch=4, k_steps=4, seed=0)
        batch = SplitMix64(11).normal((4, 3))
        params = model.store.leaf_nodes()
        loss = nll_batch(model, batch, cfg, params)
        grads = dc.reverse_grad(loss, [params[n] for n in model.store.names()])
        flat = model.store.flatten(dict(zip(model.store.names(), grads)))

        h = 1e-4
        base = model.store.flat.copy()
        fd = np.zeros_like(flat)
        for j in range(len(base)):
            model.store.flat[:] = base
            model.store.flat[j] += h
            f_plus = float(nll_batch(model, batch, cfg).value)
            model.store.flat[:] = base
            model.store.flat[j] -= h
            f_minus = float(nll_batch(model, batch, cfg).value)
            fd[j] = (f_plus - f_minus) / (2 * h)
        model.store.flat[:] = base
        worst = np.max(np.abs(flat - fd) / (np.abs(fd) + 1e-12))
        assert worst < 1e-3

    def test_nonfinite_batch_rejected(self):
        model = tiny_model()
        cfg = TrainConfig(iterations=1, batch=2, k_steps=4, seed=0)
        bad = np.array([[0.0, 0.0, np.nan], [1.0, 1.0, 1.0]])
        with pytest.raises(NumericError):
            nll_batch(model, bad, cfg)

    def test_dim_mismatch(self):
        model = tiny_model()
        cfg = TrainConfig(iterations=1, batch=2, k_steps=4, seed=0)
        with pytest.raises(ContractError):
            nll_batch(model, np.zeros((2, 4)), cfg)


class TestClip:
    def test_large_vector_scaled(self):
        g = np.full(16, 5.0)  # norm 20
        out = clip_by_global_norm(g, 10.0)
        assert np.linalg.norm(out) == pytest.approx(10.0)
        np.testing.assert_allclose(out / np.linalg.norm(out), g / np.linalg.norm(g))

    def test_small_vector_unchanged(self):
        g = np.array([1.0, 2.0, 2.0])  # norm 3
        np.testing.assert_array_equal(clip_by_global_norm(g, 10.0), g)

    def test_zero_vector(self):
        np.testing.assert_array_equal(clip_by_global_norm(np.zeros(5), 10.0), np.zeros(5))

    def test_bound_holds_over_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            g = rng.normal(size=50) * rng.uniform(0, 40)
            out = clip_by_global_norm(g, 10.0)
            assert np.linalg.norm(out) <= 10.0 + 1e-9

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            clip_by_global_norm(np.array([1.0, np.inf]), 10.0)


class TestAdam:
    def test_first_step_magnitude(self):
        store = ParamStore([("t", (3,))])
        store.view("t")[:] = [5.0, 5.0, 5.0]
        state = AdamState.zeros(3)
        grads = np.array([0.3, -2.0, 100.0])
        before = store.flat.copy()
        adam_update(store, grads, state, lr=1e-3)
        # bias-corrected ratio is 1 on step one: update is lr per coordinate
        np.testing.assert_allclose(np.abs(store.flat - before), 1e-3, rtol=1e-4)
        assert np.all(np.sign(before - store.flat) == np.sign(grads))

    def test_zero_grads_leave_params(self):
        store = ParamStore([("t", (4,))])
        store.view("t")[:] = [1.0, -2.0, 3.0, 0.5]
        state = AdamState.zeros(4)
        before = store.flat.copy()
        for _ in range(50):
            adam_update(store, np.zeros(4), state, lr=1e-2)
        np.testing.assert_array_equal(store.flat, before)

    def test_quadratic_bowl_converges(self):
        store = ParamStore([("t", (2,))])
        store.view("t")[:] = [1.0, 1.0]
        state = AdamState.zeros(2)
        for _ in range(500):
            adam_update(store, 2.0 * store.flat, state, lr=1e-2)
        assert np.linalg.norm(store.flat) < 1e-3

    def test_layout_mismatch(self):
        store = ParamStore([("t", (2,))])
        with pytest.raises(ContractError):
            adam_update(store, np.zeros(3), AdamState.zeros(2), lr=1e-3)
        with pytest.raises(ContractError):
            adam_update(store, np.zeros(2), AdamState.zeros(3), lr=1e-3)


class TestTrainLoop:
    def test_zero_iterations(self):
        model = tiny_model()
        before = model.store.flat.copy()
        data = gen_mixture(500, seed=1).points
        cfg = TrainConfig(iterations=0, batch=32, k_steps=4, seed=0)
        model, history = train_loop(model, data, cfg)
        assert len(history) == 0
        np.testing.assert_array_equal(model.store.flat, before)

    def test_descent_trend_small_run(self):
        model = build_model(chain_pair(3), hidden=(16, 16), seed=7)
        data = gen_mixture(2000, seed=2).points
        cfg = TrainConfig(iterations=80, batch=64, k_steps=8, seed=3)
        model, history = train_loop(model, data, cfg)
        assert len(history) == 80
        assert np.mean(history.values[-10:]) < np.mean(history.values[:10])

    def test_determinism_bit_identical(self):
        def run():
            model = build_model(chain_pair(3), hidden=(8,), seed=9)
            data = gen_mixture(400, seed=4).points
            cfg = TrainConfig(iterations=10, batch=32, k_steps=4, seed=5)
            model, history = train_loop(model, data, cfg)
            return np.asarray(history.values).tobytes(), model.store.flat.tobytes()

        assert run() == run()

    def test_abort_carries_iteration_and_history(self):
        model = tiny_model()
        data = gen_mixture(400, seed=6).points
        cfg = TrainConfig(
            iterations=50, batch=32, k_steps=4, seed=7, learning_rate=1e6
        )
        with np.errstate(all="ignore"), pytest.raises(TrainingAborted) as info:
            train_loop(model, data, cfg)
        err = info.value
        assert isinstance(err.cause, NumericError)
        assert len(err.history) == err.iteration
        assert "iteration" in str(err)

    def test_dataset_dim_mismatch(self):
        model = tiny_model()
        with pytest.raises(ContractError):
            train_loop(model, np.zeros((10, 4)), TrainConfig(iterations=1, seed=0))


class TestTrainConfig:
    def test_defaults_match_reference_settings(self):
        cfg = TrainConfig()
        assert cfg.iterations == 3000
        assert cfg.batch == 512
        assert cfg.learning_rate == 1e-3
        assert cfg.clip_norm == 10.0
        assert cfg.k_steps == 16
        assert cfg.horizon == 1.0

    def test_validation(self):
        with pytest.raises(ContractError):
            TrainConfig(iterations=-1)
        with pytest.raises(ContractError):
            TrainConfig(batch=0)
        with pytest.raises(ContractError):
            TrainConfig(learning_rate=-0.1)
