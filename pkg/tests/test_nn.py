from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from labeldist.data import synth_gaussians
from labeldist.errors import ArchMismatchError, ConfigError, DataError
from labeldist.nn import (
    ArchSpec,
    MlpParams,
    TrainConfig,
    accuracy,
    backward,
    cross_entropy_loss,
    flatten_params,
    forward,
    init_params,
    load_params,
    save_params,
    softmax,
    train_classifier,
    unflatten_params,
)


def zero_params(arch: ArchSpec) -> MlpParams:
    return MlpParams(tuple(np.zeros(s) for s in arch.shapes), tuple(np.zeros(s[1]) for s in arch.shapes))


def one_hot(ids, c):
    return np.eye(c)[np.asarray(ids)]


class TestArchSpec:
    def test_mnist_count(self):
        arch = ArchSpec(784, (128, 32, 16, 2))
        by_hand = 784 * 128 + 128 + 128 * 32 + 32 + 32 * 16 + 16 + 16 * 2 + 2
        assert by_hand == 105_170
        assert arch.n_params == by_hand
        assert flatten_params(init_params(arch, 0)).size == by_hand

    def test_sigmoid_head_has_one_unit(self):
        arch = ArchSpec(3, (4, 2), "relu", "sigmoid")
        assert arch.shapes == [(3, 4), (4, 1)]
        assert arch.n_classes == 2

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(input_dim=0, layer_sizes=(2,)),
            dict(input_dim=2, layer_sizes=()),
            dict(input_dim=2, layer_sizes=(3, 1)),
            dict(input_dim=2, layer_sizes=(3,), output_activation="sigmoid"),
            dict(input_dim=2, layer_sizes=(2,), hidden_activation="tanh"),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ArchSpec(**kwargs)

    def test_fingerprint_round_trip(self):
        arch = ArchSpec(5, (4, 3, 2), "elu", "sigmoid")
        assert ArchSpec.from_fingerprint(arch.fingerprint()) == arch


class TestInit:
    def test_biases_zero_and_deterministic(self):
        arch = ArchSpec(4, (3, 2), "elu", "softmax")
        a, b = init_params(arch, 7), init_params(arch, 7)
        assert all(np.all(bias == 0) for bias in a.biases)
        assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))

    def test_scale_bound(self):
        arch = ArchSpec(16, (8, 2))
        p = init_params(arch, 3, init_scale=0.5)
        assert np.abs(p.weights[0]).max() <= 0.5 / 4
        assert np.abs(p.weights[1]).max() <= 0.5 / math.sqrt(8)


class TestForward:
    @pytest.mark.parametrize("c", [2, 4])
    def test_zero_net_uniform(self, c):
        arch = ArchSpec(3, (5, c))
        out = forward(zero_params(arch), arch, np.ones((6, 3)))
        np.testing.assert_allclose(out, 1.0 / c, atol=1e-15)

    def test_hand_softmax(self):
        arch = ArchSpec(1, (2,))
        params = MlpParams((np.array([[1.0, -1.0]]),), (np.zeros(2),))
        out = forward(params, arch, np.array([1.0]))
        e = math.exp(2.0)
        np.testing.assert_allclose(out, [e / (1 + e), 1 / (1 + e)], atol=1e-12)
        np.testing.assert_allclose(out, [0.880797, 0.119203], atol=1e-6)

    def test_sigmoid_pair(self):
        arch = ArchSpec(1, (2,), output_activation="sigmoid")
        params = MlpParams((np.array([[2.0]]),), (np.zeros(1),))
        s = 1 / (1 + math.exp(-2.0))
        np.testing.assert_allclose(forward(params, arch, np.array([1.0])), [s, 1 - s], atol=1e-15)

    def test_dimension_mismatch(self):
        arch = ArchSpec(3, (2,))
        with pytest.raises(DataError):
            forward(init_params(arch, 0), arch, np.zeros(4))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), c=st.integers(2, 5), scale=st.floats(0.1, 20.0))
    def test_outputs_on_simplex(self, seed, c, scale):
        arch = ArchSpec(3, (4, c), "elu", "softmax")
        x = np.random.default_rng(seed).normal(scale=scale, size=(10, 3))
        out = forward(init_params(arch, seed, scale), arch, x)
        assert np.all(out >= 0) and np.all(out <= 1)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_softmax_extreme_logits(self):
        out = softmax(np.array([[1000.0, -1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(), 1.0)


class TestLoss:
    @pytest.mark.parametrize("c", [2, 3, 4])
    def test_zero_net_is_log_c(self, c):
        arch = ArchSpec(2, (3, c))
        rng = np.random.default_rng(c)
        x, y = rng.normal(size=(9, 2)), one_hot(rng.integers(0, c, 9), c)
        assert abs(cross_entropy_loss(zero_params(arch), arch, x, y) - math.log(c)) <= 1e-12

    def test_single_sample_value(self):
        arch = ArchSpec(1, (2,))
        w = math.log(0.9 / 0.1) / 2  # logits (w, -w) give (0.9, 0.1)
        params = MlpParams((np.array([[w, -w]]),), (np.zeros(2),))
        np.testing.assert_allclose(forward(params, arch, np.array([1.0])), [0.9, 0.1], atol=1e-12)
        loss = cross_entropy_loss(params, arch, np.array([[1.0]]), np.array([[1.0, 0.0]]))
        assert loss == pytest.approx(-math.log(0.9), abs=1e-12)
        assert loss == pytest.approx(0.105361, abs=1e-6)

    def test_empty_dataset(self):
        arch = ArchSpec(2, (2,))
        with pytest.raises(DataError):
            cross_entropy_loss(init_params(arch, 0), arch, np.zeros((0, 2)), np.zeros((0, 2)))

    def test_confident_mistake_is_finite(self):
        arch = ArchSpec(1, (2,))
        params = MlpParams((np.array([[500.0, -500.0]]),), (np.zeros(2),))
        loss = cross_entropy_loss(params, arch, np.array([[1.0]]), np.array([[0.0, 1.0]]))
        assert loss == pytest.approx(-math.log(1e-12))


class TestBackward:
    @pytest.mark.parametrize(
        "hidden,output", [("relu", "softmax"), ("elu", "softmax"), ("relu", "sigmoid"), ("elu", "sigmoid")]
    )
    def test_finite_differences(self, hidden, output):
        arch = ArchSpec(5, (4, 3, 2), hidden, output)
        rng = np.random.default_rng(5)
        params = init_params(arch, 1)
        # random nonzero biases keep ReLU units away from their kink
        params = MlpParams(params.weights, tuple(rng.normal(scale=0.3, size=b.shape) for b in params.biases))
        x, y = rng.normal(size=(7, 5)), one_hot(rng.integers(0, 2, 7), 2)
        _, grads = backward(params, arch, x, y)
        num = numeric_grad(lambda: cross_entropy_loss(params, arch, x, y), params.arrays())
        for g, n in zip(grads.arrays(), num):
            assert rel_err(g, n).max() <= 1e-4

    def test_zero_net_balanced_bias_gradient(self):
        arch = ArchSpec(3, (4, 2))
        x = np.random.default_rng(0).normal(size=(6, 3))
        y = one_hot([0, 1, 0, 1, 0, 1], 2)
        _, grads = backward(zero_params(arch), arch, x, y)
        assert np.array_equal(grads.biases[-1], np.zeros(2))

    def test_gradient_vanishes_at_convergence(self):
        arch = ArchSpec(2, (2,))
        x, y = np.array([[1.0, -1.0]]), np.array([[1.0, 0.0]])
        params = train_classifier(x, y, arch, TrainConfig(epochs=10000, batch_size=1, learning_rate=0.1))
        _, grads = backward(params, arch, x, y)
        assert np.linalg.norm(flatten_params(grads)) < 1e-6


class TestTraining:
    @pytest.mark.parametrize("output", ["softmax", "sigmoid"])
    def test_two_gaussians(self, output):
        ds = synth_gaussians([[2.0, 2.0], [-2.0, -2.0]], None, [100, 100], seed=4)
        arch = ArchSpec(2, (8, 4, 2), "relu", output)
        cfg = TrainConfig(epochs=30, batch_size=16, seed=2)
        params = train_classifier(ds.features, ds.labels, arch, cfg)
        assert accuracy(params, arch, ds.features, ds.labels) >= 0.95
        start = cross_entropy_loss(init_params(arch, cfg.seed), arch, ds.features, ds.labels)
        assert cross_entropy_loss(params, arch, ds.features, ds.labels) <= start

    def test_zero_epochs_is_init(self):
        arch = ArchSpec(2, (3, 2))
        out = train_classifier(np.ones((4, 2)), one_hot([0, 1, 0, 1], 2), arch, TrainConfig(epochs=0, seed=9))
        assert all(np.array_equal(a, b) for a, b in zip(out.arrays(), init_params(arch, 9).arrays()))

    @pytest.mark.parametrize("optimizer", ["adam", "sgd"])
    def test_deterministic(self, optimizer):
        ds = synth_gaussians([[1.0, 0.0], [-1.0, 0.0]], None, [30, 30], seed=1)
        arch = ArchSpec(2, (5, 2), "elu")
        cfg = TrainConfig(epochs=5, batch_size=8, optimizer=optimizer, seed=3)
        a = flatten_params(train_classifier(ds.features, ds.labels, arch, cfg))
        b = flatten_params(train_classifier(ds.features, ds.labels, arch, cfg))
        assert a.tobytes() == b.tobytes()

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="rmsprop")
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0)


class TestFlatten:
    def test_row_major_example(self):
        params = MlpParams((np.array([[1.0, 2.0], [3.0, 4.0]]),), (np.array([5.0, 6.0]),))
        np.testing.assert_array_equal(flatten_params(params), [1, 2, 3, 4, 5, 6])
        back = unflatten_params(np.arange(1.0, 7.0), ArchSpec(2, (2,)))
        np.testing.assert_array_equal(back.weights[0], [[1, 2], [3, 4]])
        np.testing.assert_array_equal(back.biases[0], [5, 6])

    def test_weights_before_biases(self):
        arch = ArchSpec(2, (3, 2))
        p = init_params(arch, 0)
        p = MlpParams(p.weights, (np.full(3, 7.0), np.full(2, 8.0)))
        theta = flatten_params(p)
        np.testing.assert_array_equal(theta[-5:], [7, 7, 7, 8, 8])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), sizes=st.lists(st.integers(1, 6), min_size=0, max_size=3))
    def test_round_trip_exact(self, seed, sizes):
        arch = ArchSpec(3, (*sizes, 2), "elu", "sigmoid")
        rng = np.random.default_rng(seed)
        theta = rng.normal(size=arch.n_params)
        again = flatten_params(unflatten_params(theta, arch))
        assert again.tobytes() == theta.tobytes()

    def test_length_mismatch(self):
        with pytest.raises(ArchMismatchError):
            unflatten_params(np.zeros(5), ArchSpec(2, (2,)))

    def test_save_load(self, tmp_path):
        arch = ArchSpec(3, (4, 2), "elu", "sigmoid")
        p = init_params(arch, 5)
        save_params(p, arch, tmp_path / "m.json")
        q, arch2 = load_params(tmp_path / "m.json")
        assert arch2 == arch
        assert flatten_params(q).tobytes() == flatten_params(p).tobytes()

    def test_load_garbage(self, tmp_path):
        (tmp_path / "bad.json").write_text("{}")
        with pytest.raises(DataError):
            load_params(tmp_path / "bad.json")
