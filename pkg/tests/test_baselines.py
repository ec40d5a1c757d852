from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cafe.baselines import (
    BaselineKind,
    BaselineMethod,
    attribute,
    attribute_batch,
    deeplift_rescale,
    default_noise_std,
    gradient_input,
    integrated_gradients,
    lrp_epsilon,
    shapley_sampling,
    smoothgrad,
)
from cafe.nn import Activation, DimensionError, Linear, Network, forward, gelu_network, random_network

X_GELU = np.array([[2.0, 2.0]])
REF_GELU = np.array([1.0, 1.0])


@pytest.mark.parametrize(
    "kind, expected",
    [
        ("gi", (-8.52, 8.69)),
        ("dl-rescale", (-5.66, 5.77)),
        ("ig", (-5.66, 5.77)),
        ("lrp", (2.28, -2.32)),
    ],
)
def test_gelu_net_goldens(kind, expected):
    got = attribute(BaselineMethod(kind, steps=128), gelu_network(), X_GELU[0], REF_GELU)
    np.testing.assert_allclose(got, expected, atol=1e-2)


def test_linear_model_is_explained_exactly(rng):
    w = rng.normal(size=4)
    net = Network((Linear(w[:, None], [0.7]),), 4)
    X, r = rng.normal(size=(3, 4)), rng.normal(size=4)
    np.testing.assert_allclose(gradient_input(net, X), X * w)
    np.testing.assert_allclose(deeplift_rescale(net, X, r), (X - r) * w)
    np.testing.assert_allclose(integrated_gradients(net, X, r, steps=3), (X - r) * w)
    np.testing.assert_allclose(shapley_sampling(net, X, r, n_samples=5), (X - r) * w, atol=1e-12)


def test_deeplift_sums_to_output_difference(rng):
    net = random_network(rng, 5, [8, 6], 1, [Activation.TANH, Activation.RELU])
    X, r = rng.normal(size=(10, 5)), rng.normal(size=5)
    S = deeplift_rescale(net, X, r)
    delta = forward(net, X)[-1][:, 0] - forward(net, r)[-1][0]
    np.testing.assert_allclose(S.sum(axis=1), delta, atol=1e-10)


def test_deeplift_falls_back_to_gradient_when_inputs_coincide(rng):
    net = random_network(rng, 3, [4], 1, Activation.SIGMOID)
    x = rng.normal(size=3)
    np.testing.assert_allclose(deeplift_rescale(net, x[None], x), 0.0)


def test_integrated_gradients_approaches_completeness(rng):
    net = random_network(rng, 4, [6], 1, Activation.SOFTPLUS)
    X, r = rng.normal(size=(5, 4)), np.zeros(4)
    S = integrated_gradients(net, X, r, steps=256)
    delta = forward(net, X)[-1][:, 0] - forward(net, r)[-1][0]
    np.testing.assert_allclose(S.sum(axis=1), delta, atol=1e-4)


def test_lrp_on_bias_free_relu_equals_gradient_input(rng):
    net = random_network(rng, 4, [8, 8], 1, Activation.RELU, bias_scale=0.0)
    X = rng.normal(size=(6, 4))
    np.testing.assert_allclose(lrp_epsilon(net, X), gradient_input(net, X), atol=1e-6)


def test_smoothgrad_without_noise_is_gradient_input(rng):
    net = random_network(rng, 3, [5], 1, Activation.TANH)
    X = rng.normal(size=(4, 3))
    np.testing.assert_allclose(smoothgrad(net, X, noise_std=0.0, n_samples=3), gradient_input(net, X))


def test_smoothgrad_is_seeded(rng):
    net = random_network(rng, 3, [5], 1, Activation.TANH)
    X = rng.normal(size=(4, 3))
    a = smoothgrad(net, X, seed=3)
    np.testing.assert_array_equal(a, smoothgrad(net, X, seed=3))
    assert not np.array_equal(a, smoothgrad(net, X, seed=4))


def test_default_noise_std():
    assert default_noise_std(np.array([[0.0, 5.0]])) == pytest.approx(0.5)
    assert default_noise_std(np.ones((2, 2))) == 0.1


def exact_shapley(net: Network, x, r) -> np.ndarray:
    """Average marginal contribution over all d! orderings."""
    d = len(x)
    f = lambda present: forward(net, np.where(present, x, r))[-1][0]
    phi = np.zeros(d)
    for perm in itertools.permutations(range(d)):
        present = np.zeros(d, dtype=bool)
        prev = f(present)
        for i in perm:
            present[i] = True
            cur = f(present)
            phi[i] += cur - prev
            prev = cur
    return phi / math.factorial(d)


@given(seed=st.integers(0, 10_000))
def test_shapley_sampling_is_efficient(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, 4, [5], 1, Activation.GELU)
    X, r = rng.normal(size=(3, 4)), rng.normal(size=4)
    S = shapley_sampling(net, X, r, n_samples=7, seed=seed)
    delta = forward(net, X)[-1][:, 0] - forward(net, r)[-1][0]
    np.testing.assert_allclose(S.sum(axis=1), delta, atol=1e-10)


def test_shapley_sampling_converges_to_exact_values(rng):
    net = random_network(rng, 4, [6], 1, Activation.TANH)
    x, r = rng.normal(size=4), rng.normal(size=4)
    exact = exact_shapley(net, x, r)
    est = shapley_sampling(net, x[None], r, n_samples=4000, seed=1)[0]
    np.testing.assert_allclose(est, exact, atol=0.02 * max(1.0, np.abs(exact).max()))


def test_attribute_batch_dispatch_and_errors(rng):
    net = random_network(rng, 3, [4], 2, Activation.TANH)
    X = rng.normal(size=(2, 3))
    for kind in BaselineKind:
        out = attribute_batch(BaselineMethod(kind, steps=8, n_samples=4), net, X, np.zeros(3), output_index=1)
        assert out.shape == (2, 3)
    with pytest.raises(ValueError):
        attribute_batch(BaselineMethod("ig"), net, X)
    with pytest.raises(DimensionError):
        attribute_batch(BaselineMethod("gi"), net, X, output_index=2)
    with pytest.raises(DimensionError):
        attribute_batch(BaselineMethod("dl-rescale"), net, X, np.zeros(4))


@pytest.mark.parametrize("kwargs", [{"steps": 0}, {"n_samples": 0}, {"noise_std": -1.0}, {"lrp_epsilon": 0.0}])
def test_method_validation(kwargs):
    with pytest.raises(ValueError):
        BaselineMethod("gi", **kwargs)
