"""Gradient- and sampling-based attribution baselines.

Every method returns one joint score per input feature for a single output
neuron.  ``attribute_batch`` works on ``(batch, d0)`` inputs and is what the
benchmark uses; ``attribute`` is the single-vector convenience wrapper.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import input_gradients
from .nn import DimensionError, Linear, Network, forward


class BaselineKind(str, Enum):
    GRADIENT_INPUT = "gi"
    LRP_EPSILON = "lrp"
    DEEPLIFT_RESCALE = "dl-rescale"
    INTEGRATED_GRADIENTS = "ig"
    SMOOTHGRAD = "smoothgrad"
    SHAPLEY_SAMPLING = "svs"


NEEDS_REFERENCE = {
    BaselineKind.DEEPLIFT_RESCALE,
    BaselineKind.INTEGRATED_GRADIENTS,
    BaselineKind.SHAPLEY_SAMPLING,
}


@dataclass(frozen=True)
class BaselineMethod:
    kind: BaselineKind
    steps: int = 128  # integrated gradients
    n_samples: int = 50  # smoothgrad noise draws, shapley permutations
    noise_std: float | None = None  # None: 0.1 of the input's value range
    seed: int = 0
    lrp_epsilon: float = 1e-9
    fallback_threshold: float = 1e-7  # deeplift

    def __post_init__(self):
        object.__setattr__(self, "kind", BaselineKind(self.kind))
        if self.steps < 1 or self.n_samples < 1:
            raise ValueError("step and sample counts must be >= 1")
        if self.noise_std is not None and self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.lrp_epsilon <= 0 or self.fallback_threshold <= 0:
            raise ValueError("lrp_epsilon and fallback_threshold must be positive")

    @property
    def name(self) -> str:
        return self.kind.value


def _check(net: Network, X: np.ndarray, output_index: int) -> None:
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise DimensionError(f"inputs of shape {X.shape} do not match input_dim {net.input_dim}", 0)
    if not 0 <= output_index < net.output_dim:
        raise DimensionError(f"output_index {output_index} out of range for {net.output_dim} outputs")


def gradient_input(net: Network, X: np.ndarray, output_index: int = 0) -> np.ndarray:
    return X * input_gradients(net, X, output_index)


def lrp_epsilon(net: Network, X: np.ndarray, output_index: int = 0, epsilon: float = 1e-9) -> np.ndarray:
    """z-rule with a signed epsilon in the denominator; activations pass relevance through."""
    acts = forward(net, X)
    R = np.zeros_like(acts[-1])
    R[:, output_index] = acts[-1][:, output_index]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if not isinstance(layer, Linear):
            continue
        z = acts[i] @ layer.weights + layer.bias
        sign = np.where(z >= 0.0, 1.0, -1.0)
        R = acts[i] * ((R / (z + epsilon * sign)) @ layer.weights.T)
    return R


def deeplift_rescale(
    net: Network, X: np.ndarray, x_ref: np.ndarray, output_index: int = 0, threshold: float = 1e-7
) -> np.ndarray:
    acts = forward(net, X)
    ref = forward(net, np.broadcast_to(x_ref, X.shape))
    g = np.zeros_like(acts[-1])
    g[:, output_index] = 1.0
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if isinstance(layer, Linear):
            g = g @ layer.weights.T
            continue
        z, zr = acts[i], ref[i]
        dz = z - zr
        close = np.abs(dz) < threshold
        secant = np.divide(acts[i + 1] - ref[i + 1], dz, out=np.zeros_like(dz), where=~close)
        g = g * np.where(close, layer.fn.derivative(z), secant)
    return (X - x_ref) * g


def integrated_gradients(
    net: Network, X: np.ndarray, x_ref: np.ndarray, output_index: int = 0, steps: int = 128
) -> np.ndarray:
    """Midpoint Riemann sum along the straight path from the reference."""
    alphas = (np.arange(steps) + 0.5) / steps
    diff = X - x_ref
    pts = x_ref + alphas[None, :, None] * diff[:, None, :]  # (B, steps, d0)
    g = input_gradients(net, pts.reshape(-1, X.shape[1]), output_index)
    return diff * g.reshape(X.shape[0], steps, -1).mean(axis=1)


def default_noise_std(X: np.ndarray) -> float:
    span = float(np.max(X) - np.min(X)) if X.size else 0.0
    return 0.1 * span if span > 0 else 0.1


def smoothgrad(
    net: Network,
    X: np.ndarray,
    output_index: int = 0,
    n_samples: int = 50,
    noise_std: float | None = None,
    seed: int = 0,
) -> np.ndarray:
    std = default_noise_std(X) if noise_std is None else noise_std
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, std, size=(X.shape[0], n_samples, X.shape[1]))
    pts = (X[:, None, :] + noise).reshape(-1, X.shape[1])
    g = input_gradients(net, pts, output_index).reshape(X.shape[0], n_samples, -1)
    return X * g.mean(axis=1)


def shapley_sampling(
    net: Network,
    X: np.ndarray,
    x_ref: np.ndarray,
    output_index: int = 0,
    n_samples: int = 50,
    seed: int = 0,
    chunk: int = 256,
) -> np.ndarray:
    """Permutation sampling; absent features take their reference value."""
    rng = np.random.default_rng(seed)
    B, d0 = X.shape
    x_ref = np.broadcast_to(x_ref, X.shape)
    perms = np.argsort(rng.random((B, n_samples, d0)), axis=-1)
    ranks = np.argsort(perms, axis=-1)  # position of each feature in its permutation
    out = np.zeros((B, d0))
    k = np.arange(d0 + 1)
    for lo in range(0, B, chunk):
        sl = slice(lo, lo + chunk)
        present = ranks[sl, :, None, :] < k[None, None, :, None]  # (b, n, d0+1, d0)
        pts = np.where(present, X[sl, None, None, :], x_ref[sl, None, None, :])
        f = forward(net, pts.reshape(-1, d0))[-1][:, output_index].reshape(pts.shape[:3])
        marg = np.diff(f, axis=-1)  # marginal gain of the feature added at step t
        # marg[..., t] belongs to feature perms[..., t]
        gains = np.take_along_axis(marg, ranks[sl], axis=-1)
        out[sl] = gains.mean(axis=1)
    return out


def attribute_batch(
    method: BaselineMethod, net: Network, X, x_ref=None, output_index: int = 0
) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check(net, X, output_index)
    kind = method.kind
    if kind in NEEDS_REFERENCE:
        if x_ref is None:
            raise ValueError(f"method {kind.value} needs a reference input")
        x_ref = np.asarray(x_ref, dtype=np.float64)
        if x_ref.shape[-1] != net.input_dim:
            raise DimensionError(f"reference of shape {x_ref.shape} does not match input_dim {net.input_dim}", 0)
    if kind is BaselineKind.GRADIENT_INPUT:
        return gradient_input(net, X, output_index)
    if kind is BaselineKind.LRP_EPSILON:
        return lrp_epsilon(net, X, output_index, method.lrp_epsilon)
    if kind is BaselineKind.DEEPLIFT_RESCALE:
        return deeplift_rescale(net, X, x_ref, output_index, method.fallback_threshold)
    if kind is BaselineKind.INTEGRATED_GRADIENTS:
        return integrated_gradients(net, X, x_ref, output_index, method.steps)
    if kind is BaselineKind.SMOOTHGRAD:
        return smoothgrad(net, X, output_index, method.n_samples, method.noise_std, method.seed)
    return shapley_sampling(net, X, x_ref, output_index, method.n_samples, method.seed)


def attribute(method: BaselineMethod, net: Network, x, x_ref=None, output_index: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a single input vector, got shape {x.shape}")
    return attribute_batch(method, net, x[None, :], x_ref, output_index)[0]
