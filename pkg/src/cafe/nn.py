"""Feedforward networks made of separate linear and activation layers.

Weights follow the ``d_in x d_out`` orientation, so a linear layer computes
``a @ W + b``.  All arrays are float64 and frozen after construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Union

import numpy as np
from scipy.special import expit, ndtr

_SQRT_2PI = np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Raised when array shapes do not chain through a network."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class NumericError(ArithmeticError):
    """Raised when an evaluation produces NaN or infinite values."""


class Activation(str, Enum):
    RELU = "relu"
    GELU = "gelu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    SOFTPLUS = "softplus"
    IDENTITY = "identity"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        if self is Activation.GELU:
            # exact form x * Phi(x), not the tanh approximation
            return z * ndtr(z)
        if self is Activation.SIGMOID:
            return expit(z)
        if self is Activation.TANH:
            return np.tanh(z)
        if self is Activation.SOFTPLUS:
            return np.logaddexp(0.0, z)
        return z.copy()

    def derivative(self, z: np.ndarray) -> np.ndarray:
        """Elementwise derivative; ReLU uses 0 at exactly 0."""
        z = np.asarray(z, dtype=np.float64)
        if self is Activation.RELU:
            return (z > 0.0).astype(np.float64)
        if self is Activation.GELU:
            return ndtr(z) + z * np.exp(-0.5 * z * z) / _SQRT_2PI
        if self is Activation.SIGMOID:
            s = expit(z)
            return s * (1.0 - s)
        if self is Activation.TANH:
            return 1.0 - np.tanh(z) ** 2
        if self is Activation.SOFTPLUS:
            return expit(z)
        return np.ones_like(z)


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite parameter value")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Linear:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights, 2)
        b = _frozen(self.bias, 1)
        if b.shape[0] != w.shape[1]:
            raise DimensionError(f"bias length {b.shape[0]} != weight columns {w.shape[1]}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, Linear)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.bias, other.bias)
        )


@dataclass(frozen=True)
class ActivationLayer:
    fn: Activation

    def __post_init__(self):
        object.__setattr__(self, "fn", Activation(self.fn))


Layer = Union[Linear, ActivationLayer]


@dataclass(frozen=True)
class Network:
    layers: tuple
    input_dim: int
    output_dim: int = field(init=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        width = int(self.input_dim)
        for i, layer in enumerate(layers):
            if isinstance(layer, Linear):
                if layer.in_dim != width:
                    raise DimensionError(
                        f"expects input width {layer.in_dim}, previous width is {width}", i
                    )
                width = layer.out_dim
            elif not isinstance(layer, ActivationLayer):
                raise TypeError(f"unsupported layer type {type(layer).__name__}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_dim", int(self.input_dim))
        object.__setattr__(self, "output_dim", width)

    @classmethod
    def from_layers(cls, layers: Sequence[Layer]) -> "Network":
        first = next((l for l in layers if isinstance(l, Linear)), None)
        if first is None:
            raise ValueError("cannot infer input_dim without a linear layer")
        return cls(tuple(layers), first.in_dim)

    @property
    def linear_layers(self) -> list[Linear]:
        return [l for l in self.layers if isinstance(l, Linear)]

    @property
    def activation_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, ActivationLayer)]

    def widths(self) -> list[int]:
        """Width after each layer, preceded by the input width."""
        out = [self.input_dim]
        for layer in self.layers:
            out.append(layer.out_dim if isinstance(layer, Linear) else out[-1])
        return out

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)[-1]


@dataclass
class ForwardTrace:
    """Activations of the network on the input and of its bias-ablated copy on the reference."""

    activations: list[np.ndarray]
    ref_activations: list[np.ndarray]


def _as_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise DimensionError(f"input of shape {x.shape} does not match input_dim {net.input_dim}", 0)
    if not np.all(np.isfinite(x)):
        raise NumericError("input contains non-finite values")
    return x


def forward(net: Network, x, *, use_bias: bool = True) -> list[np.ndarray]:
    """All intermediate activations, starting with the input itself.

    ``x`` may be a single vector or a ``(batch, d0)`` matrix.
    """
    a = _as_input(net, x)
    acts = [a]
    for layer in net.layers:
        if isinstance(layer, Linear):
            a = a @ layer.weights
            if use_bias:
                a = a + layer.bias
        else:
            a = layer.fn(a)
        acts.append(a)
    return acts


def forward_reference(net: Network, x_ref) -> list[np.ndarray]:
    """Activations of the bias-ablated network on the reference input."""
    return forward(net, x_ref, use_bias=False)


def trace(net: Network, x, x_ref) -> ForwardTrace:
    return ForwardTrace(forward(net, x), forward_reference(net, x_ref))


def ablate_biases(net: Network) -> Network:
    layers = [
        Linear(l.weights, np.zeros_like(l.bias)) if isinstance(l, Linear) else l
        for l in net.layers
    ]
    return Network(tuple(layers), net.input_dim)


def random_network(
    rng: np.random.Generator,
    input_dim: int,
    hidden: Sequence[int],
    output_dim: int = 1,
    activations: Sequence[Activation] | Activation = Activation.RELU,
    bias_scale: float = 0.5,
) -> Network:
    """Random MLP: one activation layer after every hidden linear layer.

    Weights are N(0, 1/fan_in), biases N(0, bias_scale^2).
    """
    if isinstance(activations, (Activation, str)):
        activations = [Activation(activations)] * len(hidden)
    if len(activations) != len(hidden):
        raise ValueError("need one activation per hidden layer")
    layers: list[Layer] = []
    dims = [input_dim, *hidden, output_dim]
    for i in range(len(dims) - 1):
        w = rng.normal(0.0, 1.0 / np.sqrt(dims[i]), size=(dims[i], dims[i + 1]))
        b = rng.normal(0.0, bias_scale, size=dims[i + 1]) if bias_scale > 0 else np.zeros(dims[i + 1])
        layers.append(Linear(w, b))
        if i < len(hidden):
            layers.append(ActivationLayer(Activation(activations[i])))
    return Network(tuple(layers), input_dim)


def xnor_network() -> Network:
    """Two ReLU hidden units with +-1 weights and an output bias of +1."""
    return Network(
        (
            Linear([[1.0, -1.0], [-1.0, 1.0]], [0.0, 0.0]),
            ActivationLayer(Activation.RELU),
            Linear([[-1.0], [-1.0]], [1.0]),
        ),
        2,
    )


def gelu_network() -> Network:
    """Single GELU output neuron with weights 50 and -51 and no bias."""
    return Network(
        (Linear([[50.0], [-51.0]], [0.0]), ActivationLayer(Activation.GELU)),
        2,
    )
