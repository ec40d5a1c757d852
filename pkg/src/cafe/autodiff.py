"""Reverse-mode gradients over a recorded forward pass.

The layer vocabulary is closed (linear + elementwise activation), so the
backward pass walks the activation list instead of building a tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from .nn import DimensionError, Linear, Network, forward


class Loss(str, Enum):
    MSE = "mse"
    BCE_WITH_LOGITS = "bce_with_logits"


@dataclass
class GradientResult:
    input_grad: np.ndarray  # (d0, dL) or (batch, d0, dL)
    param_grads: list[tuple[np.ndarray, np.ndarray]] | None = None


def _backward(net: Network, acts: list[np.ndarray], upstream: np.ndarray, want_params: bool = False):
    """Propagate ``upstream`` = dLoss/d(output) back to the input.

    ``acts`` are the activations from :func:`forward` on a 2-d batch.
    Returns the input gradient and, if requested, summed parameter gradients
    ordered like ``net.linear_layers``.
    """
    g = upstream
    grads = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if isinstance(layer, Linear):
            if want_params:
                grads.append((acts[i].T @ g, g.sum(axis=0)))
            g = g @ layer.weights.T
        else:
            g = g * layer.fn.derivative(acts[i])
    grads.reverse()
    return g, (grads if want_params else None)


def input_gradients(net: Network, X, output_index: int = 0) -> np.ndarray:
    """d output[output_index] / d x for every row of ``X`` (shape ``(batch, d0)``)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if not 0 <= output_index < net.output_dim:
        raise DimensionError(f"output_index {output_index} out of range for {net.output_dim} outputs")
    acts = forward(net, X)
    up = np.zeros((X.shape[0], net.output_dim))
    up[:, output_index] = 1.0
    g, _ = _backward(net, acts, up)
    return g


def grad_input(net: Network, x, output_index: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a single input vector, got shape {x.shape}")
    return input_gradients(net, x[None, :], output_index)[0]


def gradients(net: Network, x) -> GradientResult:
    """Full input Jacobian transposed to ``(d0, dL)``."""
    x = np.asarray(x, dtype=np.float64)
    cols = [grad_input(net, x, j) for j in range(net.output_dim)]
    return GradientResult(np.stack(cols, axis=1))


def loss_value(pred: np.ndarray, y: np.ndarray, loss: Loss) -> float:
    loss = Loss(loss)
    if loss is Loss.MSE:
        return float(np.mean((pred - y) ** 2))
    # numerically stable BCE on logits
    return float(np.mean(np.logaddexp(0.0, pred) - y * pred))


def grad_params(net: Network, X, Y, loss: Loss = Loss.MSE) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean-reduced loss and its gradient for every (weights, bias) pair."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if Y.shape != (X.shape[0], net.output_dim):
        raise DimensionError(f"targets of shape {Y.shape} do not match outputs ({X.shape[0]}, {net.output_dim})")
    acts = forward(net, X)
    pred = acts[-1]
    n = pred.size
    loss = Loss(loss)
    if loss is Loss.MSE:
        up = 2.0 * (pred - Y) / n
    else:
        up = (expit(pred) - Y) / n
    _, grads = _backward(net, acts, up, want_params=True)
    return loss_value(pred, Y, loss), grads
