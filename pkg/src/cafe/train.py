"""Minibatch AdamW training of small MLPs on the synthetic data."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Loss, grad_params
from .nn import Activation, ActivationLayer, Linear, Network, forward
from .synth import SyntheticDataset


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, restart: int, report: "TrainReport | None" = None):
        super().__init__(f"non-finite training loss at epoch {epoch} (restart {restart})")
        self.epoch = epoch
        self.restart = restart
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    hidden_dims: tuple[int, ...] = (16, 16)
    activation: Activation = Activation.RELU
    epochs: int = 300
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 64  # 0 means full batch
    seed: int = 0
    n_restarts: int = 1
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "activation", Activation(self.activation))
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden widths must be >= 1")
        if self.epochs < 1 or self.n_restarts < 1 or self.batch_size < 0:
            raise ValueError("epochs and n_restarts must be >= 1, batch_size >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


class AdamW:
    """Adam with weight decay applied directly to the parameters."""

    def __init__(self, params: list[np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = params
        self.lr, self.eps, self.wd = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p *= 1.0 - self.lr * self.wd
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainReport:
    train_loss: list[list[float]] = field(default_factory=list)  # per restart, per epoch
    val_rmse: list[float] = field(default_factory=list)  # per restart
    best_restart: int = -1
    test_rmse: float = float("nan")
    config: dict = field(default_factory=dict)
    diverged_at: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def init_params(rng: np.random.Generator, dims: list[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    out = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        out.append((rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)))
    return out


def build_network(params: list[tuple[np.ndarray, np.ndarray]], activation: Activation) -> Network:
    layers = []
    for i, (W, b) in enumerate(params):
        layers.append(Linear(W, b))
        if i < len(params) - 1:
            layers.append(ActivationLayer(activation))
    return Network(tuple(layers), params[0][0].shape[0])


def rmse(net: Network, X: np.ndarray, y: np.ndarray) -> float:
    pred = forward(net, X)[-1][:, 0]
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def fit(
    X: np.ndarray, y: np.ndarray, config: TrainConfig, rng: np.random.Generator, restart: int = 0
) -> tuple[Network, list[float]]:
    dims = [X.shape[1], *config.hidden_dims, 1]
    params = init_params(rng, dims)
    if not config.use_bias:
        params = [(W, np.zeros_like(b)) for W, b in params]
    flat = [p for pair in params for p in pair]
    trainable = flat if config.use_bias else [W for W, _ in params]
    opt = AdamW(trainable, config.learning_rate, weight_decay=config.weight_decay)
    n = X.shape[0]
    bs = n if config.batch_size == 0 else min(config.batch_size, n)
    losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, bs):
            idx = order[lo : lo + bs]
            net = build_network(params, config.activation)
            # overflow is caught below as divergence
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = grad_params(net, X[idx], y[idx], Loss.MSE)
            if not np.isfinite(loss):
                raise TrainingDivergence(epoch, restart)
            g = [a for pair in grads for a in pair] if config.use_bias else [dW for dW, _ in grads]
            if not all(np.all(np.isfinite(a)) for a in g):
                raise TrainingDivergence(epoch, restart)
            opt.step(g)
            total += loss * len(idx)
        losses.append(total / n)
        if not all(np.all(np.isfinite(p)) for p in flat):
            raise TrainingDivergence(epoch, restart)
    return build_network(params, config.activation), losses


def train(dataset: SyntheticDataset, config: TrainConfig) -> tuple[Network, TrainReport]:
    """Train ``n_restarts`` models and keep the one with the lowest validation RMSE."""
    split = dataset.split_indices()
    F = dataset.features()
    Xtr, ytr = F[split["train"]], dataset.y[split["train"]]
    Xva, yva = F[split["val"]], dataset.y[split["val"]]
    Xte, yte = F[split["test"]], dataset.y[split["test"]]
    cfg = asdict(config)
    cfg["activation"] = config.activation.value
    report = TrainReport(config=cfg)
    rng = np.random.default_rng(config.seed)
    best, best_val = None, np.inf
    for r in range(config.n_restarts):
        try:
            net, losses = fit(Xtr, ytr, config, rng, r)
        except TrainingDivergence as err:
            report.diverged_at = err.epoch
            err.report = report
            raise
        report.train_loss.append(losses)
        val = rmse(net, Xva, yva) if len(yva) else losses[-1] ** 0.5
        report.val_rmse.append(val)
        if val < best_val:
            best, best_val, report.best_restart = net, val, r
    report.test_rmse = rmse(best, Xte, yte) if len(yte) else float("nan")
    return best, report
