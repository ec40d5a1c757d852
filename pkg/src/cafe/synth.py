"""Synthetic regression data where binary switches cancel continuous effects.

Each continuous feature ``x_i`` contributes ``w_i * x_i`` to the label unless
its paired switch ``c_i`` is on, in which case the contribution is removed.
Ground-truth attributions credit ``x_i`` with ``w_i * x_i`` and debit the
switch with ``-c_i * w_i * x_i``, so per-sample truths sum to the label.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SynthConfig:
    D: int = 2
    l: float = 0.3  # probability that a switch is on
    s: float = 1.0  # std of the continuous features
    weight_range: tuple[float, float] = (0.0, 10.0)
    n_samples: int = 10_000
    seed: int = 0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "weight_range", tuple(float(v) for v in self.weight_range))
        object.__setattr__(self, "split", tuple(float(v) for v in self.split))
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if not 0.0 <= self.l <= 1.0:
            raise ValueError("l must lie in [0, 1]")
        if not self.s > 0:
            raise ValueError("s must be positive")
        a, b = self.weight_range
        if not a < b:
            raise ValueError("weight_range must satisfy a < b")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if len(self.split) != 3 or min(self.split) < 0 or not np.isclose(sum(self.split), 1.0):
            raise ValueError("split must be three nonnegative ratios summing to 1")


@dataclass
class SyntheticDataset:
    X: np.ndarray  # (n, D) continuous
    C: np.ndarray  # (n, D) binary switches
    y: np.ndarray  # (n,)
    truth: np.ndarray  # (n, 2D), same column order as features()
    w: np.ndarray  # (D,)
    config: SynthConfig = field(default_factory=SynthConfig)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def features(self) -> np.ndarray:
        """Model inputs ``[x_1..x_D, c_1..c_D]``."""
        return np.hstack([self.X, self.C])

    def feature_names(self) -> list[str]:
        return [f"x_{i + 1}" for i in range(self.D)] + [f"c_{i + 1}" for i in range(self.D)]

    def split_indices(self) -> dict[str, np.ndarray]:
        """Contiguous train/val/test blocks; rows are already i.i.d."""
        tr, va, _ = self.config.split
        n_tr = int(round(tr * self.n))
        n_va = int(round(va * self.n))
        idx = np.arange(self.n)
        return {"train": idx[:n_tr], "val": idx[n_tr : n_tr + n_va], "test": idx[n_tr + n_va :]}

    def subset(self, idx: np.ndarray) -> "SyntheticDataset":
        return SyntheticDataset(self.X[idx], self.C[idx], self.y[idx], self.truth[idx], self.w, self.config)

    def to_csv(self, path: str | Path, truth_path: str | Path | None = None) -> Path:
        """Write ``x_*, c_*, y`` rows and a sidecar truth file; returns the sidecar path."""
        path = Path(path)
        truth_path = Path(truth_path) if truth_path else path.with_name(path.stem + "_truth.csv")
        names = self.feature_names()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names + ["y"])
            for row, yk in zip(self.features(), self.y):
                w.writerow([repr(float(v)) for v in row] + [repr(float(yk))])
        with open(truth_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"truth_{n}" for n in names])
            for row in self.truth:
                w.writerow([repr(float(v)) for v in row])
        return truth_path

    @classmethod
    def from_csv(cls, path: str | Path, truth_path: str | Path | None = None, w=None) -> "SyntheticDataset":
        path = Path(path)
        truth_path = Path(truth_path) if truth_path else path.with_name(path.stem + "_truth.csv")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        truth = np.loadtxt(truth_path, delimiter=",", skiprows=1, ndmin=2)
        D = (data.shape[1] - 1) // 2
        w = np.full(D, np.nan) if w is None else np.asarray(w, dtype=np.float64)
        cfg = SynthConfig(D=D, n_samples=data.shape[0])
        return cls(data[:, :D], data[:, D : 2 * D], data[:, -1], truth, w, cfg)


def generate(config: SynthConfig) -> SyntheticDataset:
    rng = np.random.default_rng(config.seed)
    a, b = config.weight_range
    w = rng.uniform(a, b, size=config.D)
    X = rng.normal(0.0, config.s, size=(config.n_samples, config.D))
    C = (rng.random((config.n_samples, config.D)) < config.l).astype(np.float64)
    contrib = w * X
    y = np.sum(np.where(C == 0.0, contrib, 0.0), axis=1)
    truth = np.hstack([contrib, -C * contrib])
    return SyntheticDataset(X, C, y, truth, w, config)
