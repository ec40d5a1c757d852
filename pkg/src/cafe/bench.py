"""Synthetic benchmark: generate, train, attribute and score each seed."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from .baselines import BaselineKind, BaselineMethod, attribute_batch
from .engine import ConflictConfig, explain
from .metrics import EvalReport, PerturbSpec, attribution_rmse, infidelity_batch
from .nn import Network
from .synth import SynthConfig, SyntheticDataset, generate
from .train import TrainConfig, TrainingDivergence, TrainReport, train

DEFAULT_C_VALUES = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_METHODS = ("cafe", "gi", "lrp", "dl-rescale", "ig", "smoothgrad")


@dataclass(frozen=True)
class BenchConfig:
    methods: tuple[str, ...] = DEFAULT_METHODS
    c_values: tuple[float, ...] = DEFAULT_C_VALUES
    seeds: tuple[int, ...] = (0, 1, 2)
    metrics: tuple[str, ...] = ("rmse",)
    n_eval: int | None = None  # test rows to attribute; None = all
    perturb: PerturbSpec | None = None  # needed for infidelity

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "c_values", tuple(float(c) for c in self.c_values))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        for m in self.methods:
            if m != "cafe":
                BaselineKind(m)
        for m in self.metrics:
            if m not in ("rmse", "infidelity"):
                raise ValueError(f"unknown metric {m!r}")
        if not self.seeds:
            raise ValueError("need at least one seed")


def cafe_scores(net: Network, X: np.ndarray, x_ref: np.ndarray, c: float) -> np.ndarray:
    """Joint feature scores for output 0, bias row dropped."""
    return explain(net, X, x_ref, ConflictConfig(c)).feature_joint[..., 0]


def method_runs(bench: BenchConfig, train_X: np.ndarray) -> list[tuple[str, float | None, Callable]]:
    """(name, c, scorer(net, X, x_ref)) for every requested method."""
    span = float(train_X.max() - train_X.min())
    runs: list[tuple[str, float | None, Callable]] = []
    for m in bench.methods:
        if m == "cafe":
            for c in bench.c_values:
                runs.append(("cafe", c, lambda net, X, r, c=c: cafe_scores(net, X, r, c)))
        else:
            method = BaselineMethod(BaselineKind(m), noise_std=0.1 * span if span > 0 else 0.1)
            runs.append((m, None, lambda net, X, r, method=method: attribute_batch(method, net, X, r)))
    return runs


@dataclass
class SeedResult:
    seed: int
    dataset: SyntheticDataset
    net: Network
    train_report: TrainReport


class BenchmarkDiverged(RuntimeError):
    """Training diverged on some seed; ``report`` holds the seeds finished before it."""

    def __init__(self, seed: int, cause: TrainingDivergence, report: EvalReport):
        super().__init__(f"seed {seed}: {cause}")
        self.seed = seed
        self.cause = cause
        self.report = report


def _build_report(synth, train_cfg, bench, seeds, model_rmse, per, runtime) -> EvalReport:
    report = EvalReport(
        meta={
            "synth": {**asdict(synth), "seed": None},
            "train": {**asdict(train_cfg), "activation": train_cfg.activation.value, "seed": None},
            "seeds": list(bench.seeds),
            "completed_seeds": list(seeds),
            "n_eval": bench.n_eval,
            "perturb": asdict(bench.perturb) if bench.perturb else None,
            "diverged": None,
        }
    )
    if model_rmse:
        report.add("model", None, "test_rmse", model_rmse, 0.0)
    for (name, c, metric), vals in per.items():
        report.add(name, c, metric, vals, runtime[(name, c, metric)])
    return report


def run_benchmark(
    synth: SynthConfig,
    train_cfg: TrainConfig,
    bench: BenchConfig = BenchConfig(),
    on_seed: Callable[[SeedResult], None] | None = None,
) -> EvalReport:
    """Mean and std over seeds of each method's metric on the test split.

    Every seed regenerates the data and retrains with that seed; the
    reference input is all zeros.  If training diverges, raises
    :class:`BenchmarkDiverged` carrying the report of the completed seeds.
    """
    if "infidelity" in bench.metrics and bench.perturb is None:
        raise ValueError("infidelity needs a PerturbSpec")
    per: dict[tuple[str, float | None, str], list[float]] = {}
    runtime: dict[tuple[str, float | None, str], float] = {}
    model_rmse: list[float] = []
    done: list[int] = []
    for seed in bench.seeds:
        ds = generate(replace(synth, seed=seed))
        try:
            net, rep = train(ds, replace(train_cfg, seed=seed))
        except TrainingDivergence as err:
            report = _build_report(synth, train_cfg, bench, done, model_rmse, per, runtime)
            report.meta["diverged"] = {"seed": seed, "epoch": err.epoch, "restart": err.restart}
            raise BenchmarkDiverged(seed, err, report) from err
        model_rmse.append(rep.test_rmse)
        if on_seed is not None:
            on_seed(SeedResult(seed, ds, net, rep))
        split = ds.split_indices()
        F = ds.features()
        test = split["test"] if bench.n_eval is None else split["test"][: bench.n_eval]
        X, truth = F[test], ds.truth[test]
        x_ref = np.zeros(F.shape[1])
        for name, c, scorer in method_runs(bench, F[split["train"]]):
            t0 = time.perf_counter()
            S = scorer(net, X, x_ref)
            elapsed = time.perf_counter() - t0
            for metric in bench.metrics:
                key = (name, c, metric)
                if metric == "rmse":
                    val = attribution_rmse(S, truth)
                else:
                    spec = replace(bench.perturb, seed=bench.perturb.seed + seed)
                    val = float(np.mean(infidelity_batch(net, X, S, spec)[0]))
                per.setdefault(key, []).append(val)
                runtime[key] = runtime.get(key, 0.0) + elapsed
        done.append(seed)
    return _build_report(synth, train_cfg, bench, done, model_rmse, per, runtime)


def synthetic_infidelity_perturbation(D: int, std: float = 0.5, prob: float = 0.1, n: int = 50, seed: int = 0) -> PerturbSpec:
    """Gaussian noise on the continuous block, switches treated as binary groups."""
    groups = tuple((D + i,) for i in range(D))
    return PerturbSpec(gaussian_std=std, cat_resample_prob=prob, feature_groups=groups, n_perturbations=n, seed=seed)


def plot_rows(report: EvalReport, metric: str = "rmse") -> list[tuple[str, float]]:
    """(label, mean) pairs for a method-vs-metric chart."""
    rows = []
    for r in report.records:
        if r.metric != metric:
            continue
        label = f"cafe({r.c:g})" if r.method == "cafe" else r.method
        rows.append((label, r.mean))
    return rows
