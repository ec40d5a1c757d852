"""Attribution quality metrics and randomized property checks for the engine."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .engine import ConflictConfig, Flows, MultiplierHook, completeness_gap, explain
from .nn import Activation, ActivationLayer, DimensionError, Linear, Network, forward, random_network


def attribution_rmse(scores, truth) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if scores.shape != truth.shape:
        raise DimensionError(f"score shape {scores.shape} != truth shape {truth.shape}")
    return float(np.sqrt(np.mean((scores - truth) ** 2)))


# --- infidelity --------------------------------------------------------------


@dataclass(frozen=True)
class PerturbSpec:
    """How inputs are perturbed for infidelity.

    Features outside every group get Gaussian noise.  A group of several
    indices is a one-hot block that is redrawn uniformly with probability
    ``cat_resample_prob``; a single-index group is a binary 0/1 feature
    redrawn the same way.
    """

    gaussian_std: float | tuple[float, ...] = 0.5
    cat_resample_prob: float = 0.1
    feature_groups: tuple[tuple[int, ...], ...] = ()
    n_perturbations: int = 50
    seed: int = 0

    def __post_init__(self):
        std = self.gaussian_std
        if isinstance(std, (list, tuple, np.ndarray)):
            std = tuple(float(v) for v in std)
            if any(v < 0 for v in std):
                raise ValueError("gaussian_std must be >= 0")
        elif std < 0:
            raise ValueError("gaussian_std must be >= 0")
        object.__setattr__(self, "gaussian_std", std)
        if not 0.0 <= self.cat_resample_prob <= 1.0:
            raise ValueError("cat_resample_prob must lie in [0, 1]")
        if self.n_perturbations < 1:
            raise ValueError("n_perturbations must be >= 1")
        groups = tuple(tuple(int(i) for i in g) for g in self.feature_groups)
        flat = [i for g in groups for i in g]
        if len(flat) != len(set(flat)):
            raise ValueError("feature groups must be disjoint")
        if any(len(g) == 0 for g in groups):
            raise ValueError("feature groups must be nonempty")
        object.__setattr__(self, "feature_groups", groups)

    def continuous_mask(self, d: int) -> np.ndarray:
        mask = np.ones(d, dtype=bool)
        for g in self.feature_groups:
            if max(g) >= d:
                raise DimensionError(f"feature group {g} out of range for {d} features")
            mask[list(g)] = False
        return mask


def perturb(x: np.ndarray, spec: PerturbSpec, rng: np.random.Generator) -> np.ndarray:
    """``spec.n_perturbations`` perturbed copies of ``x``."""
    n, d = spec.n_perturbations, x.shape[0]
    cont = spec.continuous_mask(d)
    std = np.broadcast_to(np.asarray(spec.gaussian_std, dtype=np.float64), (d,))
    xp = np.repeat(x[None, :], n, axis=0)
    xp[:, cont] += rng.normal(size=(n, int(cont.sum()))) * std[cont]
    for g in spec.feature_groups:
        redraw = rng.random(n) < spec.cat_resample_prob
        if len(g) == 1:
            new = rng.integers(0, 2, size=n).astype(np.float64)
            xp[redraw, g[0]] = new[redraw]
        else:
            hot = rng.integers(0, len(g), size=n)
            block = np.eye(len(g))[hot]
            cols = list(g)
            xp[np.ix_(redraw, cols)] = block[redraw]
    return xp


def _infidelity_from(I_s: np.ndarray, df: np.ndarray) -> tuple[float, bool]:
    den = float(np.mean(I_s * I_s))
    if den == 0.0:
        # scaling undefined; fall back to the unnormalised error and flag it
        return float(np.mean(df * df)), bool(np.any(df != 0.0))
    beta = float(np.mean(I_s * df)) / den
    return float(np.mean((beta * I_s - df) ** 2)), False


def infidelity_batch(
    net: Network, X, S, spec: PerturbSpec, output_index: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row infidelity and a flag marking rows where the scaling was undefined.

    Row ``k`` draws its perturbations from ``default_rng([spec.seed, k])``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if S.shape != X.shape:
        raise DimensionError(f"scores of shape {S.shape} do not match inputs {X.shape}")
    n = spec.n_perturbations
    pts = np.concatenate([perturb(x, spec, np.random.default_rng([spec.seed, k])) for k, x in enumerate(X)])
    f_x = forward(net, X)[-1][:, output_index]
    f_p = forward(net, pts)[-1][:, output_index].reshape(X.shape[0], n)
    I = X[:, None, :] - pts.reshape(X.shape[0], n, -1)
    I_s = np.einsum("knd,kd->kn", I, S)
    df = f_x[:, None] - f_p
    vals = np.empty(X.shape[0])
    flags = np.zeros(X.shape[0], dtype=bool)
    for k in range(X.shape[0]):
        vals[k], flags[k] = _infidelity_from(I_s[k], df[k])
    return vals, flags


def infidelity(net: Network, x, scores, spec: PerturbSpec, output_index: int = 0) -> float:
    x = np.asarray(x, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != x.shape:
        raise DimensionError(f"{scores.shape[0] if scores.ndim else 0} scores for {x.shape[0]} features")
    vals, _ = infidelity_batch(net, x[None], scores[None], spec, output_index)
    return float(vals[0])


# --- reports -----------------------------------------------------------------

REPORT_COLUMNS = ("method", "c", "metric", "mean", "std", "runtime_s")


@dataclass
class EvalRecord:
    method: str
    c: float | None
    metric: str
    mean: float
    std: float
    runtime_s: float


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


@dataclass
class EvalReport:
    records: list[EvalRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, method: str, c, metric: str, values: Sequence[float], runtime_s: float) -> EvalRecord:
        vals = np.asarray(values, dtype=np.float64)
        rec = EvalRecord(method, None if c is None else float(c), metric, float(vals.mean()), float(vals.std()), float(runtime_s))
        self.records.append(rec)
        return rec

    def find(self, method: str, metric: str, c=None) -> EvalRecord:
        for r in self.records:
            if r.method == method and r.metric == metric and (c is None or r.c == float(c)):
                return r
        raise KeyError((method, metric, c))

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.records:
            w.writerow([r.method, _fmt(r.c), r.metric, _fmt(r.mean), _fmt(r.std), _fmt(r.runtime_s if timing else 0.0)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != REPORT_COLUMNS:
            raise ValueError(f"report header must be {','.join(REPORT_COLUMNS)}")
        recs = [
            EvalRecord(m, float(c) if c else None, metric, float(mean), float(std), float(rt))
            for m, c, metric, mean, std, rt in rows[1:]
        ]
        return cls(recs)

    def to_json(self, timing: bool = True) -> str:
        recs = [asdict(r) for r in self.records]
        if not timing:
            for r in recs:
                r["runtime_s"] = 0.0
        return json.dumps({"records": recs, "meta": self.meta}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls([EvalRecord(**r) for r in doc["records"]], doc.get("meta", {}))


# --- property checks ---------------------------------------------------------

TOLERANCES = {
    "completeness": 1e-6,  # relative
    "missingness": 0.0,
    "nonnegativity": 0.0,
    "peak_flow_completeness": 1e-9,
    "linearity": 1e-9,
}


@dataclass
class PropertyResult:
    name: str
    max_violation: float
    tolerance: float
    n_checks: int

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance


@dataclass
class PropertyReport:
    results: dict[str, PropertyResult] = field(default_factory=dict)

    def record(self, name: str, violation: float) -> None:
        r = self.results.setdefault(name, PropertyResult(name, 0.0, TOLERANCES[name], 0))
        r.max_violation = max(r.max_violation, float(violation))
        r.n_checks += 1

    def merge(self, other: "PropertyReport") -> None:
        for name, r in other.results.items():
            mine = self.results.setdefault(name, PropertyResult(name, 0.0, r.tolerance, 0))
            mine.max_violation = max(mine.max_violation, r.max_violation)
            mine.n_checks += r.n_checks

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def to_dict(self) -> dict:
        return {
            name: {
                "max_violation": r.max_violation,
                "tolerance": r.tolerance,
                "n_checks": r.n_checks,
                "passed": r.passed,
            }
            for name, r in sorted(self.results.items())
        }

    def table(self) -> str:
        lines = [f"{'property':<24}{'max violation':>16}{'tolerance':>12}{'checks':>8}  result"]
        for name, r in sorted(self.results.items()):
            lines.append(
                f"{name:<24}{r.max_violation:>16.3e}{r.tolerance:>12.1e}{r.n_checks:>8}  {'PASS' if r.passed else 'FAIL'}"
            )
        return "\n".join(lines)


def completeness_violation(net: Network, x, x_ref, result) -> float:
    target = forward(net, x)[-1]
    gap = completeness_gap(net, x, x_ref, result)
    # relative to the size of what is being decomposed
    scale = np.maximum(1.0, np.abs(target - forward(net, x_ref, use_bias=False)[-1]))
    return float(np.max(np.abs(gap) / scale))


def block_diagonal(net1: Network, net2: Network, a: float, b: float) -> Network:
    """Run both nets side by side on concatenated inputs and output a*M1 + b*M2.

    The nets must share their layer-type and activation sequence.
    """
    kinds1 = [l.fn if isinstance(l, ActivationLayer) else "linear" for l in net1.layers]
    kinds2 = [l.fn if isinstance(l, ActivationLayer) else "linear" for l in net2.layers]
    if kinds1 != kinds2 or net1.output_dim != net2.output_dim:
        raise ValueError("block-diagonal combination needs matching layer sequences and output widths")
    layers = []
    for l1, l2 in zip(net1.layers, net2.layers):
        if isinstance(l1, ActivationLayer):
            layers.append(l1)
            continue
        W = np.zeros((l1.in_dim + l2.in_dim, l1.out_dim + l2.out_dim))
        W[: l1.in_dim, : l1.out_dim] = l1.weights
        W[l1.in_dim :, l1.out_dim :] = l2.weights
        layers.append(Linear(W, np.concatenate([l1.bias, l2.bias])))
    d = net1.output_dim
    layers.append(Linear(np.vstack([a * np.eye(d), b * np.eye(d)]), np.zeros(d)))
    return Network(tuple(layers), net1.input_dim + net2.input_dim)


def companion_network(rng: np.random.Generator, net: Network, max_width: int = 16) -> Network:
    """Random net with the same layer sequence and output width as ``net``."""
    layers = []
    width = int(rng.integers(1, 9))
    in_dim = width
    lin = net.linear_layers
    for layer in net.layers:
        if isinstance(layer, ActivationLayer):
            layers.append(layer)
            continue
        out = net.output_dim if layer is lin[-1] else int(rng.integers(1, max_width + 1))
        layers.append(Linear(rng.normal(0, 1 / np.sqrt(width), (width, out)), rng.normal(0, 0.5, out)))
        width = out
    return Network(tuple(layers), in_dim)


def check_explanation(
    report: PropertyReport,
    net: Network,
    x: np.ndarray,
    x_ref: np.ndarray,
    config: ConflictConfig,
    multiplier_hook: MultiplierHook | None = None,
) -> None:
    """Completeness, nonnegativity and peak-flow completeness for one (x, x_ref)."""
    res = explain(net, x, x_ref, config, record=True, multiplier_hook=multiplier_hook)
    report.record("completeness", completeness_violation(net, x, x_ref, res))
    neg_part = min(float(res.pos.min()), float(res.neg.min()))
    for st in res.steps:
        for s in (st.state_in, st.state_out):
            neg_part = min(neg_part, float(s.pos.min()), float(s.neg.min()))
    report.record("nonnegativity", max(0.0, -neg_part))
    peak_gap = 0.0
    for st in res.steps:
        p = st.peaks
        net_flow = p.pos_to_pos + p.neg_to_pos - p.pos_to_neg - p.neg_to_neg
        peak_gap = max(peak_gap, float(np.max(np.abs(net_flow - (st.deltas.a_star - st.deltas.a_ref)), initial=0.0)))
    report.record("peak_flow_completeness", peak_gap)


def scale_pos_to_pos(factor: float = 1.1) -> MultiplierHook:
    """Multiplier hook that corrupts the +->+ multipliers, for exercising the checks."""

    def hook(_layer: int, m: Flows) -> Flows:
        return Flows(m.pos_to_pos * factor, m.neg_to_pos, m.pos_to_neg, m.neg_to_neg)

    return hook


def random_config(rng: np.random.Generator, net: Network) -> ConflictConfig:
    n_act = len(net.activation_indices)
    return ConflictConfig(tuple(rng.uniform(0, 1, n_act)) if n_act else float(rng.uniform()))


def check_properties(
    net: Network,
    trials: int = 100,
    seed: int = 0,
    config: ConflictConfig | None = None,
    *,
    linearity_trials: int | None = None,
    multiplier_hook: MultiplierHook | None = None,
) -> PropertyReport:
    """Randomized checks of completeness, missingness, nonnegativity,
    per-neuron peak-flow completeness and linearity on ``net``.

    With ``config=None`` each trial draws its own per-layer conflict constants.
    """
    rng = np.random.default_rng(seed)
    report = PropertyReport()
    d0 = net.input_dim
    for _ in range(trials):
        cfg = config or random_config(rng, net)
        x = rng.normal(0, 2, d0)
        x_ref = rng.normal(0, 1, d0)
        check_explanation(report, net, x, x_ref, cfg, multiplier_hook)

        same = rng.random(d0) < 0.5
        x_m = np.where(same, x_ref, x)
        res = explain(net, x_m, x_ref, cfg, multiplier_hook=multiplier_hook)
        miss = float(max(res.pos[:-1][same].max(initial=0.0), res.neg[:-1][same].max(initial=0.0)))
        report.record("missingness", miss)

    n_lin = trials if linearity_trials is None else linearity_trials
    for _ in range(n_lin):
        other = companion_network(rng, net)
        a, b = rng.normal(size=2)
        combo = block_diagonal(net, other, a, b)
        cfg = config or random_config(rng, net)
        x1, r1 = rng.normal(0, 2, d0), rng.normal(0, 1, d0)
        x2, r2 = rng.normal(0, 2, other.input_dim), rng.normal(0, 1, other.input_dim)
        j1 = explain(net, x1, r1, cfg, multiplier_hook=multiplier_hook).joint
        j2 = explain(other, x2, r2, cfg, multiplier_hook=multiplier_hook).joint
        jc = explain(combo, np.concatenate([x1, x2]), np.concatenate([r1, r2]), cfg, multiplier_hook=multiplier_hook).joint
        expected = np.vstack([a * j1[:-1], b * j2[:-1], a * j1[-1:] + b * j2[-1:]])
        report.record("linearity", float(np.max(np.abs(jc - expected))))
    return report


ALL_ACTIVATIONS = tuple(Activation)


def random_property_network(rng: np.random.Generator, max_depth: int = 5, max_width: int = 16) -> Network:
    """Random net with at most ``max_depth`` linear layers and mixed activations."""
    depth = int(rng.integers(1, max_depth + 1))
    hidden = [int(w) for w in rng.integers(1, max_width + 1, size=depth - 1)]
    acts = [ALL_ACTIVATIONS[i] for i in rng.integers(0, len(ALL_ACTIVATIONS), size=depth - 1)]
    d0 = int(rng.integers(1, max_width + 1))
    d_out = int(rng.integers(1, 4))
    return random_network(rng, d0, hidden, d_out, acts)
