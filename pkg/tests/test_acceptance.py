"""Acceptance criteria, one test per criterion.

Every test records a ``[PASS]``/``[FAIL]`` line (echoed in the pytest terminal
summary) before asserting, so a failing criterion still reports what it
measured.  Run on its own with ``python tests/test_acceptance.py``.
"""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from cafe.autodiff import grad_input
from cafe.baselines import BaselineMethod, attribute, deeplift_rescale, gradient_input, integrated_gradients, lrp_epsilon
from cafe.bench import BenchConfig, run_benchmark, synthetic_infidelity_perturbation
from cafe.cli import main
from cafe.engine import ConflictConfig, explain
from cafe.metrics import PropertyReport, check_properties, random_property_network
from cafe.nn import Activation, forward, gelu_network, random_network, xnor_network
from cafe.synth import SynthConfig, generate
from cafe.train import TrainConfig, train
from cafe.walkthrough import gelu_neuron

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # pragma: no cover
    ACCEPTANCE_LINES = []

GOLDEN_TOL = 0.005
C_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)


def record(n: int, ok: bool, title: str, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] C{n} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def note(n: int, detail: str) -> None:
    line = f"[INFO] C{n} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def best_time(fns: dict, repeats: int) -> dict:
    """Minimum wall time per callable, with calls interleaved to share machine noise."""
    best = {k: np.inf for k in fns}
    for _ in range(repeats):
        for k, f in fns.items():
            t0 = time.perf_counter()
            f()
            best[k] = min(best[k], time.perf_counter() - t0)
    return best


# --- 1-4: worked examples --------------------------------------------------------


def test_c1_golden_xnor():
    net = xnor_network()
    x, ref = np.array([1.0, 1.0]), np.zeros(2)
    res = explain(net, x, ref, ConflictConfig(1.0))
    pos, neg = res.pos[:, 0], res.neg[:, 0]
    err = max(np.max(np.abs(pos - [1.0, 1.0, 1.0])), np.max(np.abs(neg - [1.0, 1.0, 0.0])))
    t = best_time({"explain": lambda: explain(net, x, ref, ConflictConfig(1.0))}, 200)["explain"]
    ok = err <= 1e-9 and t < 1e-3
    detail = f"max |error| {err:.1e} (tol 1e-9), runtime {t * 1e3:.3f} ms (< 1 ms)"
    assert record(1, ok, "golden XNOR", detail)


def test_c2_golden_gelu_net():
    net = gelu_network()
    x, ref = np.array([2.0, 2.0]), np.array([1.0, 1.0])
    expected = {
        0.0: ([0.00, 0.16], [0.05, 0.00]),
        1.0: ([49.16, 0.16], [0.05, 49.16]),
    }
    err = 0.0
    for c, (p, n) in expected.items():
        res = explain(net, x, ref, ConflictConfig(c))
        err = max(err, np.max(np.abs(res.pos[:2, 0] - p)), np.max(np.abs(res.neg[:2, 0] - n)))
    assert record(2, err <= GOLDEN_TOL, "golden GELU net", f"max |error| {err:.4f} (tol {GOLDEN_TOL})")


def test_c3_golden_gelu_neuron():
    wt = gelu_neuron()
    m_rows = [r for r in wt.checked if r.quantity.startswith("m ")]
    s_rows = [r for r in wt.checked if r.section == "outgoing scores"]
    m_err = max(r.diff for r in m_rows)
    s_err = max(r.diff for r in s_rows)
    got = ", ".join(f"{r.computed:.4f}" for r in s_rows)
    ok = m_err <= GOLDEN_TOL and s_err <= GOLDEN_TOL
    detail = f"multipliers max |error| {m_err:.4f}, final scores ({got}) max |error| {s_err:.4f} (tol {GOLDEN_TOL})"
    assert record(3, ok, "golden GELU neuron", detail)


def test_c4_baseline_goldens():
    net = gelu_network()
    x, ref = np.array([2.0, 2.0]), np.array([1.0, 1.0])
    expected = {"gi": (-8.52, 8.69), "dl-rescale": (-5.66, 5.77), "ig": (-5.66, 5.77), "lrp": (2.28, -2.32)}
    errs = {k: float(np.max(np.abs(attribute(BaselineMethod(k, steps=128), net, x, ref) - v))) for k, v in expected.items()}
    worst = max(errs.values())
    detail = ", ".join(f"{k} {e:.4f}" for k, e in errs.items()) + " (tol 0.01)"
    assert record(4, worst <= 0.01, "baseline goldens", detail)


# --- 5-6: properties -------------------------------------------------------------


def test_c5_property_suite():
    t0 = time.perf_counter()
    report = PropertyReport()
    seeds = np.random.SeedSequence(2024).spawn(1000)
    for k, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        net = random_property_network(rng)
        s = int(rng.integers(2**31))
        report.merge(check_properties(net, trials=1, seed=s, linearity_trials=1 if k < 100 else 0))
    elapsed = time.perf_counter() - t0
    ok = report.passed and report.results["linearity"].n_checks == 100 and elapsed < 120
    worst = ", ".join(f"{n} {r.max_violation:.1e}" for n, r in report.results.items())
    assert record(5, ok, "property suite", f"1000 nets, 100 linearity checks, {worst}, {elapsed:.1f} s (< 120 s)")


def test_c6_relu_equivalence():
    rng = np.random.default_rng(6)
    worst = {"G.I": 0.0, "LRP": 0.0, "DL-R": 0.0}
    for _ in range(200):
        depth = int(rng.integers(1, 5))
        d0 = int(rng.integers(1, 9))
        net = random_network(rng, d0, [int(w) for w in rng.integers(1, 13, depth)], 1, Activation.RELU, bias_scale=0.0)
        X = rng.normal(size=(4, d0))
        cafe = explain(net, X, np.zeros(d0), ConflictConfig(0.0)).feature_joint[..., 0]
        others = {"G.I": gradient_input(net, X), "LRP": lrp_epsilon(net, X), "DL-R": deeplift_rescale(net, X, np.zeros(d0))}
        for k, v in others.items():
            worst[k] = max(worst[k], float(np.max(np.abs(cafe - v))))
    ok = max(worst.values()) <= 1e-8
    detail = "200 nets, max |CAFE(0) - baseline|: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-8)"
    assert record(6, ok, "ReLU equivalence", detail)


# --- 7-8: synthetic benchmark ----------------------------------------------------


def _sweep_verdict(rep) -> tuple[bool, list[float], float, float]:
    rm = [rep.find("cafe", "rmse", c).mean for c in C_SWEEP]
    decreasing = all(a > b for a, b in zip(rm, rm[1:]))
    ratio = rm[-1] / rm[0]
    gi = rep.find("gi", "rmse").mean
    return decreasing, rm, ratio, gi


@pytest.mark.slow
def test_c7_synthetic_benchmark():
    t0 = time.perf_counter()
    rep = run_benchmark(
        SynthConfig(D=2, l=0.3, n_samples=10_000),
        TrainConfig(hidden_dims=(16, 16), activation=Activation.RELU),
        BenchConfig(c_values=C_SWEEP, seeds=(0, 1, 2)),
    )
    elapsed = time.perf_counter() - t0
    model = rep.find("model", "test_rmse").mean
    decreasing, rm, ratio, gi = _sweep_verdict(rep)
    ok = model <= 0.15 and decreasing and ratio <= 0.5 and rm[-1] < gi and elapsed < 900
    sweep = ", ".join(f"{v:.3f}" for v in rm)
    detail = (
        f"model RMSE {model:.3f} (<= 0.15), CAFE RMSE over c ({sweep}) strictly decreasing={decreasing}, "
        f"CAFE(1)/CAFE(0) {ratio:.2f} (<= 0.5), G.I {gi:.3f}, {elapsed:.0f} s (< 900 s)"
    )
    record(7, ok, "synthetic benchmark", detail)

    # same protocol with weights drawn from (0.5, 2.0); reported only
    lit = run_benchmark(
        SynthConfig(D=2, l=0.3, n_samples=10_000, weight_range=(0.5, 2.0)),
        TrainConfig(hidden_dims=(16, 16), activation=Activation.RELU),
        BenchConfig(methods=("cafe", "gi"), c_values=C_SWEEP, seeds=(0, 1, 2)),
    )
    d2, rm2, ratio2, gi2 = _sweep_verdict(lit)
    note(7, f"weights in (0.5, 2.0): CAFE RMSE over c ({', '.join(f'{v:.3f}' for v in rm2)}), "
            f"strictly decreasing={d2}, ratio {ratio2:.2f}, G.I {gi2:.3f}")
    assert ok


@pytest.mark.slow
def test_c8_infidelity_direction():
    bench = BenchConfig(
        methods=("cafe", "gi"),
        c_values=(0.5,),
        seeds=(0, 1, 2),
        metrics=("infidelity",),
        n_eval=500,
        perturb=synthetic_infidelity_perturbation(2, std=0.5, n=50),
    )
    rep = run_benchmark(
        SynthConfig(D=2, l=0.3, n_samples=10_000), TrainConfig(hidden_dims=(16, 16), activation=Activation.GELU), bench
    )
    cafe = rep.find("cafe", "infidelity", 0.5)
    gi = rep.find("gi", "infidelity")
    ok = cafe.mean <= gi.mean
    detail = f"CAFE(0.5) {cafe.mean:.4f} +- {cafe.std:.4f} vs G.I {gi.mean:.4f} +- {gi.std:.4f} (need CAFE <= G.I)"
    assert record(8, ok, "infidelity direction", detail)


# --- 9-10: runtime and gradients -------------------------------------------------


def test_c9_runtime():
    ds = generate(SynthConfig(D=5, l=0.3, n_samples=10_000))
    net, _ = train(ds, TrainConfig(hidden_dims=(40, 40), epochs=20))
    X = ds.features()[:2000]
    ref = np.zeros(X.shape[1])
    d0 = net.input_dim
    cfg = ConflictConfig(0.5)

    def forwards():
        for _ in range(d0 + 1):
            forward(net, X)

    t = best_time(
        {
            "cafe": lambda: explain(net, X, ref, cfg),
            "gi": lambda: gradient_input(net, X),
            "forward": forwards,
            "ig": lambda: integrated_gradients(net, X, ref, steps=128),
        },
        7,
    )
    r_gi, r_fwd, r_ig = t["cafe"] / t["gi"], t["cafe"] / t["forward"], t["ig"] / t["cafe"]
    ok = r_gi <= 20 and r_fwd <= 4 and r_ig >= 5
    detail = (
        f"CAFE/G.I {r_gi:.1f}x (<= 20), CAFE/(d0+1) forwards {r_fwd:.2f}x (<= 4), IG/CAFE {r_ig:.1f}x (>= 5); "
        f"CAFE {t['cafe'] * 1e3:.1f} ms on 2000 rows"
    )
    assert record(9, ok, "runtime", detail)


SMOOTH = (Activation.GELU, Activation.SIGMOID, Activation.TANH, Activation.SOFTPLUS)


def test_c10_gradient_correctness():
    rng = np.random.default_rng(10)
    worst = 0.0
    h = 1e-5
    for _ in range(100):
        depth = int(rng.integers(1, 5))
        acts = [SMOOTH[i] for i in rng.integers(0, len(SMOOTH), depth)]
        d0 = int(rng.integers(1, 9))
        net = random_network(rng, d0, [int(w) for w in rng.integers(1, 13, depth)], 1, acts)
        x = rng.normal(size=d0)
        f = lambda v: forward(net, v)[-1][0]
        fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(d0)])
        g = grad_input(net, x)
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    assert record(10, worst <= 1e-6, "gradient correctness", f"100 smooth nets, max relative error {worst:.1e} (tol 1e-6)")


# --- 11: determinism -------------------------------------------------------------

BENCH_ARGS = ["bench-synthetic", "--n-samples", "1000", "--epochs", "20", "--seeds", "0", "1",
              "--metrics", "rmse", "infidelity", "--n-eval", "50", "--n-perturbations", "10", "--no-timing", "--quiet"]


def _outputs(folder: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir()) if not p.name.endswith("manifest.json")}


def test_c11_determinism(tmp_path, capsys):
    runs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        out.mkdir()
        bench = main(BENCH_ARGS + ["--out", str(out / "bench")])
        verify = main(["verify", "--random-nets", "20", "--trials", "5", "--seed", "3", "--json", str(out / "verify.json")])
        runs.append((bench, verify, _outputs(out / "bench"), (out / "verify.json").read_bytes(), capsys.readouterr().out))
    (b1, v1, f1, j1, o1), (b2, v2, f2, j2, o2) = runs
    ok = b1 == b2 == 0 and v1 == v2 == 0 and f1 == f2 and j1 == j2 and o1 == o2 and len(f1) >= 5
    same = json.loads(j1)["passed"]
    detail = f"bench files {sorted(f1)} identical={f1 == f2}, verify JSON identical={j1 == j2} (passed={same})"
    assert record(11, ok, "determinism", detail)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s", "-p", "no:cacheprovider"]))
