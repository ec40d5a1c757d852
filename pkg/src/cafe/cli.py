"""Command-line entry point: ``cafe explain | bench-synthetic | verify | examples``.

Exit codes: 0 success, 1 other failure (including a walkthrough mismatch),
2 malformed model, 3 dimension mismatch, 4 invalid flags, 5 training
divergence, 6 property failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .baselines import BaselineKind, BaselineMethod, attribute_batch
from .bench import BenchConfig, BenchmarkDiverged, SeedResult, run_benchmark, synthetic_infidelity_perturbation
from .engine import ConflictConfig, explain
from .io import ModelFormatError, RunManifest, load_network, read_matrix, write_atomic, write_attributions
from .metrics import PropertyReport, check_properties, random_property_network, scale_pos_to_pos
from .nn import Activation, DimensionError, Network, NumericError
from .synth import SynthConfig
from .train import TrainConfig
from .walkthrough import NAMES as EXAMPLE_NAMES
from .walkthrough import run as run_walkthrough

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MODEL = 2
EXIT_DIMENSION = 3
EXIT_USAGE = 4
EXIT_DIVERGED = 5
EXIT_PROPERTY = 6

METHODS = ("cafe",) + tuple(k.value for k in BaselineKind)
THREADS_ENV = "CAFE_NUM_THREADS"

# flag -> methods that accept it
METHOD_FLAGS = {
    "conflict": {"cafe"},
    "epsilon": {"cafe"},
    "stabilizer": {"cafe"},
    "steps": {"ig"},
    "samples": {"smoothgrad", "svs"},
    "noise_std": {"smoothgrad"},
    "seed": {"smoothgrad", "svs"},
}


class UsageError(Exception):
    """Invalid flag value or combination (exit 4)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _err(msg: str) -> None:
    print(f"cafe: {msg}", file=sys.stderr)


def _config_snapshot(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


# --- explain -----------------------------------------------------------------


def parse_conflict(text: str) -> float | tuple[float, ...]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--conflict expects a number or a comma-separated list, got {text!r}") from None
    return vals[0] if len(vals) == 1 else tuple(vals)


def resolve_reference(spec: str, X: np.ndarray, input_dim: int) -> np.ndarray:
    """``zero``, ``mean`` (column means of ``X``) or ``file:<csv>`` with one row or one row per input."""
    if spec == "zero":
        return np.zeros(input_dim)
    if spec == "mean":
        return X.mean(axis=0)
    if spec.startswith("file:"):
        R, _ = read_matrix(spec[5:])
        if R.shape[1] != input_dim:
            raise DimensionError(f"reference has {R.shape[1]} columns, model expects {input_dim}")
        if R.shape[0] == 1:
            return R[0]
        if R.shape[0] != X.shape[0]:
            raise DimensionError(f"reference has {R.shape[0]} rows for {X.shape[0]} inputs")
        return R
    raise UsageError(f"--reference must be zero, mean or file:<path>, got {spec!r}")


def _check_method_flags(args) -> None:
    for flag, allowed in METHOD_FLAGS.items():
        if getattr(args, flag) is not None and args.method not in allowed:
            opt = "--" + flag.replace("_", "-")
            raise UsageError(f"{opt} is not valid with --method {args.method}")


def _scores(net: Network, X: np.ndarray, ref: np.ndarray, args) -> tuple[np.ndarray, np.ndarray, bool]:
    """(pos, neg, with_bias) with arrays shaped ``(n, sources, outputs)``."""
    if args.method == "cafe":
        c = parse_conflict(args.conflict) if args.conflict is not None else 0.5
        try:
            cfg = ConflictConfig(
                c,
                args.epsilon if args.epsilon is not None else ConflictConfig.epsilon,
                args.stabilizer or "clamp",
            )
            n_act = len(net.activation_indices)
            for k in range(n_act):
                cfg.for_layer(k, n_act)
            if isinstance(cfg.c, tuple) and not n_act:
                raise ValueError("per-layer conflict constants given for a network without activations")
        except ValueError as err:
            raise UsageError(str(err)) from None
        res = explain(net, X, ref, cfg)
        return res.pos, res.neg, True
    kw = {}
    if args.steps is not None:
        kw["steps"] = args.steps
    if args.samples is not None:
        kw["n_samples"] = args.samples
    if args.noise_std is not None:
        kw["noise_std"] = args.noise_std
    if args.seed is not None:
        kw["seed"] = args.seed
    try:
        method = BaselineMethod(BaselineKind(args.method), **kw)
    except ValueError as err:
        raise UsageError(str(err)) from None
    S = np.stack([attribute_batch(method, net, X, ref, j) for j in range(net.output_dim)], axis=-1)
    return np.maximum(S, 0.0), np.maximum(-S, 0.0), False


def cmd_explain(args) -> int:
    _check_method_flags(args)
    net = load_network(args.model)
    X, header = read_matrix(args.input)
    if X.shape[1] != net.input_dim:
        raise DimensionError(f"input has {X.shape[1]} columns, model expects {net.input_dim}")
    names = header if header else [f"x_{i + 1}" for i in range(net.input_dim)]
    ref = resolve_reference(args.reference, X, net.input_dim)
    manifest = RunManifest("explain", _config_snapshot(args), [args.seed] if args.seed is not None else [], __version__)
    pos, neg, with_bias = _scores(net, X, ref, args)
    manifest.lap("explain")
    write_attributions(args.output, ((pos[r], neg[r], names, with_bias) for r in range(X.shape[0])))
    manifest.outputs = [str(args.output)]
    manifest.lap("total")
    manifest.write(f"{args.output}.manifest.json")
    print(f"wrote {X.shape[0]} attribution blocks to {args.output}")
    return EXIT_OK


# --- bench-synthetic -----------------------------------------------------------


def _plot_csv(report, metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("label", "metric", "mean", "std"))
    for r in report.records:
        if r.metric in metrics:
            label = f"cafe({r.c:g})" if r.method == "cafe" else r.method
            w.writerow((label, r.metric, format(r.mean, ".17g"), format(r.std, ".17g")))
    return buf.getvalue()


def _write_report(out: Path, report, metrics, timing: bool) -> list[str]:
    write_atomic(out / "report.csv", report.to_csv(timing))
    write_atomic(out / "report.json", report.to_json(timing) + "\n")
    write_atomic(out / "plot.csv", _plot_csv(report, metrics))
    return [str(out / n) for n in ("report.csv", "report.json", "plot.csv")]


def cmd_bench_synthetic(args) -> int:
    try:
        synth = SynthConfig(
            D=args.D, l=args.l, s=args.s, weight_range=tuple(args.weight_range),
            n_samples=args.n_samples, split=tuple(args.split),
        )
        train_cfg = TrainConfig(
            hidden_dims=tuple(args.hidden), activation=Activation(args.activation), epochs=args.epochs,
            learning_rate=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
            n_restarts=args.restarts,
        )
        perturb = None
        if "infidelity" in args.metrics:
            perturb = synthetic_infidelity_perturbation(
                args.D, args.perturb_std, args.perturb_prob, args.n_perturbations, args.perturb_seed
            )
        bench = BenchConfig(
            methods=tuple(args.methods), c_values=tuple(args.c_values), seeds=tuple(args.seeds),
            metrics=tuple(args.metrics), n_eval=args.n_eval, perturb=perturb,
        )
    except ValueError as err:
        raise UsageError(str(err)) from None

    out = Path(args.out)
    manifest = RunManifest("bench-synthetic", _config_snapshot(args), list(bench.seeds), __version__)
    written: list[str] = []

    def on_seed(res: SeedResult) -> None:
        path = out / f"train_seed{res.seed}.json"
        write_atomic(path, res.train_report.to_json() + "\n")
        written.append(str(path))
        manifest.lap(f"seed {res.seed}")
        if not args.quiet:
            print(f"seed {res.seed}: test RMSE {res.train_report.test_rmse:.4f}", file=sys.stderr)

    code = EXIT_OK
    try:
        report = run_benchmark(synth, train_cfg, bench, on_seed)
    except BenchmarkDiverged as err:
        _err(f"training diverged: {err}; writing partial report")
        report = err.report
        report.meta["partial"] = True
        code = EXIT_DIVERGED
    written += _write_report(out, report, bench.metrics, not args.no_timing)
    manifest.outputs = written
    manifest.lap("total")
    manifest.write(out / "manifest.json")
    if not args.quiet:
        print(report.to_csv(not args.no_timing), end="")
    return code


# --- verify ------------------------------------------------------------------


def _derived_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def cmd_verify(args) -> int:
    hook = scale_pos_to_pos() if args.mutate else None
    report = PropertyReport()
    if args.model:
        nets = [load_network(args.model)]
        report.merge(check_properties(nets[0], args.trials, args.seed, linearity_trials=args.linearity_trials, multiplier_hook=hook))
    else:
        if args.random_nets < 1:
            raise UsageError("--random-nets must be >= 1")
        for k in range(args.random_nets):
            s = _derived_seed(args.seed, k)
            net = random_property_network(np.random.default_rng(s))
            report.merge(check_properties(net, args.trials, s, linearity_trials=args.linearity_trials, multiplier_hook=hook))
    passed = report.passed
    print(report.table())
    print("all properties hold" if passed else "property check FAILED")
    if args.json:
        doc = {
            "model": args.model,
            "random_nets": args.random_nets,
            "trials": args.trials,
            "linearity_trials": args.linearity_trials,
            "seed": args.seed,
            "mutated": bool(args.mutate),
            "properties": report.to_dict(),
            "passed": passed,
        }
        manifest = RunManifest("verify", _config_snapshot(args), [args.seed], __version__)
        write_atomic(args.json, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        manifest.outputs = [str(args.json)]
        manifest.lap("total")
        manifest.write(f"{args.json}.manifest.json")
    return EXIT_OK if passed else EXIT_PROPERTY


# --- examples ----------------------------------------------------------------


def cmd_examples(args) -> int:
    names = EXAMPLE_NAMES if args.name == "all" else (args.name,)
    ok = True
    for i, name in enumerate(names):
        wt = run_walkthrough(name)
        if i:
            print()
        print(wt.format())
        ok &= wt.passed
    return EXIT_OK if ok else EXIT_FAILURE


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cafe", description="Conflict-aware feature attribution tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("explain", help="attribute model outputs for rows of an input CSV")
    e.add_argument("--model", required=True, help="model JSON file")
    e.add_argument("--input", required=True, help="CSV of input rows, optional header")
    e.add_argument("--method", choices=METHODS, default="cafe")
    e.add_argument("--reference", default="zero", help="zero | mean | file:<csv>")
    e.add_argument("--conflict", help="c in [0,1], or one comma-separated value per activation layer")
    e.add_argument("--epsilon", type=float, help="division stabiliser (cafe)")
    e.add_argument("--stabilizer", choices=("clamp", "additive"))
    e.add_argument("--steps", type=int, help="integration steps (ig)")
    e.add_argument("--samples", type=int, help="noise draws (smoothgrad) or permutations (svs)")
    e.add_argument("--noise-std", type=float, help="smoothgrad noise std")
    e.add_argument("--seed", type=int, help="RNG seed for sampling methods")
    e.add_argument("--output", required=True, help="attribution CSV to write")
    e.set_defaults(func=cmd_explain)

    b = sub.add_parser("bench-synthetic", help="train on synthetic conflict data and score attribution methods")
    b.add_argument("--D", type=int, default=2, help="continuous features (and as many switches)")
    b.add_argument("--l", type=float, default=0.3, help="probability that a switch is on")
    b.add_argument("--s", type=float, default=1.0, help="std of the continuous features")
    b.add_argument("--weight-range", type=float, nargs=2, default=list(SynthConfig.weight_range), metavar=("A", "B"))
    b.add_argument("--n-samples", type=int, default=10_000)
    b.add_argument("--split", type=float, nargs=3, default=[0.6, 0.2, 0.2], metavar=("TRAIN", "VAL", "TEST"))
    b.add_argument("--hidden", type=int, nargs="+", default=[16, 16])
    b.add_argument("--activation", choices=[a.value for a in Activation], default="relu")
    b.add_argument("--epochs", type=int, default=300)
    b.add_argument("--lr", type=float, default=1e-3)
    b.add_argument("--weight-decay", type=float, default=1e-2)
    b.add_argument("--batch-size", type=int, default=64, help="0 for full-batch updates")
    b.add_argument("--restarts", type=int, default=1)
    b.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    b.add_argument("--methods", nargs="+", default=["cafe", "gi", "lrp", "dl-rescale", "ig", "smoothgrad"],
                   choices=METHODS)
    b.add_argument("--c-values", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
    b.add_argument("--metrics", nargs="+", choices=("rmse", "infidelity"), default=["rmse"])
    b.add_argument("--n-eval", type=int, help="attribute only the first N test rows")
    b.add_argument("--perturb-std", type=float, default=0.5)
    b.add_argument("--perturb-prob", type=float, default=0.1)
    b.add_argument("--n-perturbations", type=int, default=50)
    b.add_argument("--perturb-seed", type=int, default=0)
    b.add_argument("--out", default="bench_out", help="output directory")
    b.add_argument("--no-timing", action="store_true", help="write zero runtimes so reports are byte-reproducible")
    b.add_argument("--quiet", action="store_true")
    b.set_defaults(func=cmd_bench_synthetic)

    v = sub.add_parser("verify", help="randomised property checks")
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="model JSON file")
    src.add_argument("--random-nets", type=int, help="check this many random networks")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--linearity-trials", type=int, help="defaults to --trials")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--json", help="write the property report as JSON")
    v.add_argument("--mutate", action="store_true", help="corrupt the +->+ multipliers (test hook)")
    v.set_defaults(func=cmd_verify)

    x = sub.add_parser("examples", help="recompute a worked example step by step")
    x.add_argument("name", choices=EXAMPLE_NAMES + ("all",))
    x.set_defaults(func=cmd_examples)
    return p


def _thread_limit() -> int:
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a nonnegative integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"{THREADS_ENV} must be a nonnegative integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        n_threads = _thread_limit()
        limit = threadpool_limits(limits=n_threads) if n_threads else contextlib.nullcontext()
        with limit:
            return args.func(args)
    except UsageError as err:
        _err(str(err))
        return EXIT_USAGE
    except ModelFormatError as err:
        _err(f"malformed model: {err}")
        return EXIT_MODEL
    except DimensionError as err:
        _err(f"dimension mismatch: {err}")
        return EXIT_DIMENSION
    except (OSError, ValueError, NumericError) as err:
        _err(str(err))
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
