"""Wall-clock cost of each attribution method on a D=5 synthetic network.

Prints the best-of-N time for a batch of inputs and its ratio to CAFE and to
one forward pass.  Timings are interleaved so machine noise hits every method
alike.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from cafe.baselines import BaselineKind, BaselineMethod, attribute_batch
from cafe.engine import ConflictConfig, explain
from cafe.nn import forward
from cafe.synth import SynthConfig, generate
from cafe.train import TrainConfig, train


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--D", type=int, default=5)
    p.add_argument("--hidden", type=int, nargs="+", default=[40, 40])
    p.add_argument("--rows", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--skip", nargs="*", default=["svs"], help="methods to leave out (svs is slow)")
    args = p.parse_args()

    ds = generate(SynthConfig(D=args.D, n_samples=max(args.rows, 5000)))
    net, _ = train(ds, TrainConfig(hidden_dims=tuple(args.hidden), epochs=args.epochs))
    X = ds.features()[: args.rows]
    ref = np.zeros(X.shape[1])

    fns = {
        "forward": lambda: forward(net, X),
        f"forward x(d0+1={net.input_dim + 1})": lambda: [forward(net, X) for _ in range(net.input_dim + 1)],
        "cafe(0.5)": lambda: explain(net, X, ref, ConflictConfig(0.5)),
    }
    for kind in BaselineKind:
        if kind.value not in args.skip:
            method = BaselineMethod(kind)
            fns[kind.value] = lambda m=method: attribute_batch(m, net, X, ref)

    best = {k: np.inf for k in fns}
    for _ in range(args.repeats):
        for k, f in fns.items():
            t0 = time.perf_counter()
            f()
            best[k] = min(best[k], time.perf_counter() - t0)

    cafe = best["cafe(0.5)"]
    print(f"{'method':<24}{'ms':>10}{'/ cafe':>10}{'/ forward':>12}")
    for k, t in best.items():
        print(f"{k:<24}{t * 1e3:>10.2f}{t / cafe:>10.2f}{t / best['forward']:>12.1f}")


if __name__ == "__main__":
    main()
