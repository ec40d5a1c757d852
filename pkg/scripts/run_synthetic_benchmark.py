"""Desk-scale synthetic benchmark: CAFE over a sweep of c against the baselines.

Thin wrapper over ``cafe bench-synthetic`` with the default protocol
(D=2, l=0.3, two hidden layers of 16 ReLU units, 10k samples, 3 seeds).
Extra arguments are passed through, e.g. ``--metrics rmse infidelity``.
"""
from __future__ import annotations

import sys

from cafe.cli import main

if __name__ == "__main__":
    raise SystemExit(main(["bench-synthetic", "--out", "bench_out", *sys.argv[1:]]))
