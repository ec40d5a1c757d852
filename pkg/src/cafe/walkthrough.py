"""Step-by-step recomputation of the three hand-worked examples.

Each walkthrough runs the engine with ``record=True`` and lines every
intermediate quantity up against the value obtained by hand (two decimal
places, so the comparison tolerance is 0.005).  Rows marked informational
are shown for context and never affect the verdict.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ActivationStep, AttributionState, ConflictConfig, explain, input_rule
from .nn import Activation, ActivationLayer, Linear, Network, gelu_network, xnor_network

TOLERANCE = 0.005
NAMES = ("xnor", "gelu-net", "gelu-neuron")


@dataclass
class WalkRow:
    section: str
    quantity: str
    expected: float
    computed: float
    informational: bool = False

    @property
    def diff(self) -> float:
        return abs(self.computed - self.expected)

    @property
    def ok(self) -> bool:
        return self.diff <= TOLERANCE


@dataclass
class Walkthrough:
    name: str
    description: str
    rows: list[WalkRow] = field(default_factory=list)

    @property
    def checked(self) -> list[WalkRow]:
        return [r for r in self.rows if not r.informational]

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.checked)

    def failures(self) -> list[WalkRow]:
        return [r for r in self.checked if not r.ok]

    def format(self) -> str:
        lines = [f"== {self.name}: {self.description}"]
        head = f"{'quantity':<28} {'expected':>10} {'computed':>12} {'|diff|':>9}  status"
        section = None
        for r in self.rows:
            if r.section != section:
                section = r.section
                lines += ["", f"-- {section}", head]
            status = "info" if r.informational else ("ok" if r.ok else "MISMATCH")
            lines.append(f"{r.quantity:<28} {r.expected:>10.4f} {r.computed:>12.6f} {r.diff:>9.2e}  {status}")
        n_bad = len(self.failures())
        lines += ["", f"{len(self.checked) - n_bad}/{len(self.checked)} checked quantities within {TOLERANCE}"]
        return "\n".join(lines)


def _score_rows(section: str, state: AttributionState, expected: dict, features: list[str], neurons: list[str]):
    """``expected`` maps ``(feature, sign, neuron)`` to a value; feature ``"bias"`` is the last row."""
    rows = []
    for (feat, sign, neuron), val in expected.items():
        f = len(features) if feat == "bias" else features.index(feat)
        j = neurons.index(neuron)
        block = state.pos if sign == "+" else state.neg
        rows.append(WalkRow(section, f"s[{feat}]{sign} at {neuron}", val, float(block[f, j])))
    return rows


def _activation_rows(section: str, step: ActivationStep, i: int, expected: dict) -> list[WalkRow]:
    e, d = step.effects, step.deltas
    computed = {
        "e+": e.pos[i], "e-": e.neg[i], "e*": e.combined[i],
        "a+": d.a_pos[i], "a-": d.a_neg[i], "a*": d.a_star[i], "a_ref": d.a_ref[i],
        "delta* up": d.star_up[i], "delta* down": d.star_down[i],
        "delta+ up": d.pos_up[i], "delta+ down": d.pos_down[i],
        "delta- up": d.neg_up[i], "delta- down": d.neg_down[i],
    }
    for prefix, flows in (("peak", step.peaks), ("linear", step.linear), ("m", step.multipliers)):
        for key, arr in flows.as_dict().items():
            computed[f"{prefix} {key}"] = arr[i]
    return [WalkRow(section, k, v, float(computed[k])) for k, v in expected.items()]


def _unclipped(step: ActivationStep, i: int, source: str) -> float:
    """Linear-approximation flow before the peak cap, for the single nonzero combined delta."""
    e, d = step.effects, step.deltas
    size = e.pos[i] if source == "+" else -e.neg[i]
    star = max(d.star_up[i], d.star_down[i])
    return float(size * star / abs(e.combined[i]))


def xnor() -> Walkthrough:
    net = xnor_network()
    x, ref = np.array([1.0, 1.0]), np.zeros(2)
    res = explain(net, x, ref, ConflictConfig(1.0), record=True)
    step = res.steps[0]
    feats, hidden = ["x1", "x2"], ["h1", "h2"]
    wt = Walkthrough("xnor", "XNOR network, x=(1,1), reference (0,0), c=1")

    start = input_rule(x, ref)
    wt.rows += [
        WalkRow("input layer", f"s[{f}]{s}", v, float((start.pos if s == "+" else start.neg)[k, k]))
        for k, f in enumerate(feats)
        for s, v in (("+", 1.0), ("-", 0.0))
    ]
    wt.rows += _score_rows(
        "first linear layer",
        step.state_in,
        {
            ("x1", "+", "h1"): 1.0, ("x2", "-", "h1"): 1.0,
            ("x1", "-", "h2"): 1.0, ("x2", "+", "h2"): 1.0,
            ("x1", "-", "h1"): 0.0, ("x2", "+", "h1"): 0.0,
            ("x1", "+", "h2"): 0.0, ("x2", "-", "h2"): 0.0,
        },
        feats, hidden,
    )
    neuron = {
        "e+": 1.0, "e-": -1.0, "e*": 0.0,
        "a+": 1.0, "a-": 0.0, "a*": 0.0, "a_ref": 0.0,
        "delta* up": 0.0, "delta+ up": 1.0, "delta- up": 0.0,
        "delta* down": 0.0, "delta+ down": 0.0, "delta- down": 0.0,
        "peak +->+": 1.0, "peak -->+": 0.0, "peak +->-": 0.0, "peak -->-": 1.0,
        "linear +->+": 0.0, "linear -->+": 0.0, "linear +->-": 0.0, "linear -->-": 0.0,
        "m +->+": 1.0, "m -->+": 0.0, "m +->-": 0.0, "m -->-": 1.0,
    }
    for i, h in enumerate(hidden):
        wt.rows += _activation_rows(f"ReLU neuron {h}", step, i, neuron)
    wt.rows += _score_rows(
        "after ReLU",
        step.state_out,
        {("x1", "+", "h1"): 1.0, ("x2", "-", "h1"): 1.0, ("x1", "-", "h2"): 1.0, ("x2", "+", "h2"): 1.0},
        feats, hidden,
    )
    final = AttributionState.from_parts(res.pos, res.neg)
    wt.rows += _score_rows(
        "output",
        final,
        {
            ("x1", "+", "y"): 1.0, ("x1", "-", "y"): 1.0,
            ("x2", "+", "y"): 1.0, ("x2", "-", "y"): 1.0,
            ("bias", "+", "y"): 1.0, ("bias", "-", "y"): 0.0,
        },
        feats, ["y"],
    )
    return wt


def gelu_net() -> Walkthrough:
    net = gelu_network()
    x, ref = np.array([2.0, 2.0]), np.array([1.0, 1.0])
    res = explain(net, x, ref, ConflictConfig(1.0), record=True)
    step = res.steps[0]
    feats = ["x1", "x2"]
    wt = Walkthrough("gelu-net", "GELU network, x=(2,2), reference (1,1), c=1 then c=0")

    start = input_rule(x, ref)
    wt.rows += [
        WalkRow("input layer", f"s[{f}]+", 1.0, float(start.pos[k, k])) for k, f in enumerate(feats)
    ]
    wt.rows += _score_rows(
        "linear layer",
        step.state_in,
        {("x1", "+", "h"): 50.0, ("x2", "-", "h"): 51.0, ("x1", "-", "h"): 0.0, ("x2", "+", "h"): 0.0},
        feats, ["h"],
    )
    wt.rows += _activation_rows(
        "GELU neuron",
        step,
        0,
        {
            "e+": 50.0, "e-": -51.0, "e*": -1.0,
            "a+": 49.0, "a-": 0.0, "a*": -0.05, "a_ref": -0.16,
            "delta* down": 0.11, "delta+ up": 49.16, "delta- down": 0.05,
            "delta* up": 0.0, "delta+ down": 0.0, "delta- up": 0.0,
            "peak +->+": 49.16, "peak -->+": 0.16, "peak +->-": 0.05, "peak -->-": 49.16,
            "linear +->+": 0.0, "linear -->+": 0.16, "linear +->-": 0.05, "linear -->-": 0.0,
            "m +->+": 0.9832, "m -->+": 0.0031, "m +->-": 0.0010, "m -->-": 0.9639,
        },
    )
    # the hand computation rounds delta* to 0.11 before scaling by 51 and 50
    wt.rows += [
        WalkRow("GELU neuron", "unclipped linear -->+", 5.61, _unclipped(step, 0, "-"), informational=True),
        WalkRow("GELU neuron", "unclipped linear +->-", 5.5, _unclipped(step, 0, "+"), informational=True),
    ]
    final = AttributionState.from_parts(res.pos, res.neg)
    wt.rows += _score_rows(
        "output, c=1",
        final,
        {("x1", "+", "y"): 49.16, ("x1", "-", "y"): 0.05, ("x2", "+", "y"): 0.16, ("x2", "-", "y"): 49.16},
        feats, ["y"],
    )
    res0 = explain(net, x, ref, ConflictConfig(0.0))
    wt.rows += _score_rows(
        "output, c=0",
        AttributionState.from_parts(res0.pos, res0.neg),
        {("x1", "+", "y"): 0.0, ("x1", "-", "y"): 0.05, ("x2", "+", "y"): 0.16, ("x2", "-", "y"): 0.0},
        feats, ["y"],
    )
    return wt


def gelu_neuron_network() -> Network:
    """Identity-weight feed into one GELU unit: x1 arrives positive, x2 negative."""
    return Network((Linear([[1.0], [-1.0]], [0.0]), ActivationLayer(Activation.GELU)), 2)


def gelu_neuron() -> Walkthrough:
    net = gelu_neuron_network()
    x, ref = np.array([0.5, 1.5]), np.zeros(2)
    res = explain(net, x, ref, ConflictConfig(0.5), record=True)
    step = res.steps[0]
    feats = ["x1", "x2"]
    wt = Walkthrough("gelu-neuron", "single GELU neuron, incoming scores x1 +0.5 and x2 -1.5, reference pre-activation 0, c=0.5")
    wt.rows += _score_rows(
        "incoming scores",
        step.state_in,
        {("x1", "+", "h"): 0.5, ("x2", "-", "h"): 1.5},
        feats, ["h"],
    )
    wt.rows += _activation_rows(
        "GELU neuron",
        step,
        0,
        {
            "e+": 0.5, "e-": -1.5, "e*": -1.0,
            "a+": 0.35, "a-": -0.10, "a*": -0.16, "a_ref": 0.0,
            "delta* up": 0.16, "delta+ up": 0.35, "delta- down": 0.06,
            "peak +->+": 0.35, "peak -->+": 0.06, "peak +->-": 0.06, "peak -->-": 0.51,
            "linear +->+": 0.08, "linear -->+": 0.0, "linear +->-": 0.0, "linear -->-": 0.24,
            "m +->+": 0.43, "m -->+": 0.02, "m +->-": 0.06, "m -->-": 0.25,
        },
    )
    wt.rows += _score_rows(
        "outgoing scores",
        step.state_out,
        {("x1", "+", "h"): 0.22, ("x1", "-", "h"): 0.03, ("x2", "+", "h"): 0.03, ("x2", "-", "h"): 0.38},
        feats, ["h"],
    )
    return wt


BUILDERS = {"xnor": xnor, "gelu-net": gelu_net, "gelu-neuron": gelu_neuron}


def run(name: str) -> Walkthrough:
    try:
        return BUILDERS[name]()
    except KeyError:
        raise ValueError(f"unknown example {name!r}; choose from {', '.join(NAMES)}") from None
