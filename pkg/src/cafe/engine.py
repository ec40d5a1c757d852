"""Conflict-aware attribution: separate positive and negative scores for every
input feature and for the network biases, propagated in one augmented forward
pass.

Scores are kept as two nonnegative arrays of shape ``(..., d0 + 1, width)``.
Rows ``0..d0-1`` belong to the input features and the last row to the biases,
so the bias scores travel through exactly the same rules as feature scores.
An optional leading batch axis is carried through every function.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .nn import (
    Activation,
    ActivationLayer,
    DimensionError,
    Linear,
    Network,
    NumericError,
    forward,
    forward_reference,
)

DEFAULT_EPSILON = 1e-10
# "clamp" divides by max(|e|, eps), which is exact whenever |e| >= eps;
# "additive" divides by |e| + eps.
STABILIZERS = ("clamp", "additive")


@dataclass(frozen=True)
class ConflictConfig:
    """Conflict sensitivity per activation layer plus the division stabiliser.

    ``c`` is either one value used for every activation layer or a sequence
    with one value per activation layer, in network order.
    """

    c: float | tuple[float, ...] = 0.5
    epsilon: float = DEFAULT_EPSILON
    stabilizer: str = "clamp"

    def __post_init__(self):
        c = self.c
        if isinstance(c, (list, tuple, np.ndarray)):
            c = tuple(float(v) for v in c)
            vals = c
        else:
            c = float(c)
            vals = (c,)
        for v in vals:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"conflict sensitivity must lie in [0, 1], got {v}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.stabilizer not in STABILIZERS:
            raise ValueError(f"stabilizer must be one of {STABILIZERS}, got {self.stabilizer!r}")
        object.__setattr__(self, "c", c)

    def for_layer(self, ordinal: int, n_activation_layers: int) -> float:
        if isinstance(self.c, tuple):
            if len(self.c) != n_activation_layers:
                raise ValueError(
                    f"{len(self.c)} conflict constants given for {n_activation_layers} activation layers"
                )
            return self.c[ordinal]
        return self.c

    def snapshot(self) -> dict:
        return {
            "c": list(self.c) if isinstance(self.c, tuple) else self.c,
            "epsilon": self.epsilon,
            "stabilizer": self.stabilizer,
        }


@dataclass
class AttributionState:
    """Positive and negative scores stored side by side as ``[pos | neg]``.

    ``stacked`` has shape ``(..., d0 + 1, 2 * width)``; keeping both halves in
    one array lets the linear rule run as a single matrix product.
    """

    stacked: np.ndarray

    @classmethod
    def from_parts(cls, pos, neg) -> "AttributionState":
        pos = np.asarray(pos, dtype=np.float64)
        neg = np.asarray(neg, dtype=np.float64)
        if pos.shape != neg.shape:
            raise DimensionError(f"positive scores {pos.shape} and negative scores {neg.shape} differ")
        return cls(np.concatenate([pos, neg], axis=-1))

    @property
    def width(self) -> int:
        return self.stacked.shape[-1] // 2

    @property
    def pos(self) -> np.ndarray:
        return self.stacked[..., : self.width]

    @property
    def neg(self) -> np.ndarray:
        return self.stacked[..., self.width :]

    @property
    def feat_pos(self) -> np.ndarray:
        return self.pos[..., :-1, :]

    @property
    def feat_neg(self) -> np.ndarray:
        return self.neg[..., :-1, :]

    @property
    def bias_pos(self) -> np.ndarray:
        return self.pos[..., -1, :]

    @property
    def bias_neg(self) -> np.ndarray:
        return self.neg[..., -1, :]


@dataclass
class EffectTriple:
    pos: np.ndarray  # >= 0
    neg: np.ndarray  # <= 0, signed
    combined: np.ndarray


@dataclass
class DeltaSet:
    """Rectified activation deltas plus the four activation values they come from."""

    star_up: np.ndarray
    star_down: np.ndarray
    pos_up: np.ndarray
    pos_down: np.ndarray
    neg_up: np.ndarray
    neg_down: np.ndarray
    a_pos: np.ndarray
    a_neg: np.ndarray
    a_star: np.ndarray
    a_ref: np.ndarray


@dataclass
class Flows:
    """One value per neuron for each (source sign -> target sign) pair."""

    pos_to_pos: np.ndarray
    neg_to_pos: np.ndarray
    pos_to_neg: np.ndarray
    neg_to_neg: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "+->+": self.pos_to_pos,
            "-->+": self.neg_to_pos,
            "+->-": self.pos_to_neg,
            "-->-": self.neg_to_neg,
        }


@dataclass
class ActivationStep:
    """Everything computed at one activation layer, kept for inspection."""

    layer_index: int
    c: float
    ref_preact: np.ndarray
    effects: EffectTriple
    deltas: DeltaSet
    peaks: Flows
    linear: Flows
    multipliers: Flows
    state_in: AttributionState
    state_out: AttributionState


@dataclass
class ExplanationResult:
    pos: np.ndarray  # (..., d0 + 1, dL), bias row last
    neg: np.ndarray
    meta: dict = field(default_factory=dict)
    steps: list[ActivationStep] = field(default_factory=list)

    @property
    def joint(self) -> np.ndarray:
        return self.pos - self.neg

    @property
    def feature_joint(self) -> np.ndarray:
        return self.joint[..., :-1, :]

    @property
    def bias_joint(self) -> np.ndarray:
        return self.joint[..., -1, :]


MultiplierHook = Callable[[int, Flows], Flows]


def _ratio(num: np.ndarray, den: np.ndarray, eps: float, stabilizer: str = "clamp") -> np.ndarray:
    """Stabilised num / den, with exactly 0 wherever num is exactly 0."""
    num = np.asarray(num, dtype=np.float64)
    out = np.zeros(np.broadcast_shapes(num.shape, np.shape(den)))
    safe = np.maximum(den, eps) if stabilizer == "clamp" else den + eps
    return np.divide(num, safe, out=out, where=num != 0.0)


def _differences(x, x_ref) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.shape[-1:] != x_ref.shape[-1:]:
        raise DimensionError("input and reference lengths differ")
    diff = x - x_ref
    return np.maximum(diff, 0.0), np.maximum(-diff, 0.0)


def input_rule(x, x_ref) -> AttributionState:
    up, down = _differences(x, x_ref)
    d0 = up.shape[-1]
    out = np.zeros(up.shape[:-1] + (d0 + 1, 2 * d0))
    idx = np.arange(d0)
    out[..., idx, idx] = up
    out[..., idx, d0 + idx] = down
    return AttributionState(out)


def _split_weights(layer: Linear) -> tuple[np.ndarray, np.ndarray]:
    return np.maximum(layer.weights, 0.0), np.maximum(-layer.weights, 0.0)


def _add_bias(out: np.ndarray, layer: Linear) -> None:
    d = layer.out_dim
    out[..., -1, :d] += np.maximum(layer.bias, 0.0)
    out[..., -1, d:] += np.maximum(-layer.bias, 0.0)


def linear_rule(state: AttributionState, layer: Linear) -> AttributionState:
    if state.width != layer.in_dim:
        raise DimensionError(f"state width {state.width} != layer input width {layer.in_dim}")
    w_pos, w_neg = _split_weights(layer)
    # [pos | neg] @ [[W+, W-], [W-, W+]]
    block = np.block([[w_pos, w_neg], [w_neg, w_pos]])
    out = state.stacked @ block
    _add_bias(out, layer)
    return AttributionState(out)


def _input_diff(x, x_ref, layer: Linear) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    diff = x - np.asarray(x_ref, dtype=np.float64)
    if diff.shape[-1] != layer.in_dim:
        raise DimensionError(f"input width {diff.shape[-1]} != layer input width {layer.in_dim}")
    return diff


def input_linear_rule(x, x_ref, layer: Linear) -> AttributionState:
    """``linear_rule(input_rule(x, x_ref), layer)`` without the diagonal matrix product."""
    diff = _input_diff(x, x_ref, layer)
    d0, d = layer.in_dim, layer.out_dim
    # a feature sits on one side of its reference, so its positive score is
    # max(diff * w, 0) and its negative score max(-diff * w, 0)
    prod = diff[..., :, None] * layer.weights
    out = np.zeros(diff.shape[:-1] + (d0 + 1, 2 * d))
    np.maximum(prod, 0.0, out=out[..., :d0, :d])
    np.maximum(-prod, 0.0, out=out[..., :d0, d:])
    _add_bias(out, layer)
    return AttributionState(out)


def input_linear_totals(x, x_ref, layer: Linear) -> AttributionState:
    """Row sums of :func:`input_linear_rule` as a one-row state."""
    diff = _input_diff(x, x_ref, layer)
    up, down = np.maximum(diff, 0.0), np.maximum(-diff, 0.0)
    w_pos, w_neg = _split_weights(layer)
    d = layer.out_dim
    out = np.empty(diff.shape[:-1] + (1, 2 * d))
    out[..., 0, :d] = up @ w_pos + down @ w_neg
    out[..., 0, d:] = up @ w_neg + down @ w_pos
    _add_bias(out, layer)
    return AttributionState(out)


def input_effects(state: AttributionState) -> EffectTriple:
    totals = state.stacked.sum(axis=-2)
    w = state.width
    e_pos = totals[..., :w]
    e_neg = -totals[..., w:]
    return EffectTriple(e_pos, e_neg, e_pos + e_neg)


def rectified_deltas(effects: EffectTriple, ref_preact: np.ndarray, fn: Activation) -> DeltaSet:
    fn = Activation(fn)
    ref_preact = np.asarray(ref_preact, dtype=np.float64)
    pts = fn(ref_preact + np.stack([effects.pos, effects.neg, effects.combined]))
    if not np.all(np.isfinite(pts)):
        raise NumericError(f"{fn.value} produced a non-finite value")
    a_pos, a_neg, a_star = pts
    a_ref = np.broadcast_to(fn(ref_preact), a_star.shape)
    if not np.all(np.isfinite(a_ref)):
        raise NumericError(f"{fn.value} produced a non-finite value")

    nonneg = effects.combined >= 0.0
    # each delta spans an interval [left, right] between two of the four
    # points; which pair depends on the sign of the combined effect
    star = np.where(nonneg, a_star - a_ref, a_ref - a_star)
    pos = a_pos - np.where(nonneg, a_star, a_ref)
    neg = np.where(nonneg, a_ref, a_star) - a_neg
    signed = np.stack([star, pos, neg])
    up = np.maximum(signed, 0.0)
    down = np.maximum(-signed, 0.0)
    return DeltaSet(up[0], down[0], up[1], down[1], up[2], down[2], a_pos, a_neg, a_star, a_ref)


def _flows(stacked: np.ndarray) -> Flows:
    return Flows(stacked[0], stacked[1], stacked[2], stacked[3])


def _stack(f: Flows) -> np.ndarray:
    return np.stack([f.pos_to_pos, f.neg_to_pos, f.pos_to_neg, f.neg_to_neg])


def _star_by_flow(deltas: DeltaSet) -> np.ndarray:
    # same-sign flows follow the rising slope, cross-sign flows the falling one
    return np.stack([deltas.star_up, deltas.star_down, deltas.star_down, deltas.star_up])


def _source_sizes(effects: EffectTriple) -> np.ndarray:
    a_pos, a_neg = np.abs(effects.pos), np.abs(effects.neg)
    return np.stack([a_pos, a_neg, a_pos, a_neg])


def _peak_stack(deltas: DeltaSet, effects: EffectTriple, star4: np.ndarray) -> np.ndarray:
    pos_real = effects.combined >= 0.0
    neg_real = effects.combined <= 0.0
    hyp_up = np.maximum(deltas.pos_up, deltas.neg_up)
    hyp_down = np.maximum(deltas.pos_down, deltas.neg_down)
    real = np.stack([pos_real, neg_real, pos_real, neg_real])
    hyp = np.stack([hyp_up, hyp_down, hyp_down, hyp_up])
    return real * star4 + hyp


def _clipped_stack(star4, sizes4, abs_star, peaks4, epsilon, stabilizer) -> np.ndarray:
    return np.minimum(_ratio(sizes4 * star4, abs_star, epsilon, stabilizer), peaks4)


def _multiplier_stack(lin4, peaks4, sizes4, c, epsilon, stabilizer) -> np.ndarray:
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"conflict sensitivity must lie in [0, 1], got {c}")
    return _ratio((1.0 - c) * lin4 + c * peaks4, sizes4, epsilon, stabilizer)


def peak_flows(deltas: DeltaSet, effects: EffectTriple) -> Flows:
    return _flows(_peak_stack(deltas, effects, _star_by_flow(deltas)))


def clipped_linear_flows(
    deltas: DeltaSet,
    effects: EffectTriple,
    peaks: Flows,
    epsilon: float = DEFAULT_EPSILON,
    stabilizer: str = "clamp",
) -> Flows:
    return _flows(
        _clipped_stack(
            _star_by_flow(deltas), _source_sizes(effects), np.abs(effects.combined), _stack(peaks), epsilon, stabilizer
        )
    )


def multipliers(
    linear: Flows,
    peaks: Flows,
    effects: EffectTriple,
    c: float,
    epsilon: float = DEFAULT_EPSILON,
    stabilizer: str = "clamp",
) -> Flows:
    return _flows(_multiplier_stack(_stack(linear), _stack(peaks), _source_sizes(effects), c, epsilon, stabilizer))


def apply_multipliers(state: AttributionState, m: Flows) -> AttributionState:
    # multipliers are per neuron; broadcast them over the score rows
    w = state.width
    pos, neg = state.pos, state.neg
    out = np.empty_like(state.stacked)
    np.multiply(pos, m.pos_to_pos[..., None, :], out=out[..., :w])
    np.multiply(neg, m.neg_to_neg[..., None, :], out=out[..., w:])
    # cross-sign flows vanish for monotone activations; skip the work then
    if np.any(m.neg_to_pos):
        out[..., :w] += neg * m.neg_to_pos[..., None, :]
    if np.any(m.pos_to_neg):
        out[..., w:] += pos * m.pos_to_neg[..., None, :]
    return AttributionState(out)


def compute_multipliers(
    state: AttributionState,
    ref_preact: np.ndarray,
    fn: Activation,
    c: float,
    epsilon: float = DEFAULT_EPSILON,
    layer_index: int = -1,
    hook: MultiplierHook | None = None,
    stabilizer: str = "clamp",
):
    effects = input_effects(state)
    deltas = rectified_deltas(effects, ref_preact, fn)
    # same arithmetic as peak_flows / clipped_linear_flows / multipliers,
    # sharing the stacked intermediates
    star4 = _star_by_flow(deltas)
    sizes4 = _source_sizes(effects)
    peaks4 = _peak_stack(deltas, effects, star4)
    lin4 = _clipped_stack(star4, sizes4, np.abs(effects.combined), peaks4, epsilon, stabilizer)
    peaks, lin = _flows(peaks4), _flows(lin4)
    m = _flows(_multiplier_stack(lin4, peaks4, sizes4, c, epsilon, stabilizer))
    if hook is not None:
        m = hook(layer_index, m)
    return effects, deltas, peaks, lin, m


def activation_step(
    state: AttributionState,
    ref_preact: np.ndarray,
    fn: Activation,
    c: float,
    epsilon: float = DEFAULT_EPSILON,
    layer_index: int = -1,
    hook: MultiplierHook | None = None,
    stabilizer: str = "clamp",
) -> ActivationStep:
    effects, deltas, peaks, lin, m = compute_multipliers(
        state, ref_preact, fn, c, epsilon, layer_index, hook, stabilizer
    )
    out = apply_multipliers(state, m)
    return ActivationStep(layer_index, c, ref_preact, effects, deltas, peaks, lin, m, state, out)


def fused_activation_linear(state: AttributionState, m: Flows, layer: Linear) -> AttributionState:
    """``linear_rule(apply_multipliers(state, m), layer)`` for narrow layers.

    The per-neuron mixing is folded into a per-sample weight block, which is
    much cheaper than rewriting the whole score array when the next layer
    has few outputs.
    """
    w_pos, w_neg = _split_weights(layer)
    w, d = state.width, layer.out_dim
    lead = state.stacked.shape[:-2]
    G = np.empty(lead + (2 * w, 2 * d))

    def col(v):
        return v[..., :, None]

    G[..., :w, :d] = col(m.pos_to_pos) * w_pos + col(m.pos_to_neg) * w_neg
    G[..., :w, d:] = col(m.pos_to_pos) * w_neg + col(m.pos_to_neg) * w_pos
    G[..., w:, :d] = col(m.neg_to_pos) * w_pos + col(m.neg_to_neg) * w_neg
    G[..., w:, d:] = col(m.neg_to_pos) * w_neg + col(m.neg_to_neg) * w_pos
    out = np.matmul(state.stacked, G)
    _add_bias(out, layer)
    return AttributionState(out)


def activation_rule(
    state: AttributionState,
    net: Network,
    ref_activations: Sequence[np.ndarray],
    layer_index: int,
    config: ConflictConfig,
) -> AttributionState:
    """Propagate scores through the activation layer at ``net.layers[layer_index]``.

    ``ref_activations`` are the bias-ablated reference activations from
    :func:`cafe.nn.forward_reference` (entry ``k`` is the input of layer ``k``).
    """
    layer = net.layers[layer_index]
    if not isinstance(layer, ActivationLayer):
        raise TypeError(f"layer {layer_index} is not an activation layer")
    act_idx = net.activation_indices
    c = config.for_layer(act_idx.index(layer_index), len(act_idx))
    step = activation_step(
        state, ref_activations[layer_index], layer.fn, c, config.epsilon, layer_index,
        stabilizer=config.stabilizer,
    )
    return step.state_out


def _fuse(layer, rows: int) -> bool:
    return isinstance(layer, Linear) and 4 * layer.out_dim <= rows


def _chunk_multipliers(
    net: Network,
    x: np.ndarray,
    x_ref: np.ndarray,
    ref_acts: list[np.ndarray],
    config: ConflictConfig,
    hook: MultiplierHook | None,
) -> dict[int, Flows]:
    """Multipliers of every activation layer for a batch of inputs.

    They depend on the scores only through each neuron's row sums, and every
    rule is linear in the rows, so a one-row state holding the sums is
    propagated instead of the full ``(d0 + 1)``-row scores.
    """
    act_idx = net.activation_indices
    layers = net.layers
    if isinstance(layers[0], Linear):
        totals = input_linear_totals(x, x_ref, layers[0])
        i = 1
    else:
        totals = AttributionState(input_rule(x, x_ref).stacked.sum(axis=-2, keepdims=True))
        i = 0
    out: dict[int, Flows] = {}
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, Linear):
            totals = linear_rule(totals, layer)
        else:
            c = config.for_layer(act_idx.index(i), len(act_idx))
            *_, m = compute_multipliers(totals, ref_acts[i], layer.fn, c, config.epsilon, i, hook, config.stabilizer)
            out[i] = m
            totals = apply_multipliers(totals, m)
        i += 1
    return out


def _propagate(
    net: Network, x: np.ndarray, x_ref: np.ndarray, mults: dict[int, Flows]
) -> AttributionState:
    """Push the full scores through the network with precomputed multipliers."""
    layers = net.layers
    rows = net.input_dim + 1
    i = 0
    if isinstance(layers[0], Linear):
        state = input_linear_rule(x, x_ref, layers[0])
        i = 1
    else:
        state = input_rule(x, x_ref)
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, Linear):
            state = linear_rule(state, layer)
            i += 1
            continue
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if _fuse(nxt, rows):
            state = fused_activation_linear(state, mults[i], nxt)
            i += 2
            continue
        state = apply_multipliers(state, mults[i])
        i += 1
    return state


def _explain_recorded(
    net: Network,
    x: np.ndarray,
    x_ref: np.ndarray,
    ref_acts: list[np.ndarray],
    config: ConflictConfig,
    hook: MultiplierHook | None,
) -> tuple[AttributionState, list[ActivationStep]]:
    """Layer-by-layer pass that keeps every intermediate quantity."""
    act_idx = net.activation_indices
    steps: list[ActivationStep] = []
    state = input_rule(x, x_ref)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Linear):
            state = linear_rule(state, layer)
            continue
        c = config.for_layer(act_idx.index(i), len(act_idx))
        step = activation_step(state, ref_acts[i], layer.fn, c, config.epsilon, i, hook, config.stabilizer)
        steps.append(step)
        state = step.state_out
    return state, steps


def explain(
    net: Network,
    x,
    x_ref=None,
    config: ConflictConfig | None = None,
    *,
    record: bool = False,
    multiplier_hook: MultiplierHook | None = None,
    chunk_size: int = 256,
) -> ExplanationResult:
    """Positive and negative scores of every feature and the biases for every output.

    ``x`` is one input or a ``(batch, d0)`` matrix; ``x_ref`` defaults to zeros
    and broadcasts against ``x``.  Result arrays have shape
    ``(..., d0 + 1, dL)`` with the bias row last.  Batches are processed in
    independent chunks of ``chunk_size`` rows to keep the score arrays in cache.

    Without ``record`` the multipliers come from a one-row pass over the
    neuron totals and only the final propagation touches all ``d0 + 1`` rows;
    the hook then sees one call per activation layer and chunk.
    """
    config = config or ConflictConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise DimensionError(f"input of shape {x.shape} does not match input_dim {net.input_dim}", 0)
    if x_ref is None:
        x_ref = np.zeros(net.input_dim)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x_ref.ndim not in (1, 2) or x_ref.shape[-1] != net.input_dim:
        raise DimensionError(f"reference of shape {x_ref.shape} does not match input_dim {net.input_dim}", 0)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x_ref))):
        raise NumericError("input or reference contains non-finite values")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")

    ref_acts = forward_reference(net, x_ref)
    meta = {"config": config.snapshot(), "reference": x_ref.tolist()}
    if record:
        state, steps = _explain_recorded(net, x, x_ref, ref_acts, config, multiplier_hook)
        return ExplanationResult(np.ascontiguousarray(state.pos), np.ascontiguousarray(state.neg), meta, steps)

    if x.ndim == 1 or x.shape[0] <= chunk_size:
        mults = _chunk_multipliers(net, x, x_ref, ref_acts, config, multiplier_hook)
        state = _propagate(net, x, x_ref, mults)
        return ExplanationResult(np.ascontiguousarray(state.pos), np.ascontiguousarray(state.neg), meta)

    n = x.shape[0]
    pos = np.empty((n, net.input_dim + 1, net.output_dim))
    neg = np.empty_like(pos)
    per_row_ref = x_ref.ndim == 2
    for lo in range(0, n, chunk_size):
        sl = slice(lo, lo + chunk_size)
        r = x_ref[sl] if per_row_ref else x_ref
        ra = [a[sl] for a in ref_acts] if per_row_ref else ref_acts
        mults = _chunk_multipliers(net, x[sl], r, ra, config, multiplier_hook)
        state = _propagate(net, x[sl], r, mults)
        pos[sl] = state.pos
        neg[sl] = state.neg
    return ExplanationResult(pos, neg, meta)


def completeness_gap(net: Network, x, x_ref, result: ExplanationResult) -> np.ndarray:
    """Summed joint scores minus M(x) - M_ref(x_ref), per output."""
    target = forward(net, x)[-1] - forward_reference(net, x_ref)[-1]
    return result.joint.sum(axis=-2) - target
