"""File formats: versioned model JSON, attribution CSV and run manifests."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import Activation, ActivationLayer, DimensionError, Linear, Network, NumericError

MODEL_VERSION = 1
BIAS_SOURCE = "__bias__"
ATTRIBUTION_COLUMNS = ("row", "output", "source", "pos", "neg", "joint")


class ModelFormatError(ValueError):
    """The model document is not a valid network description."""


# --- models ------------------------------------------------------------------


def _reject_constant(name: str):
    raise ModelFormatError(f"non-finite number {name} in model file")


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Linear):
            layers.append({"type": "linear", "weights": layer.weights.tolist(), "bias": layer.bias.tolist()})
        else:
            layers.append({"type": "activation", "fn": layer.fn.value})
    return {"version": MODEL_VERSION, "input_dim": net.input_dim, "layers": layers}


def network_from_dict(doc) -> Network:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r}")
    input_dim = doc.get("input_dim")
    if not isinstance(input_dim, int) or isinstance(input_dim, bool) or input_dim < 1:
        raise ModelFormatError("input_dim must be a positive integer")
    specs = doc.get("layers")
    if not isinstance(specs, list) or not specs:
        raise ModelFormatError("layers must be a nonempty list")
    layers = []
    for i, spec in enumerate(specs):
        if not isinstance(spec, dict):
            raise ModelFormatError(f"layer {i} is not an object")
        kind = spec.get("type")
        try:
            if kind == "linear":
                layers.append(Linear(spec["weights"], spec["bias"]))
            elif kind == "activation":
                layers.append(ActivationLayer(Activation(spec["fn"])))
            else:
                raise ModelFormatError(f"layer {i}: unknown type {kind!r}")
        except KeyError as err:
            raise ModelFormatError(f"layer {i}: missing field {err}") from None
        except (ValueError, TypeError, NumericError) as err:
            if isinstance(err, ModelFormatError):
                raise
            raise ModelFormatError(f"layer {i}: {err}") from None
    try:
        return Network(tuple(layers), input_dim)
    except DimensionError as err:
        raise ModelFormatError(str(err)) from None


def loads_network(text: str) -> Network:
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as err:
        raise ModelFormatError(f"invalid JSON: {err}") from None
    return network_from_dict(doc)


def load_network(path: str | Path) -> Network:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ModelFormatError(f"cannot read model file: {err}") from None
    return loads_network(text)


def save_network(net: Network, path: str | Path) -> None:
    write_atomic(path, json.dumps(network_to_dict(net), indent=1) + "\n")


# --- numeric tables ----------------------------------------------------------


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def read_matrix(path: str | Path) -> tuple[np.ndarray, list[str] | None]:
    """Rows of floats with an optional header line of column names."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path} contains no rows")
    header = None
    if not all(_is_number(c) for c in rows[0]):
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as err:
        raise ValueError(f"{path}: {err}") from None
    if data.ndim != 2 or (header is not None and data.shape[1] != len(header)):
        raise DimensionError(f"{path}: ragged rows")
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{path} contains non-finite values")
    return data, header


# --- attributions ------------------------------------------------------------


def fmt17(v: float) -> str:
    return format(float(v), ".17g")


def attribution_rows(pos: np.ndarray, neg: np.ndarray, names: Sequence[str], row: int = 0, with_bias: bool = True):
    """CSV rows for one explained input; ``pos``/``neg`` are ``(sources, outputs)``."""
    sources = list(names) + ([BIAS_SOURCE] if with_bias else [])
    if pos.shape != neg.shape or pos.shape[0] != len(sources):
        raise DimensionError(f"score matrix {pos.shape} does not match {len(sources)} sources")
    for j in range(pos.shape[1]):
        for k, src in enumerate(sources):
            p, n = float(pos[k, j]), float(neg[k, j])
            yield [str(row), str(j), src, fmt17(p), fmt17(n), fmt17(p - n)]


def write_attributions(path: str | Path, blocks) -> None:
    """``blocks`` yields ``(pos, neg, names, with_bias)`` per input row, in order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ATTRIBUTION_COLUMNS)
    for r, (pos, neg, names, with_bias) in enumerate(blocks):
        w.writerows(attribution_rows(pos, neg, names, r, with_bias))
    write_atomic(path, buf.getvalue())


@dataclass
class AttributionBlock:
    row: int
    sources: list[str]
    pos: np.ndarray  # (sources, outputs)
    neg: np.ndarray

    @property
    def joint(self) -> np.ndarray:
        return self.pos - self.neg


def parse_attributions(text: str) -> list[AttributionBlock]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != ATTRIBUTION_COLUMNS:
        raise ValueError(f"attribution CSV header must be {','.join(ATTRIBUTION_COLUMNS)}")
    cells: dict[int, dict[tuple[int, str], tuple[float, float]]] = {}
    order: dict[int, list[str]] = {}
    for rec in reader:
        if not rec:
            continue
        row, out, src, p, n, _ = rec
        r, j = int(row), int(out)
        cells.setdefault(r, {})[(j, src)] = (float(p), float(n))
        srcs = order.setdefault(r, [])
        if src not in srcs:
            srcs.append(src)
    blocks = []
    for r in sorted(cells):
        srcs = order[r]
        n_out = 1 + max(j for j, _ in cells[r])
        pos = np.zeros((len(srcs), n_out))
        neg = np.zeros_like(pos)
        for (j, src), (p, n) in cells[r].items():
            k = srcs.index(src)
            pos[k, j], neg[k, j] = p, n
        blocks.append(AttributionBlock(r, srcs, pos, neg))
    return blocks


def read_attributions(path: str | Path) -> list[AttributionBlock]:
    return parse_attributions(Path(path).read_text())


# --- manifests ---------------------------------------------------------------


def write_atomic(path: str | Path, text: str) -> None:
    """Write via a temporary file in the same directory and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    tool_version: str = ""
    timings: dict[str, float] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    started: float = field(default_factory=time.perf_counter, repr=False)

    def lap(self, name: str) -> None:
        self.timings[name] = time.perf_counter() - self.started

    def to_json(self) -> str:
        doc = asdict(self)
        doc.pop("started")
        return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable)

    def write(self, path: str | Path) -> None:
        write_atomic(path, self.to_json() + "\n")
