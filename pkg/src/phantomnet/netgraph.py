"""Declarative model graphs: JSON config parsing, shape inference, exact
parameter/MAC/size accounting, weight binding, and whole-network forward
execution. Ships two built-in configurations: a YOLOv8n-style ``baseline``
and the lightweight ``phantom`` variant derived from it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import blocks as B
from .blocks import DetectOutput, LayerCost
from .tensor import ConfigError, ShapeError, Tensor4

BUILTIN_CLASS_NAMES = ("person", "car", "traffic light", "street sign")


class WeightError(ValueError):
    """Weight manifest/blob does not match the model structure."""


@dataclass(frozen=True)
class LayerSpec:
    """One row of a model graph. ``src`` holds resolved source indices;
    -1 means the network input and is only legal at index 0."""

    index: int
    src: tuple[int, ...]
    repeats: int
    kind: str
    args: dict

    def to_record(self) -> dict:
        src = self.src[0] if len(self.src) == 1 else list(self.src)
        return {
            "index": self.index,
            "from": src,
            "repeats": self.repeats,
            "kind": self.kind,
            "args": dict(self.args),
        }


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    num_classes: int
    input_size: int = 640

    @property
    def save_set(self) -> frozenset[int]:
        """Indices whose outputs are consumed by a non-adjacent later layer."""
        needed = set()
        for layer in self.layers:
            for s in layer.src:
                if s >= 0 and s != layer.index - 1:
                    needed.add(s)
        return frozenset(needed)


def _parse_layer(record, position: int) -> LayerSpec:
    if not isinstance(record, dict):
        raise ConfigError(f"layer {position}: expected an object, got {type(record).__name__}")
    unknown = set(record) - {"index", "from", "repeats", "kind", "args"}
    if unknown:
        raise ConfigError(f"layer {position}: unknown fields {sorted(unknown)}")
    for req in ("index", "from", "kind"):
        if req not in record:
            raise ConfigError(f"layer {position}: missing field '{req}'")
    index = record["index"]
    if index != position:
        raise ConfigError(f"layer {position}: index {index} out of order")
    raw_from = record["from"]
    if isinstance(raw_from, int):
        raw_from = [raw_from]
    if not isinstance(raw_from, list) or not all(isinstance(f, int) for f in raw_from):
        raise ConfigError(f"layer {index}: 'from' must be an int or list of ints")
    src = []
    for f in raw_from:
        r = index - 1 if f == -1 else f
        if r >= index:
            raise ConfigError(f"layer {index}: from-index {f} must point to an earlier layer")
        if r < 0 and index != 0:
            raise ConfigError(f"layer {index}: from-index {f} resolves below layer 0")
        src.append(r)
    repeats = record.get("repeats", 1)
    if not isinstance(repeats, int) or repeats < 1:
        raise ConfigError(f"layer {index}: repeats must be an integer >= 1")
    kind = record["kind"]
    if kind not in B.BLOCK_KINDS:
        raise ConfigError(f"layer {index}: unknown kind '{kind}'")
    args = record.get("args", {})
    if not isinstance(args, dict):
        raise ConfigError(f"layer {index}: args must be an object")
    try:
        args = B.normalize_args(kind, args)
    except ConfigError as e:
        raise ConfigError(f"layer {index}: {e}") from None

    n_src = len(src)
    if kind == "Concat" and n_src < 2:
        raise ConfigError(f"layer {index}: Concat needs >= 2 sources, got {n_src}")
    if kind == "Detect" and n_src != 3:
        raise ConfigError(f"layer {index}: Detect needs exactly 3 sources, got {n_src}")
    if kind not in ("Concat", "Detect") and n_src != 1:
        raise ConfigError(f"layer {index}: {kind} needs exactly 1 source, got {n_src}")
    return LayerSpec(index, tuple(src), repeats, kind, args)


def parse_config(text: str) -> ModelGraph:
    """Parse and fully validate a JSON model config."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    unknown = set(doc) - {"num_classes", "input_size", "layers"}
    if unknown:
        raise ConfigError(f"unknown top-level fields {sorted(unknown)}")
    for req in ("num_classes", "layers"):
        if req not in doc:
            raise ConfigError(f"missing top-level field '{req}'")
    num_classes = doc["num_classes"]
    if not isinstance(num_classes, int) or num_classes < 1:
        raise ConfigError(f"num_classes must be a positive integer, got {num_classes!r}")
    input_size = doc.get("input_size", 640)
    if not isinstance(input_size, int) or input_size < 32 or input_size % 32:
        raise ConfigError(f"input_size must be a positive multiple of 32, got {input_size!r}")
    if not isinstance(doc["layers"], list) or not doc["layers"]:
        raise ConfigError("layers must be a non-empty list")

    layers = tuple(_parse_layer(rec, i) for i, rec in enumerate(doc["layers"]))
    detect_positions = [l.index for l in layers if l.kind == "Detect"]
    if len(detect_positions) != 1 or detect_positions[0] != len(layers) - 1:
        raise ConfigError("config must have exactly one Detect layer, and it must be last")
    if layers[0].src != (-1,):
        raise ConfigError("layer 0 must take the network input (from = -1)")

    g = ModelGraph(layers, num_classes, input_size)
    _build_blocks(g)  # surfaces channel/divisibility errors at parse time
    return g


def serialize_config(g: ModelGraph) -> str:
    doc = {
        "num_classes": g.num_classes,
        "input_size": g.input_size,
        "layers": [layer.to_record() for layer in g.layers],
    }
    return json.dumps(doc, indent=2) + "\n"


def _build_blocks(g: ModelGraph) -> list:
    """Instantiate every layer's block (zero weights), inferring channels."""
    out_channels: list[int] = []
    built = []
    for layer in g.layers:
        in_c = [3 if s == -1 else out_channels[s] for s in layer.src]
        try:
            blk = B.build_block(layer.kind, in_c, layer.args, layer.repeats, g.num_classes)
        except (ConfigError, ShapeError) as e:
            raise ConfigError(f"layer {layer.index} ({layer.kind}): {e}") from None
        built.append(blk)
        out_channels.append(blk.out_channels)
    return built


def _walk_costs(g: ModelGraph, blocks: list, input_size: int) -> list[LayerCost]:
    in_shape = (3, input_size, input_size)
    shapes: list = []
    costs: list[LayerCost] = []
    for layer, blk in zip(g.layers, blocks):
        srcs = [in_shape if s == -1 else shapes[s] for s in layer.src]
        try:
            cost = blk.cost(srcs if blk.multi_input else srcs[0])
        except (ConfigError, ShapeError) as e:
            raise ConfigError(
                f"layer {layer.index} ({layer.kind}), sources {list(layer.src)}: {e}"
            ) from None
        shapes.append(cost.out_shape)
        costs.append(cost)
    return costs


def infer_shapes(g: ModelGraph, input_size: int | None = None) -> list:
    """Per-layer output shapes (c, h, w); the Detect row is a tuple of three.

    Also verifies the detect scales sit at strides 8/16/32 of the input.
    """
    size = g.input_size if input_size is None else input_size
    if size % 32:
        raise ConfigError(f"input size must be divisible by 32, got {size}")
    costs = _walk_costs(g, _build_blocks(g), size)
    detect_shapes = costs[-1].out_shape
    strides = tuple(size // s[1] for s in detect_shapes)
    if strides != (8, 16, 32):
        raise ConfigError(
            f"detect feature maps must sit at strides (8, 16, 32), got {strides} "
            f"(layer {len(costs) - 1})"
        )
    return [c.out_shape for c in costs]


@dataclass(frozen=True)
class LayerCostRow:
    index: int
    kind: str
    params: int
    macs: int
    out_shape: tuple

    def to_dict(self) -> dict:
        shape = self.out_shape
        if shape and isinstance(shape[0], tuple):
            shape = [list(s) for s in shape]
        else:
            shape = list(shape)
        return {
            "index": self.index,
            "kind": self.kind,
            "params": self.params,
            "macs": self.macs,
            "out_shape": shape,
        }


@dataclass(frozen=True)
class CostReport:
    """Exact analytic cost of a graph at one input size. flops == 2*macs."""

    params: int
    macs: int
    flops: int
    size_bytes: int
    input_size: int
    per_layer: tuple[LayerCostRow, ...]

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "macs": self.macs,
            "flops": self.flops,
            "gflops": round(self.flops / 1e9, 6),
            "size_bytes": self.size_bytes,
            "input_size": self.input_size,
            "per_layer": [row.to_dict() for row in self.per_layer],
        }


def count_costs(g: ModelGraph, input_size: int | None = None) -> CostReport:
    """Analytic parameter / MAC / size accounting; no weights, no forward."""
    size = g.input_size if input_size is None else input_size
    blocks = _build_blocks(g)
    costs = _walk_costs(g, blocks, size)
    rows = tuple(
        LayerCostRow(layer.index, layer.kind, c.params, c.macs, c.out_shape)
        for layer, c in zip(g.layers, costs)
    )
    params = sum(r.params for r in rows)
    macs = sum(r.macs for r in rows)
    manifest = _manifest_for(Model(g, blocks))
    overhead = len(json.dumps(manifest).encode("utf-8"))
    return CostReport(params, macs, 2 * macs, params * 4 + overhead, size, rows)


class Model:
    """A graph bound to parameter arrays; immutable once weights are set."""

    def __init__(self, graph: ModelGraph, blocks: list):
        self.graph = graph
        self.blocks = blocks
        head = blocks[-1]
        self.num_classes = head.num_classes
        self.reg_max = head.reg_max
        last_use = {}
        for layer in graph.layers:
            for s in layer.src:
                if s >= 0:
                    last_use[s] = layer.index
        self._last_use = last_use

    def param_entries(self):
        """(name, array) pairs in serialization order: layer{i}.{path}."""
        for layer, blk in zip(self.graph.layers, self.blocks):
            for name, arr in blk.param_arrays():
                yield f"layer{layer.index}.{name}", arr

    def init_random(self, seed: int = 0) -> "Model":
        """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, identity norm."""
        rng = np.random.default_rng(seed)
        for name, arr in self.param_entries():
            if name.endswith(".weight"):
                fan_in = arr.shape[1] * arr.shape[2] * arr.shape[3]
                bound = math.sqrt(1.0 / fan_in)
                arr[...] = rng.uniform(-bound, bound, size=arr.shape).astype(arr.dtype)
            elif name.endswith(".scale"):
                arr[...] = 1.0
            else:
                arr[...] = 0.0
        # Low class prior on the final classification convs so an untrained
        # model decodes sparsely at ordinary confidence thresholds.
        for stack in self.blocks[-1].cls_stacks:
            stack[-1].p.bias[...] = -5.0
        return self

    def forward(self, x: Tensor4) -> DetectOutput:
        if x.c != 3:
            raise ConfigError(f"model input must have 3 channels, got {x.c}")
        if x.h % 32 or x.w % 32:
            raise ConfigError(f"input spatial dims must be divisible by 32, got {x.h}x{x.w}")
        cache: dict[int, Tensor4] = {}
        y = None
        for layer, blk in zip(self.graph.layers, self.blocks):
            ins = [x if s == -1 else cache[s] for s in layer.src]
            y = blk.forward(ins if blk.multi_input else ins[0])
            for s in layer.src:
                if s >= 0 and self._last_use.get(s) == layer.index:
                    cache.pop(s, None)
            cache[layer.index] = y
        maps = tuple(y)
        strides = tuple(x.h // m.h for m in maps)
        return DetectOutput(maps, strides, self.reg_max, self.num_classes)


def build_model(g: ModelGraph) -> Model:
    return Model(g, _build_blocks(g))


def _manifest_for(model: Model) -> list[dict]:
    entries = []
    offset = 0
    for name, arr in model.param_entries():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    return entries


def save_weights(model: Model) -> tuple[list[dict], bytes]:
    """Manifest rows [{name, shape, offset}] plus a little-endian f32 blob.

    Offsets are in element units.
    """
    manifest = _manifest_for(model)
    blob = b"".join(arr.astype("<f4").tobytes() for _, arr in model.param_entries())
    return manifest, blob


def write_weights(model: Model, stem: str) -> tuple[str, str]:
    """Write {stem}.json and {stem}.bin; returns the two paths."""
    manifest, blob = save_weights(model)
    mpath, bpath = f"{stem}.json", f"{stem}.bin"
    with open(mpath, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    with open(bpath, "wb") as f:
        f.write(blob)
    return mpath, bpath


def load_weights(g: ModelGraph, manifest: list[dict], blob: bytes) -> Model:
    """Bind a weight blob to a fresh model; rejects bad manifests atomically."""
    model = build_model(g)
    expected = dict(model.param_entries())
    by_name = {}
    problems = []
    for entry in manifest:
        name = entry.get("name")
        if name in by_name:
            problems.append(f"duplicate entry '{name}'")
        by_name[name] = entry
    for name in expected:
        if name not in by_name:
            problems.append(f"missing entry '{name}'")
    n_elems = len(blob) // 4
    staged = {}
    for name, entry in by_name.items():
        if name not in expected:
            problems.append(f"extra entry '{name}' not in model")
            continue
        arr = expected[name]
        shape = tuple(entry.get("shape", ()))
        if shape != arr.shape:
            problems.append(f"entry '{name}': expected shape {list(arr.shape)}, found {list(shape)}")
            continue
        offset = entry.get("offset")
        if not isinstance(offset, int) or offset < 0 or offset + arr.size > n_elems:
            problems.append(
                f"entry '{name}': offset {offset} with {arr.size} elements is outside "
                f"the {n_elems}-element blob"
            )
            continue
        staged[name] = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=offset * 4)
    if problems:
        raise WeightError("weight binding failed:\n  " + "\n  ".join(problems))
    for name, flat in staged.items():
        arr = expected[name]
        arr[...] = flat.reshape(arr.shape)
    return model


def read_weights(path: str) -> tuple[list[dict], bytes]:
    """Read a manifest (.json path or bare stem) and its sibling .bin blob."""
    stem = path[:-5] if path.endswith(".json") else path
    with open(f"{stem}.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    with open(f"{stem}.bin", "rb") as f:
        blob = f.read()
    return manifest, blob


def builtin_configs() -> dict[str, ModelGraph]:
    """The two shipped graphs: ``baseline`` and ``phantom``."""
    out = {}
    for name in ("baseline", "phantom"):
        text = resources.files("phantomnet").joinpath(f"configs/{name}.json").read_text("utf-8")
        out[name] = parse_config(text)
    return out


def resolve_config(spec: str) -> tuple[str, ModelGraph]:
    """Resolve 'builtin:<name>' or a filesystem path to (name, graph)."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        configs = builtin_configs()
        if name not in configs:
            raise ConfigError(f"unknown builtin config '{name}' (have: {sorted(configs)})")
        return name, configs[name]
    with open(spec, "r", encoding="utf-8") as f:
        text = f.read()
    stem = spec.rsplit("/", 1)[-1]
    if stem.endswith(".json"):
        stem = stem[:-5]
    return stem, parse_config(text)
