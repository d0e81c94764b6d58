"""Workload graphs: layer descriptions, validation, and built-in test networks.

A workload is a DAG of layers (conv / pool / matmul / eltwise). Layers carry
full shape information so that tile geometry and tensor byte sizes can be
derived without consulting any external framework. Matmul layers model the
sequence dimension as spatial height with width 1, so the same height-first
tiling machinery covers both CNN and transformer-style workloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

LAYER_KINDS = ("conv", "pool", "matmul", "eltwise")


class WorkloadError(ValueError):
    """Raised for malformed workload files or graphs that fail validation."""


def conv_out_dim(in_dim: int, kernel: int, stride: int, pad: int) -> int:
    return (in_dim + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class Layer:
    id: int
    name: str
    kind: str
    batch: int
    in_channels: int
    out_channels: int
    in_height: int
    in_width: int
    out_height: int
    out_width: int
    kernel_h: int = 1
    kernel_w: int = 1
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    bytes_per_element: int = 1
    predecessors: tuple[int, ...] = ()
    is_network_input_consumer: bool = False
    is_network_output_producer: bool = False

    @property
    def has_weights(self) -> bool:
        return self.kind in ("conv", "matmul")

    @property
    def out_elements(self) -> int:
        return self.batch * self.out_channels * self.out_height * self.out_width

    @property
    def spatial_out_elements(self) -> int:
        """Output elements excluding channels: the tileable extent."""
        return self.batch * self.out_height * self.out_width


@dataclass(frozen=True)
class ModelGraph:
    name: str
    layers: tuple[Layer, ...]

    def layer(self, layer_id: int) -> Layer:
        return self._by_id[layer_id]

    @property
    def _by_id(self) -> dict[int, Layer]:
        return {l.id: l for l in self.layers}

    def successors(self, layer_id: int) -> list[int]:
        return [l.id for l in self.layers if layer_id in l.predecessors]


def tensor_sizes(layer: Layer) -> tuple[int, int, int]:
    """Return (weight_bytes, ifmap_bytes, ofmap_bytes) for one layer.

    Pool and eltwise layers carry no weights. Ifmap bytes count one input
    operand; an eltwise layer with two predecessors reads two such operands.
    """
    bpe = layer.bytes_per_element
    if layer.kind == "conv":
        weight = layer.kernel_h * layer.kernel_w * layer.in_channels * layer.out_channels * bpe
    elif layer.kind == "matmul":
        weight = layer.in_channels * layer.out_channels * bpe
    else:
        weight = 0
    ifmap = layer.batch * layer.in_channels * layer.in_height * layer.in_width * bpe
    ofmap = layer.batch * layer.out_channels * layer.out_height * layer.out_width * bpe
    return weight, ifmap, ofmap


def validate_graph(g: ModelGraph) -> list[str]:
    """Return a list of violation messages; empty means the graph is valid."""
    violations: list[str] = []
    if not g.layers:
        return ["graph has no layers"]

    seen: set[int] = set()
    seen_names: set[str] = set()
    ids = {l.id for l in g.layers}
    for layer in g.layers:
        prefix = f"layer {layer.id} ({layer.name})"
        if layer.id in seen:
            violations.append(f"{prefix}: duplicate id")
        seen.add(layer.id)
        if layer.name in seen_names:
            violations.append(f"{prefix}: duplicate name")
        seen_names.add(layer.name)
        if layer.kind not in LAYER_KINDS:
            violations.append(f"{prefix}: unknown kind {layer.kind!r}")
            continue
        for dim_name in ("batch", "in_channels", "out_channels", "in_height",
                         "in_width", "out_height", "out_width", "kernel_h", "kernel_w",
                         "stride_h", "stride_w", "bytes_per_element"):
            if getattr(layer, dim_name) < 1:
                violations.append(f"{prefix}: {dim_name} must be >= 1")
        for pred in layer.predecessors:
            if pred not in ids:
                violations.append(f"{prefix}: unknown predecessor {pred}")

        if layer.kind in ("conv", "pool"):
            eh = conv_out_dim(layer.in_height, layer.kernel_h, layer.stride_h, layer.pad_h)
            ew = conv_out_dim(layer.in_width, layer.kernel_w, layer.stride_w, layer.pad_w)
            if (layer.out_height, layer.out_width) != (eh, ew):
                violations.append(
                    f"{prefix}: output {layer.out_height}x{layer.out_width} inconsistent "
                    f"with input/kernel/stride/pad (expected {eh}x{ew})")
        if layer.kind == "pool" and layer.in_channels != layer.out_channels:
            violations.append(f"{prefix}: pool must preserve channel count")
        if layer.kind == "matmul":
            if (layer.kernel_h, layer.kernel_w, layer.stride_h, layer.stride_w) != (1, 1, 1, 1):
                violations.append(f"{prefix}: matmul requires kernel=stride=1")
            if (layer.out_height, layer.out_width) != (layer.in_height, layer.in_width):
                violations.append(f"{prefix}: matmul must preserve spatial dims")
        if layer.kind == "eltwise":
            if not 1 <= len(layer.predecessors) <= 2:
                violations.append(f"{prefix}: eltwise takes 1 or 2 predecessors")
            if (layer.out_height, layer.out_width, layer.out_channels) != (
                    layer.in_height, layer.in_width, layer.in_channels):
                violations.append(f"{prefix}: eltwise must preserve shape")
        if layer.predecessors and layer.is_network_input_consumer:
            violations.append(f"{prefix}: input consumer cannot have predecessors")
        if not layer.predecessors and not layer.is_network_input_consumer:
            violations.append(f"{prefix}: layer without predecessors must consume network input")

    # Shape agreement along edges, checked only when both endpoints exist.
    by_id = {l.id: l for l in g.layers}
    for layer in g.layers:
        for pred in layer.predecessors:
            p = by_id.get(pred)
            if p is None:
                continue
            if (p.out_height, p.out_width) != (layer.in_height, layer.in_width) or \
                    p.out_channels != layer.in_channels:
                violations.append(
                    f"layer {layer.id} ({layer.name}): input shape disagrees with "
                    f"predecessor {pred} output")

    cycle = _find_cycle(g)
    if cycle is not None:
        violations.append(f"dependency cycle through layers {'->'.join(map(str, cycle))}")

    out_producers = [l for l in g.layers if not g.successors(l.id)]
    for layer in out_producers:
        if not layer.is_network_output_producer:
            violations.append(
                f"layer {layer.id} ({layer.name}): has no consumers but is not "
                f"marked as a network output producer")
    return violations


def _find_cycle(g: ModelGraph) -> Optional[list[int]]:
    ids = {l.id for l in g.layers}
    preds = {l.id: [p for p in l.predecessors if p in ids] for l in g.layers}
    WHITE, GREY, BLACK = 0, 1, 2
    color = {i: WHITE for i in ids}
    stack: list[int] = []

    def visit(node: int) -> Optional[list[int]]:
        color[node] = GREY
        stack.append(node)
        for p in preds[node]:
            if color[p] == GREY:
                return stack[stack.index(p):] + [p]
            if color[p] == WHITE:
                found = visit(p)
                if found:
                    return found
        stack.pop()
        color[node] = BLACK
        return None

    for i in ids:
        if color[i] == WHITE:
            found = visit(i)
            if found:
                return found
    return None


def topological_order(g: ModelGraph) -> list[int]:
    """Stable topological order: declaration order among ready layers."""
    remaining = {l.id: set(l.predecessors) for l in g.layers}
    order: list[int] = []
    declared = [l.id for l in g.layers]
    while remaining:
        ready = [i for i in declared if i in remaining and not remaining[i]]
        if not ready:
            raise WorkloadError("graph contains a cycle; no topological order exists")
        nxt = ready[0]
        order.append(nxt)
        del remaining[nxt]
        for deps in remaining.values():
            deps.discard(nxt)
    return order


# --------------------------------------------------------------------------
# Workload file I/O (JSON; see docs/workload_schema.md)
# --------------------------------------------------------------------------

_KIND_DEFAULTS = {
    "conv": {},
    "pool": {},
    "matmul": {"kernel_h": 1, "kernel_w": 1, "stride_h": 1, "stride_w": 1,
               "pad_h": 0, "pad_w": 0},
    "eltwise": {"kernel_h": 1, "kernel_w": 1, "stride_h": 1, "stride_w": 1,
                "pad_h": 0, "pad_w": 0},
}

_REQUIRED_FIELDS = ("id", "name", "kind", "batch", "in_channels", "out_channels",
                    "in_height", "in_width")


def layer_from_dict(entry: dict, index: int) -> Layer:
    for f in _REQUIRED_FIELDS:
        if f not in entry:
            raise WorkloadError(f"layer entry {index}: missing field {f!r}")
    kind = entry["kind"]
    if kind not in LAYER_KINDS:
        raise WorkloadError(f"layer entry {index}: unknown kind {kind!r}")
    merged = dict(_KIND_DEFAULTS[kind])
    known = {f.name for f in Layer.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    for key, value in entry.items():
        if key not in known:
            raise WorkloadError(f"layer entry {index}: unknown field {key!r}")
        merged[key] = value
    if kind in ("conv", "pool") and ("kernel_h" not in merged or "kernel_w" not in merged):
        raise WorkloadError(f"layer entry {index}: {kind} requires kernel_h/kernel_w")
    merged.setdefault("stride_h", 1)
    merged.setdefault("stride_w", 1)
    merged.setdefault("pad_h", 0)
    merged.setdefault("pad_w", 0)
    # Output dims may be omitted; derive them from the layer equation.
    if "out_height" not in merged:
        if kind in ("conv", "pool"):
            merged["out_height"] = conv_out_dim(merged["in_height"], merged["kernel_h"],
                                                merged["stride_h"], merged["pad_h"])
            merged["out_width"] = conv_out_dim(merged["in_width"], merged["kernel_w"],
                                               merged["stride_w"], merged["pad_w"])
        else:
            merged["out_height"] = merged["in_height"]
            merged["out_width"] = merged["in_width"]
    merged["predecessors"] = tuple(merged.get("predecessors", ()))
    merged.setdefault("is_network_input_consumer", not merged["predecessors"])
    merged.setdefault("is_network_output_producer", False)
    return Layer(**merged)


def graph_from_dict(doc: dict) -> ModelGraph:
    if "layers" not in doc or not isinstance(doc["layers"], list):
        raise WorkloadError("workload file must contain a 'layers' list")
    layers = tuple(layer_from_dict(e, i) for i, e in enumerate(doc["layers"]))
    g = ModelGraph(name=doc.get("name", "unnamed"), layers=layers)
    # Mark sink layers as output producers if the file did not do so explicitly.
    sinks = {l.id for l in layers if not g.successors(l.id)}
    fixed = tuple(replace(l, is_network_output_producer=True)
                  if l.id in sinks else l for l in layers)
    g = ModelGraph(name=g.name, layers=fixed)
    violations = validate_graph(g)
    if violations:
        raise WorkloadError("invalid workload:\n  " + "\n  ".join(violations))
    topological_order(g)
    return g


def graph_to_dict(g: ModelGraph) -> dict:
    layers = []
    for l in g.layers:
        d = {k: getattr(l, k) for k in l.__dataclass_fields__}  # type: ignore[attr-defined]
        d["predecessors"] = list(l.predecessors)
        layers.append(d)
    return {"name": g.name, "layers": layers}


def parse_model_file(path: str) -> ModelGraph:
    """Load and validate a workload JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise WorkloadError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return graph_from_dict(doc)


def serialize_model(g: ModelGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(g), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# Built-in workloads
# --------------------------------------------------------------------------

def _conv(lid, name, cin, cout, hin, win, batch, k=3, stride=1, pad=1,
          preds=(), **kw) -> Layer:
    oh = conv_out_dim(hin, k, stride, pad)
    ow = conv_out_dim(win, k, stride, pad)
    return Layer(id=lid, name=name, kind="conv", batch=batch, in_channels=cin,
                 out_channels=cout, in_height=hin, in_width=win, out_height=oh,
                 out_width=ow, kernel_h=k, kernel_w=k, stride_h=stride, stride_w=stride,
                 pad_h=pad, pad_w=pad, predecessors=tuple(preds),
                 is_network_input_consumer=not preds, **kw)


def _toy5(batch: int) -> ModelGraph:
    # Five layers A..E; C is a pooling layer, C fans out to both D and E.
    a = _conv(0, "A", 16, 32, 32, 32, batch)
    b = _conv(1, "B", 32, 32, 32, 32, batch, preds=(0,))
    c = Layer(id=2, name="C", kind="pool", batch=batch, in_channels=32, out_channels=32,
              in_height=32, in_width=32, out_height=16, out_width=16,
              kernel_h=2, kernel_w=2, stride_h=2, stride_w=2, predecessors=(1,))
    d = _conv(3, "D", 32, 64, 16, 16, batch, preds=(2,),
              is_network_output_producer=True)
    e = _conv(4, "E", 32, 64, 16, 16, batch, k=1, pad=0, preds=(2,),
              is_network_output_producer=True)
    return ModelGraph(name="toy5", layers=(a, b, c, d, e))


def _resnet_block_chain(batch: int) -> ModelGraph:
    # Stem + two residual blocks with a strided downsample between them.
    l0 = _conv(0, "stem", 16, 32, 32, 32, batch)
    l1 = _conv(1, "b1_conv1", 32, 32, 32, 32, batch, preds=(0,))
    l2 = _conv(2, "b1_conv2", 32, 32, 32, 32, batch, preds=(1,))
    l3 = Layer(id=3, name="b1_add", kind="eltwise", batch=batch, in_channels=32,
               out_channels=32, in_height=32, in_width=32, out_height=32, out_width=32,
               predecessors=(0, 2))
    l4 = _conv(4, "down", 32, 64, 32, 32, batch, stride=2, preds=(3,))
    l5 = _conv(5, "b2_conv1", 64, 64, 16, 16, batch, preds=(4,))
    l6 = _conv(6, "b2_conv2", 64, 64, 16, 16, batch, preds=(5,))
    l7 = Layer(id=7, name="b2_add", kind="eltwise", batch=batch, in_channels=64,
               out_channels=64, in_height=16, in_width=16, out_height=16, out_width=16,
               predecessors=(4, 6), is_network_output_producer=True)
    return ModelGraph(name="resnet_block_chain", layers=(l0, l1, l2, l3, l4, l5, l6, l7))


def _matmul(lid, name, cin, cout, seq, batch, preds=(), **kw) -> Layer:
    return Layer(id=lid, name=name, kind="matmul", batch=batch, in_channels=cin,
                 out_channels=cout, in_height=seq, in_width=1, out_height=seq,
                 out_width=1, predecessors=tuple(preds),
                 is_network_input_consumer=not preds, **kw)


def _eltwise(lid, name, ch, seq, batch, preds, **kw) -> Layer:
    return Layer(id=lid, name=name, kind="eltwise", batch=batch, in_channels=ch,
                 out_channels=ch, in_height=seq, in_width=1, out_height=seq,
                 out_width=1, predecessors=tuple(preds), **kw)


def _transformer_block(batch: int) -> ModelGraph:
    # One block with explicit Q/K/V projections; attention score/apply steps are
    # folded into shape-preserving eltwise mixes, which keeps the DAG (fan-out,
    # residuals) while staying inside the four supported layer kinds.
    seq, d, ffn = 64, 128, 512
    layers = (
        _matmul(0, "embed", d, d, seq, batch),
        _matmul(1, "q_proj", d, d, seq, batch, preds=(0,)),
        _matmul(2, "k_proj", d, d, seq, batch, preds=(0,)),
        _matmul(3, "v_proj", d, d, seq, batch, preds=(0,)),
        _eltwise(4, "attn_scores", d, seq, batch, preds=(1, 2)),
        _eltwise(5, "attn_apply", d, seq, batch, preds=(4, 3)),
        _matmul(6, "out_proj", d, d, seq, batch, preds=(5,)),
        _eltwise(7, "resid1", d, seq, batch, preds=(6, 0)),
        _matmul(8, "ffn_up", d, ffn, seq, batch, preds=(7,)),
        _matmul(9, "ffn_down", ffn, d, seq, batch, preds=(8,)),
        _eltwise(10, "resid2", d, seq, batch, preds=(9, 7),
                 is_network_output_producer=True),
    )
    return ModelGraph(name="transformer_block", layers=layers)


BUILTIN_WORKLOADS = {
    "toy5": _toy5,
    "resnet_block_chain": _resnet_block_chain,
    "transformer_block": _transformer_block,
}


def builtin_workload(name: str, batch: int = 1) -> ModelGraph:
    if name not in BUILTIN_WORKLOADS:
        raise WorkloadError(
            f"unknown workload {name!r}; supported: {', '.join(sorted(BUILTIN_WORKLOADS))}")
    if batch < 1:
        raise WorkloadError("batch must be >= 1")
    g = BUILTIN_WORKLOADS[name](batch)
    violations = validate_graph(g)
    assert not violations, violations
    return g
