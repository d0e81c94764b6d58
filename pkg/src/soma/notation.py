"""The six-attribute schedule encoding and its two parsing stages.

An encoding splits into two attribute groups. The fusion group (computing
order, fusion-cut set, per-group tiling numbers, DRAM-cut set) fixes *what*
runs in which order and which tensors touch DRAM at all; parsing it yields the
global tile sequence, the DRAM tensor set, and all on-chip fmap lifetimes.
The load/store group (DRAM tensor order, per-tensor living durations) then
fixes *when* each DRAM tensor moves and how long it holds buffer space.

Cut positions are positional: cut i sits after the i-th layer of the
computing order (1-based), so valid cuts are 1..L-1. DRAM cuts must also be
fusion cuts. Tile ids are global indices into the tile sequence; one virtual
tile index past the last real tile serves as the end marker for store
deadlines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .model import ModelGraph, tensor_sizes, topological_order
from .tiling import TileGeometry, TileRegion, flg_tile_geometry, max_tiling_number

WEIGHT_LOAD = "weight_load"
IFMAP_LOAD = "ifmap_load"
OFMAP_STORE = "ofmap_store"


class EncodingError(ValueError):
    """Raised when an encoding or a DLSA assignment breaks a hard rule."""


@dataclass(frozen=True)
class ScheduleEncoding:
    computing_order: tuple[int, ...]
    flc_set: frozenset[int]
    tiling_numbers: tuple[int, ...]
    dram_cut_set: frozenset[int]
    # DLSA attributes; only meaningful once the fusion attributes have been
    # parsed and the DRAM tensor set exists.
    dram_tensor_order: Optional[tuple[str, ...]] = None
    living_durations: Optional[dict[str, tuple[int, int]]] = None

    def flg_ranges(self) -> list[tuple[int, int]]:
        """Half-open position ranges of each fusion group in the order."""
        cuts = sorted(self.flc_set)
        bounds = [0] + cuts + [len(self.computing_order)]
        return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]

    def lg_of_flg(self) -> list[int]:
        """Index of the DRAM-level group each fusion group belongs to."""
        lg = 0
        out = []
        cuts = sorted(self.flc_set)
        for i, _ in enumerate(self.flg_ranges()):
            if i > 0 and cuts[i - 1] in self.dram_cut_set:
                lg += 1
            out.append(lg)
        return out


@dataclass(frozen=True)
class DramTensor:
    id: str
    kind: str                        # weight_load | ifmap_load | ofmap_store
    owner_layer: int
    bytes: int
    tile_index: Optional[int] = None  # per-tile fmap pieces; None for weights
    source_layer: Optional[int] = None  # producing layer for reloaded fmaps
    region: Optional[TileRegion] = None
    consume_tiles: tuple[int, ...] = ()   # loads: tiles that need this data
    producer_tile: Optional[int] = None   # stores: tile that produces the data
    store_deps: tuple[str, ...] = ()      # loads: stores that must land first
    start: Optional[int] = None
    end: Optional[int] = None

    @property
    def is_load(self) -> bool:
        return self.kind != OFMAP_STORE

    @property
    def first_consumer(self) -> int:
        return self.consume_tiles[0]

    @property
    def last_consumer(self) -> int:
        return self.consume_tiles[-1]

    @property
    def fixed_end(self) -> Optional[int]:
        """Loads release at the tile after their last consumer."""
        return self.last_consumer + 1 if self.is_load else None

    @property
    def anchor_tile(self) -> int:
        return self.first_consumer if self.is_load else self.producer_tile


@dataclass(frozen=True)
class TileInstance:
    seq_index: int
    layer_id: int
    layer_name: str
    kind: str
    tile_index: int
    flg_index: int
    ops: int
    out_spatial: int      # batch*height*width elements of the produced region
    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    gbuf_in_bytes: int
    weight_bytes: int
    out_bytes: int
    load_ids: tuple[str, ...] = ()   # DRAM loads this tile consumes


@dataclass(frozen=True)
class OnchipLifetime:
    descriptor: str
    producer_layer: int
    tile_index: int
    bytes: int
    start: int   # producing tile
    end: int     # first tile at which the data is no longer held


@dataclass(frozen=True)
class ExecutionPlan:
    graph: ModelGraph
    encoding: ScheduleEncoding
    tile_sequence: tuple[TileInstance, ...]
    dram_tensors: tuple[DramTensor, ...]   # in DRAM tensor order once DLSA set
    onchip_lifetimes: tuple[OnchipLifetime, ...]
    flg_boundaries: tuple[int, ...]
    lg_boundaries: tuple[int, ...]
    geometries: tuple[TileGeometry, ...]
    has_dlsa: bool = False

    @property
    def n_tiles(self) -> int:
        return len(self.tile_sequence)

    @property
    def end_marker(self) -> int:
        """Virtual tile index usable as a store deadline past the last tile."""
        return len(self.tile_sequence)

    @property
    def total_dram_bytes(self) -> int:
        return sum(t.bytes for t in self.dram_tensors)

    @property
    def total_ops(self) -> int:
        return sum(t.ops for t in self.tile_sequence)

    def tensor(self, tensor_id: str) -> DramTensor:
        for t in self.dram_tensors:
            if t.id == tensor_id:
                return t
        raise KeyError(tensor_id)

    def tile_of(self, layer_id: int, tile_index: int) -> int:
        for t in self.tile_sequence:
            if t.layer_id == layer_id and t.tile_index == tile_index:
                return t.seq_index
        raise KeyError((layer_id, tile_index))

    def weight_residency(self) -> dict[int, tuple[int, int]]:
        """Per layer, the half-open tile interval its weights occupy buffer."""
        out = {}
        for t in self.dram_tensors:
            if t.kind == WEIGHT_LOAD and t.start is not None:
                out[t.owner_layer] = (t.start, t.end)
        return out


# --------------------------------------------------------------------------
# Encoding construction and validation
# --------------------------------------------------------------------------

def initial_encoding(g: ModelGraph) -> ScheduleEncoding:
    """Unfused starting point: every layer its own group, coarsest tiling."""
    order = tuple(topological_order(g))
    all_cuts = frozenset(range(1, len(order)))
    return ScheduleEncoding(
        computing_order=order,
        flc_set=all_cuts,
        tiling_numbers=(1,) * len(order),
        dram_cut_set=all_cuts,
    )


def validate_encoding(g: ModelGraph, enc: ScheduleEncoding) -> list[str]:
    violations: list[str] = []
    ids = [l.id for l in g.layers]
    if sorted(enc.computing_order) != sorted(ids):
        violations.append("computing_order is not a permutation of the layer ids")
        return violations
    position = {lid: i for i, lid in enumerate(enc.computing_order)}
    for l in g.layers:
        for p in l.predecessors:
            if position[p] > position[l.id]:
                violations.append(
                    f"dependency {p}->{l.id} goes from right to left in the computing order")
    n = len(enc.computing_order)
    for cut in enc.flc_set:
        if not 1 <= cut <= n - 1:
            violations.append(f"fusion cut {cut} outside valid positions 1..{n - 1}")
    extra = enc.dram_cut_set - enc.flc_set
    if extra:
        violations.append(
            f"DRAM cuts {sorted(extra)} are not in the fusion cut set")
    ranges = enc.flg_ranges()
    if len(enc.tiling_numbers) != len(ranges):
        violations.append(
            f"{len(enc.tiling_numbers)} tiling numbers for {len(ranges)} fusion groups")
        return violations
    for (lo, hi), t in zip(ranges, enc.tiling_numbers):
        flg_layers = [g.layer(enc.computing_order[i]) for i in range(lo, hi)]
        if t < 1 or (t & (t - 1)):
            violations.append(f"tiling number {t} must be a power of two >= 1")
        elif t > max_tiling_number(flg_layers):
            violations.append(
                f"tiling number {t} exceeds the bound {max_tiling_number(flg_layers)} "
                f"for fusion group at positions [{lo},{hi})")
    return violations


# --------------------------------------------------------------------------
# Stage 1: parse the fusion attributes
# --------------------------------------------------------------------------

def parse_lfa(g: ModelGraph, enc: ScheduleEncoding) -> ExecutionPlan:
    """Expand the fusion attributes into tiles, DRAM tensors, and lifetimes.

    The DLSA side of the returned plan is unset; chain with
    :func:`double_buffer_dlsa` or :func:`apply_dlsa`.
    """
    violations = validate_encoding(g, enc)
    if violations:
        raise EncodingError("invalid encoding:\n  " + "\n  ".join(violations))

    order = enc.computing_order
    ranges = enc.flg_ranges()
    lg_of_flg = enc.lg_of_flg()
    flg_of_layer: dict[int, int] = {}
    for fi, (lo, hi) in enumerate(ranges):
        for pos in range(lo, hi):
            flg_of_layer[order[pos]] = fi
    lg_of_layer = {lid: lg_of_flg[fi] for lid, fi in flg_of_layer.items()}

    consumers_all: dict[int, list[int]] = {l.id: [] for l in g.layers}
    for l in g.layers:
        for p in l.predecessors:
            consumers_all[p].append(l.id)

    geometries = []
    for fi, (lo, hi) in enumerate(ranges):
        flg_layers = [g.layer(order[i]) for i in range(lo, hi)]
        members = {l.id for l in flg_layers}
        exports = frozenset(
            l.id for l in flg_layers
            if l.is_network_output_producer
            or any(c not in members for c in consumers_all[l.id]))
        geometries.append(flg_tile_geometry(flg_layers, enc.tiling_numbers[fi],
                                            flg_id=fi, export_layers=exports))

    # Global tile sequence: groups in order; inside a group, all layers at
    # tile t before any layer at tile t+1.
    seq: list[TileInstance] = []
    tile_of: dict[tuple[int, int], int] = {}
    for fi, (lo, hi) in enumerate(ranges):
        geo = geometries[fi]
        for t in range(enc.tiling_numbers[fi]):
            for pos in range(lo, hi):
                layer = g.layer(order[pos])
                lt = geo.layer_tile(layer.id, t)
                n_inputs = max(1, len(layer.predecessors))
                idx = len(seq)
                tile_of[(layer.id, t)] = idx
                seq.append(TileInstance(
                    seq_index=idx, layer_id=layer.id, layer_name=layer.name,
                    kind=layer.kind, tile_index=t, flg_index=fi,
                    ops=lt.ops, out_spatial=lt.out_region.spatial_elements,
                    out_channels=layer.out_channels, in_channels=layer.in_channels,
                    kernel_h=layer.kernel_h, kernel_w=layer.kernel_w,
                    gbuf_in_bytes=n_inputs * lt.in_bytes,
                    weight_bytes=lt.weight_bytes, out_bytes=lt.out_bytes))

    by_id = {l.id: l for l in g.layers}
    consumers = consumers_all

    def crosses_dram(p: int, c: int) -> bool:
        return lg_of_layer[p] != lg_of_layer[c]

    needs_store = {
        l.id: l.is_network_output_producer or any(crosses_dram(l.id, c)
                                                  for c in consumers[l.id])
        for l in g.layers
    }

    # DRAM tensors, declared in tile-sequence scan order.
    tensors: list[DramTensor] = []
    for inst in seq:
        layer = by_id[inst.layer_id]
        fi = flg_of_layer[layer.id]
        geo = geometries[fi]
        t = inst.tile_index
        tiling = enc.tiling_numbers[fi]
        if t == 0 and layer.has_weights:
            w_bytes, _, _ = tensor_sizes(layer)
            consume = tuple(tile_of[(layer.id, tt)] for tt in range(tiling))
            tensors.append(DramTensor(
                id=f"W:{layer.name}", kind=WEIGHT_LOAD, owner_layer=layer.id,
                bytes=w_bytes, consume_tiles=consume,
                end=consume[-1] + 1))
        lt = geo.layer_tile(layer.id, t)
        dram_sources: list[Optional[int]] = []
        if not layer.predecessors:
            dram_sources.append(None)
        for p in layer.predecessors:
            if crosses_dram(p, layer.id):
                dram_sources.append(p)
        for src in dram_sources:
            src_name = "in" if src is None else by_id[src].name
            tensors.append(DramTensor(
                id=f"I:{layer.name}:{src_name}:{t}", kind=IFMAP_LOAD,
                owner_layer=layer.id, tile_index=t, source_layer=src,
                region=lt.in_region, bytes=lt.in_bytes,
                consume_tiles=(inst.seq_index,),
                end=inst.seq_index + 1))
        if needs_store[layer.id]:
            piece = geo.own_partition[layer.id][t]
            tensors.append(DramTensor(
                id=f"O:{layer.name}:{t}", kind=OFMAP_STORE, owner_layer=layer.id,
                tile_index=t, region=piece,
                bytes=piece.elements * layer.bytes_per_element,
                producer_tile=inst.seq_index, start=inst.seq_index))

    # Reloaded fmaps may only be read back after the producing pieces landed.
    stores_of = {}
    for tn in tensors:
        if tn.kind == OFMAP_STORE:
            stores_of.setdefault(tn.owner_layer, []).append(tn)
    linked: list[DramTensor] = []
    for tn in tensors:
        if tn.kind == IFMAP_LOAD and tn.source_layer is not None:
            deps = tuple(s.id for s in stores_of[tn.source_layer]
                         if s.region.overlaps(tn.region))
            tn = replace(tn, store_deps=deps)
        linked.append(tn)
    tensors = linked

    # Attach the loads each tile consumes.
    loads_of_tile: dict[int, list[str]] = {i: [] for i in range(len(seq))}
    for tn in tensors:
        if tn.is_load:
            for ct in tn.consume_tiles:
                loads_of_tile[ct].append(tn.id)
    seq = [replace(inst, load_ids=tuple(loads_of_tile[inst.seq_index])) for inst in seq]

    # On-chip lifetimes for dependencies that never touch DRAM.
    lifetimes: list[OnchipLifetime] = []
    for l in g.layers:
        intra = [c for c in consumers[l.id] if flg_of_layer[c] == flg_of_layer[l.id]]
        aggregated = [c for c in consumers[l.id]
                      if flg_of_layer[c] != flg_of_layer[l.id] and not crosses_dram(l.id, c)]
        fi = flg_of_layer[l.id]
        geo = geometries[fi]
        tiling = enc.tiling_numbers[fi]
        if aggregated:
            release = max(tile_of[(c, enc.tiling_numbers[flg_of_layer[c]] - 1)]
                          for c in aggregated) + 1
            for t in range(tiling):
                piece = geo.own_partition[l.id][t]
                lifetimes.append(OnchipLifetime(
                    descriptor=f"F:{l.name}:{t}", producer_layer=l.id, tile_index=t,
                    bytes=piece.elements * l.bytes_per_element,
                    start=tile_of[(l.id, t)], end=release))
        if intra:
            for t in range(tiling):
                lt = geo.layer_tile(l.id, t)
                bytes_held = lt.out_bytes
                if aggregated:
                    # The aggregated copy already holds the disjoint slice;
                    # only the halo surplus needs extra room.
                    bytes_held = max(0, bytes_held
                                     - geo.own_partition[l.id][t].elements
                                     * l.bytes_per_element)
                if bytes_held == 0:
                    continue
                last_cons = max(tile_of[(c, t)] for c in intra)
                lifetimes.append(OnchipLifetime(
                    descriptor=f"f:{l.name}:{t}", producer_layer=l.id, tile_index=t,
                    bytes=bytes_held, start=tile_of[(l.id, t)], end=last_cons + 1))

    return ExecutionPlan(
        graph=g, encoding=enc, tile_sequence=tuple(seq), dram_tensors=tuple(tensors),
        onchip_lifetimes=tuple(lifetimes),
        flg_boundaries=tuple(sorted(enc.flc_set)),
        lg_boundaries=tuple(sorted(enc.dram_cut_set)),
        geometries=tuple(geometries),
    )


# --------------------------------------------------------------------------
# Stage 2: DLSA assignment
# --------------------------------------------------------------------------

def double_buffer_dlsa(plan: ExecutionPlan) -> ExecutionPlan:
    """Classical policy: load in the tile before first use, store in the next.

    The DRAM tensor order follows each tensor's anchor tile (first consumer
    for loads, producer for stores), loads before stores on ties, declaration
    order last.
    """
    decl_index = {t.id: i for i, t in enumerate(plan.dram_tensors)}
    tensors = []
    for t in plan.dram_tensors:
        if t.is_load:
            tensors.append(replace(t, start=max(t.first_consumer - 1, 0)))
        else:
            tensors.append(replace(t, end=t.producer_tile + 1))
    tensors.sort(key=lambda t: (t.anchor_tile, 0 if t.is_load else 1, decl_index[t.id]))
    enc = replace(plan.encoding,
                  dram_tensor_order=tuple(t.id for t in tensors),
                  living_durations={t.id: (t.start, t.end) for t in tensors})
    return replace(plan, dram_tensors=tuple(tensors), encoding=enc, has_dlsa=True)


def apply_dlsa(plan: ExecutionPlan, order: Sequence[str],
               durations: dict[str, tuple[int, int]]) -> ExecutionPlan:
    """Install an explicit DRAM tensor order and living durations.

    Loads keep their fixed end (release after last consumer) and stores their
    fixed start (the producing tile); violating either, or moving a load start
    past its first consumer or a store end to/before its producer, is an
    error. Structural (fusion-side) content is untouched.
    """
    current = {t.id: t for t in plan.dram_tensors}
    if sorted(order) != sorted(current):
        raise EncodingError("DRAM tensor order is not a permutation of the plan's tensors")
    tensors = []
    for tid in order:
        t = current[tid]
        if tid not in durations:
            raise EncodingError(f"missing living duration for tensor {tid}")
        start, end = durations[tid]
        if t.is_load:
            if end != t.fixed_end:
                raise EncodingError(
                    f"{tid}: load end is fixed at {t.fixed_end}, got {end}")
            if not 0 <= start <= t.first_consumer:
                raise EncodingError(
                    f"{tid}: load start {start} outside [0, {t.first_consumer}]")
        else:
            if start != t.producer_tile:
                raise EncodingError(
                    f"{tid}: store start is fixed at {t.producer_tile}, got {start}")
            if not t.producer_tile < end <= plan.end_marker:
                raise EncodingError(
                    f"{tid}: store end {end} outside ({t.producer_tile}, "
                    f"{plan.end_marker}]")
        tensors.append(replace(t, start=start, end=end))
    enc = replace(plan.encoding, dram_tensor_order=tuple(order),
                  living_durations={t.id: (t.start, t.end) for t in tensors})
    return replace(plan, dram_tensors=tuple(tensors), encoding=enc, has_dlsa=True)


# --------------------------------------------------------------------------
# Encoding serialization (see docs/encoding_schema.md)
# --------------------------------------------------------------------------

def encoding_to_dict(enc: ScheduleEncoding) -> dict:
    doc = {
        "computing_order": list(enc.computing_order),
        "flc_set": sorted(enc.flc_set),
        "tiling_numbers": list(enc.tiling_numbers),
        "dram_cut_set": sorted(enc.dram_cut_set),
    }
    if enc.dram_tensor_order is not None:
        doc["dram_tensor_order"] = list(enc.dram_tensor_order)
        doc["living_durations"] = {k: list(v) for k, v in enc.living_durations.items()}
    return doc


def encoding_from_dict(doc: dict) -> ScheduleEncoding:
    try:
        dlsa_order = doc.get("dram_tensor_order")
        durations = doc.get("living_durations")
        return ScheduleEncoding(
            computing_order=tuple(doc["computing_order"]),
            flc_set=frozenset(doc["flc_set"]),
            tiling_numbers=tuple(doc["tiling_numbers"]),
            dram_cut_set=frozenset(doc["dram_cut_set"]),
            dram_tensor_order=tuple(dlsa_order) if dlsa_order is not None else None,
            living_durations={k: (v[0], v[1]) for k, v in durations.items()}
            if durations is not None else None,
        )
    except KeyError as exc:
        raise EncodingError(f"encoding document missing field {exc}") from exc


def save_encoding(enc: ScheduleEncoding, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(encoding_to_dict(enc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_encoding(path: str) -> ScheduleEncoding:
    with open(path, "r", encoding="utf-8") as fh:
        return encoding_from_dict(json.load(fh))


def plan_from_encoding(g: ModelGraph, enc: ScheduleEncoding) -> ExecutionPlan:
    """Full two-stage parse: fusion attributes, then stored or default DLSA."""
    plan = parse_lfa(g, enc)
    if enc.dram_tensor_order is None:
        return double_buffer_dlsa(plan)
    return apply_dlsa(plan, enc.dram_tensor_order, enc.living_durations)
