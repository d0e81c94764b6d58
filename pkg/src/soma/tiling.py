"""Tile partitioning and halo-aware input region computation.

Each fused layer group (FLG) is executed at the granularity of computing
tiles. The tiling number T splits the *last* layer's ofmap into T disjoint
regions (batch first, then height, then width, channels never split); every
earlier layer's per-tile region is whatever its in-group consumers demand,
back-propagated through kernels/strides/padding. Kernels larger than 1 make
those demanded regions overlap between tiles (halo), which is the extra
compute/traffic cost of finer tiling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .model import Layer


@dataclass(frozen=True)
class TileRegion:
    """Half-open index ranges into one fmap. Channels always span fully."""
    batch: tuple[int, int]
    channels: tuple[int, int]
    height: tuple[int, int]
    width: tuple[int, int]

    @property
    def elements(self) -> int:
        return (self.batch[1] - self.batch[0]) * (self.channels[1] - self.channels[0]) \
            * (self.height[1] - self.height[0]) * (self.width[1] - self.width[0])

    @property
    def spatial_elements(self) -> int:
        return (self.batch[1] - self.batch[0]) * (self.height[1] - self.height[0]) \
            * (self.width[1] - self.width[0])

    def is_empty(self) -> bool:
        return self.elements == 0

    def union(self, other: "TileRegion") -> "TileRegion":
        """Smallest axis-aligned region covering both."""
        def merge(a, b):
            return (min(a[0], b[0]), max(a[1], b[1]))
        return TileRegion(merge(self.batch, other.batch),
                          merge(self.channels, other.channels),
                          merge(self.height, other.height),
                          merge(self.width, other.width))

    def overlaps(self, other: "TileRegion") -> bool:
        def hit(a, b):
            return a[0] < b[1] and b[0] < a[1]
        return hit(self.batch, other.batch) and hit(self.channels, other.channels) \
            and hit(self.height, other.height) and hit(self.width, other.width)


def full_output_region(layer: Layer) -> TileRegion:
    return TileRegion((0, layer.batch), (0, layer.out_channels),
                      (0, layer.out_height), (0, layer.out_width))


def _pow2_floor(n: int) -> int:
    return 1 << (max(n, 1).bit_length() - 1)


def min_tiling_number(flg_layers: Sequence[Layer], hw=None) -> int:
    """Minimum-granularity tiling for a group: a single tile per layer.

    Any power of two up to min(batch*out_h*out_w) over the group's layers is a
    valid tiling number; the coarsest split (1) is the starting point for the
    search and always valid for a non-empty group.
    """
    if not flg_layers:
        raise ValueError("empty fused layer group")
    return 1


def max_tiling_number(flg_layers: Sequence[Layer]) -> int:
    """Largest valid power-of-two tiling number for a group.

    Splits along each axis are themselves powers of two, so the bound per
    layer is the product of the per-axis power-of-two floors, not the
    power-of-two floor of the element count.
    """
    if not flg_layers:
        raise ValueError("empty fused layer group")
    return min(_pow2_floor(l.batch) * _pow2_floor(l.out_height) * _pow2_floor(l.out_width)
               for l in flg_layers)


def _split_range(extent: int, parts: int) -> list[tuple[int, int]]:
    """Split [0, extent) into `parts` as-equal-as-possible ranges, larger first."""
    base, rem = divmod(extent, parts)
    ranges = []
    start = 0
    for i in range(parts):
        span = base + (1 if i < rem else 0)
        ranges.append((start, start + span))
        start += span
    return ranges


def _split_factors(layer: Layer, tiling_number: int) -> tuple[int, int, int]:
    """Distribute a power-of-two tiling number over (batch, height, width).

    Batch is split as far as it goes first (it never creates halo); the
    remainder is balanced between height and width, height taking the larger
    share, with overflow pushed to the other spatial axis.
    """
    t = tiling_number
    b_split = min(_pow2_floor(layer.batch), t)
    rest = t // b_split
    k = rest.bit_length() - 1  # rest == 2**k
    h_split = 1 << ((k + 1) // 2)
    w_split = 1 << (k // 2)
    if h_split > layer.out_height:
        h_split = _pow2_floor(layer.out_height)
        w_split = rest // h_split
    if w_split > layer.out_width:
        w_split = _pow2_floor(layer.out_width)
        h_split = rest // w_split
    return b_split, h_split, w_split


def partition_output_tiles(layer: Layer, tiling_number: int) -> list[TileRegion]:
    """Split a layer's ofmap into `tiling_number` disjoint regions.

    Regions are returned in row-major (batch, height, width) order and jointly
    cover the ofmap exactly once.
    """
    if tiling_number < 1:
        raise ValueError("tiling number must be >= 1")
    if tiling_number & (tiling_number - 1):
        raise ValueError(f"tiling number {tiling_number} is not a power of two")
    if tiling_number > layer.spatial_out_elements:
        raise ValueError(
            f"tiling number {tiling_number} exceeds {layer.spatial_out_elements} "
            f"tileable output elements of layer {layer.name}")
    b_split, h_split, w_split = _split_factors(layer, tiling_number)
    if b_split * h_split * w_split != tiling_number or h_split > layer.out_height \
            or w_split > layer.out_width:
        raise ValueError(
            f"cannot factor tiling number {tiling_number} over layer {layer.name} "
            f"({layer.batch}x{layer.out_height}x{layer.out_width})")
    regions = []
    for br in _split_range(layer.batch, b_split):
        for hr in _split_range(layer.out_height, h_split):
            for wr in _split_range(layer.out_width, w_split):
                regions.append(TileRegion(br, (0, layer.out_channels), hr, wr))
    return regions


def backprop_input_region(layer: Layer, out_region: TileRegion) -> TileRegion:
    """Input region a layer needs to produce `out_region` of its ofmap.

    Receptive-field arithmetic: span = (out_span - 1) * stride + kernel,
    offset by stride * start - pad, clamped to the input bounds. Channels
    cover the full input extent (channels are never split).
    """
    def back(out_rng, stride, kernel, pad, in_extent):
        lo = out_rng[0] * stride - pad
        hi = (out_rng[1] - 1) * stride - pad + kernel
        return (max(lo, 0), min(hi, in_extent))

    return TileRegion(
        batch=out_region.batch,
        channels=(0, layer.in_channels),
        height=back(out_region.height, layer.stride_h, layer.kernel_h,
                    layer.pad_h, layer.in_height),
        width=back(out_region.width, layer.stride_w, layer.kernel_w,
                   layer.pad_w, layer.in_width),
    )


def tile_op_count(layer: Layer, out_region: TileRegion) -> int:
    """Scalar operations needed to produce `out_region` (MACs for conv/matmul)."""
    if out_region.is_empty():
        return 0
    out_elems = out_region.elements
    if layer.kind in ("conv", "matmul"):
        return out_elems * layer.kernel_h * layer.kernel_w * layer.in_channels
    if layer.kind == "pool":
        return out_elems * layer.kernel_h * layer.kernel_w
    return out_elems  # eltwise: one op per output element


@dataclass(frozen=True)
class LayerTile:
    """One layer's share of one tile of an FLG."""
    layer_id: int
    tile_index: int
    out_region: TileRegion
    in_region: TileRegion
    ops: int
    in_bytes: int      # one input operand, halo-expanded
    out_bytes: int     # produced bytes for this tile (the out_region)
    weight_bytes: int


@dataclass(frozen=True)
class TileGeometry:
    flg_id: int
    tiling_number: int
    layer_ids: tuple[int, ...]
    # tiles[t][i] is layer layer_ids[i] at tile t
    tiles: tuple[tuple[LayerTile, ...], ...]
    # Disjoint per-tile partition of each layer's own ofmap (used for DRAM
    # store pieces and for on-chip aggregation across FLG boundaries).
    own_partition: dict[int, tuple[TileRegion, ...]]

    def layer_tile(self, layer_id: int, t: int) -> LayerTile:
        return self.tiles[t][self.layer_ids.index(layer_id)]

    @property
    def total_ops(self) -> int:
        return sum(lt.ops for row in self.tiles for lt in row)


def flg_tile_geometry(flg_layers: Sequence[Layer], tiling_number: int,
                      flg_id: int = 0,
                      export_layers: frozenset[int] = frozenset()) -> TileGeometry:
    """Per-tile regions, op counts, and byte footprints for one FLG.

    Layers must be given in computing order. For each tile index t the last
    layer produces its own disjoint partition slice; every other layer
    produces the union of what its in-group consumers demand at t (clamped to
    the fmap), while layers with no in-group consumers fall back to their own
    partition slice. Layers in `export_layers` feed consumers outside the
    group (or DRAM), so their region at t must additionally cover their own
    partition slice: in-group demands alone can under-cover it when a
    downsampling consumer discards border elements.
    """
    if not flg_layers:
        raise ValueError("empty fused layer group")
    from .model import tensor_sizes

    layer_ids = tuple(l.id for l in flg_layers)
    by_id = {l.id: l for l in flg_layers}
    consumers: dict[int, list[int]] = {lid: [] for lid in layer_ids}
    for l in flg_layers:
        for p in l.predecessors:
            if p in consumers:
                consumers[p].append(l.id)

    own = {l.id: tuple(partition_output_tiles(l, tiling_number)) for l in flg_layers}

    tiles: list[tuple[LayerTile, ...]] = []
    for t in range(tiling_number):
        out_regions: dict[int, TileRegion] = {}
        for l in reversed(flg_layers):
            if consumers[l.id]:
                demand = None
                for cid in consumers[l.id]:
                    need = backprop_input_region(by_id[cid], out_regions[cid])
                    demand = need if demand is None else demand.union(need)
                # Demands address the producer's ofmap; clamp to its bounds.
                demand = TileRegion(
                    batch=demand.batch,
                    channels=(0, l.out_channels),
                    height=(max(demand.height[0], 0), min(demand.height[1], l.out_height)),
                    width=(max(demand.width[0], 0), min(demand.width[1], l.out_width)),
                )
                if l.id in export_layers:
                    demand = demand.union(own[l.id][t])
                out_regions[l.id] = demand
            else:
                out_regions[l.id] = own[l.id][t]

        row = []
        for l in flg_layers:
            out_r = out_regions[l.id]
            in_r = backprop_input_region(l, out_r)
            w_bytes, _, _ = tensor_sizes(l)
            row.append(LayerTile(
                layer_id=l.id, tile_index=t, out_region=out_r, in_region=in_r,
                ops=tile_op_count(l, out_r),
                in_bytes=in_r.elements * l.bytes_per_element,
                out_bytes=out_r.elements * l.bytes_per_element,
                weight_bytes=w_bytes,
            ))
        tiles.append(tuple(row))

    return TileGeometry(flg_id=flg_id, tiling_number=tiling_number,
                        layer_ids=layer_ids, tiles=tuple(tiles), own_partition=own)
