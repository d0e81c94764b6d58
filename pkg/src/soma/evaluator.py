"""Event-driven co-simulation of an execution plan on one accelerator.

Two serial engines share the timeline: a compute engine that runs the global
tile sequence in order, and a single DRAM channel that runs the DRAM tensors
strictly in their encoded order. A DRAM tensor may start once the previous
tensor finished and it is eligible: a load with Start=T waits for every tile
before T to complete (and, for reloaded fmaps, for the producing stores to
land); a store waits for its producing tile. A compute tile may start once
the previous tile finished, every load it consumes has landed, and every
tensor whose End deadline is the tile has completed.

Buffer occupancy is piecewise-constant per tile: the sum of DRAM tensor bytes
alive in [Start, End) plus on-chip fmap lifetimes. Exceeding the budget at
any tile, or reaching a state where neither engine can progress (a deadlock
from an unserviceable DRAM order), makes the plan invalid with infinite cost.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

from .notation import ExecutionPlan, TileInstance, DramTensor, OFMAP_STORE

INVALID_LATENCY = math.inf


@dataclass(frozen=True)
class HardwareConfig:
    parallel_k: int            # output-channel lanes
    parallel_c: int            # input-channel lanes
    frequency_hz: float
    gbuf_bytes: int
    dram_read_bytes_per_cycle: float
    dram_write_bytes_per_cycle: float
    e_mac: float               # pJ per scalar op
    e_dram_read: float         # pJ per byte
    e_dram_write: float        # pJ per byte
    e_gbuf_access: float       # pJ per byte

    def __post_init__(self):
        for name in ("parallel_k", "parallel_c", "frequency_hz", "gbuf_bytes",
                     "dram_read_bytes_per_cycle", "dram_write_bytes_per_cycle",
                     "e_mac", "e_dram_read", "e_dram_write", "e_gbuf_access"):
            if getattr(self, name) <= 0:
                raise ValueError(f"hardware parameter {name} must be > 0")

    @property
    def peak_macs_per_cycle(self) -> int:
        return self.parallel_k * self.parallel_c


@dataclass(frozen=True)
class TimelineEvent:
    kind: str      # compute | dram_load | dram_store
    id: str
    start: int
    end: int
    bytes: int
    ops: int


@dataclass(frozen=True)
class EvalReport:
    valid: bool
    latency_cycles: float
    energy_total: float
    energy_compute: float
    energy_dram: float
    energy_gbuf: float
    peak_buffer_bytes: int
    avg_buffer_bytes: float
    compute_utilization: float
    dram_utilization: float
    theoretical_max_utilization: float
    stall_cycles: float
    timeline: tuple[TimelineEvent, ...]
    # Per-tile (tile index, occupied bytes); static for a given plan.
    buffer_occupancy: tuple[tuple[int, int], ...] = ()
    # (kind, cycle) for fusion-cut and DRAM-cut boundaries in the timeline.
    markers: tuple[tuple[str, int], ...] = ()
    invalid_reason: Optional[str] = None

    @property
    def energy_breakdown(self) -> dict[str, float]:
        return {"compute": self.energy_compute, "dram": self.energy_dram,
                "gbuf": self.energy_gbuf}


def _ceil_div(a: float, b: float) -> int:
    return int(math.ceil(a / b))


def tile_compute_model(tile: TileInstance, hw: HardwareConfig) -> tuple[int, float]:
    """Closed-form per-tile cycles and energy.

    Conv/matmul run on the channel-parallel array: each output spatial
    position takes ceil(out_ch/Pk) * ceil(in_ch/Pc) * kernel area cycles.
    Pool/eltwise run on the vector path at one op per lane per cycle (for
    eltwise that is one output element per lane; a kxk pool touches kernel
    area ops per output). Energy charges every op plus the tile's GBUF
    traffic (inputs, streamed weights, outputs).
    """
    if tile.ops == 0:
        return 0, 0.0
    if tile.kind in ("conv", "matmul"):
        cycles = (_ceil_div(tile.out_channels, hw.parallel_k)
                  * _ceil_div(tile.in_channels, hw.parallel_c)
                  * tile.kernel_h * tile.kernel_w * tile.out_spatial)
    else:
        cycles = _ceil_div(tile.ops, hw.peak_macs_per_cycle)
    gbuf_bytes = tile.gbuf_in_bytes + tile.weight_bytes + tile.out_bytes
    energy = tile.ops * hw.e_mac + gbuf_bytes * hw.e_gbuf_access
    return cycles, energy


def dram_tensor_model(t: DramTensor, hw: HardwareConfig) -> tuple[int, float]:
    """Transfer cycles and energy for one DRAM tensor."""
    if t.kind == OFMAP_STORE:
        return _ceil_div(t.bytes, hw.dram_write_bytes_per_cycle), t.bytes * hw.e_dram_write
    return _ceil_div(t.bytes, hw.dram_read_bytes_per_cycle), t.bytes * hw.e_dram_read


def buffer_timeline(plan: ExecutionPlan) -> list[tuple[int, int]]:
    """Per-tile buffer occupancy in bytes; independent of any timing."""
    if not plan.has_dlsa:
        raise ValueError("plan has no DLSA; occupancy needs living durations")
    occ = [0] * plan.n_tiles
    for t in plan.dram_tensors:
        for i in range(t.start, min(t.end, plan.n_tiles)):
            occ[i] += t.bytes
    for lt in plan.onchip_lifetimes:
        for i in range(lt.start, min(lt.end, plan.n_tiles)):
            occ[i] += lt.bytes
    return list(enumerate(occ))


def latency_lower_bound(plan: ExecutionPlan, hw: HardwareConfig) -> int:
    """Dependency-free bound: both engines fully busy, whichever dominates."""
    compute = sum(tile_compute_model(t, hw)[0] for t in plan.tile_sequence)
    dram = sum(dram_tensor_model(t, hw)[0] for t in plan.dram_tensors)
    return max(compute, dram)


def cost(report: EvalReport, n: float = 1.0, m: float = 1.0) -> float:
    """Scheduling objective energy^n * delay^m; invalid plans cost infinity."""
    if not report.valid:
        return math.inf
    return report.energy_total ** n * report.latency_cycles ** m


def simulate(plan: ExecutionPlan, hw: HardwareConfig,
             budget_bytes: Optional[int] = None) -> EvalReport:
    if not plan.has_dlsa:
        raise ValueError("plan has no DLSA; run double_buffer_dlsa or apply_dlsa first")
    if budget_bytes is None:
        budget_bytes = hw.gbuf_bytes

    tiles = plan.tile_sequence
    tensors = plan.dram_tensors
    n_tiles, n_tensors = len(tiles), len(tensors)
    tensor_pos = {t.id: i for i, t in enumerate(tensors)}

    tile_cost = [tile_compute_model(t, hw) for t in tiles]
    tensor_cost = [dram_tensor_model(t, hw) for t in tensors]

    # Deadline constraints: tensors whose End equals this tile's index.
    deadline_at: dict[int, list[int]] = {}
    for j, t in enumerate(tensors):
        deadline_at.setdefault(t.end, []).append(j)

    tile_finish: list[Optional[int]] = [None] * n_tiles
    tensor_finish: list[Optional[int]] = [None] * n_tensors
    tile_start = [0] * n_tiles
    tensor_start = [0] * n_tensors
    next_tile = 0
    next_tensor = 0
    compute_free = 0
    dram_free = 0

    def tensor_ready(j: int) -> Optional[int]:
        """Eligibility time if all prerequisites are scheduled, else None."""
        t = tensors[j]
        if t.kind == OFMAP_STORE:
            f = tile_finish[t.producer_tile]
            return f
        elig = 0
        if t.start > 0:
            f = tile_finish[t.start - 1]
            if f is None:
                return None
            elig = f
        for dep in t.store_deps:
            f = tensor_finish[tensor_pos[dep]]
            if f is None:
                return None
            elig = max(elig, f)
        return elig

    def tile_ready(i: int) -> Optional[int]:
        inst = tiles[i]
        ready = 0
        for tid in inst.load_ids:
            f = tensor_finish[tensor_pos[tid]]
            if f is None:
                return None
            ready = max(ready, f)
        for j in deadline_at.get(i, ()):
            f = tensor_finish[j]
            if f is None:
                return None
            ready = max(ready, f)
        return ready

    while next_tile < n_tiles or next_tensor < n_tensors:
        progressed = False
        while next_tensor < n_tensors:
            elig = tensor_ready(next_tensor)
            if elig is None:
                break
            start = max(dram_free, elig)
            tensor_start[next_tensor] = start
            dram_free = start + tensor_cost[next_tensor][0]
            tensor_finish[next_tensor] = dram_free
            next_tensor += 1
            progressed = True
        while next_tile < n_tiles:
            ready = tile_ready(next_tile)
            if ready is None:
                break
            start = max(compute_free, ready)
            tile_start[next_tile] = start
            compute_free = start + tile_cost[next_tile][0]
            tile_finish[next_tile] = compute_free
            next_tile += 1
            progressed = True
        if not progressed:
            break

    deadlocked = next_tile < n_tiles or next_tensor < n_tensors

    timeline = []
    for i, inst in enumerate(tiles):
        if tile_finish[i] is None:
            break
        timeline.append(TimelineEvent("compute", f"{inst.layer_name}:{inst.tile_index}",
                                      tile_start[i], tile_finish[i],
                                      inst.out_bytes, inst.ops))
    for j, t in enumerate(tensors):
        if tensor_finish[j] is None:
            continue
        kind = "dram_store" if t.kind == OFMAP_STORE else "dram_load"
        timeline.append(TimelineEvent(kind, t.id, tensor_start[j], tensor_finish[j],
                                      t.bytes, 0))

    occupancy = buffer_timeline(plan)
    peak = max((b for _, b in occupancy), default=0)
    total_compute = sum(c for c, _ in tile_cost)
    if total_compute > 0:
        avg = sum(b * tile_cost[i][0] for i, b in occupancy) / total_compute
    else:
        avg = 0.0

    energy_compute = sum(t.ops for t in tiles) * hw.e_mac
    energy_gbuf = sum(t.gbuf_in_bytes + t.weight_bytes + t.out_bytes
                      for t in tiles if t.ops) * hw.e_gbuf_access
    energy_dram = sum(e for _, e in tensor_cost)
    energy_total = energy_compute + energy_gbuf + energy_dram

    over_budget = peak > budget_bytes
    valid = not deadlocked and not over_budget
    reason = None
    if deadlocked:
        reason = (f"deadlock: tile {next_tile}/{n_tiles} and DRAM tensor "
                  f"{next_tensor}/{n_tensors} are both blocked")
    elif over_budget:
        reason = f"peak buffer {peak} exceeds budget {budget_bytes}"

    markers: list[tuple[str, int]] = []
    if valid:
        latency = float(max(tile_finish[-1] if n_tiles else 0,
                            tensor_finish[-1] if n_tensors else 0))
        total_ops = plan.total_ops
        total_dram = sum(c for c, _ in tensor_cost)
        bound = max(total_compute, total_dram)
        compute_util = total_ops / (hw.peak_macs_per_cycle * latency) if latency else 0.0
        dram_util = total_dram / latency if latency else 0.0
        theo = total_ops / (hw.peak_macs_per_cycle * bound) if bound else 0.0
        stall = (tile_finish[-1] - total_compute) if n_tiles else 0
        lg_of_flg = plan.encoding.lg_of_flg()
        for i in range(1, n_tiles):
            prev, cur = tiles[i - 1].flg_index, tiles[i].flg_index
            if prev != cur:
                kind = "dram_cut" if lg_of_flg[prev] != lg_of_flg[cur] else "flc"
                markers.append((kind, tile_start[i]))
    else:
        latency = INVALID_LATENCY
        compute_util = dram_util = theo = 0.0
        stall = 0

    return EvalReport(
        valid=valid, latency_cycles=latency, energy_total=energy_total,
        energy_compute=energy_compute, energy_dram=energy_dram, energy_gbuf=energy_gbuf,
        peak_buffer_bytes=peak, avg_buffer_bytes=avg,
        compute_utilization=compute_util, dram_utilization=dram_util,
        theoretical_max_utilization=theo, stall_cycles=float(stall),
        timeline=tuple(timeline), buffer_occupancy=tuple(occupancy),
        markers=tuple(markers), invalid_reason=reason,
    )


# --------------------------------------------------------------------------
# Report serialization
# --------------------------------------------------------------------------

def report_to_dict(report: EvalReport) -> dict:
    return {
        "valid": report.valid,
        "latency_cycles": None if math.isinf(report.latency_cycles)
        else report.latency_cycles,
        "energy_total": report.energy_total,
        "energy_breakdown": report.energy_breakdown,
        "peak_buffer_bytes": report.peak_buffer_bytes,
        "avg_buffer_bytes": report.avg_buffer_bytes,
        "compute_utilization": report.compute_utilization,
        "dram_utilization": report.dram_utilization,
        "theoretical_max_utilization": report.theoretical_max_utilization,
        "stall_cycles": report.stall_cycles,
        "invalid_reason": report.invalid_reason,
        "timeline": [[e.kind, e.id, e.start, e.end, e.bytes, e.ops]
                     for e in report.timeline],
        "buffer_occupancy": [list(x) for x in report.buffer_occupancy],
        "markers": [list(x) for x in report.markers],
    }


def report_from_dict(doc: dict) -> EvalReport:
    breakdown = doc["energy_breakdown"]
    latency = doc["latency_cycles"]
    return EvalReport(
        valid=doc["valid"],
        latency_cycles=INVALID_LATENCY if latency is None else latency,
        energy_total=doc["energy_total"],
        energy_compute=breakdown["compute"],
        energy_dram=breakdown["dram"],
        energy_gbuf=breakdown["gbuf"],
        peak_buffer_bytes=doc["peak_buffer_bytes"],
        avg_buffer_bytes=doc["avg_buffer_bytes"],
        compute_utilization=doc["compute_utilization"],
        dram_utilization=doc["dram_utilization"],
        theoretical_max_utilization=doc["theoretical_max_utilization"],
        stall_cycles=doc["stall_cycles"],
        timeline=tuple(TimelineEvent(*entry) for entry in doc["timeline"]),
        buffer_occupancy=tuple((t, b) for t, b in doc.get("buffer_occupancy", [])),
        markers=tuple((k, c) for k, c in doc.get("markers", [])),
        invalid_reason=doc.get("invalid_reason"),
    )


def save_report(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path: str) -> EvalReport:
    with open(path, "r", encoding="utf-8") as fh:
        return report_from_dict(json.load(fh))
