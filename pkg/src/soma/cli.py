"""Command-line entry point: schedule, baseline, dse, trace.

All outputs are reproducible byte-for-byte for a given config and seed; no
timestamps enter any file. CSV files carry their schema version as the first
header field.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:           # Python < 3.11
    import tomli as tomllib

from .evaluator import (EvalReport, HardwareConfig, cost, latency_lower_bound,
                        load_report, save_report, simulate)
from .explorer import (AllocatorParams, SAParams, baseline_schedule,
                       buffer_allocator_loop)
from .model import (ModelGraph, WorkloadError, builtin_workload, parse_model_file)
from .notation import plan_from_encoding, save_encoding

EVENTS_SCHEMA = "soma_events_v1"
DSE_SCHEMA = "soma_dse_v1"
SEARCHLOG_SCHEMA = "soma_salog_v1"

MIB = 1 << 20

PRESETS = {
    # 16 TOPS-class edge point: 8192 MACs/cycle at 1 GHz, 8 MiB buffer,
    # 16 B/cycle DRAM. Unit energies are placeholder constants, not silicon
    # measurements; override them via a TOML file for calibrated studies.
    "edge": HardwareConfig(
        parallel_k=128, parallel_c=64, frequency_hz=1e9, gbuf_bytes=8 * MIB,
        dram_read_bytes_per_cycle=16.0, dram_write_bytes_per_cycle=16.0,
        e_mac=0.25, e_dram_read=8.0, e_dram_write=8.0, e_gbuf_access=0.5),
    # 128 TOPS-class cloud point: 65536 MACs/cycle, 32 MiB, 128 B/cycle.
    "cloud": HardwareConfig(
        parallel_k=256, parallel_c=256, frequency_hz=1e9, gbuf_bytes=32 * MIB,
        dram_read_bytes_per_cycle=128.0, dram_write_bytes_per_cycle=128.0,
        e_mac=0.25, e_dram_read=8.0, e_dram_write=8.0, e_gbuf_access=0.5),
}


def load_hardware_config(path: str) -> HardwareConfig:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    section = doc.get("hardware", doc)
    try:
        return HardwareConfig(**section)
    except TypeError as exc:
        raise WorkloadError(f"{path}: bad hardware config: {exc}") from exc


@dataclass
class RunConfig:
    graph: ModelGraph
    hw: HardwareConfig
    sa: SAParams
    alloc: AllocatorParams
    out_dir: str
    baseline: bool = False
    log_search: bool = False


def _load_model(spec: str, batch: int) -> ModelGraph:
    if os.path.exists(spec):
        return parse_model_file(spec)
    return builtin_workload(spec, batch)


def _resolve_seed(args) -> int:
    env = os.environ.get("SOMA_SEED")
    if env is not None:
        return int(env)
    return args.seed


def _build_config(args) -> RunConfig:
    graph = _load_model(args.model, args.batch)
    hw = load_hardware_config(args.hw) if args.hw else PRESETS[args.preset]
    sa = SAParams(t0=args.t0, alpha=args.alpha, beta=args.beta,
                  wall_clock_limit=args.wall_clock, seed=_resolve_seed(args))
    alloc = AllocatorParams(shrink_percent=args.shrink, n=args.n, m=args.m)
    return RunConfig(graph=graph, hw=hw, sa=sa, alloc=alloc, out_dir=args.out,
                     baseline=getattr(args, "baseline", False),
                     log_search=args.log_search)


def write_events_csv(report: EvalReport, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([EVENTS_SCHEMA, "id", "start_cycle", "end_cycle",
                         "bytes", "ops"])
        for e in report.timeline:
            writer.writerow([e.kind, e.id, e.start, e.end, e.bytes, e.ops])


def write_search_log_csv(log, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([SEARCHLOG_SCHEMA, "iteration", "temperature", "cost",
                         "accepted", "best_cost"])
        for entry in log:
            writer.writerow([entry.stage, entry.iteration,
                             f"{entry.temperature:.6g}", _num(entry.cost),
                             int(entry.accepted), _num(entry.best_cost)])


def _num(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.10g}"


def cmd_schedule(cfg: RunConfig) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    if cfg.baseline:
        state = baseline_schedule(cfg.graph, cfg.hw, cfg.sa, (cfg.alloc.n, cfg.alloc.m))
        mode = "baseline"
    else:
        state = buffer_allocator_loop(cfg.graph, cfg.hw, cfg.alloc, cfg.sa)
        mode = "soma"

    save_encoding(state.best_encoding, os.path.join(cfg.out_dir, "encoding.json"))
    if cfg.log_search:
        write_search_log_csv(state.log, os.path.join(cfg.out_dir, "search_log.csv"))

    if not state.feasible or state.best_report is None:
        report = state.best_report
        if report is not None:
            save_report(report, os.path.join(cfg.out_dir, "report.json"))
        print(f"[{mode}] infeasible: no valid scheme found "
              f"(buffer {cfg.hw.gbuf_bytes} bytes)")
        return 1

    report = state.best_report
    save_report(report, os.path.join(cfg.out_dir, "report.json"))
    write_events_csv(report, os.path.join(cfg.out_dir, "events.csv"))

    plan = state.best_plan
    bound = latency_lower_bound(plan, cfg.hw)
    gap = (report.latency_cycles - bound) / bound if bound else 0.0
    print(f"[{mode}] cost={state.best_cost:.6g} latency={report.latency_cycles:.0f}cyc "
          f"energy={report.energy_total:.6g}pJ")
    print(f"  buffer peak/avg: {report.peak_buffer_bytes}/{report.avg_buffer_bytes:.0f} "
          f"bytes of {cfg.hw.gbuf_bytes}")
    print(f"  utilization compute={report.compute_utilization:.3f} "
          f"dram={report.dram_utilization:.3f} "
          f"theoretical_max={report.theoretical_max_utilization:.3f}")
    print(f"  latency bound {bound} cyc, gap {gap * 100:.1f}%")
    print(f"  evaluated {state.evaluations} schemes over {state.iterations} iterations")
    return 0


def _dse_point(payload):
    """Worker for one DSE grid point; must stay picklable."""
    (graph, hw, sa, alloc, bandwidth, buffer_bytes, run_baseline) = payload
    point_hw = replace(hw, dram_read_bytes_per_cycle=bandwidth,
                       dram_write_bytes_per_cycle=bandwidth,
                       gbuf_bytes=buffer_bytes)
    rows = []
    state = buffer_allocator_loop(graph, point_hw, alloc, sa)
    rows.append(_dse_row("search", bandwidth, buffer_bytes, state.best_report,
                         state.best_cost))
    encoding = state.best_encoding if state.feasible else None
    if run_baseline:
        bstate = baseline_schedule(graph, point_hw, sa, (alloc.n, alloc.m))
        rows.append(_dse_row("baseline", bandwidth, buffer_bytes,
                             bstate.best_report, bstate.best_cost))
    return bandwidth, buffer_bytes, rows, encoding


def _dse_row(mode, bandwidth, buffer_bytes, report: Optional[EvalReport],
             cost_value: float) -> list:
    if report is None or not report.valid:
        return [mode, bandwidth, buffer_bytes, "inf", "inf", "inf", "", 0]
    return [mode, bandwidth, buffer_bytes, _num(cost_value),
            f"{report.latency_cycles:.0f}", _num(report.energy_total),
            report.peak_buffer_bytes, 1]


def cmd_dse(cfg: RunConfig, bandwidths: Sequence[float], buffers: Sequence[int],
            run_baseline: bool, jobs: int) -> int:
    os.makedirs(cfg.out_dir, exist_ok=True)
    points = [(cfg.graph, cfg.hw, cfg.sa, cfg.alloc, bw, buf, run_baseline)
              for buf in buffers for bw in bandwidths]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_dse_point, points))
    else:
        results = [_dse_point(p) for p in points]

    by_key = {(bw, buf): (rows, enc) for bw, buf, rows, enc in results}
    all_rows = []
    n_ok = 0
    for buf in buffers:
        # Fixed-plan rows: the plan searched at the lowest bandwidth for this
        # buffer size, re-simulated across the bandwidth axis.
        base_enc = by_key[(bandwidths[0], buf)][1]
        for bw in bandwidths:
            rows, _ = by_key[(bw, buf)]
            all_rows.extend(rows)
            n_ok += sum(1 for r in rows if r[-1] == 1)
            if base_enc is not None:
                point_hw = replace(cfg.hw, dram_read_bytes_per_cycle=bw,
                                   dram_write_bytes_per_cycle=bw, gbuf_bytes=buf)
                plan = plan_from_encoding(cfg.graph, base_enc)
                report = simulate(plan, point_hw, buf)
                all_rows.append(_dse_row("fixed", bw, buf, report,
                                         cost(report, cfg.alloc.n, cfg.alloc.m)))

    path = os.path.join(cfg.out_dir, "dse.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([DSE_SCHEMA, "bandwidth_bytes_per_cycle", "buffer_bytes",
                         "cost", "latency_cycles", "energy_total",
                         "peak_buffer_bytes", "valid"])
        writer.writerows(all_rows)
    print(f"dse: {len(all_rows)} rows -> {path}")
    return 0 if n_ok > 0 else 1


# --------------------------------------------------------------------------
# Trace export
# --------------------------------------------------------------------------

_LANES = {"dram_load": 0, "dram_store": 0, "compute": 1}
_COLORS = {"dram_load": "#4878cf", "dram_store": "#d65f5f", "compute": "#6acc65"}


def render_gantt_svg(report: EvalReport) -> str:
    """Three-lane chart: DRAM transfers, compute tiles, buffer step curve."""
    width, lane_h, pad = 1000.0, 60.0, 40.0
    height = pad * 2 + lane_h * 3
    span = max([e.end for e in report.timeline] or [1])
    sx = (width - 2 * pad) / span

    def x(cycle: float) -> float:
        return pad + cycle * sx

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" font-family="monospace" font-size="9">',
        f'<text x="{pad}" y="{pad - 24}">DRAM</text>',
        f'<text x="{pad}" y="{pad + lane_h - 24}">COMPUTE</text>',
        f'<text x="{pad}" y="{pad + 2 * lane_h - 24}">BUFFER</text>',
    ]
    for e in report.timeline:
        lane = _LANES[e.kind]
        y = pad + lane * lane_h
        w = max((e.end - e.start) * sx, 0.5)
        parts.append(
            f'<rect class="{e.kind}" data-id="{e.id}" data-start="{e.start}" '
            f'data-end="{e.end}" x="{x(e.start):.2f}" y="{y:.1f}" '
            f'width="{w:.2f}" height="24" fill="{_COLORS[e.kind]}" '
            f'stroke="black" stroke-width="0.3"/>')
        parts.append(f'<text x="{x(e.start):.2f}" y="{y - 2:.1f}">{e.id}</text>')

    # Buffer occupancy as a step curve over compute-tile spans.
    tile_events = [e for e in report.timeline if e.kind == "compute"]
    occ = dict(report.buffer_occupancy)
    peak = max((b for b in occ.values()), default=1) or 1
    y0 = pad + 2 * lane_h + 30
    points = []
    for i, e in enumerate(tile_events):
        level = y0 - (occ.get(i, 0) / peak) * 30
        points.append(f"{x(e.start):.2f},{level:.2f}")
        points.append(f"{x(e.end):.2f},{level:.2f}")
    if points:
        parts.append(f'<polyline points="{" ".join(points)}" fill="none" '
                     f'stroke="#8172b2" stroke-width="1.5"/>')

    for kind, cycle in report.markers:
        dash = "4,2" if kind == "flc" else "1,0"
        parts.append(
            f'<line class="{kind}" x1="{x(cycle):.2f}" y1="{pad - 20}" '
            f'x2="{x(cycle):.2f}" y2="{height - 10}" stroke="#333" '
            f'stroke-dasharray="{dash}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_trace_export(report_path: str, fmt: str, out_path: str) -> int:
    try:
        report = load_report(report_path)
    except KeyError as exc:
        print(f"error: report is missing field {exc}", file=sys.stderr)
        return 1
    if fmt == "csv":
        write_events_csv(report, out_path)
    else:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(render_gantt_svg(report))
    print(f"trace: {len(report.timeline)} events -> {out_path}")
    return 0


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True,
                   help="workload JSON file or builtin name (toy5, "
                        "resnet_block_chain, transformer_block)")
    p.add_argument("--batch", type=int, default=1, help="batch for builtin workloads")
    p.add_argument("--hw", help="hardware config TOML (overrides --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="edge")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=float, default=1.0, help="energy exponent")
    p.add_argument("--m", type=float, default=1.0, help="delay exponent")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--beta", type=float, default=100.0,
                   help="iteration multiplier for the fusion stage")
    p.add_argument("--t0", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--shrink", type=float, default=0.10,
                   help="stage-1 budget shrink fraction per outer iteration")
    p.add_argument("--wall-clock", type=float, default=None,
                   help="soft time limit in seconds per annealing run")
    p.add_argument("--log-search", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="soma",
        description="Schedule DRAM communication for DNN accelerator workloads.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sched = sub.add_parser("schedule", help="two-stage search with buffer allocation")
    _add_common(p_sched)
    p_sched.add_argument("--baseline", action="store_true",
                         help="run the restricted baseline search instead")

    p_base = sub.add_parser("baseline", help="restricted baseline search")
    _add_common(p_base)

    p_dse = sub.add_parser("dse", help="sweep DRAM bandwidth x buffer size")
    _add_common(p_dse)
    p_dse.add_argument("--bandwidths", required=True,
                       help="comma-separated DRAM bytes/cycle values")
    p_dse.add_argument("--buffers", required=True,
                       help="comma-separated buffer sizes in MiB")
    p_dse.add_argument("--with-baseline", action="store_true")
    p_dse.add_argument("--jobs", type=int, default=1)

    p_trace = sub.add_parser("trace", help="export a report timeline")
    p_trace.add_argument("--report", required=True, help="report JSON path")
    p_trace.add_argument("--format", choices=["csv", "gantt_svg"], default="csv")
    p_trace.add_argument("--out", default="events.csv")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "trace":
            return cmd_trace_export(args.report, args.format, args.out)
        cfg = _build_config(args)
        if args.command == "baseline":
            cfg.baseline = True
            return cmd_schedule(cfg)
        if args.command == "schedule":
            return cmd_schedule(cfg)
        if args.command == "dse":
            bandwidths = [float(x) for x in args.bandwidths.split(",") if x]
            buffers = [int(float(x) * MIB) for x in args.buffers.split(",") if x]
            if not bandwidths or not buffers:
                print("empty sweep lists", file=sys.stderr)
                return 2
            return cmd_dse(cfg, bandwidths, buffers, args.with_baseline, args.jobs)
        raise AssertionError(args.command)
    except (WorkloadError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
