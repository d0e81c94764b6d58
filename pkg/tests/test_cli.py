import csv
import json
import os

import pytest

from conftest import FIG5_DLSA_ORDER, FIG5_DURATIONS, FIG5_ENCODING
from soma.cli import main, render_gantt_svg
from soma.evaluator import save_report, simulate
from soma.model import builtin_workload
from soma.notation import apply_dlsa, load_encoding, parse_lfa, plan_from_encoding

FAST_ARGS = ["--beta", "10", "--seed", "1"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestSchedule:
    def test_basic_run(self, tmp_path, capsys):
        out = tmp_path / "run"
        rc = main(["schedule", "--model", "toy5", "--out", str(out)] + FAST_ARGS)
        assert rc == 0
        assert (out / "encoding.json").exists()
        assert (out / "report.json").exists()
        assert (out / "events.csv").exists()
        summary = capsys.readouterr().out
        assert "[soma]" in summary and "latency" in summary

        report = json.loads((out / "report.json").read_text())
        assert report["valid"]
        # Latency respects the plan's own lower bound.
        from soma.evaluator import latency_lower_bound
        from soma.cli import PRESETS
        enc = load_encoding(str(out / "encoding.json"))
        plan = plan_from_encoding(builtin_workload("toy5", 1), enc)
        assert report["latency_cycles"] >= latency_lower_bound(plan, PRESETS["edge"])

    def test_infeasible_buffer(self, tmp_path):
        hw_file = tmp_path / "hw.toml"
        hw_file.write_text(
            "[hardware]\nparallel_k = 128\nparallel_c = 64\nfrequency_hz = 1e9\n"
            "gbuf_bytes = 1024\ndram_read_bytes_per_cycle = 16.0\n"
            "dram_write_bytes_per_cycle = 16.0\ne_mac = 0.25\ne_dram_read = 8.0\n"
            "e_dram_write = 8.0\ne_gbuf_access = 0.5\n")
        rc = main(["schedule", "--model", "toy5", "--hw", str(hw_file),
                   "--out", str(tmp_path / "o")] + FAST_ARGS)
        assert rc == 1
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert not report["valid"]

    def test_baseline_flag_labels_mode(self, tmp_path, capsys):
        rc = main(["schedule", "--model", "toy5", "--baseline",
                   "--out", str(tmp_path / "b")] + FAST_ARGS)
        assert rc == 0
        assert "[baseline]" in capsys.readouterr().out

    def test_baseline_subcommand(self, tmp_path, capsys):
        rc = main(["baseline", "--model", "toy5",
                   "--out", str(tmp_path / "b")] + FAST_ARGS)
        assert rc == 0
        assert "[baseline]" in capsys.readouterr().out

    def test_missing_model_file(self, tmp_path):
        rc = main(["schedule", "--model", "nonexistent_workload",
                   "--out", str(tmp_path / "x")] + FAST_ARGS)
        assert rc == 2

    def test_byte_reproducible(self, tmp_path):
        for d in ("r1", "r2"):
            rc = main(["schedule", "--model", "toy5", "--out", str(tmp_path / d),
                       "--log-search"] + FAST_ARGS)
            assert rc == 0
        for name in ("encoding.json", "report.json", "events.csv", "search_log.csv"):
            a = (tmp_path / "r1" / name).read_bytes()
            b = (tmp_path / "r2" / name).read_bytes()
            assert a == b, name

    def test_env_seed_override(self, tmp_path, monkeypatch):
        rc = main(["schedule", "--model", "toy5", "--seed", "7",
                   "--beta", "10", "--out", str(tmp_path / "a")])
        assert rc == 0
        monkeypatch.setenv("SOMA_SEED", "7")
        rc = main(["schedule", "--model", "toy5", "--seed", "999",
                   "--beta", "10", "--out", str(tmp_path / "b")])
        assert rc == 0
        assert (tmp_path / "a" / "encoding.json").read_bytes() == \
               (tmp_path / "b" / "encoding.json").read_bytes()


class TestDse:
    def test_grid_rows(self, tmp_path):
        out = tmp_path / "dse"
        rc = main(["dse", "--model", "toy5", "--bandwidths", "8,16",
                   "--buffers", "1,8", "--out", str(out), "--beta", "5",
                   "--seed", "1"])
        assert rc == 0
        rows = read_csv(out / "dse.csv")
        header, data = rows[0], rows[1:]
        assert header[0] == "soma_dse_v1"
        search_rows = [r for r in data if r[0] == "search"]
        fixed_rows = [r for r in data if r[0] == "fixed"]
        assert len(search_rows) == 4
        assert len(fixed_rows) == 4

    def test_edge_default_point_present(self, tmp_path):
        # A sweep spanning the edge preset's corner must contain the
        # 16 bytes/cycle x 8 MiB row.
        out = tmp_path / "dse"
        rc = main(["dse", "--model", "toy5", "--bandwidths", "16,128",
                   "--buffers", "8,32", "--out", str(out), "--beta", "5",
                   "--seed", "1"])
        assert rc == 0
        rows = read_csv(out / "dse.csv")[1:]
        assert any(r[0] == "search" and float(r[1]) == 16.0
                   and int(r[2]) == 8 << 20 for r in rows)

    def test_with_baseline_rows(self, tmp_path):
        out = tmp_path / "dse"
        rc = main(["dse", "--model", "toy5", "--bandwidths", "16",
                   "--buffers", "8", "--out", str(out), "--beta", "5",
                   "--seed", "1", "--with-baseline"])
        assert rc == 0
        rows = read_csv(out / "dse.csv")[1:]
        assert sum(1 for r in rows if r[0] == "baseline") == 1
        base = next(r for r in rows if r[0] == "baseline")
        search = next(r for r in rows if r[0] == "search")
        assert float(search[3]) <= float(base[3])

    def test_fixed_rows_latency_monotone_in_bandwidth(self, tmp_path):
        out = tmp_path / "dse"
        rc = main(["dse", "--model", "toy5", "--bandwidths", "4,8,16,32",
                   "--buffers", "8", "--out", str(out), "--beta", "5",
                   "--seed", "1"])
        assert rc == 0
        rows = read_csv(out / "dse.csv")
        fixed = [(float(r[1]), float(r[4])) for r in rows[1:] if r[0] == "fixed"]
        fixed.sort()
        latencies = [lat for _, lat in fixed]
        assert latencies == sorted(latencies, reverse=True)

    def test_empty_sweep_rejected(self, tmp_path):
        rc = main(["dse", "--model", "toy5", "--bandwidths", "",
                   "--buffers", "8", "--out", str(tmp_path / "d")])
        assert rc == 2

    def test_worker_pool_matches_sequential(self, tmp_path):
        args = ["dse", "--model", "toy5", "--bandwidths", "8,16",
                "--buffers", "2,8", "--beta", "5", "--seed", "1"]
        assert main(args + ["--out", str(tmp_path / "seq")]) == 0
        assert main(args + ["--out", str(tmp_path / "par"), "--jobs", "2"]) == 0
        assert (tmp_path / "seq" / "dse.csv").read_bytes() == \
               (tmp_path / "par" / "dse.csv").read_bytes()


class TestTrace:
    def test_csv_row_count(self, tmp_path, toy5, edge_hw, fig5_plan):
        report = simulate(fig5_plan, edge_hw, edge_hw.gbuf_bytes)
        rpath = tmp_path / "report.json"
        save_report(report, str(rpath))
        out = tmp_path / "events.csv"
        rc = main(["trace", "--report", str(rpath), "--format", "csv",
                   "--out", str(out)])
        assert rc == 0
        rows = read_csv(out)
        n_tiles = len(fig5_plan.tile_sequence)
        n_tensors = len(fig5_plan.dram_tensors)
        assert len(rows) == 1 + n_tiles + n_tensors
        assert rows[0][0] == "soma_events_v1"

    def test_empty_timeline_header_only(self, tmp_path):
        doc = {
            "valid": False, "latency_cycles": None, "energy_total": 0.0,
            "energy_breakdown": {"compute": 0.0, "dram": 0.0, "gbuf": 0.0},
            "peak_buffer_bytes": 0, "avg_buffer_bytes": 0.0,
            "compute_utilization": 0.0, "dram_utilization": 0.0,
            "theoretical_max_utilization": 0.0, "stall_cycles": 0.0,
            "invalid_reason": None, "timeline": [],
            "buffer_occupancy": [], "markers": [],
        }
        rpath = tmp_path / "empty.json"
        rpath.write_text(json.dumps(doc))
        out = tmp_path / "events.csv"
        rc = main(["trace", "--report", str(rpath), "--out", str(out)])
        assert rc == 0
        assert read_csv(out) == [["soma_events_v1", "id", "start_cycle",
                                  "end_cycle", "bytes", "ops"]]

    def test_missing_timeline_errors(self, tmp_path):
        rpath = tmp_path / "broken.json"
        rpath.write_text(json.dumps({"valid": True}))
        rc = main(["trace", "--report", str(rpath), "--out",
                   str(tmp_path / "x.csv")])
        assert rc == 1

    def test_svg_fig5_event_coordinates(self, edge_hw, fig5_plan, tmp_path):
        # The reload of C's second tile may only begin once W:D is off the
        # channel; the rendered rectangles must show exactly that.
        report = simulate(fig5_plan, edge_hw, edge_hw.gbuf_bytes)
        svg = render_gantt_svg(report)
        events = {e.id: e for e in report.timeline}
        assert events["I:C:B:1"].start == events["W:D"].end
        assert f'data-id="I:C:B:1" data-start="{events["W:D"].end}"' in svg
        assert svg.count("<rect") == len(report.timeline)
        assert 'class="dram_cut"' in svg and 'class="flc"' in svg

        rc = main(["trace", "--report", "missing.json", "--format", "gantt_svg",
                   "--out", str(tmp_path / "g.svg")])
        assert rc == 2
