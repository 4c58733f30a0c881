from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import make_grid_stream
from slidenav.cli import main
from slidenav.formats import (
    write_feature_stream,
    write_patch_embeddings,
    write_question_embedding,
    write_relevance_scores_csv,
)


@pytest.fixture(scope="module")
def slide_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("slide")
    spec = {
        "grid_w": 24,
        "grid_h": 24,
        "d": 12,
        "background": {"num_modes": 2, "mode_scale": 0.5},
        "anomalies": [
            {"center_frac": [0.25, 0.25], "radius_tiles": 3, "shift_magnitude": 2.5,
             "named_by_question": True},
            {"center_frac": [0.75, 0.75], "radius_tiles": 3, "shift_magnitude": 4.0,
             "named_by_question": False},
        ],
        "relevance_noise": 0.05,
        "seed": 3,
        "high_refine": 4,
        "tile_stride_level0": 4096.0,
    }
    spec_path = out / "spec.json"
    spec_path.write_text(json.dumps(spec))
    code = main(["gen", "--spec", str(spec_path), "--out-dir", str(out)])
    assert code == 0
    return out


class TestGen:
    def test_outputs_exist(self, slide_dir):
        for name in ("low.pnav", "high.pnav", "relevance.csv", "truth.json", "spec.json"):
            assert (slide_dir / name).exists()

    def test_truth_contents(self, slide_dir):
        truth = json.loads((slide_dir / "truth.json").read_text())
        assert truth["slide_id"] == "synthetic-3"
        assert len(truth["blobs"]) == 2

    def test_deterministic_regeneration(self, slide_dir, tmp_path):
        code = main(["gen", "--spec", str(slide_dir / "spec.json"), "--out-dir", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "low.pnav").read_bytes() == (slide_dir / "low.pnav").read_bytes()


class TestScan:
    def test_scan_writes_exports(self, slide_dir, tmp_path, capsys):
        code = main(
            [
                "scan",
                "--features", str(slide_dir / "low.pnav"),
                "--t-w", "24",
                "--out-csv", str(tmp_path / "f.csv"),
                "--out-pgm", str(tmp_path / "f.pgm"),
            ]
        )
        assert code == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["tiles"] == 576
        assert (tmp_path / "f.csv").exists()
        assert (tmp_path / "f.pgm").read_bytes().startswith(b"P5\n24 24\n255\n")

    def test_missing_file_io_exit(self, tmp_path, capsys):
        code = main(["scan", "--features", str(tmp_path / "nope.pnav")])
        assert code == 4

    def test_bad_magic_io_exit(self, tmp_path, capsys):
        bad = tmp_path / "bad.pnav"
        bad.write_bytes(b"JUNKJUNKJUNK" * 10)
        assert main(["scan", "--features", str(bad)]) == 4


class TestRun:
    def test_run_scores_mode(self, slide_dir, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        packet_path = tmp_path / "packet.json"
        code = main(
            [
                "run",
                "--features", str(slide_dir / "low.pnav"),
                "--high-features", str(slide_dir / "high.pnav"),
                "--question", "Where is the unusual region?",
                "--relevance", str(slide_dir / "relevance.csv"),
                "--t-w", "24",
                "--out", str(report_path),
                "--packet-out", str(packet_path),
            ]
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["counters"]["tiles_scanned"] == 576
        assert report["counters"]["perceptor_slots_used"] <= 15
        packet = json.loads(packet_path.read_text())
        assert packet["navigation_summary"]["candidate_count"] == len(report["pool"]["rois"])
        assert "timings" not in report

    def test_run_emit_timings(self, slide_dir, tmp_path):
        report_path = tmp_path / "r.json"
        code = main(
            [
                "run",
                "--features", str(slide_dir / "low.pnav"),
                "--question", "anything?",
                "--relevance", str(slide_dir / "relevance.csv"),
                "--t-w", "24",
                "--emit-timings",
                "--out", str(report_path),
            ]
        )
        assert code == 0
        assert "timings" in json.loads(report_path.read_text())

    def test_run_embeddings_mode(self, tmp_path):
        stream = make_grid_stream(6, 6, 5, seed=2)
        write_feature_stream(stream, tmp_path / "s.pnav")
        gen = np.random.default_rng(0)
        embs = {i: gen.standard_normal(7).astype(np.float32) for i in range(36)}
        write_patch_embeddings(embs, tmp_path / "p.bin")
        write_question_embedding(gen.standard_normal(7).astype(np.float32), tmp_path / "q.bin")
        code = main(
            [
                "run",
                "--features", str(tmp_path / "s.pnav"),
                "--question", "what grade?",
                "--relevance", str(tmp_path / "p.bin"),
                "--relevance-mode", "embeddings",
                "--question-embedding", str(tmp_path / "q.bin"),
                "--t-w", "10",
                "--out", str(tmp_path / "r.json"),
            ]
        )
        assert code == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["routing"]["category"] == "morphology"

    def test_coverage_failure_exit_3(self, slide_dir, tmp_path, capsys):
        write_relevance_scores_csv({0: 1.0}, tmp_path / "partial.csv")
        code = main(
            [
                "run",
                "--features", str(slide_dir / "low.pnav"),
                "--question", "anything?",
                "--relevance", str(tmp_path / "partial.csv"),
                "--t-w", "24",
            ]
        )
        assert code == 3

    def test_config_file_with_flag_override(self, slide_dir, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"t_w": 24, "alpha": 0.9, "v_max": 4}))
        out = tmp_path / "r.json"
        code = main(
            [
                "run",
                "--features", str(slide_dir / "low.pnav"),
                "--question", "anything?",
                "--relevance", str(slide_dir / "relevance.csv"),
                "--config", str(cfg_path),
                "--alpha", "0.25",
                "--out", str(out),
            ]
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert report["packet"]["config_echo"]["alpha"] == 0.25  # flag wins
        assert report["packet"]["config_echo"]["v_max"] == 4  # file applies
        assert report["counters"]["perceptor_slots_used"] <= 4

    def test_category_override_flag(self, slide_dir, tmp_path):
        out = tmp_path / "r.json"
        code = main(
            [
                "run",
                "--features", str(slide_dir / "low.pnav"),
                "--question", "anything?",
                "--category", "clinical",
                "--relevance", str(slide_dir / "relevance.csv"),
                "--t-w", "24",
                "--out", str(out),
            ]
        )
        assert code == 0
        assert json.loads(out.read_text())["routing"]["category"] == "clinical"


class TestArchiveCli:
    def test_build_and_query(self, tmp_path, capsys):
        for i in range(3):
            stream = make_grid_stream(4, 4, 6, seed=i, slide_id=f"ref{i}")
            write_feature_stream(stream, tmp_path / f"ref{i}.pnav")
        (tmp_path / "summaries.json").write_text(json.dumps({"ref0": "case zero"}))
        code = main(
            [
                "archive", "build",
                "--features",
                str(tmp_path / "ref0.pnav"), str(tmp_path / "ref1.pnav"), str(tmp_path / "ref2.pnav"),
                "--summaries", str(tmp_path / "summaries.json"),
                "--out", str(tmp_path / "index.pnar"),
            ]
        )
        assert code == 0
        built = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert built["cases"] == 3
        code = main(
            [
                "archive", "query",
                "--index", str(tmp_path / "index.pnar"),
                "--features", str(tmp_path / "ref1.pnav"),
                "--k", "2",
                "--exclude-self",
            ]
        )
        assert code == 0
        hits = json.loads(capsys.readouterr().out)
        assert len(hits) == 2
        assert all(h["slide_id"] != "ref1" for h in hits)


class TestAblateCli:
    def test_ablate_writes_csv_and_prints_check(self, slide_dir, tmp_path, capsys):
        code = main(
            [
                "ablate",
                "--spec", str(slide_dir / "spec.json"),
                "--seeds", "2",
                "--t-w", "24",
                "--out-csv", str(tmp_path / "grid.csv"),
                "--summary-out", str(tmp_path / "summary.json"),
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "ordering check:" in out
        lines = (tmp_path / "grid.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 2 * 6  # header + 2 seeds x (5 alphas + random)
        assert (tmp_path / "summary.json").exists()


class TestProcessLevel:
    def test_console_entrypoint_determinism(self, slide_dir, tmp_path):
        args = [
            sys.executable, "-m", "slidenav.cli",
            "run",
            "--features", str(slide_dir / "low.pnav"),
            "--high-features", str(slide_dir / "high.pnav"),
            "--question", "Where is the unusual region?",
            "--relevance", str(slide_dir / "relevance.csv"),
            "--t-w", "24",
        ]
        a = subprocess.run(args + ["--out", str(tmp_path / "a.json")], check=True)
        b = subprocess.run(args + ["--out", str(tmp_path / "b.json")], check=True)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
