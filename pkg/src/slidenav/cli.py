"""Command-line interface.

Subcommands: gen (synthetic slides), scan (surprise field + exports), run
(full pipeline -> trajectory JSON), ablate (policy/alpha grid -> CSV +
ordering check), archive (build/query the reference index), bench
(throughput report). Config flags mirror EngineConfig field names; a JSON
config file may set any field, with explicit flags taking precedence.

Exit codes: 0 success, 2 validation failure, 3 relevance coverage failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .archive import ArchiveIndex, add_case, load_archive, retrieve, save_archive, slide_embedding
from .core import DeterministicRng, EngineConfig, QuestionSpec, validate_stream
from .formats import (
    FormatError,
    read_feature_stream,
    read_patch_embeddings,
    read_question_embedding,
    read_relevance_scores_csv,
    write_feature_stream,
    write_relevance_scores_csv,
)
from .harness import SyntheticSpec, ablation_grid, default_synthetic_spec, generate
from .memory import summary_stats
from .pipeline import EXIT_IO, EXIT_VALIDATION, PipelineError, run, scan_for_slide
from .readout import render_navigation_summary
from .router import default_keyword_table, load_keyword_table
from .scan import field_to_csv, field_to_pgm
from .search import RelevanceSource

_INT_FIELDS = {"d", "hidden", "t_w", "k0", "r_max", "pool_floor", "t_per_roi", "v_max",
               "archive_k", "seed", "rounds"}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON config file")
    for f in dc_fields(EngineConfig):
        flag = "--" + f.name.replace("_", "-")
        typ = int if f.name in _INT_FIELDS else float
        p.add_argument(flag, type=typ, default=None, dest=f"cfg_{f.name}")


def _build_config(args, stream_d: int | None = None) -> EngineConfig:
    """defaults -> config file -> explicit flags; d/hidden fall back to the
    stream's dimension when not pinned anywhere else."""
    data = EngineConfig().to_dict()
    explicit = set()
    if args.config:
        file_data = json.loads(Path(args.config).read_text())
        unknown = set(file_data) - set(data)
        if unknown:
            raise PipelineError("config", f"unknown config fields {sorted(unknown)}", EXIT_VALIDATION)
        data.update(file_data)
        explicit |= set(file_data)
    for f in dc_fields(EngineConfig):
        val = getattr(args, f"cfg_{f.name}", None)
        if val is not None:
            data[f.name] = val
            explicit.add(f.name)
    if stream_d is not None and "d" not in explicit:
        data["d"] = stream_d
        if "hidden" not in explicit:
            data["hidden"] = stream_d
    return EngineConfig.from_dict(data)


def _load_relevance(args) -> RelevanceSource:
    if args.relevance_mode == "scores":
        return RelevanceSource.from_scores(read_relevance_scores_csv(args.relevance))
    if not args.question_embedding:
        raise PipelineError(
            "relevance", "--question-embedding is required in embeddings mode", EXIT_VALIDATION
        )
    return RelevanceSource.from_embeddings(
        read_question_embedding(args.question_embedding),
        read_patch_embeddings(args.relevance),
    )


def _cmd_gen(args) -> int:
    if args.spec:
        spec = SyntheticSpec.from_json(Path(args.spec).read_text())
    else:
        spec = default_synthetic_spec()
    if args.seed is not None:
        from dataclasses import replace

        spec = replace(spec, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    low, high, relevance, truth = generate(spec)
    write_feature_stream(low, out / "low.pnav")
    write_feature_stream(high, out / "high.pnav")
    write_relevance_scores_csv(relevance.scores, out / "relevance.csv")
    (out / "truth.json").write_text(json.dumps(truth.to_dict(), sort_keys=True, indent=2) + "\n")
    (out / "spec.json").write_text(spec.to_json())
    print(
        json.dumps(
            {
                "out_dir": str(out),
                "slide_id": truth.slide_id,
                "low_tiles": low.n_tiles,
                "high_tiles": high.n_tiles,
                "anomaly_fraction": truth.anomaly_fraction,
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_scan(args) -> int:
    stream = read_feature_stream(args.features, slide_id=args.slide_id)
    cfg = _build_config(args, stream_d=stream.d)
    violations = validate_stream(stream)
    if violations:
        raise PipelineError("validate", "; ".join(violations), EXIT_VALIDATION)
    field = scan_for_slide(stream, cfg, DeterministicRng(cfg.seed))
    if args.out_csv:
        field_to_csv(field, args.out_csv)
    if args.out_pgm:
        field_to_pgm(field, args.out_pgm)
    mean, std, high_fraction = summary_stats(field.memory_final)
    summary = {
        "slide_id": field.slide_id,
        "tiles": field.n_tiles,
        "threshold": field.threshold,
        "mean": mean,
        "std": std,
        "high_fraction": high_fraction,
        "warmup_truncated": field.warmup_truncated,
    }
    if args.summary_out:
        Path(args.summary_out).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_run(args) -> int:
    low = read_feature_stream(args.features, slide_id=args.slide_id)
    high = None
    if args.high_features:
        high = read_feature_stream(args.high_features, slide_id=low.slide_id)
    cfg = _build_config(args, stream_d=low.d)
    question = QuestionSpec(text=args.question, category_override=args.category)
    relevance = _load_relevance(args)
    archive = load_archive(args.archive) if args.archive else None
    table = load_keyword_table(args.keywords) if args.keywords else default_keyword_table()
    report = run(
        low,
        high,
        question,
        relevance,
        archive,
        cfg,
        keyword_table=table,
        neighborhood_multiplier=args.neighborhood_multiplier,
    )
    text = report.to_json(include_timings=args.emit_timings)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.packet_out:
        Path(args.packet_out).write_text(
            json.dumps(report.packet.to_dict(), sort_keys=True, indent=2) + "\n"
        )
    if args.print_summary:
        print(render_navigation_summary(report.packet))
    return 0


def _cmd_ablate(args) -> int:
    if args.spec:
        spec = SyntheticSpec.from_json(Path(args.spec).read_text())
    else:
        spec = default_synthetic_spec()
    cfg = _build_config(args, stream_d=spec.d)
    seeds = list(range(args.seed_start, args.seed_start + args.seeds))
    result = ablation_grid(spec, cfg, seeds)
    if args.out_csv:
        result.to_csv(args.out_csv)
    for (policy, alpha), stats in sorted(result.summary.items()):
        print(
            f"{policy} alpha={alpha:.2f} target_recall={stats['target_recall']:.4f} "
            f"pool_recall={stats['pool_recall']:.4f} evidence_recall={stats['evidence_recall']:.4f}"
        )
    check = result.ordering_check
    if check["skipped"]:
        print("ordering check: SKIPPED (no anomalies)")
    else:
        print(f"ordering check: {'PASS' if check['passed'] else 'FAIL'} {check['details']}")
    if args.summary_out:
        Path(args.summary_out).write_text(
            json.dumps(
                {
                    "summary": {f"{p}@{a}": s for (p, a), s in sorted(result.summary.items())},
                    "ordering_check": check,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n"
        )
    return 0


def _cmd_archive(args) -> int:
    if args.archive_cmd == "build":
        summaries = {}
        if args.summaries:
            summaries = json.loads(Path(args.summaries).read_text())
        index = None
        for fpath in args.features:
            stream = read_feature_stream(fpath)
            if index is None:
                index = ArchiveIndex(d=stream.d)
            emb = slide_embedding(stream)
            add_case(index, stream.slide_id, emb, summaries.get(stream.slide_id, ""))
        if index is None:
            raise PipelineError("archive", "no feature files given", EXIT_VALIDATION)
        save_archive(index, args.out)
        print(json.dumps({"cases": len(index), "d": index.d, "out": args.out}, sort_keys=True))
        return 0
    index = load_archive(args.index)
    stream = read_feature_stream(args.features)
    hits = retrieve(
        index,
        slide_embedding(stream),
        args.k,
        exclude_id=stream.slide_id if args.exclude_self else None,
    )
    print(json.dumps([{"slide_id": s, "similarity": sim} for s, sim in hits], indent=2))
    return 0


def _cmd_bench(args) -> int:
    report = bench_mod.run_benchmarks(
        d=args.d, hidden=args.hidden, score_tiles=args.score_tiles, scan_tiles=args.scan_tiles,
        seed=args.seed,
    )
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.json_out:
        Path(args.json_out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slidenav", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    pg = sub.add_parser("gen", help="generate a synthetic slide with planted anomalies")
    pg.add_argument("--spec", type=str, default=None, help="SyntheticSpec JSON (default spec if omitted)")
    pg.add_argument("--seed", type=int, default=None)
    pg.add_argument("--out-dir", type=str, required=True)
    pg.set_defaults(fn=_cmd_gen)

    ps = sub.add_parser("scan", help="surprise field for one feature file")
    ps.add_argument("--features", type=str, required=True)
    ps.add_argument("--slide-id", type=str, default=None)
    ps.add_argument("--out-csv", type=str, default=None)
    ps.add_argument("--out-pgm", type=str, default=None)
    ps.add_argument("--summary-out", type=str, default=None)
    _add_config_flags(ps)
    ps.set_defaults(fn=_cmd_scan)

    pr = sub.add_parser("run", help="full navigation pipeline -> trajectory report JSON")
    pr.add_argument("--features", type=str, required=True, help="low-magnification feature file")
    pr.add_argument("--high-features", type=str, default=None)
    pr.add_argument("--slide-id", type=str, default=None)
    pr.add_argument("--question", type=str, required=True)
    pr.add_argument("--category", type=str, default=None,
                    choices=["morphology", "clinical", "other"])
    pr.add_argument("--relevance", type=str, required=True)
    pr.add_argument("--relevance-mode", type=str, default="scores",
                    choices=["scores", "embeddings"])
    pr.add_argument("--question-embedding", type=str, default=None)
    pr.add_argument("--archive", type=str, default=None)
    pr.add_argument("--keywords", type=str, default=None)
    pr.add_argument("--neighborhood-multiplier", type=float, default=1.0)
    pr.add_argument("--out", type=str, default=None, help="report path (stdout if omitted)")
    pr.add_argument("--packet-out", type=str, default=None)
    pr.add_argument("--emit-timings", action="store_true")
    pr.add_argument("--print-summary", action="store_true",
                    help="also print the prose navigation summary")
    _add_config_flags(pr)
    pr.set_defaults(fn=_cmd_run)

    pa = sub.add_parser("ablate", help="policy/alpha grid on a synthetic spec")
    pa.add_argument("--spec", type=str, default=None)
    pa.add_argument("--seeds", type=int, default=20)
    pa.add_argument("--seed-start", type=int, default=0)
    pa.add_argument("--out-csv", type=str, default=None)
    pa.add_argument("--summary-out", type=str, default=None)
    _add_config_flags(pa)
    pa.set_defaults(fn=_cmd_ablate)

    pc = sub.add_parser("archive", help="build or query the reference archive")
    arc = pc.add_subparsers(dest="archive_cmd", required=True)
    pb = arc.add_parser("build")
    pb.add_argument("--features", type=str, nargs="+", required=True)
    pb.add_argument("--summaries", type=str, default=None, help="JSON map slide_id -> summary")
    pb.add_argument("--out", type=str, required=True)
    pq = arc.add_parser("query")
    pq.add_argument("--index", type=str, required=True)
    pq.add_argument("--features", type=str, required=True)
    pq.add_argument("--k", type=int, default=3)
    pq.add_argument("--exclude-self", action="store_true")
    pc.set_defaults(fn=_cmd_archive)

    pbn = sub.add_parser("bench", help="throughput measurements")
    pbn.add_argument("--d", type=int, default=768)
    pbn.add_argument("--hidden", type=int, default=768)
    pbn.add_argument("--score-tiles", type=int, default=20000)
    pbn.add_argument("--scan-tiles", type=int, default=100000)
    pbn.add_argument("--seed", type=int, default=0)
    pbn.add_argument("--json-out", type=str, default=None)
    pbn.set_defaults(fn=_cmd_bench)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
