"""End-to-end navigation run: route, scan, pool, rerank, readout, packet.

One run is deterministic given (inputs, seed). The scan is question-
independent, so a precomputed surprise field may be passed in when batching
several questions over one slide.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .archive import ArchiveIndex, retrieve, slide_embedding, summary_for
from .core import (
    DeterministicRng,
    EngineConfig,
    FeatureStream,
    QuestionSpec,
    derive_substream,
    validate_stream,
)
from .readout import AdjudicationPacket, assemble_evidence, build_packet
from .router import KeywordTable, RoutingDecision, default_keyword_table, route_question, split_rounds
from .scan import RoiPool, SurpriseField, nms_pool, scan_slide
from .search import CoverageError, RankedTargets, RelevanceSource, fuse_and_select, relevance_scores

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_COVERAGE = 3
EXIT_IO = 4


class PipelineError(RuntimeError):
    """A stage failure with the stage label and the process exit code."""

    def __init__(self, stage: str, message: str, exit_code: int):
        self.stage = stage
        self.exit_code = exit_code
        super().__init__(f"[{stage}] {message}")


@dataclass
class TrajectoryReport:
    """Everything one run produced: routing, stage digests, the packet, and
    budget counters. Timings are diagnostic and excluded from the canonical
    serialization so reports stay byte-identical across processes."""

    slide_id: str
    question: str
    routing: RoutingDecision
    surprise_summary: dict
    pool: RoiPool
    targets: RankedTargets
    target_rounds: list  # per-round target counts
    evidence_digest: dict
    packet: AdjudicationPacket
    counters: dict
    memory_digest: str
    warmup_truncated: bool
    timings: dict = field(default_factory=dict)
    # raw relevance per pooled roi_id; lets the selection stage be recomputed
    # offline from the report alone
    _pool_relevance: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        data = {
            "slide_id": self.slide_id,
            "question": self.question,
            "routing": self.routing.to_dict(),
            "surprise_summary": self.surprise_summary,
            "pool": {
                "spacing_used": self.pool.spacing_used,
                "pool_budget_used": self.pool.pool_budget_used,
                "rois": [
                    {
                        "roi_id": r.roi_id,
                        "tile_index": r.tile_index,
                        "level0_x": r.level0_x,
                        "level0_y": r.level0_y,
                        "sigma": r.sigma,
                        "relevance": self._pool_relevance.get(r.roi_id),
                    }
                    for r in self.pool.rois
                ],
            },
            "targets": {
                "alpha_used": self.targets.alpha_used,
                "rounds": self.target_rounds,
                "rows": [t.to_dict() for t in self.targets.targets],
            },
            "evidence": self.evidence_digest,
            "packet": self.packet.to_dict(),
            "counters": self.counters,
            "memory_digest": self.memory_digest,
            "warmup_truncated": self.warmup_truncated,
        }
        if include_timings:
            data["timings"] = self.timings
        return data

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), sort_keys=True, indent=2) + "\n"


PoolBuilder = Callable[[SurpriseField, float, int], RoiPool]


def scan_for_slide(
    low_stream: FeatureStream, cfg: EngineConfig, rng: DeterministicRng
) -> SurpriseField:
    """The slide scan with the canonical rng derivation used by run()."""
    slide_rng = derive_substream(rng, f"slide:{low_stream.slide_id}")
    return scan_slide(low_stream, cfg, derive_substream(slide_rng, "scan"))


def _select_targets(
    pool: RoiPool,
    rel: dict,
    cfg: EngineConfig,
    k_search: int,
) -> tuple[RankedTargets, list[int]]:
    """Single- or multi-round selection. Multi-round re-enters the selector on
    the residual pool with evenly split budgets (fused scores are then
    comparable only within a round)."""
    if cfg.rounds <= 1 or len(pool) == 0:
        selected = fuse_and_select(pool, rel, cfg.alpha, k_search, cfg.epsilon_norm)
        return selected, [len(selected)]
    budgets = split_rounds(k_search, cfg.rounds)
    all_rows = []
    round_counts = []
    remaining = list(pool.rois)
    for budget in budgets:
        if budget <= 0 or not remaining:
            round_counts.append(0)
            continue
        sub = RoiPool(
            rois=remaining,
            spacing_used=pool.spacing_used,
            pool_budget_used=pool.pool_budget_used,
        )
        picked = fuse_and_select(sub, rel, cfg.alpha, budget, cfg.epsilon_norm)
        picked_ids = set(picked.roi_ids())
        all_rows.extend(picked.targets)
        round_counts.append(len(picked))
        remaining = [r for r in remaining if r.roi_id not in picked_ids]
    return RankedTargets(targets=all_rows, alpha_used=cfg.alpha), round_counts


def run(
    low_stream: FeatureStream,
    high_stream: Optional[FeatureStream],
    question: QuestionSpec,
    relevance: RelevanceSource,
    archive: Optional[ArchiveIndex],
    cfg: EngineConfig,
    rng: Optional[DeterministicRng] = None,
    *,
    keyword_table: Optional[KeywordTable] = None,
    scan_field: Optional[SurpriseField] = None,
    pool_builder: Optional[PoolBuilder] = None,
    neighborhood_multiplier: float = 1.0,
) -> TrajectoryReport:
    """Execute the full navigation routine and return the trajectory report.

    Stage order: categorize/route -> scan -> NMS pool -> relevance ->
    fuse/select -> evidence readout -> optional archive retrieval -> packet.
    Module failures surface as PipelineError with a stage label.
    """
    timings: dict[str, float] = {}

    def staged(stage, fn):
        t0 = time.perf_counter()
        out = fn()
        timings[stage] = time.perf_counter() - t0
        return out

    violations = staged("validate", lambda: validate_stream(low_stream))
    if violations:
        raise PipelineError("validate", "; ".join(violations), EXIT_VALIDATION)
    if high_stream is not None:
        hv = validate_stream(high_stream)
        if hv:
            raise PipelineError("validate", "; ".join(hv), EXIT_VALIDATION)
        if high_stream.slide_id != low_stream.slide_id:
            raise PipelineError(
                "validate",
                f"stream slide ids differ: {low_stream.slide_id!r} vs {high_stream.slide_id!r}",
                EXIT_VALIDATION,
            )

    if rng is None:
        rng = DeterministicRng(cfg.seed)
    slide_rng = derive_substream(rng, f"slide:{low_stream.slide_id}")
    table = keyword_table if keyword_table is not None else default_keyword_table()

    routing = staged(
        "route",
        lambda: route_question(
            question, low_stream.tile_stride_level0, low_stream.slide_diag_level0, cfg, table
        ),
    )

    if scan_field is not None:
        field_ = scan_field
        timings["scan"] = 0.0
    else:
        field_ = staged(
            "scan", lambda: scan_slide(low_stream, cfg, derive_substream(slide_rng, "scan"))
        )

    builder = pool_builder if pool_builder is not None else nms_pool
    pool = staged("pool", lambda: builder(field_, routing.rho, routing.k_pool))

    try:
        rel = staged("relevance", lambda: relevance_scores(pool, relevance))
    except CoverageError as e:
        raise PipelineError("relevance", str(e), EXIT_COVERAGE) from e

    targets, round_counts = staged(
        "select", lambda: _select_targets(pool, rel, cfg, routing.k_search)
    )

    evidence = staged(
        "readout",
        lambda: assemble_evidence(
            targets,
            high_stream,
            cfg,
            derive_substream(slide_rng, "readout"),
            low_stride=low_stream.tile_stride_level0,
            neighborhood_multiplier=neighborhood_multiplier,
        ),
    )

    references = []
    if archive is not None and cfg.archive_k > 0:
        def _retrieve():
            emb = slide_embedding(low_stream)
            hits = retrieve(archive, emb, cfg.archive_k, exclude_id=low_stream.slide_id)
            return [(sid, sim, summary_for(archive, sid)) for sid, sim in hits]

        references = staged("archive", _retrieve)

    packet = staged(
        "packet",
        lambda: build_packet(
            question.text, routing, pool, targets, evidence, field_.memory_final, references, cfg
        ),
    )

    state = field_.memory_final
    counters = {
        "tiles_scanned": field_.n_tiles,
        "warmup_steps": len(state.warmup_scores),
        "updates": state.update_count,
        "decays": state.decay_count,
        "perceptor_slots_used": evidence.total_patches,
    }
    mean, std, high_fraction = (
        packet.navigation_summary["mean"],
        packet.navigation_summary["std"],
        packet.navigation_summary["high_fraction"],
    )
    report = TrajectoryReport(
        slide_id=low_stream.slide_id,
        question=question.text,
        routing=routing,
        surprise_summary={"mean": mean, "std": std, "high_fraction": high_fraction},
        pool=pool,
        targets=targets,
        target_rounds=round_counts,
        evidence_digest={
            "total_patches": evidence.total_patches,
            "entries": [e.to_dict() for e in evidence.entries],
        },
        packet=packet,
        counters=counters,
        memory_digest=state.digest(),
        warmup_truncated=field_.warmup_truncated,
        timings=timings,
    )
    report._pool_relevance = dict(rel)
    return report
