"""High-magnification evidence readout and adjudication-packet assembly.

Each selected target gets a fresh local memory over its high-magnification
neighborhood (never touching the slide-level memory), ranks patches by their
observation-time surprise, and contributes up to t_per_roi entries; the global
evidence total is capped at v_max in target-rank order. When high features are
absent the target's own low-magnification tile stands in as fallback evidence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DeterministicRng, EngineConfig, FeatureStream, derive_substream
from .memory import MemoryState, init_memory, local_config, observe_tile, summary_stats
from .router import RoutingDecision
from .scan import RoiPool
from .search import RankedTargets

LEVEL_HIGH_EVIDENCE = "high"
LEVEL_LOW_FALLBACK = "low_fallback"


@dataclass(frozen=True)
class EvidenceEntry:
    roi_id: int
    patch_tile_index: int
    level: str  # "high" | "low_fallback"
    local_sigma: float
    rank_in_roi: int
    level0_x: int
    level0_y: int

    def to_dict(self) -> dict:
        return {
            "roi_id": self.roi_id,
            "patch_tile_index": self.patch_tile_index,
            "level": self.level,
            "local_sigma": self.local_sigma,
            "rank_in_roi": self.rank_in_roi,
            "level0_x": self.level0_x,
            "level0_y": self.level0_y,
        }


@dataclass
class EvidenceSet:
    entries: list  # list[EvidenceEntry], grouped by ROI in target-rank order
    total_patches: int

    def per_roi_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.roi_id] = counts.get(e.roi_id, 0) + 1
        return counts


@dataclass
class AdjudicationPacket:
    """Terminal output: question, scan digest, regional evidence references,
    and optional retrieved reference context for a downstream answerer."""

    question: str
    category: str
    navigation_summary: dict  # mean, std, high_fraction, candidate_count
    evidence: list  # list of evidence entry dicts with coordinates and scores
    reference_context: list  # list of {slide_id, similarity, summary_text}
    config_echo: dict
    seed: int
    scan_memory_digest: str

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "category": self.category,
            "navigation_summary": self.navigation_summary,
            "evidence": self.evidence,
            "reference_context": self.reference_context,
            "config_echo": self.config_echo,
            "seed": self.seed,
            "scan_memory_digest": self.scan_memory_digest,
        }


def local_warmup_length(t_w: int, neighborhood_size: int) -> int:
    """ROI-size-adaptive warm-up: min(max(t_w // 5, 5), |neighborhood|)."""
    return min(max(t_w // 5, 5), neighborhood_size)


def local_neighborhood(
    center_x: float,
    center_y: float,
    high_stream: FeatureStream,
    side: float,
) -> np.ndarray:
    """High-tile indices whose level-0 centers fall inside the axis-aligned
    square of the given side centered on the ROI, in row-major order."""
    half = side / 2.0
    xs = high_stream.level0_x.astype(np.float64)
    ys = high_stream.level0_y.astype(np.float64)
    inside = (np.abs(xs - center_x) <= half) & (np.abs(ys - center_y) <= half)
    idx = np.nonzero(inside)[0]
    order = np.lexsort((high_stream.grid_x[idx], high_stream.grid_y[idx]))
    return idx[order]


def select_local_evidence(
    neigh: np.ndarray,
    high_stream: FeatureStream,
    cfg: EngineConfig,
    rng: DeterministicRng,
) -> list[tuple[int, float]]:
    """Top-T patches of one neighborhood by a fresh local memory's surprise.

    The local memory has its own warm-up schedule and never reads or writes
    the slide-level state. Ties break toward the earlier tile index.
    """
    n = len(neigh)
    if n == 0:
        return []
    lcfg = local_config(cfg, local_warmup_length(cfg.t_w, n))
    state = init_memory(lcfg, rng)
    sigmas = np.empty(n, dtype=np.float64)
    for i, idx in enumerate(neigh):
        z = high_stream.features[idx].astype(np.float64)
        sigmas[i], _ = observe_tile(state, z, lcfg)
    order = np.lexsort((neigh, -sigmas))
    top = order[: min(cfg.t_per_roi, n)]
    return [(int(neigh[i]), float(sigmas[i])) for i in top]


def assemble_evidence(
    targets: RankedTargets,
    high_stream: Optional[FeatureStream],
    cfg: EngineConfig,
    rng: DeterministicRng,
    low_stride: float,
    neighborhood_multiplier: float = 1.0,
) -> EvidenceSet:
    """Collect per-target evidence in fused-rank order under the global cap.

    Entries stop as soon as the total reaches v_max; the final target may be
    partially represented. Targets whose neighborhood is empty (or when no
    high stream exists) contribute one low_fallback entry referencing their
    own low-magnification tile, scored by their scan-time surprise.
    """
    side = low_stride * neighborhood_multiplier
    entries: list[EvidenceEntry] = []
    for t in targets.targets:
        if len(entries) >= cfg.v_max:
            break
        picks: list[tuple[int, float]] = []
        if high_stream is not None:
            neigh = local_neighborhood(t.level0_x, t.level0_y, high_stream, side)
            if len(neigh) > 0:
                roi_rng = derive_substream(rng, f"roi:{t.roi_id}")
                picks = select_local_evidence(neigh, high_stream, cfg, roi_rng)
        if picks:
            for rank, (idx, sigma) in enumerate(picks, start=1):
                if len(entries) >= cfg.v_max:
                    break
                entries.append(
                    EvidenceEntry(
                        roi_id=t.roi_id,
                        patch_tile_index=idx,
                        level=LEVEL_HIGH_EVIDENCE,
                        local_sigma=sigma,
                        rank_in_roi=rank,
                        level0_x=int(high_stream.level0_x[idx]),
                        level0_y=int(high_stream.level0_y[idx]),
                    )
                )
        else:
            entries.append(
                EvidenceEntry(
                    roi_id=t.roi_id,
                    patch_tile_index=t.tile_index,
                    level=LEVEL_LOW_FALLBACK,
                    local_sigma=t.raw_sigma,
                    rank_in_roi=1,
                    level0_x=t.level0_x,
                    level0_y=t.level0_y,
                )
            )
    return EvidenceSet(entries=entries, total_patches=len(entries))


def build_packet(
    question: str,
    routing: RoutingDecision,
    pool: RoiPool,
    targets: RankedTargets,
    evidence: EvidenceSet,
    slide_memory: MemoryState,
    references: list,
    cfg: EngineConfig,
) -> AdjudicationPacket:
    """Assemble the terminal adjudication packet from one pipeline run."""
    mean, std, high_fraction = summary_stats(slide_memory)
    target_ids = set(targets.roi_ids())
    for e in evidence.entries:
        if e.roi_id not in target_ids:
            raise ValueError(f"evidence roi {e.roi_id} is not a selected target")
    return AdjudicationPacket(
        question=question,
        category=routing.category,
        navigation_summary={
            "mean": mean,
            "std": std,
            "high_fraction": high_fraction,
            "candidate_count": len(pool),
        },
        evidence=[e.to_dict() for e in evidence.entries],
        reference_context=[
            {"slide_id": sid, "similarity": sim, "summary_text": text}
            for (sid, sim, text) in references
        ],
        config_echo=cfg.to_dict(),
        seed=cfg.seed,
        scan_memory_digest=slide_memory.digest(),
    )


def render_navigation_summary(packet: AdjudicationPacket) -> str:
    """Prose form of the navigation summary for direct prompt insertion."""
    s = packet.navigation_summary
    return (
        "Navigation Summary. Low-magnification scan statistics: "
        f"mean {s['mean']:.4f}, standard deviation {s['std']:.4f}, "
        f"high-surprise fraction {s['high_fraction']:.4f}, and "
        f"{s['candidate_count']} candidate regions after thresholding and NMS. "
        "Use this as slide-level context, but base the final answer on the "
        "regional evidence below."
    )
