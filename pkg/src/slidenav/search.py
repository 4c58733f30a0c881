"""Question-conditioned reranking inside the ROI pool.

Relevance never proposes candidates; it only reorders what the scan built.
Surprise and relevance are min-max normalized within the pool, fused with a
fixed coefficient alpha, and the top K_search entries become the search
targets. alpha=0 reproduces the surprise-only order, alpha=1 the
relevance-only order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .scan import RoiPool


class CoverageError(ValueError):
    """The relevance source does not cover every pooled tile."""

    def __init__(self, missing: list[int]):
        self.missing = sorted(int(i) for i in missing)
        super().__init__(f"relevance missing for tile indices {self.missing}")


@dataclass(frozen=True)
class RelevanceSource:
    """Precomputed question relevance: either raw scores per tile, or a
    question embedding plus per-tile patch embeddings for cosine scoring."""

    mode: str  # "embeddings" | "scores"
    question_embedding: Optional[np.ndarray] = None
    patch_embeddings: Optional[dict] = None  # tile_index -> vector
    scores: Optional[dict] = None  # tile_index -> float

    def __post_init__(self):
        if self.mode == "embeddings":
            if self.question_embedding is None or self.patch_embeddings is None:
                raise ValueError("embeddings mode needs question and patch embeddings")
        elif self.mode == "scores":
            if self.scores is None:
                raise ValueError("scores mode needs a score map")
        else:
            raise ValueError(f"unknown relevance mode {self.mode!r}")

    @classmethod
    def from_scores(cls, scores: dict) -> "RelevanceSource":
        return cls(mode="scores", scores=dict(scores))

    @classmethod
    def from_embeddings(cls, question_embedding, patch_embeddings: dict) -> "RelevanceSource":
        return cls(
            mode="embeddings",
            question_embedding=np.asarray(question_embedding, dtype=np.float64).ravel(),
            patch_embeddings=dict(patch_embeddings),
        )


@dataclass(frozen=True)
class TargetRow:
    roi_id: int
    tile_index: int
    level0_x: int
    level0_y: int
    fused: float
    sigma_hat: float
    rel_hat: float
    raw_sigma: float
    raw_rel: float

    def to_dict(self) -> dict:
        return {
            "roi_id": self.roi_id,
            "tile_index": self.tile_index,
            "level0_x": self.level0_x,
            "level0_y": self.level0_y,
            "fused": self.fused,
            "sigma_hat": self.sigma_hat,
            "rel_hat": self.rel_hat,
            "raw_sigma": self.raw_sigma,
            "raw_rel": self.raw_rel,
        }


@dataclass
class RankedTargets:
    targets: list  # list[TargetRow], fused descending
    alpha_used: float

    def __len__(self) -> int:
        return len(self.targets)

    def roi_ids(self) -> list[int]:
        return [t.roi_id for t in self.targets]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine with a zero-vector guard: degenerate inputs score 0, not error."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"embedding dims differ: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def relevance_scores(pool: RoiPool, source: RelevanceSource) -> dict[int, float]:
    """Raw relevance per roi_id; raises CoverageError listing uncovered tiles."""
    out: dict[int, float] = {}
    missing: list[int] = []
    if source.mode == "scores":
        for roi in pool.rois:
            if roi.tile_index in source.scores:
                out[roi.roi_id] = float(source.scores[roi.tile_index])
            else:
                missing.append(roi.tile_index)
    else:
        q = source.question_embedding
        for roi in pool.rois:
            emb = source.patch_embeddings.get(roi.tile_index)
            if emb is None:
                missing.append(roi.tile_index)
            else:
                out[roi.roi_id] = cosine_similarity(q, emb)
    if missing:
        raise CoverageError(missing)
    return out


def minmax_normalize(values: dict, epsilon: float) -> dict:
    """Pool-relative score: (s - min) / (max - min + epsilon).

    Tied pools map to all-zero rather than dividing by zero.
    """
    if not values:
        raise ValueError("cannot normalize an empty map")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    vals = np.array(list(values.values()), dtype=np.float64)
    lo = float(vals.min())
    hi = float(vals.max())
    denom = hi - lo + epsilon
    return {k: (float(v) - lo) / denom for k, v in values.items()}


def fuse_and_select(
    pool: RoiPool,
    rel: dict,
    alpha: float,
    k_search: int,
    epsilon: float,
) -> RankedTargets:
    """Normalize both signals within the pool, fuse, and take the top
    min(k_search, |pool|) targets.

    Sort order: fused descending, ties by raw sigma descending, then roi_id
    ascending. Targets are always a subset of the pool.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if k_search < 1:
        raise ValueError("k_search must be >= 1")
    missing = [r.roi_id for r in pool.rois if r.roi_id not in rel]
    if missing:
        raise CoverageError(missing)
    if not pool.rois:
        return RankedTargets(targets=[], alpha_used=float(alpha))

    sigma_raw = {r.roi_id: r.sigma for r in pool.rois}
    rel_raw = {r.roi_id: float(rel[r.roi_id]) for r in pool.rois}
    sigma_hat = minmax_normalize(sigma_raw, epsilon)
    rel_hat = minmax_normalize(rel_raw, epsilon)

    rows = []
    for r in pool.rois:
        fused = alpha * rel_hat[r.roi_id] + (1.0 - alpha) * sigma_hat[r.roi_id]
        rows.append(
            TargetRow(
                roi_id=r.roi_id,
                tile_index=r.tile_index,
                level0_x=r.level0_x,
                level0_y=r.level0_y,
                fused=float(fused),
                sigma_hat=float(sigma_hat[r.roi_id]),
                rel_hat=float(rel_hat[r.roi_id]),
                raw_sigma=float(r.sigma),
                raw_rel=rel_raw[r.roi_id],
            )
        )
    rows.sort(key=lambda t: (-t.fused, -t.raw_sigma, t.roi_id))
    k = min(int(k_search), len(rows))
    return RankedTargets(targets=rows[:k], alpha_used=float(alpha))
