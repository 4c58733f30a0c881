"""Synthetic desk-scale harness: planted-anomaly slides, policy baselines,
recall metrics, and the ablation grid.

Slides are mixture-of-Gaussians backgrounds with disk-shaped anomaly blobs;
each blob adds one fixed unit direction scaled by its shift magnitude, at both
magnifications. Blobs marked named_by_question carry relevance signal 1 (plus
noise); unnamed blobs get none, realizing the decisive-but-unnamed failure
mode the engine exists to cover. Recall is blob coverage: the fraction of
planted blobs containing the center of at least one selected item.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import binomtest

from .core import DeterministicRng, EngineConfig, FeatureStream, QuestionSpec, derive_substream
from .pipeline import TrajectoryReport, run, scan_for_slide
from .scan import RoiEntry, RoiPool, SurpriseField, _greedy_keep
from .search import RelevanceSource

POLICY_FULL = "full"
POLICY_SURPRISE = "surprise_only"
POLICY_RELEVANCE = "relevance_only"
POLICY_RANDOM = "random_pool"
POLICIES = (POLICY_FULL, POLICY_SURPRISE, POLICY_RELEVANCE, POLICY_RANDOM)

ALPHA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)

# keyword-free, so the router sends harness runs down the "other" branch
DEFAULT_QUESTION = QuestionSpec("What stands out in this slide?")


@dataclass(frozen=True)
class BackgroundSpec:
    num_modes: int = 3
    mode_scale: float = 0.5


@dataclass(frozen=True)
class AnomalySpec:
    center_frac: tuple
    radius_tiles: int
    shift_magnitude: float
    named_by_question: bool


@dataclass(frozen=True)
class SyntheticSpec:
    grid_w: int
    grid_h: int
    d: int
    background: BackgroundSpec
    anomalies: tuple
    relevance_noise: float = 0.05
    seed: int = 0
    high_refine: int = 4
    tile_stride_level0: float = 4096.0

    def to_dict(self) -> dict:
        data = asdict(self)
        data["anomalies"] = [asdict(a) for a in self.anomalies]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        data["background"] = BackgroundSpec(**data["background"])
        data["anomalies"] = tuple(
            AnomalySpec(
                center_frac=tuple(a["center_frac"]),
                radius_tiles=a["radius_tiles"],
                shift_magnitude=a["shift_magnitude"],
                named_by_question=a["named_by_question"],
            )
            for a in data["anomalies"]
        )
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        return cls.from_dict(json.loads(text))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def default_synthetic_spec(seed: int = 0) -> SyntheticSpec:
    """100x100 grid, d=64, four ~250-tile blobs (two named, two unnamed),
    roughly 10% anomaly tiles. Named blobs shift less, so question relevance
    genuinely rescues them; unnamed blobs shift more, so the scan prior alone
    finds them."""
    return SyntheticSpec(
        grid_w=100,
        grid_h=100,
        d=64,
        background=BackgroundSpec(num_modes=3, mode_scale=0.5),
        anomalies=(
            AnomalySpec((0.25, 0.25), 9, 2.25, True),
            AnomalySpec((0.75, 0.75), 9, 2.25, True),
            AnomalySpec((0.75, 0.25), 9, 4.0, False),
            AnomalySpec((0.25, 0.75), 9, 4.0, False),
        ),
        relevance_noise=0.05,
        seed=seed,
    )


@dataclass(frozen=True)
class BlobTruth:
    center_tile: tuple
    radius_tiles: int
    named: bool
    low_tiles: frozenset
    high_tiles: frozenset


@dataclass(frozen=True)
class GroundTruth:
    slide_id: str
    blobs: tuple
    low_anomaly: frozenset
    high_anomaly: frozenset
    anomaly_fraction: float

    def to_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "anomaly_fraction": self.anomaly_fraction,
            "blobs": [
                {
                    "center_tile": list(b.center_tile),
                    "radius_tiles": b.radius_tiles,
                    "named": b.named,
                    "low_tiles": sorted(b.low_tiles),
                    "high_tiles": sorted(b.high_tiles),
                }
                for b in self.blobs
            ],
        }


def _blob_tiles(spec: SyntheticSpec, anomaly: AnomalySpec) -> tuple[tuple, frozenset]:
    cx = round(anomaly.center_frac[0] * (spec.grid_w - 1))
    cy = round(anomaly.center_frac[1] * (spec.grid_h - 1))
    r = anomaly.radius_tiles
    if cx - r < 0 or cx + r > spec.grid_w - 1 or cy - r < 0 or cy + r > spec.grid_h - 1:
        raise ValueError(
            f"anomaly at {anomaly.center_frac} radius {r} does not fit the grid"
        )
    tiles = set()
    for gy in range(cy - r, cy + r + 1):
        for gx in range(cx - r, cx + r + 1):
            if (gx - cx) ** 2 + (gy - cy) ** 2 <= r * r:
                tiles.add(gy * spec.grid_w + gx)
    return (cx, cy), frozenset(tiles)


def generate(
    spec: SyntheticSpec,
) -> tuple[FeatureStream, FeatureStream, RelevanceSource, GroundTruth]:
    """Deterministic synthetic slide: low stream, 4x4-refined (by default)
    high stream with matching plants, scores-mode relevance over all low
    tiles, and the ground-truth anomaly sets."""
    if spec.grid_w < 1 or spec.grid_h < 1 or spec.d < 1:
        raise ValueError("grid and d must be positive")
    if spec.background.num_modes < 1:
        raise ValueError("need at least one background mode")

    blob_geo = [_blob_tiles(spec, a) for a in spec.anomalies]
    for i in range(len(blob_geo)):
        for j in range(i + 1, len(blob_geo)):
            if blob_geo[i][1] & blob_geo[j][1]:
                raise ValueError(f"anomaly blobs {i} and {j} overlap")

    root = DeterministicRng(spec.seed)
    stride = spec.tile_stride_level0
    slide_id = f"synthetic-{spec.seed}"
    n_low = spec.grid_w * spec.grid_h

    modes = derive_substream(root, "gen:modes").generator().standard_normal(
        (spec.background.num_modes, spec.d)
    )
    directions = derive_substream(root, "gen:directions").generator().standard_normal(
        (max(1, len(spec.anomalies)), spec.d)
    )
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    directions = directions / np.where(norms == 0, 1.0, norms)

    def build_level(label: str, grid_w: int, grid_h: int, level_stride: float, level: str,
                    anomaly_sets: list) -> tuple[FeatureStream, np.ndarray]:
        n = grid_w * grid_h
        gen_assign = derive_substream(root, f"gen:assign-{label}").generator()
        gen_noise = derive_substream(root, f"gen:noise-{label}").generator()
        assign = gen_assign.integers(0, spec.background.num_modes, size=n)
        feats = modes[assign] + spec.background.mode_scale * gen_noise.standard_normal(
            (n, spec.d)
        )
        blob_of = np.full(n, -1, dtype=np.int64)
        for b, tiles in enumerate(anomaly_sets):
            idx = np.fromiter(tiles, dtype=np.int64)
            feats[idx] += spec.anomalies[b].shift_magnitude * directions[b]
            blob_of[idx] = b
        gy, gx = np.divmod(np.arange(n), grid_w)
        half = int(level_stride) // 2
        stream = FeatureStream(
            level=level,
            d=spec.d,
            slide_id=slide_id,
            # both levels share the level-0 frame, so one bounding-box diagonal
            slide_diag_level0=math.hypot(spec.grid_w * stride, spec.grid_h * stride),
            tile_stride_level0=level_stride,
            grid_x=gx.astype(np.uint32),
            grid_y=gy.astype(np.uint32),
            level0_x=(gx * int(level_stride) + half).astype(np.uint64),
            level0_y=(gy * int(level_stride) + half).astype(np.uint64),
            features=feats.astype(np.float32),
        )
        return stream, blob_of

    low_sets = [tiles for _, tiles in blob_geo]
    low_stream, _ = build_level("low", spec.grid_w, spec.grid_h, stride, "low", low_sets)

    refine = spec.high_refine
    high_w = spec.grid_w * refine
    high_sets = []
    for _, tiles in blob_geo:
        high_tiles = set()
        for t in tiles:
            gy, gx = divmod(t, spec.grid_w)
            for dy in range(refine):
                for dx in range(refine):
                    high_tiles.add((gy * refine + dy) * high_w + (gx * refine + dx))
        high_sets.append(frozenset(high_tiles))
    high_stream, _ = build_level(
        "high", high_w, spec.grid_h * refine, stride / refine, "high", high_sets
    )

    named_low = set()
    for (_, tiles), anomaly in zip(blob_geo, spec.anomalies):
        if anomaly.named_by_question:
            named_low |= tiles
    noise = derive_substream(root, "gen:relevance").generator().standard_normal(n_low)
    base = np.zeros(n_low)
    if named_low:
        base[np.fromiter(named_low, dtype=np.int64)] = 1.0
    scores = base + spec.relevance_noise * noise
    relevance = RelevanceSource.from_scores(
        {int(i): float(scores[i]) for i in range(n_low)}
    )

    blobs = tuple(
        BlobTruth(
            center_tile=center,
            radius_tiles=a.radius_tiles,
            named=a.named_by_question,
            low_tiles=tiles,
            high_tiles=high_sets[b],
        )
        for b, ((center, tiles), a) in enumerate(zip(blob_geo, spec.anomalies))
    )
    low_anomaly = frozenset().union(*low_sets) if low_sets else frozenset()
    high_anomaly = frozenset().union(*high_sets) if high_sets else frozenset()
    truth = GroundTruth(
        slide_id=slide_id,
        blobs=blobs,
        low_anomaly=low_anomaly,
        high_anomaly=high_anomaly,
        anomaly_fraction=len(low_anomaly) / n_low,
    )
    return low_stream, high_stream, relevance, truth


@dataclass(frozen=True)
class EvalResult:
    policy: str
    alpha: float
    seed: int
    pool_recall: float
    target_recall: float
    evidence_recall: float
    budget_used: dict

    def to_row(self) -> dict:
        return {
            "policy": self.policy,
            "alpha": self.alpha,
            "seed": self.seed,
            "pool_recall": self.pool_recall,
            "target_recall": self.target_recall,
            "evidence_recall": self.evidence_recall,
            "pool_size": self.budget_used["pool"],
            "target_count": self.budget_used["targets"],
            "evidence_total": self.budget_used["evidence"],
        }


def _blob_coverage(blobs: Sequence[BlobTruth], low_hits: set, high_hits: set) -> float:
    if not blobs:
        return 0.0
    covered = 0
    for b in blobs:
        if (low_hits & b.low_tiles) or (high_hits & b.high_tiles):
            covered += 1
    return covered / len(blobs)


def evaluate(
    report: TrajectoryReport,
    truth: GroundTruth,
    policy: str = POLICY_FULL,
    alpha: Optional[float] = None,
) -> EvalResult:
    """Blob-coverage recall of the pool, the targets, and the evidence set.

    An ROI hits a blob when its center tile belongs to the blob; high-level
    evidence counts against the high-magnification plants and low fallbacks
    against the low plants.
    """
    if report.slide_id != truth.slide_id:
        raise ValueError(
            f"report slide {report.slide_id!r} does not match truth {truth.slide_id!r}"
        )
    pool_tiles = {r.tile_index for r in report.pool.rois}
    target_tiles = {t.tile_index for t in report.targets.targets}
    ev_low = {
        e["patch_tile_index"]
        for e in report.evidence_digest["entries"]
        if e["level"] == "low_fallback"
    }
    ev_high = {
        e["patch_tile_index"]
        for e in report.evidence_digest["entries"]
        if e["level"] == "high"
    }
    return EvalResult(
        policy=policy,
        alpha=report.targets.alpha_used if alpha is None else alpha,
        seed=report.packet.seed,
        pool_recall=_blob_coverage(truth.blobs, pool_tiles, set()),
        target_recall=_blob_coverage(truth.blobs, target_tiles, set()),
        evidence_recall=_blob_coverage(truth.blobs, ev_low, ev_high),
        budget_used={
            "pool": len(report.pool),
            "targets": len(report.targets),
            "evidence": report.evidence_digest["total_patches"],
        },
    )


def make_random_pool_builder(rng: DeterministicRng):
    """Pool constructor that replaces surprise-ranked proposal with a random
    tile order while keeping the spacing rule and the pool budget."""

    def build(field: SurpriseField, rho: float, k_pool: int) -> RoiPool:
        gen = rng.generator()
        order = gen.permutation(field.n_tiles)
        xs = field.level0_x.astype(np.float64)
        ys = field.level0_y.astype(np.float64)
        kept = _greedy_keep(order, xs, ys, rho, k_pool)
        # presentation order stays sigma-descending like the real pool
        kept.sort(key=lambda pos: (-field.sigma[pos], field.tile_index[pos]))
        rois = [
            RoiEntry(
                roi_id=i,
                tile_index=int(field.tile_index[pos]),
                level0_x=int(field.level0_x[pos]),
                level0_y=int(field.level0_y[pos]),
                sigma=float(field.sigma[pos]),
            )
            for i, pos in enumerate(kept)
        ]
        return RoiPool(rois=rois, spacing_used=float(rho), pool_budget_used=int(k_pool))

    return build


def run_policy(
    policy: str,
    low_stream: FeatureStream,
    high_stream: Optional[FeatureStream],
    relevance: RelevanceSource,
    cfg: EngineConfig,
    *,
    alpha: Optional[float] = None,
    question: Optional[QuestionSpec] = None,
    scan_field: Optional[SurpriseField] = None,
) -> TrajectoryReport:
    """One pipeline run under a policy. Policies differ only in the fusion
    coefficient (surprise_only=0, relevance_only=1) or in the pool constructor
    (random_pool); budgets are identical across policies."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    eff_alpha = cfg.alpha if alpha is None else float(alpha)
    if policy == POLICY_SURPRISE:
        eff_alpha = 0.0
    elif policy == POLICY_RELEVANCE:
        eff_alpha = 1.0
    run_cfg = replace(cfg, alpha=eff_alpha)
    pool_builder = None
    if policy == POLICY_RANDOM:
        pool_builder = make_random_pool_builder(
            derive_substream(DeterministicRng(cfg.seed), "policy:random")
        )
    return run(
        low_stream,
        high_stream,
        question if question is not None else DEFAULT_QUESTION,
        relevance,
        None,
        run_cfg,
        scan_field=scan_field,
        pool_builder=pool_builder,
    )


@dataclass
class AblationResult:
    rows: list  # EvalResult rows as dicts, sorted by (policy, alpha, seed)
    summary: dict  # (policy, alpha) -> mean metrics
    ordering_check: dict  # passed / skipped / details

    def to_csv(self, path) -> None:
        fieldnames = [
            "policy",
            "alpha",
            "seed",
            "pool_recall",
            "target_recall",
            "evidence_recall",
            "pool_size",
            "target_count",
            "evidence_total",
        ]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fieldnames)
            w.writeheader()
            for row in self.rows:
                w.writerow(row)


def _policy_for_alpha(alpha: float) -> str:
    if alpha == 0.0:
        return POLICY_SURPRISE
    if alpha == 1.0:
        return POLICY_RELEVANCE
    return POLICY_FULL


def ablation_grid(
    spec: SyntheticSpec,
    cfg: EngineConfig,
    seeds: Sequence[int],
    alphas: Sequence[float] = ALPHA_GRID,
) -> AblationResult:
    """Run every (alpha, seed) cell plus the random-pool baseline and check
    the directional ordering of mean target recall.

    The check applies when the spec plants both a named and an unnamed blob:
    full(alpha=0.5) must beat surprise-only, relevance-only, and random-pool.
    With only named blobs the check weakens to full >= random; with no
    anomalies it is skipped.
    """
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    results: list[EvalResult] = []
    for seed in seeds:
        cell_spec = replace(spec, seed=seed)
        low, high, relevance, truth = generate(cell_spec)
        cell_cfg = replace(cfg, seed=seed)
        field_ = scan_for_slide(low, cell_cfg, DeterministicRng(seed))
        for alpha in alphas:
            policy = _policy_for_alpha(alpha)
            report = run_policy(
                policy, low, high, relevance, cell_cfg, alpha=alpha, scan_field=field_
            )
            results.append(evaluate(report, truth, policy=policy, alpha=alpha))
        report = run_policy(
            POLICY_RANDOM, low, high, relevance, cell_cfg, alpha=0.5, scan_field=field_
        )
        results.append(evaluate(report, truth, policy=POLICY_RANDOM, alpha=0.5))

    rows = sorted(
        (r.to_row() for r in results), key=lambda r: (r["policy"], r["alpha"], r["seed"])
    )
    summary: dict = {}
    for row in rows:
        key = (row["policy"], row["alpha"])
        summary.setdefault(key, []).append(row)
    summary = {
        key: {
            "pool_recall": float(np.mean([r["pool_recall"] for r in group])),
            "target_recall": float(np.mean([r["target_recall"] for r in group])),
            "evidence_recall": float(np.mean([r["evidence_recall"] for r in group])),
            "n": len(group),
        }
        for key, group in summary.items()
    }

    has_named = any(a.named_by_question for a in spec.anomalies)
    has_unnamed = any(not a.named_by_question for a in spec.anomalies)
    check: dict = {"skipped": False, "passed": None, "details": {}}
    if not spec.anomalies:
        check["skipped"] = True
    else:
        full = summary.get((POLICY_FULL, 0.5), {}).get("target_recall")
        sur = summary.get((POLICY_SURPRISE, 0.0), {}).get("target_recall")
        rel = summary.get((POLICY_RELEVANCE, 1.0), {}).get("target_recall")
        rand = summary.get((POLICY_RANDOM, 0.5), {}).get("target_recall")
        check["details"] = {
            "full@0.5": full,
            "surprise_only": sur,
            "relevance_only": rel,
            "random_pool": rand,
        }
        if has_named and has_unnamed:
            check["passed"] = bool(
                full is not None
                and sur is not None
                and rel is not None
                and rand is not None
                and full > sur
                and full > rel
                and full > rand
            )
        else:
            check["passed"] = bool(full is not None and rand is not None and full >= rand)
    return AblationResult(rows=rows, summary=summary, ordering_check=check)


def sign_test_greater(diffs: Sequence[float]) -> float:
    """One-sided sign test p-value for median(diff) > 0; ties are dropped."""
    wins = sum(1 for d in diffs if d > 0)
    losses = sum(1 for d in diffs if d < 0)
    n = wins + losses
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


def expected_random_recall(pool_tiles: Sequence[int], truth: GroundTruth, k: int) -> float:
    """Exact expected blob coverage of a uniformly random k-subset of the pool
    (the chance reference for within-pool reranking)."""
    if not truth.blobs:
        return 0.0
    n = len(pool_tiles)
    k = min(k, n)
    if n == 0 or k == 0:
        return 0.0
    total = 0.0
    for b in truth.blobs:
        m = sum(1 for t in pool_tiles if t in b.low_tiles)
        if m == 0:
            continue
        total += 1.0 - math.comb(n - m, k) / math.comb(n, k)
    return total / len(truth.blobs)
