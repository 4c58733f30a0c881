"""Low-magnification surprise pass and ROI pool construction.

scan_slide walks the tile stream in canonical row-major order through a fresh
online memory and records per-tile surprise; nms_pool thresholds the field and
applies greedy distance-based NMS to produce a compact, spatially diverse pool
of candidate ROI centers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DeterministicRng, EngineConfig, FeatureStream
from .memory import MemoryState, init_memory, observe_tile, set_threshold_from_warmup


@dataclass
class SurpriseField:
    """Per-tile surprise in scan order, plus the threshold and final memory.

    tile_index refers to the tile's position in the source stream; entry order
    is the canonical row-major scan order. warmup_truncated flags slides
    shorter than the warm-up window (threshold then comes from all scores).
    """

    slide_id: str
    tile_index: np.ndarray  # (N,) int64, scan order
    grid_x: np.ndarray
    grid_y: np.ndarray
    level0_x: np.ndarray  # (N,) int64
    level0_y: np.ndarray
    sigma: np.ndarray  # (N,) float64
    threshold: float
    memory_final: MemoryState
    warmup_truncated: bool = False

    @property
    def n_tiles(self) -> int:
        return len(self.sigma)

    def entries(self):
        return list(
            zip(
                self.tile_index.tolist(),
                self.level0_x.tolist(),
                self.level0_y.tolist(),
                self.sigma.tolist(),
            )
        )


@dataclass(frozen=True)
class RoiEntry:
    roi_id: int
    tile_index: int
    level0_x: int
    level0_y: int
    sigma: float


@dataclass
class RoiPool:
    """Kept ROI centers, sigma-descending, all pairs >= spacing_used apart."""

    rois: list  # list[RoiEntry]
    spacing_used: float
    pool_budget_used: int

    def __len__(self) -> int:
        return len(self.rois)

    def sigma_by_roi(self) -> dict[int, float]:
        return {r.roi_id: r.sigma for r in self.rois}

    def centers(self) -> np.ndarray:
        return np.array(
            [[r.level0_x, r.level0_y] for r in self.rois], dtype=np.float64
        ).reshape(len(self.rois), 2)


def scan_slide(
    stream: FeatureStream, cfg: EngineConfig, rng: DeterministicRng
) -> SurpriseField:
    """Run the online memory over one low-magnification stream.

    Iterates tiles row-major by (grid_y, grid_x) regardless of storage order,
    so the surprise sequence is canonical. Streams shorter than t_w get their
    threshold from all available scores and are flagged.
    """
    if stream.n_tiles == 0:
        raise ValueError("cannot scan an empty stream")
    if stream.d != cfg.d:
        raise ValueError(f"stream d {stream.d} != config d {cfg.d}")
    order = stream.row_major_order()
    state = init_memory(cfg, rng)
    sigmas = np.empty(len(order), dtype=np.float64)
    feats = stream.features
    for pos, idx in enumerate(order):
        z = feats[idx].astype(np.float64)
        sigma, _ = observe_tile(state, z, cfg)
        sigmas[pos] = sigma
    truncated = False
    if state.threshold is None:
        # degenerate-slide rule: fewer tiles than the warm-up window
        set_threshold_from_warmup(state, cfg.lam)
        truncated = True
    return SurpriseField(
        slide_id=stream.slide_id,
        tile_index=order.astype(np.int64),
        grid_x=stream.grid_x[order].astype(np.int64),
        grid_y=stream.grid_y[order].astype(np.int64),
        level0_x=stream.level0_x[order].astype(np.int64),
        level0_y=stream.level0_y[order].astype(np.int64),
        sigma=sigmas,
        threshold=float(state.threshold),
        memory_final=state,
        warmup_truncated=truncated,
    )


def _greedy_keep(
    cand_order: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    rho: float,
    k_pool: int,
) -> list[int]:
    """Greedy pass over candidates (already sorted): keep a center iff it is at
    least rho from every previously kept center; stop at k_pool."""
    kept: list[int] = []
    kept_x = np.empty(k_pool)
    kept_y = np.empty(k_pool)
    rho_sq = rho * rho
    for pos in cand_order:
        if len(kept) >= k_pool:
            break
        x = xs[pos]
        y = ys[pos]
        if kept:
            dx = kept_x[: len(kept)] - x
            dy = kept_y[: len(kept)] - y
            if np.min(dx * dx + dy * dy) < rho_sq:
                continue
        kept_x[len(kept)] = x
        kept_y[len(kept)] = y
        kept.append(int(pos))
    return kept


def nms_pool(field: SurpriseField, rho: float, k_pool: int) -> RoiPool:
    """Threshold the surprise field, then greedy distance-NMS.

    Candidates are tiles with sigma strictly above the field threshold, ordered
    by sigma descending (ties by ascending tile_index). If fewer than
    min(k_pool, 5) centers survive, the candidate set widens to all tiles and
    the greedy pass reruns, so low-contrast slides still fill the pool.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    if k_pool < 1:
        raise ValueError("k_pool must be >= 1")
    if field.n_tiles == 0:
        raise ValueError("empty surprise field")

    xs = field.level0_x.astype(np.float64)
    ys = field.level0_y.astype(np.float64)

    def sorted_positions(mask: Optional[np.ndarray]) -> np.ndarray:
        pos = np.arange(field.n_tiles) if mask is None else np.nonzero(mask)[0]
        order = np.lexsort((field.tile_index[pos], -field.sigma[pos]))
        return pos[order]

    kept = _greedy_keep(sorted_positions(field.sigma > field.threshold), xs, ys, rho, k_pool)
    if len(kept) < min(k_pool, 5):
        kept = _greedy_keep(sorted_positions(None), xs, ys, rho, k_pool)

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


def field_to_csv(field: SurpriseField, path) -> None:
    """Export the surprise field as tile_index,grid_x,grid_y,sigma rows."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tile_index", "grid_x", "grid_y", "sigma"])
        for i in range(field.n_tiles):
            w.writerow(
                [
                    int(field.tile_index[i]),
                    int(field.grid_x[i]),
                    int(field.grid_y[i]),
                    repr(float(field.sigma[i])),
                ]
            )


def field_to_pgm(field: SurpriseField, path) -> None:
    """8-bit grayscale PGM heatmap of the surprise field on the tile grid.

    Sigma is min-max scaled over the slide; grid cells without tiles are 0.
    """
    w = int(field.grid_x.max()) + 1
    h = int(field.grid_y.max()) + 1
    img = np.zeros((h, w), dtype=np.uint8)
    lo = float(field.sigma.min())
    hi = float(field.sigma.max())
    if hi > lo:
        scaled = np.round((field.sigma - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros(field.n_tiles, dtype=np.uint8)
    img[field.grid_y, field.grid_x] = scaled
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_field_exports(field: SurpriseField, csv_path=None, pgm_path=None) -> None:
    if csv_path is not None:
        field_to_csv(field, Path(csv_path))
    if pgm_path is not None:
        field_to_pgm(field, Path(pgm_path))
