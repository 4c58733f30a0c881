from __future__ import annotations

import math

import numpy as np
import pytest

from slidenav.core import DeterministicRng, EngineConfig, FeatureStream
from slidenav.scan import RoiEntry, RoiPool


def make_grid_stream(
    grid_w: int,
    grid_h: int,
    d: int,
    features: np.ndarray | None = None,
    stride: float = 4096.0,
    level: str = "low",
    slide_id: str = "test-slide",
    seed: int = 0,
) -> FeatureStream:
    """Row-major rectangular stream with centers on a stride grid."""
    n = grid_w * grid_h
    gy, gx = np.divmod(np.arange(n), grid_w)
    if features is None:
        features = DeterministicRng(seed, "fixture").generator().standard_normal((n, d))
    return FeatureStream(
        level=level,
        d=d,
        slide_id=slide_id,
        slide_diag_level0=math.hypot(grid_w * stride, grid_h * stride),
        tile_stride_level0=stride,
        grid_x=gx.astype(np.uint32),
        grid_y=gy.astype(np.uint32),
        level0_x=(gx * int(stride) + int(stride) // 2).astype(np.uint64),
        level0_y=(gy * int(stride) + int(stride) // 2).astype(np.uint64),
        features=np.asarray(features, dtype=np.float32),
    )


def make_field(entries, threshold: float, slide_id: str = "field") :
    """SurpriseField from (tile_index, x, y, sigma) tuples in scan order."""
    from slidenav.memory import init_memory
    from slidenav.scan import SurpriseField

    state = init_memory(EngineConfig(d=2, hidden=2), DeterministicRng(0, "dummy"))
    state.threshold = threshold
    tid = np.array([e[0] for e in entries], dtype=np.int64)
    xs = np.array([e[1] for e in entries], dtype=np.int64)
    ys = np.array([e[2] for e in entries], dtype=np.int64)
    sig = np.array([e[3] for e in entries], dtype=np.float64)
    return SurpriseField(
        slide_id=slide_id,
        tile_index=tid,
        grid_x=xs // 4096,
        grid_y=ys // 4096,
        level0_x=xs,
        level0_y=ys,
        sigma=sig,
        threshold=threshold,
        memory_final=state,
    )


def make_pool(entries) -> RoiPool:
    """Pool from (tile_index, x, y, sigma) tuples, already sigma-descending."""
    rois = [
        RoiEntry(roi_id=i, tile_index=t, level0_x=x, level0_y=y, sigma=s)
        for i, (t, x, y, s) in enumerate(entries)
    ]
    return RoiPool(rois=rois, spacing_used=1.0, pool_budget_used=max(1, len(rois)))


@pytest.fixture
def small_cfg() -> EngineConfig:
    return EngineConfig(d=8, hidden=8, t_w=5, seed=11)
