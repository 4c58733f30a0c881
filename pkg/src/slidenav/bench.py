"""Throughput measurements for the scoring and scan paths.

Reports single-threaded batched surprise scoring (the frozen-state GEMM
path), the sequential full-scan rate including updates and decay, and the
factored-versus-materialized scoring speedup.
"""

from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from .core import DeterministicRng, EngineConfig, FeatureStream
from .memory import (
    batch_score_surprise,
    init_memory,
    materialize_gradients,
    observe_tile,
    score_surprise,
)
from .scan import scan_slide


def _random_features(n: int, d: int, gen: np.random.Generator) -> np.ndarray:
    return gen.standard_normal((n, d)).astype(np.float32)


def bench_batched_scoring(
    cfg: EngineConfig, n_tiles: int = 20000, chunk: int = 256, warm: int = 2048
) -> dict:
    """Tiles/second of the batched frozen-state scorer, one thread."""
    state = init_memory(cfg, DeterministicRng(cfg.seed, "bench:init"))
    gen = DeterministicRng(cfg.seed, "bench:data").generator()
    feats = _random_features(n_tiles, cfg.d, gen)
    with threadpool_limits(limits=1):
        batch_score_surprise(state, feats[:warm], cfg.huber_delta, chunk=chunk)
        t0 = time.perf_counter()
        sig = batch_score_surprise(state, feats, cfg.huber_delta, chunk=chunk)
        elapsed = time.perf_counter() - t0
    return {
        "tiles": n_tiles,
        "seconds": elapsed,
        "tiles_per_second": n_tiles / elapsed,
        "sigma_checksum": float(np.sum(sig)),
    }


def bench_factored_vs_materialized(cfg: EngineConfig, n_tiles: int = 200) -> dict:
    """Per-tile scoring cost: factored norm vs materializing the full rank-1
    gradient blocks and taking their Frobenius norm."""
    state = init_memory(cfg, DeterministicRng(cfg.seed, "bench:init"))
    gen = DeterministicRng(cfg.seed, "bench:data").generator()
    feats = _random_features(n_tiles, cfg.d, gen).astype(np.float64)
    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        for i in range(n_tiles):
            score_surprise(state, feats[i], cfg.huber_delta)
        t_factored = time.perf_counter() - t0
        t0 = time.perf_counter()
        for i in range(n_tiles):
            grads = materialize_gradients(state, feats[i], cfg.huber_delta)
            math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        t_materialized = time.perf_counter() - t0
    return {
        "tiles": n_tiles,
        "factored_us_per_tile": t_factored / n_tiles * 1e6,
        "materialized_us_per_tile": t_materialized / n_tiles * 1e6,
        "speedup": t_materialized / t_factored,
    }


def bench_full_scan(cfg: EngineConfig, n_tiles: int = 100000, grid_w: int = 400) -> dict:
    """Wall-clock of a sequential scan (scoring + updates + decay) over a
    synthetic stream of n_tiles standard-normal feature tiles."""
    gen = DeterministicRng(cfg.seed, "bench:scan").generator()
    grid_h = (n_tiles + grid_w - 1) // grid_w
    n = grid_w * grid_h
    feats = _random_features(n, cfg.d, gen)[:n_tiles]
    gy, gx = np.divmod(np.arange(n_tiles), grid_w)
    stride = 4096.0
    stream = FeatureStream(
        level="low",
        d=cfg.d,
        slide_id="bench",
        slide_diag_level0=math.hypot(grid_w * stride, grid_h * stride),
        tile_stride_level0=stride,
        grid_x=gx.astype(np.uint32),
        grid_y=gy.astype(np.uint32),
        level0_x=(gx * int(stride) + int(stride) // 2).astype(np.uint64),
        level0_y=(gy * int(stride) + int(stride) // 2).astype(np.uint64),
        features=feats,
    )
    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        field = scan_slide(stream, cfg, DeterministicRng(cfg.seed, "bench:mem"))
        elapsed = time.perf_counter() - t0
    state = field.memory_final
    return {
        "tiles": n_tiles,
        "seconds": elapsed,
        "tiles_per_second": n_tiles / elapsed,
        "updates": state.update_count,
        "decays": state.decay_count,
        "warmup_steps": len(state.warmup_scores),
    }


def run_benchmarks(
    d: int = 768,
    hidden: int = 768,
    score_tiles: int = 20000,
    scan_tiles: int = 100000,
    seed: int = 0,
) -> dict:
    cfg = EngineConfig(d=d, hidden=hidden, seed=seed)
    return {
        "config": {"d": d, "hidden": hidden, "seed": seed},
        "batched_scoring": bench_batched_scoring(cfg, n_tiles=score_tiles),
        "factored_vs_materialized": bench_factored_vs_materialized(cfg),
        "full_scan": bench_full_scan(cfg, n_tiles=scan_tiles),
    }
