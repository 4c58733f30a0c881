"""Shared domain types, engine configuration, and the deterministic random source.

Everything downstream (memory, scan, search, readout) builds on the types in
this module. All of them are immutable after construction and safe to share
across concurrent slide runs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Optional, Sequence

import numpy as np

LEVEL_LOW = "low"
LEVEL_HIGH = "high"

CATEGORIES = ("morphology", "clinical", "other")


@dataclass(frozen=True)
class TileRecord:
    """One tile: grid position, level-0 center coordinates, and its feature vector."""

    grid_x: int
    grid_y: int
    level0_x: int
    level0_y: int
    feature: np.ndarray


class FeatureStream:
    """An ordered tile-feature stream for one slide at one magnification level.

    Tiles are stored columnar (coordinate arrays plus an (N, d) float32 feature
    matrix) so large slides stay cheap to scan; `tile(i)` exposes the record
    view. Canonical tile order is row-major by (grid_y, grid_x).
    """

    def __init__(
        self,
        level: str,
        d: int,
        slide_id: str,
        slide_diag_level0: float,
        tile_stride_level0: float,
        grid_x: np.ndarray,
        grid_y: np.ndarray,
        level0_x: np.ndarray,
        level0_y: np.ndarray,
        features: np.ndarray,
    ):
        if level not in (LEVEL_LOW, LEVEL_HIGH):
            raise ValueError(f"unknown level {level!r}")
        self.level = level
        self.d = int(d)
        self.slide_id = slide_id
        self.slide_diag_level0 = float(slide_diag_level0)
        self.tile_stride_level0 = float(tile_stride_level0)
        self.grid_x = np.asarray(grid_x, dtype=np.uint32)
        self.grid_y = np.asarray(grid_y, dtype=np.uint32)
        self.level0_x = np.asarray(level0_x, dtype=np.uint64)
        self.level0_y = np.asarray(level0_y, dtype=np.uint64)
        self.features = np.asarray(features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d (tiles x d) array")
        n = self.features.shape[0]
        if not (len(self.grid_x) == len(self.grid_y) == len(self.level0_x) == len(self.level0_y) == n):
            raise ValueError("coordinate arrays and feature matrix disagree on tile count")
        # tile index -> original feature length, for records that did not match d
        self._bad_feature_lengths: dict[int, int] = {}

    @classmethod
    def from_tiles(
        cls,
        level: str,
        d: int,
        slide_id: str,
        slide_diag_level0: float,
        tile_stride_level0: float,
        tiles: Sequence[TileRecord],
    ) -> "FeatureStream":
        """Build a stream from tile records. Ragged feature lengths are padded or
        truncated to d so the invalid stream is still constructible; the defect is
        recorded and surfaced by validate_stream."""
        n = len(tiles)
        feats = np.zeros((n, d), dtype=np.float32)
        bad_lengths: dict[int, int] = {}
        for i, t in enumerate(tiles):
            f = np.asarray(t.feature, dtype=np.float32).ravel()
            if f.shape[0] != d:
                bad_lengths[i] = int(f.shape[0])
                m = min(d, f.shape[0])
                feats[i, :m] = f[:m]
            else:
                feats[i] = f
        stream = cls(
            level,
            d,
            slide_id,
            slide_diag_level0,
            tile_stride_level0,
            np.array([t.grid_x for t in tiles], dtype=np.uint32),
            np.array([t.grid_y for t in tiles], dtype=np.uint32),
            np.array([t.level0_x for t in tiles], dtype=np.uint64),
            np.array([t.level0_y for t in tiles], dtype=np.uint64),
            feats,
        )
        stream._bad_feature_lengths = bad_lengths
        return stream

    @property
    def n_tiles(self) -> int:
        return self.features.shape[0]

    def tile(self, i: int) -> TileRecord:
        return TileRecord(
            int(self.grid_x[i]),
            int(self.grid_y[i]),
            int(self.level0_x[i]),
            int(self.level0_y[i]),
            self.features[i],
        )

    def __iter__(self) -> Iterator[TileRecord]:
        return (self.tile(i) for i in range(self.n_tiles))

    def centers(self) -> np.ndarray:
        """Level-0 tile centers as an (N, 2) float64 array."""
        return np.stack(
            [self.level0_x.astype(np.float64), self.level0_y.astype(np.float64)], axis=1
        )

    def row_major_order(self) -> np.ndarray:
        """Indices that sort tiles row-major by (grid_y, grid_x); identity when
        the stream already satisfies the ordering invariant."""
        return np.lexsort((self.grid_x, self.grid_y))


@dataclass(frozen=True)
class EngineConfig:
    """Engine hyperparameters. Defaults are the launch configuration; every
    field is overridable via config file or CLI flag."""

    d: int = 768
    hidden: int = 768
    lr: float = 0.05
    clip: float = 5.0
    alpha_f: float = 0.999
    t_w: int = 100
    lam: float = 1.0
    huber_delta: float = 1.0
    alpha: float = 0.5
    k0: int = 10
    r_max: int = 1
    pool_floor: int = 30
    t_per_roi: int = 2
    v_max: int = 15
    archive_k: int = 3
    epsilon_norm: float = 1e-8
    seed: int = 0
    rounds: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EngineConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class QuestionSpec:
    """A free-form question, optionally pinned to a routing category."""

    text: str
    category_override: Optional[str] = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("question text must be nonempty")
        if self.category_override is not None and self.category_override not in CATEGORIES:
            raise ValueError(f"unknown category {self.category_override!r}")


def _philox_key(seed: int, path: str) -> int:
    digest = hashlib.sha256(f"{seed}\x1f{path}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


@dataclass(frozen=True)
class DeterministicRng:
    """Counter-based (Philox 4x64) random source with labelled sub-streams.

    The generator key is SHA-256(seed, path) truncated to 128 bits, so the
    sequence depends only on (seed, path) and is reproducible across platforms
    and processes. Sub-streams derived with distinct labels are statistically
    independent.
    """

    seed: int
    path: str = ""

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=_philox_key(self.seed, self.path)))


def derive_substream(rng: DeterministicRng, label: str) -> DeterministicRng:
    """Derive an independent child stream. Labels must be nonempty."""
    if not label:
        raise ValueError("substream label must be nonempty")
    path = label if rng.path == "" else f"{rng.path}/{label}"
    return DeterministicRng(seed=rng.seed, path=path)


def _max_pairwise_distance(centers: np.ndarray) -> float:
    """Exact diameter of a point set in level-0 pixels."""
    n = centers.shape[0]
    if n < 2:
        return 0.0
    if n <= 2000:
        pts = centers
    else:
        try:
            from scipy.spatial import ConvexHull

            pts = centers[ConvexHull(centers).vertices]
        except Exception:
            # collinear / degenerate sets: the bounding-box diagonal is exact
            lo = centers.min(axis=0)
            hi = centers.max(axis=0)
            return float(np.hypot(*(hi - lo)))
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff * diff).sum(axis=2).max()))


def validate_stream(stream: FeatureStream) -> list[str]:
    """Check every stream invariant and return the violations as data.

    Pure: never mutates the stream; an empty list means the stream is valid.
    """
    violations: list[str] = []
    if stream.d <= 0:
        violations.append(f"feature dimension must be positive, got {stream.d}")
    if stream.n_tiles == 0:
        violations.append("stream has no tiles")
        return violations
    if stream.tile_stride_level0 <= 0:
        violations.append(f"tile_stride_level0 must be positive, got {stream.tile_stride_level0}")
    if stream.slide_diag_level0 <= 0:
        violations.append(f"slide_diag_level0 must be positive, got {stream.slide_diag_level0}")

    if stream.features.shape[1] != stream.d:
        violations.append(
            f"feature matrix width {stream.features.shape[1]} != declared d {stream.d}"
        )
    for i, length in sorted(getattr(stream, "_bad_feature_lengths", {}).items()):
        violations.append(f"tile {i}: feature length {length} != declared d {stream.d}")

    if not np.all(np.isfinite(stream.centers())):
        violations.append("non-finite level-0 coordinates present")

    # duplicate grid positions, reported pairwise
    key = stream.grid_y.astype(np.uint64) << np.uint64(32) | stream.grid_x.astype(np.uint64)
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    dup_at = np.nonzero(sorted_key[1:] == sorted_key[:-1])[0]
    for j in dup_at:
        a, b = int(order[j]), int(order[j + 1])
        violations.append(
            f"duplicate grid position ({stream.grid_x[a]}, {stream.grid_y[a]}) "
            f"at tile indices {a} and {b}"
        )

    expected = stream.row_major_order()
    if not np.array_equal(expected, np.arange(stream.n_tiles)):
        violations.append("tiles are not in row-major (grid_y, grid_x) order")

    diameter = _max_pairwise_distance(stream.centers())
    if stream.slide_diag_level0 < diameter:
        violations.append(
            f"slide_diag_level0 {stream.slide_diag_level0} < observed max pairwise "
            f"center distance {diameter}"
        )
    return violations


def state_digest_bytes(*arrays: np.ndarray) -> str:
    """SHA-256 hex digest over the raw bytes of the given arrays, in order."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
