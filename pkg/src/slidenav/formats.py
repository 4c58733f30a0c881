"""Little-endian binary file formats for feature streams and relevance data.

Feature file (one per slide per level): magic "PNAV", u32 version, u8 level,
u32 d, u64 tile count, f64 slide diagonal, f64 tile stride, then per tile
u32 grid_x, u32 grid_y, u64 level0_x, u64 level0_y, and d float32 features.
Readers reject unknown magic or version.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .core import LEVEL_HIGH, LEVEL_LOW, FeatureStream

FEATURE_MAGIC = b"PNAV"
FEATURE_VERSION = 1

_LEVEL_CODES = {LEVEL_LOW: 0, LEVEL_HIGH: 1}
_LEVEL_NAMES = {0: LEVEL_LOW, 1: LEVEL_HIGH}

_HEADER_FMT = "<IBIQdd"  # version, level, d, count, diag, stride


class FormatError(ValueError):
    pass


def _tile_dtype(d: int) -> np.dtype:
    return np.dtype(
        [
            ("grid_x", "<u4"),
            ("grid_y", "<u4"),
            ("level0_x", "<u8"),
            ("level0_y", "<u8"),
            ("feature", "<f4", (d,)),
        ]
    )


def write_feature_stream(stream: FeatureStream, path) -> None:
    """Serialize a stream. The format carries no slide id; by convention the
    file stem names the slide."""
    records = np.empty(stream.n_tiles, dtype=_tile_dtype(stream.d))
    records["grid_x"] = stream.grid_x
    records["grid_y"] = stream.grid_y
    records["level0_x"] = stream.level0_x
    records["level0_y"] = stream.level0_y
    records["feature"] = stream.features
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(
            struct.pack(
                _HEADER_FMT,
                FEATURE_VERSION,
                _LEVEL_CODES[stream.level],
                stream.d,
                stream.n_tiles,
                stream.slide_diag_level0,
                stream.tile_stride_level0,
            )
        )
        f.write(records.tobytes())


def read_feature_stream(path, slide_id: str | None = None) -> FeatureStream:
    """Parse a feature file; the slide id defaults to the file stem."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise FormatError(f"not a feature file (magic {data[:4]!r})")
    header_size = struct.calcsize(_HEADER_FMT)
    version, level_code, d, count, diag, stride = struct.unpack_from(_HEADER_FMT, data, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    if level_code not in _LEVEL_NAMES:
        raise FormatError(f"unknown level code {level_code}")
    dtype = _tile_dtype(d)
    expected = 4 + header_size + count * dtype.itemsize
    if len(data) != expected:
        raise FormatError(
            f"feature file size {len(data)} != expected {expected} for {count} tiles"
        )
    records = np.frombuffer(data, dtype=dtype, count=count, offset=4 + header_size)
    return FeatureStream(
        level=_LEVEL_NAMES[level_code],
        d=int(d),
        slide_id=slide_id if slide_id is not None else path.stem,
        slide_diag_level0=float(diag),
        tile_stride_level0=float(stride),
        grid_x=records["grid_x"].copy(),
        grid_y=records["grid_y"].copy(),
        level0_x=records["level0_x"].copy(),
        level0_y=records["level0_y"].copy(),
        features=records["feature"].copy(),
    )


def write_relevance_scores_csv(scores: dict, path) -> None:
    """tile_index,score rows (scores-mode relevance input)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tile_index", "score"])
        for idx in sorted(scores):
            w.writerow([int(idx), repr(float(scores[idx]))])


def read_relevance_scores_csv(path) -> dict[int, float]:
    scores: dict[int, float] = {}
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row:
                continue
            if row[0].strip().lower() == "tile_index":
                continue  # header
            if len(row) != 2:
                raise FormatError(f"malformed relevance row: {row!r}")
            scores[int(row[0])] = float(row[1])
    return scores


def write_patch_embeddings(embeddings: dict, path) -> None:
    """Binary patch-embedding file: u32 dim, u64 count, then per record
    u32 tile_index plus dim float32 values."""
    if not embeddings:
        raise ValueError("no embeddings to write")
    dims = {np.asarray(v).ravel().shape[0] for v in embeddings.values()}
    if len(dims) != 1:
        raise ValueError(f"embeddings have mixed dims: {sorted(dims)}")
    dim = dims.pop()
    with open(path, "wb") as f:
        f.write(struct.pack("<IQ", dim, len(embeddings)))
        for idx in sorted(embeddings):
            f.write(struct.pack("<I", int(idx)))
            f.write(np.ascontiguousarray(embeddings[idx], dtype="<f4").tobytes())


def read_patch_embeddings(path) -> dict[int, np.ndarray]:
    data = Path(path).read_bytes()
    dim, count = struct.unpack_from("<IQ", data, 0)
    off = struct.calcsize("<IQ")
    rec = np.dtype([("tile_index", "<u4"), ("emb", "<f4", (dim,))])
    if len(data) != off + count * rec.itemsize:
        raise FormatError("patch-embedding file has unexpected size")
    records = np.frombuffer(data, dtype=rec, count=count, offset=off)
    return {int(r["tile_index"]): np.array(r["emb"]) for r in records}


def write_question_embedding(embedding, path) -> None:
    emb = np.ascontiguousarray(embedding, dtype="<f4").ravel()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", emb.shape[0]))
        f.write(emb.tobytes())


def read_question_embedding(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (dim,) = struct.unpack_from("<I", data, 0)
    if len(data) != 4 + 4 * dim:
        raise FormatError("question-embedding file has unexpected size")
    return np.frombuffer(data, dtype="<f4", count=dim, offset=4).astype(np.float64)
