"""Reference archive: mean-pooled slide embeddings with exact cosine retrieval.

The archive aids final adjudication only, never navigation. It is small by
design, so retrieval is flat exact search; the on-disk format is a simple
little-endian record file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import FeatureStream
from .search import cosine_similarity

ARCHIVE_MAGIC = b"PNAR"
ARCHIVE_VERSION = 1


@dataclass
class ArchiveIndex:
    """slide_id -> (float32 embedding of length d, opaque summary text)."""

    d: int
    cases: dict = field(default_factory=dict)
    version: int = ARCHIVE_VERSION

    def __len__(self) -> int:
        return len(self.cases)


def slide_embedding(stream: FeatureStream) -> np.ndarray:
    """Mean of all tile features (float64)."""
    if stream.n_tiles == 0:
        raise ValueError("cannot embed an empty stream")
    return np.mean(stream.features.astype(np.float64), axis=0)


def add_case(index: ArchiveIndex, slide_id: str, embedding, summary_text: str) -> ArchiveIndex:
    """Insert one case. Embeddings are stored float32 (the file precision)."""
    emb = np.asarray(embedding, dtype=np.float32).ravel()
    if emb.shape[0] != index.d:
        raise ValueError(f"embedding length {emb.shape[0]} != index d {index.d}")
    if slide_id in index.cases:
        raise ValueError(f"slide id {slide_id!r} already present")
    index.cases[slide_id] = (emb, summary_text)
    return index


def retrieve(
    index: ArchiveIndex,
    query_embedding,
    k: int,
    exclude_id: Optional[str] = None,
) -> list[tuple[str, float]]:
    """Top-k cases by cosine similarity, descending (ties by ascending id).

    exclude_id keeps a query slide from retrieving itself during batch
    evaluation. k=0 or an empty index yields an empty list.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0 or not index.cases:
        return []
    q = np.asarray(query_embedding, dtype=np.float64).ravel()
    if q.shape[0] != index.d:
        raise ValueError(f"query length {q.shape[0]} != index d {index.d}")
    sims = [
        (sid, cosine_similarity(q, emb))
        for sid, (emb, _) in index.cases.items()
        if sid != exclude_id
    ]
    sims.sort(key=lambda t: (-t[1], t[0]))
    return sims[:k]


def summary_for(index: ArchiveIndex, slide_id: str) -> str:
    return index.cases[slide_id][1]


def save_archive(index: ArchiveIndex, path) -> None:
    """Write the archive file: magic, version, d, count, then one record per
    case in slide_id order (canonical bytes for a given index)."""
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(struct.pack("<IIQ", ARCHIVE_VERSION, index.d, len(index.cases)))
        for sid in sorted(index.cases):
            emb, summary = index.cases[sid]
            sid_b = sid.encode("utf-8")
            sum_b = summary.encode("utf-8")
            if len(sid_b) > 0xFFFF:
                raise ValueError(f"slide id too long to encode: {sid!r}")
            f.write(struct.pack("<H", len(sid_b)))
            f.write(sid_b)
            f.write(np.ascontiguousarray(emb, dtype="<f4").tobytes())
            f.write(struct.pack("<I", len(sum_b)))
            f.write(sum_b)


def load_archive(path) -> ArchiveIndex:
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise ValueError(f"not an archive file (magic {data[:4]!r})")
    version, d, count = struct.unpack_from("<IIQ", data, 4)
    if version != ARCHIVE_VERSION:
        raise ValueError(f"unsupported archive version {version}")
    index = ArchiveIndex(d=int(d))
    off = 4 + struct.calcsize("<IIQ")
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", data, off)
        off += 2
        sid = data[off : off + id_len].decode("utf-8")
        off += id_len
        emb = np.frombuffer(data, dtype="<f4", count=d, offset=off).copy()
        off += 4 * d
        (sum_len,) = struct.unpack_from("<I", data, off)
        off += 4
        summary = data[off : off + sum_len].decode("utf-8")
        off += sum_len
        add_case(index, sid, emb, summary)
    if off != len(data):
        raise ValueError("trailing bytes after final archive record")
    return index
