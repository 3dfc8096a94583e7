"""The knowledge database: embedding banks with exact and approximate top-K search.

Similarity is inner product over L2-normalized rows (cosine). Results are
sorted by score descending with ties broken by ascending row id, which
keeps every search deterministic and testable. Banks persist in a small
binary container (magic ``KEDB``) with a line-delimited JSON sidecar for
per-row metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError

MAGIC = b"KEDB"
VERSION = 1
_HEADER = struct.Struct("<4sIIQB7x")  # magic, version, dim, count, normalized flag, pad


@dataclass
class EmbeddingMatrix:
    """N x d bank of row-major float32 features."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DimensionError(f"embedding matrix must be 2-d, got {self.values.shape}")

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def row(self, idx: int) -> np.ndarray:
        return self.values[idx]


def normalize_rows(values: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.sqrt((values * values).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, eps)
    return (values / norms).astype(np.float32)


@dataclass
class KnowledgeRecord:
    """Caption metadata for one bank row."""

    id: int
    caption_tokens: list[int]
    subject_span: tuple[int, int] | None = None
    text: str | None = None

    def __post_init__(self):
        if self.subject_span is not None:
            start, end = self.subject_span
            if not (0 <= start < end <= len(self.caption_tokens)):
                raise FormatError(
                    f"subject_span [{start},{end}) invalid for {len(self.caption_tokens)} tokens (id {self.id})"
                )


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def _order_hits(ids: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    # primary key: score descending; secondary: id ascending
    order = np.lexsort((ids, -scores))
    top = order[:k]
    return [(int(ids[i]), float(scores[i])) for i in top]


@dataclass
class FlatIndex:
    """Exact inner-product search over a bank."""

    matrix: EmbeddingMatrix

    @property
    def dim(self) -> int:
        return self.matrix.dim

    @property
    def count(self) -> int:
        return self.matrix.count

    def search(self, query: np.ndarray, k: int) -> list[tuple[int, float]]:
        return search_topk(self, query, k)

    def search_batch(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized top-k for a (Q, d) query block; same per-row semantics as search."""
        queries = np.asarray(queries, dtype=np.float32)
        if queries.ndim != 2 or queries.shape[1] != self.dim:
            raise DimensionError(f"query block {queries.shape} vs index dim {self.dim}")
        n = self.count
        k = min(k, n)
        if k == 0:
            return np.empty((queries.shape[0], 0), np.int64), np.empty((queries.shape[0], 0), np.float32)
        scores = queries @ self.matrix.values.T
        ids = np.arange(n)
        out_ids = np.empty((queries.shape[0], k), np.int64)
        out_scores = np.empty((queries.shape[0], k), np.float32)
        for qi in range(queries.shape[0]):
            row = scores[qi]
            if k < n:
                # keep every row tied with the k-th score so id tie-breaks stay exact
                kth = -np.partition(-row, k - 1)[k - 1]
                cand = np.flatnonzero(row >= kth)
            else:
                cand = ids
            order = np.lexsort((cand, -row[cand]))[:k]
            sel = cand[order]
            out_ids[qi] = sel
            out_scores[qi] = row[sel]
        return out_ids, out_scores


def search_topk(index: FlatIndex, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact top-k by inner product; ties break toward the lower id."""
    query = np.asarray(query, dtype=np.float32).reshape(-1)
    if query.shape[0] != index.dim:
        raise DimensionError(f"query dim {query.shape[0]} vs index dim {index.dim}")
    if k < 0:
        raise ConfigError(f"k must be non-negative, got {k}")
    n = index.count
    if n == 0 or k == 0:
        return []
    scores = index.matrix.values @ query
    return _order_hits(np.arange(n), scores, min(k, n))


@dataclass
class IvfIndex:
    """Inverted-file index: k-means centroids plus posting lists partitioning 0..N-1."""

    matrix: EmbeddingMatrix
    centroids: np.ndarray
    postings: list[np.ndarray] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.matrix.dim

    @property
    def partitions(self) -> int:
        return self.centroids.shape[0]

    def search(self, query: np.ndarray, k: int, nprobe: int | None = None) -> list[tuple[int, float]]:
        return search_ivf(self, query, k, nprobe if nprobe is not None else self.partitions)


def _kmeans_pp_init(values: np.ndarray, partitions: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids by squared-distance sampling."""
    n = values.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((values - values[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(partitions - 1):
        total = float(d2.sum())
        if total <= 0.0:
            # all remaining points coincide; fall back to unused indices
            unused = [i for i in range(n) if i not in set(chosen)]
            chosen.append(unused[0])
        else:
            probs = d2 / total
            chosen.append(int(rng.choice(n, p=probs)))
        d2 = np.minimum(d2, ((values - values[chosen[-1]]) ** 2).sum(axis=1))
    return normalize_rows(values[np.array(chosen)].copy())


def build_ivf(matrix: EmbeddingMatrix, partitions: int, iterations: int = 10, seed: int = 0) -> IvfIndex:
    """Spherical k-means coarse quantizer; deterministic for fixed inputs."""
    n = matrix.count
    if partitions < 1 or partitions > n:
        raise ConfigError(f"partitions {partitions} out of range for {n} rows")
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    values = matrix.values
    centroids = _kmeans_pp_init(values, partitions, rng)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iterations):
        assign = np.argmax(values @ centroids.T, axis=1)
        for p in range(partitions):
            members = values[assign == p]
            if len(members):
                centroids[p] = members.mean(axis=0)
        centroids = normalize_rows(centroids)
    assign = np.argmax(values @ centroids.T, axis=1)
    postings = [np.flatnonzero(assign == p).astype(np.int64) for p in range(partitions)]
    return IvfIndex(matrix=matrix, centroids=centroids, postings=postings)


def search_ivf(index: IvfIndex, query: np.ndarray, k: int, nprobe: int) -> list[tuple[int, float]]:
    """Scan the nprobe partitions whose centroids best match the query."""
    if not (1 <= nprobe <= index.partitions):
        raise ConfigError(f"nprobe {nprobe} out of range [1, {index.partitions}]")
    query = np.asarray(query, dtype=np.float32).reshape(-1)
    if query.shape[0] != index.dim:
        raise DimensionError(f"query dim {query.shape[0]} vs index dim {index.dim}")
    if k <= 0:
        return []
    cscores = index.centroids @ query
    probe = np.lexsort((np.arange(index.partitions), -cscores))[:nprobe]
    ids = np.concatenate([index.postings[p] for p in probe]) if len(probe) else np.empty(0, np.int64)
    if ids.size == 0:
        return []
    scores = index.matrix.values[ids] @ query
    return _order_hits(ids, scores, min(k, ids.size))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def encode_matrix(values: np.ndarray, normalized: bool = False) -> bytes:
    """Array (rank 1 or 2) to the KEDB wire encoding; rank 1 stored as 1 x n."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise FormatError(f"cannot encode rank-{arr.ndim} array")
    header = _HEADER.pack(MAGIC, VERSION, arr.shape[1], arr.shape[0], 1 if normalized else 0)
    return header + arr.tobytes()


def decode_matrix(raw: bytes) -> tuple[np.ndarray, bool]:
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} bytes < {_HEADER.size}")
    magic, version, dim, count, normalized = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dim <= 0:
        raise FormatError(f"bad dim {dim}")
    expected = count * dim * 4
    body = raw[_HEADER.size:]
    if len(body) < expected:
        raise FormatError(f"truncated payload: need {expected} bytes for count*dim*4, have {len(body)}")
    if len(body) > expected:
        raise FormatError(f"trailing bytes: payload {len(body)} exceeds count*dim*4 = {expected}")
    values = np.frombuffer(body, dtype="<f4", count=count * dim).reshape(count, dim)
    return values.copy(), bool(normalized)


def save(matrix: EmbeddingMatrix, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_matrix(matrix.values, matrix.normalized))
    tmp.replace(path)


def load(path: str | Path) -> EmbeddingMatrix:
    values, normalized = decode_matrix(Path(path).read_bytes())
    return EmbeddingMatrix(values=values, normalized=normalized)


def save_records(records: list[KnowledgeRecord], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "caption_tokens": rec.caption_tokens,
                        "subject_span": list(rec.subject_span) if rec.subject_span else None,
                        "text": rec.text,
                    }
                )
                + "\n"
            )
    tmp.replace(path)


def load_records(path: str | Path) -> list[KnowledgeRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            span = obj.get("subject_span")
            records.append(
                KnowledgeRecord(
                    id=int(obj["id"]),
                    caption_tokens=[int(t) for t in obj["caption_tokens"]],
                    subject_span=tuple(span) if span is not None else None,
                    text=obj.get("text"),
                )
            )
            if records[-1].id != lineno:
                raise FormatError(f"record id {records[-1].id} out of order at line {lineno}")
    return records
