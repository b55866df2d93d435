"""Reverse-nearest-neighbor voting with Gaussian privatization.

Each private embedding votes for its nearest candidate embedding; the vote
histogram is privatized with per-coordinate Gaussian noise and normalized
into a selection distribution. All functions here are pure.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRICS = ("euclidean", "cosine")

_CHUNK_ROWS = 256

EMBEDDINGS_MAGIC = b"PTEV1"


@dataclass(frozen=True)
class EmbeddingSet:
    """Ordered embeddings (one per row) with the distance metric that applies.

    ``cosine`` is realized as euclidean distance between L2-normalized rows;
    zero rows are left at the origin rather than rejected.
    """

    vectors: np.ndarray
    metric: str = "euclidean"

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"embeddings must form a non-empty 2-D array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("embeddings must be finite (found NaN or inf)")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        object.__setattr__(self, "vectors", arr)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def select(self, indices) -> "EmbeddingSet":
        return EmbeddingSet(self.vectors[np.asarray(indices, dtype=int)], self.metric)

    def metric_vectors(self) -> np.ndarray:
        """Rows mapped to the space where plain euclidean distance realizes the metric."""
        if self.metric == "euclidean":
            return self.vectors
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return self.vectors / norms


@dataclass(frozen=True)
class VoteHistogram:
    """Per-candidate vote counts; entries are unconstrained reals once noised."""

    counts: np.ndarray
    total_private: int

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"histogram counts must be 1-D, got shape {arr.shape}")
        object.__setattr__(self, "counts", arr)


@dataclass(frozen=True)
class SelectionDistribution:
    """A valid probability vector over candidate indices."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"probabilities must be 1-D, got shape {arr.shape}")
        if (arr < 0.0).any():
            raise ValueError("probabilities must be nonnegative")
        if abs(float(arr.sum()) - 1.0) > 1e-12:
            raise ValueError(f"probabilities must sum to 1, got {arr.sum()!r}")
        object.__setattr__(self, "probs", arr)

    def __len__(self) -> int:
        return self.probs.shape[0]


def nn_histogram(private: EmbeddingSet, candidates: EmbeddingSet) -> VoteHistogram:
    """Count, per candidate, the private rows whose nearest candidate it is.

    Argmin ties break to the lowest candidate index. The sum of counts
    equals the number of private rows.
    """
    if private.dim != candidates.dim:
        raise ValueError(
            f"dimension mismatch: private is {private.dim}-D, candidates are {candidates.dim}-D"
        )
    if private.metric != candidates.metric:
        raise ValueError(
            f"metric mismatch: {private.metric!r} vs {candidates.metric!r}"
        )
    pvecs = private.metric_vectors()
    cvecs = candidates.metric_vectors()
    counts = np.zeros(len(candidates), dtype=np.int64)
    for start in range(0, pvecs.shape[0], _CHUNK_ROWS):
        chunk = pvecs[start : start + _CHUNK_ROWS]
        d2 = ((chunk[:, None, :] - cvecs[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argmin(d2, axis=1)
        np.add.at(counts, nearest, 1)
    return VoteHistogram(counts=counts.astype(np.float64), total_private=len(private))


def privatize(hist: VoteHistogram, sigma: float, rng: np.random.Generator) -> VoteHistogram:
    """Add independent N(0, sigma^2) noise per coordinate; sigma=0 is a no-op."""
    sigma = float(sigma)
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0.0:
        return hist
    noisy = hist.counts + rng.normal(0.0, sigma, size=hist.counts.shape[0])
    return VoteHistogram(counts=noisy, total_private=hist.total_private)


def normalize(hist: VoteHistogram) -> SelectionDistribution:
    """Clip negative counts to zero and normalize; all-nonpositive falls back to uniform.

    Clipping happens after privatization, so it is post-processing and costs
    no additional privacy.
    """
    clipped = np.clip(hist.counts, 0.0, None)
    total = float(clipped.sum())
    if total <= 0.0:
        probs = np.full(clipped.shape[0], 1.0) / clipped.shape[0]
    else:
        probs = clipped / total
    probs = probs / probs.sum()
    return SelectionDistribution(probs=probs)


def lookahead_average(
    variant_embeddings: list[EmbeddingSet], normalize_rows: bool = False
) -> EmbeddingSet:
    """Row-wise mean across K same-shape embedding sets.

    With ``normalize_rows`` each averaged row is L2-normalized afterward
    (zero rows stay at the origin).
    """
    if not variant_embeddings:
        raise ValueError("lookahead_average requires at least one embedding set")
    first = variant_embeddings[0]
    for other in variant_embeddings[1:]:
        if other.vectors.shape != first.vectors.shape:
            raise ValueError(
                f"shape mismatch across lookahead sets: {other.vectors.shape} vs {first.vectors.shape}"
            )
        if other.metric != first.metric:
            raise ValueError("metric mismatch across lookahead sets")
    stacked = np.stack([s.vectors for s in variant_embeddings], axis=0)
    mean = stacked.mean(axis=0)
    if normalize_rows:
        norms = np.linalg.norm(mean, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        mean = mean / norms
    return EmbeddingSet(vectors=mean, metric=first.metric)


def histogram_record(
    generation: int,
    sigma: float,
    raw: VoteHistogram,
    noisy: VoteHistogram,
    probs: SelectionDistribution,
) -> dict:
    """The JSON-serializable per-generation histogram dump."""
    return {
        "generation": int(generation),
        "sigma": float(sigma),
        "counts_raw": [int(c) for c in raw.counts],
        "counts_noisy": [float(c) for c in noisy.counts],
        "probs": [float(p) for p in probs.probs],
    }


def dump_histogram(path: str | Path, record: dict) -> None:
    Path(path).write_text(json.dumps(record, indent=2) + "\n")


def write_embeddings(path: str | Path, embeddings: EmbeddingSet | np.ndarray) -> None:
    """Write rows as little-endian float32 under the PTEV1 header."""
    vectors = embeddings.vectors if isinstance(embeddings, EmbeddingSet) else np.asarray(embeddings)
    if vectors.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {vectors.shape}")
    rows, dim = vectors.shape
    payload = vectors.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(EMBEDDINGS_MAGIC)
        fh.write(struct.pack("<II", rows, dim))
        fh.write(payload)


def read_embeddings(path: str | Path, metric: str = "euclidean") -> EmbeddingSet:
    """Read a PTEV1 embedding file back into float64 rows."""
    blob = Path(path).read_bytes()
    if blob[: len(EMBEDDINGS_MAGIC)] != EMBEDDINGS_MAGIC:
        raise ValueError(f"{path}: not a PTEV1 embedding file")
    rows, dim = struct.unpack_from("<II", blob, len(EMBEDDINGS_MAGIC))
    offset = len(EMBEDDINGS_MAGIC) + 8
    expected = rows * dim * 4
    body = blob[offset:]
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    vectors = np.frombuffer(body, dtype="<f4").reshape(rows, dim).astype(np.float64)
    return EmbeddingSet(vectors=vectors, metric=metric)
