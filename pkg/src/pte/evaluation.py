"""Synthetic-vs-private alignment metrics.

Two complementary measures: the Frechet distance between Gaussians fitted
to each embedding set (the computational core of FID), and exact
Wasserstein-1 on equal-size sets via optimal assignment, kept as a
desk-scale oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dp_voting import EmbeddingSet

COVARIANCE_SYMMETRY_TOL = 1e-10
PSD_EIGENVALUE_TOL = -1e-8
W1_MAX_POINTS = 512


@dataclass(frozen=True)
class GaussianStats:
    """Sample mean and covariance summarizing one embedding set."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if mean.ndim != 1:
            raise ValueError(f"mean must be a vector, got shape {mean.shape}")
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.shape[0]}")
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise ValueError("statistics must be finite")
        if np.max(np.abs(cov - cov.T)) > COVARIANCE_SYMMETRY_TOL:
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class DistanceReport:
    """Metric bundle for one synthetic-vs-private comparison."""

    fid_core: float
    wasserstein1: float | None
    sample_counts: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "fid_core": self.fid_core,
            "wasserstein1": self.wasserstein1,
            "sample_counts": list(self.sample_counts),
        }


def gaussian_stats(embeddings: EmbeddingSet) -> GaussianStats:
    """Sample mean and (n-1)-denominator covariance, symmetrized."""
    x = embeddings.vectors
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 rows to estimate covariance, got {x.shape[0]}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean=mean, covariance=cov)


def _psd_sqrt(cov: np.ndarray, label: str) -> np.ndarray:
    """Symmetric PSD square root by eigendecomposition; rejects non-PSD input."""
    eigvals, eigvecs = np.linalg.eigh(cov)
    smallest = float(eigvals.min())
    if smallest < PSD_EIGENVALUE_TOL:
        raise ValueError(f"{label} covariance is not PSD: eigenvalue {smallest}")
    clipped = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(clipped)) @ eigvecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Frechet distance between two Gaussians.

    The cross term uses the symmetric form trace((C1^1/2 C2 C1^1/2)^1/2),
    evaluated by eigendecomposition; the sandwich is PSD in exact
    arithmetic, so stray negative eigenvalues are rounding noise and are
    clipped to zero. The result is clipped at zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.covariance, "first")
    _psd_sqrt(b.covariance, "second")  # validation only
    inner = root_a @ b.covariance @ root_a
    inner = 0.5 * (inner + inner.T)
    inner_eigs = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    trace_sqrt = float(np.sqrt(inner_eigs).sum())
    diff = a.mean - b.mean
    val = float(diff @ diff) + float(np.trace(a.covariance) + np.trace(b.covariance)) - 2.0 * trace_sqrt
    return max(val, 0.0)


def _distance_matrix(a: EmbeddingSet, b: EmbeddingSet) -> np.ndarray:
    av = a.metric_vectors()
    bv = b.metric_vectors()
    d2 = ((av[:, None, :] - bv[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(np.clip(d2, 0.0, None))


def exact_wasserstein1(a: EmbeddingSet, b: EmbeddingSet) -> float:
    """Exact W1 between equal-size sets: optimal assignment cost averaged over points."""
    if len(a) != len(b):
        raise ValueError(f"set sizes must match, got {len(a)} and {len(b)}; subsample upstream")
    if len(a) > W1_MAX_POINTS:
        raise ValueError(f"exact W1 is capped at {W1_MAX_POINTS} points, got {len(a)}")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.metric != b.metric:
        raise ValueError(f"metric mismatch: {a.metric!r} vs {b.metric!r}")
    dmat = _distance_matrix(a, b)
    rows, cols = linear_sum_assignment(dmat)
    return float(dmat[rows, cols].sum()) / len(a)


def subsample(embeddings: EmbeddingSet, count: int, seed: int) -> EmbeddingSet:
    """Seeded without-replacement subsample, kept in original row order."""
    if count > len(embeddings):
        raise ValueError(f"cannot subsample {count} rows from {len(embeddings)}")
    if count == len(embeddings):
        return embeddings
    rng = np.random.default_rng(seed)
    indices = np.sort(rng.choice(len(embeddings), size=count, replace=False))
    return embeddings.select(indices)


def distance_report(
    private: EmbeddingSet,
    synthetic: EmbeddingSet,
    include_w1: bool = False,
    w1_seed: int = 0,
) -> DistanceReport:
    """Compare two embedding sets; W1 sides are subsampled to a common size."""
    fid = frechet_distance(gaussian_stats(private), gaussian_stats(synthetic))
    w1 = None
    if include_w1:
        n = min(len(private), len(synthetic), W1_MAX_POINTS)
        w1 = exact_wasserstein1(
            subsample(private, n, w1_seed), subsample(synthetic, n, w1_seed + 1)
        )
    return DistanceReport(
        fid_core=fid,
        wasserstein1=w1,
        sample_counts=(len(private), len(synthetic)),
    )
