"""Independent reference implementations used only by the test suite.

Everything here is deliberately written from first principles (quadrature,
enumeration, naive loops) so it shares no code path with the package under
test. Slow is fine; these run at desk scale.
"""

from __future__ import annotations

import itertools
import math

import mpmath
import numpy as np

mpmath.mp.dps = 40


def cdf_quadrature(x: float) -> mpmath.mpf:
    """Standard normal CDF by direct quadrature of the density."""
    density = lambda t: mpmath.exp(-t * t / 2) / mpmath.sqrt(2 * mpmath.pi)
    if x >= 0:
        return mpmath.mpf("0.5") + mpmath.quad(density, [0, x])
    return mpmath.mpf("0.5") - mpmath.quad(density, [x, 0])


def delta_quadrature(sigma: float, epsilon: float, iterations: int = 1) -> mpmath.mpf:
    """Gaussian-mechanism delta at unit L2 sensitivity, quadrature CDF only.

    For iterations > 1 the composed condition rescales the two CDF
    arguments by sqrt(iterations).
    """
    sigma = mpmath.mpf(sigma)
    epsilon = mpmath.mpf(epsilon)
    root_g = mpmath.sqrt(iterations)
    a = root_g / (2 * sigma) - epsilon * sigma / root_g
    b = -root_g / (2 * sigma) - epsilon * sigma / root_g
    return cdf_quadrature(a) - mpmath.exp(epsilon) * cdf_quadrature(b)


def calibrate_bisection(
    epsilon: float, delta: float, iterations: int = 1, tol: float = 1e-12
) -> float:
    """Smallest sigma with delta_quadrature(sigma) <= delta, by plain bisection."""
    lo, hi = mpmath.mpf("1e-4"), mpmath.mpf("1e6")
    target = mpmath.mpf(delta)
    if not delta_quadrature(float(hi), epsilon, iterations) <= target:
        raise RuntimeError("upper bracket too small")
    if delta_quadrature(float(lo), epsilon, iterations) <= target:
        raise RuntimeError("lower bracket too large")
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if delta_quadrature(float(mid), epsilon, iterations) <= target:
            hi = mid
        else:
            lo = mid
    return float(hi)


def nn_histogram_loops(private, candidates):
    """Reverse-NN vote counts by a naive double loop, ties to lowest index."""
    counts = [0] * len(candidates)
    for p in private:
        best_j = 0
        best_d = None
        for j, c in enumerate(candidates):
            d = 0.0
            for a, b in zip(p, c):
                diff = float(a) - float(b)
                d += diff * diff
            if best_d is None or d < best_d:
                best_d = d
                best_j = j
        counts[best_j] += 1
    return counts


def l2_normalize_rows(rows):
    out = []
    for r in rows:
        n = math.sqrt(sum(float(v) * float(v) for v in r))
        out.append([float(v) / n if n > 0 else 0.0 for v in r])
    return out


def covariance_two_pass(rows):
    """Naive two-pass mean/covariance with n-1 denominator."""
    rows = [list(map(float, r)) for r in rows]
    n = len(rows)
    m = len(rows[0])
    mean = [sum(r[k] for r in rows) / n for k in range(m)]
    cov = [[0.0] * m for _ in range(m)]
    for r in rows:
        for i in range(m):
            for j in range(m):
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j])
    for i in range(m):
        for j in range(m):
            cov[i][j] /= n - 1
    return np.array(mean), np.array(cov)


def sqrtm_denman_beavers(a: np.ndarray, iters: int = 60) -> np.ndarray:
    """Matrix square root by the Denman-Beavers iteration.

    Requires a to have no eigenvalues on the closed negative real axis,
    which holds for the well-conditioned PSD products used in tests.
    """
    y = np.array(a, dtype=float)
    z = np.eye(a.shape[0])
    for _ in range(iters):
        y_next = 0.5 * (y + np.linalg.inv(z))
        z_next = 0.5 * (z + np.linalg.inv(y))
        if np.max(np.abs(y_next - y)) < 1e-14:
            y, z = y_next, z_next
            break
        y, z = y_next, z_next
    return y


def frechet_via_denman_beavers(mu1, cov1, mu2, cov2) -> float:
    """Gaussian Frechet distance with the cross term from a DB square root."""
    diff = np.asarray(mu1, float) - np.asarray(mu2, float)
    cross = sqrtm_denman_beavers(np.asarray(cov1, float) @ np.asarray(cov2, float))
    val = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))
    return val


_PERM_CACHE: dict[int, np.ndarray] = {}


def _permutations(n: int) -> np.ndarray:
    if n not in _PERM_CACHE:
        _PERM_CACHE[n] = np.array(list(itertools.permutations(range(n))), dtype=int)
    return _PERM_CACHE[n]


def wasserstein1_enumeration(a, b) -> float:
    """Exact W1 over equal-size point sets by enumerating all matchings."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n = len(a)
    dmat = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    perms = _permutations(n)
    costs = dmat[np.arange(n)[None, :], perms].sum(axis=1)
    return float(costs.min()) / n
