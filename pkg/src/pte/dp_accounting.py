"""Gaussian-mechanism privacy accounting for the voting histogram.

The vote histogram has L2 sensitivity 1 (each private record contributes a
single vote), so adding N(0, sigma^2) noise per coordinate is (epsilon,
delta)-DP whenever

    Phi(1/(2*sigma) - epsilon*sigma) - e^epsilon * Phi(-1/(2*sigma) - epsilon*sigma) <= delta,

with Phi the standard normal CDF. Under adaptive composition across G
voting rounds the same condition holds with 1/(2*sigma) replaced by
sqrt(G)/(2*sigma) and epsilon*sigma by epsilon*sigma/sqrt(G), which is the
single-round condition evaluated at sigma/sqrt(G). ``calibrate_sigma``
inverts the composed condition numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InternalError

_SQRT_2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# Saturation point: beyond this |x| the double-precision CDF is exactly 0 or 1.
_CDF_SATURATION = 38.0

_BISECT_LO = 1e-4
_BISECT_HI = 1e6
_BISECT_TOL = 1e-9
_BISECT_MAX_ITER = 200

DEFAULT_DELTA = 1e-5


@dataclass(frozen=True)
class PrivacyBudget:
    """Target (epsilon, delta) differential-privacy guarantee."""

    epsilon: float
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError(f"epsilon must be a positive finite real, got {self.epsilon}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Calibrated per-iteration noise scale for a run of ``iterations`` votes."""

    sigma: float
    iterations: int

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be a positive finite real, got {self.sigma}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


def std_normal_cdf(x: float) -> float:
    """Standard normal CDF via erfc, saturating to exact 0/1 in the far tails.

    Absolute error is below 1e-14 for |x| <= 8.
    """
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"std_normal_cdf requires finite input, got {x}")
    if x > _CDF_SATURATION:
        return 1.0
    if x < -_CDF_SATURATION:
        return 0.0
    return 0.5 * math.erfc(-x / _SQRT_2)


def log_std_normal_cdf(x: float) -> float:
    """log Phi(x) without underflow, accurate deep into the lower tail.

    Below x = -20 the direct erfc route loses nothing yet, but an
    asymptotic Mills-ratio expansion is used to stay finite for
    arbitrarily negative arguments.
    """
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"log_std_normal_cdf requires finite input, got {x}")
    if x > -20.0:
        return math.log(0.5 * math.erfc(-x / _SQRT_2))
    inv2 = 1.0 / (x * x)
    series = 1.0 + inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + inv2 * 105.0)))
    return -0.5 * x * x - math.log(-x) - _LOG_SQRT_2PI + math.log(series)


def _delta_condition(shift: float, pull: float, epsilon: float) -> float:
    """Evaluate Phi(shift - pull) - e^epsilon * Phi(-shift - pull), clipped to [0, 1].

    The second term is computed in log space so large epsilon never
    overflows: the exponential is only materialized after cancellation
    against the vanishing tail CDF.
    """
    first = std_normal_cdf(shift - pull)
    log_second = epsilon + log_std_normal_cdf(-(shift + pull))
    if log_second >= 0.0:
        return 0.0
    delta = first - math.exp(log_second)
    if delta <= 0.0:
        return 0.0
    return min(delta, 1.0)


def gaussian_delta(sigma: float, epsilon: float) -> float:
    """Exact delta of a single unit-sensitivity Gaussian release at scale sigma."""
    sigma = float(sigma)
    epsilon = float(epsilon)
    if not (math.isfinite(sigma) and sigma > 0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not (math.isfinite(epsilon) and epsilon >= 0):
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    return _delta_condition(1.0 / (2.0 * sigma), epsilon * sigma, epsilon)


def composed_delta(sigma: float, epsilon: float, iterations: int) -> float:
    """Delta after ``iterations`` adaptive rounds at per-round scale sigma.

    Evaluates the composed condition directly; algebraically this equals
    ``gaussian_delta(sigma / sqrt(iterations), epsilon)``.
    """
    sigma = float(sigma)
    epsilon = float(epsilon)
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if not (math.isfinite(sigma) and sigma > 0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not (math.isfinite(epsilon) and epsilon >= 0):
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    root_g = math.sqrt(iterations)
    return _delta_condition(root_g / (2.0 * sigma), epsilon * sigma / root_g, epsilon)


def _calibrate_single_round(epsilon: float, delta: float) -> float:
    """Smallest sigma with gaussian_delta(sigma, epsilon) <= delta, by bisection.

    The objective is strictly decreasing in sigma, so plain bisection on
    [1e-4, 1e6] is guaranteed; the bracket is verified rather than assumed.
    """
    lo, hi = _BISECT_LO, _BISECT_HI
    if gaussian_delta(hi, epsilon) > delta:
        raise InternalError(
            f"delta={delta} unattainable at epsilon={epsilon} within sigma <= {hi}"
        )
    if gaussian_delta(lo, epsilon) <= delta:
        raise InternalError(
            f"calibration bracket invalid: sigma={lo} already satisfies delta={delta}"
        )
    for _ in range(_BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if gaussian_delta(mid, epsilon) <= delta:
            hi = mid
        else:
            lo = mid
        if hi - lo <= _BISECT_TOL:
            return hi
    raise InternalError(
        f"sigma bisection did not converge after {_BISECT_MAX_ITER} iterations"
    )


def calibrate_sigma(budget: PrivacyBudget, iterations: int) -> NoiseSchedule:
    """Smallest per-iteration sigma meeting ``budget`` over ``iterations`` rounds.

    The composed condition at scale sigma equals the single-round condition
    at sigma/sqrt(G), so the G-round optimum is exactly sqrt(G) times the
    single-round one; calibrating once and rescaling keeps that law exact.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    sigma = math.sqrt(iterations) * _calibrate_single_round(budget.epsilon, budget.delta)
    # Rescaling can land a rounding error above delta; nudge within 1e-12 relative.
    for _ in range(64):
        if composed_delta(sigma, budget.epsilon, iterations) <= budget.delta:
            return NoiseSchedule(sigma=sigma, iterations=iterations)
        sigma *= 1.0 + 1e-12
    raise InternalError("calibrated sigma failed the composed condition after nudging")
