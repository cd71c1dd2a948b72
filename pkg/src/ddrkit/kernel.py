"""One-dimensional ratio-form kernel smoothing over single-index scores.

The smoother estimates a conditional mean at a point w as

    lhat(w) / fhat(w),   lhat = (1/nh) sum_i Z_i K((w_i - w)/h),
                         fhat = (1/nh) sum_i K((w_i - w)/h),

with a Gaussian kernel only (it satisfies every smoothness condition the
surrounding estimation theory needs, so one kernel is enough and gets fully
tested). When the denominator drops below 1e-12 the smoother falls back to
the plain response mean and flags the evaluation, since far in the tails
there is nothing local to average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DENSITY_FLOOR = 1e-12
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DegenerateScores(Exception):
    """All training scores identical; no bandwidth scale exists."""


def gaussian_kernel(u: np.ndarray) -> np.ndarray:
    """Standard normal density; K(0) = 1/sqrt(2 pi) ~= 0.39894."""
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(u))


@dataclass(frozen=True)
class KernelSmoother:
    """Immutable training scores/responses plus a fixed bandwidth."""

    scores: np.ndarray
    responses: np.ndarray
    bandwidth: float

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=float))
        object.__setattr__(self, "responses", np.asarray(self.responses, dtype=float))
        if self.scores.ndim != 1 or self.scores.shape != self.responses.shape:
            raise ValueError("scores and responses must be equal-length 1-d arrays")
        if self.scores.size < 1:
            raise ValueError("need at least one training point")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def smooth_many(s: KernelSmoother, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the smoother at many points.

    Returns (values, fallback_mask); fallback_mask marks evaluations where
    the local density fell below the floor and the response mean was used.
    """
    points = np.atleast_1d(np.asarray(points, dtype=float))
    n = s.scores.size
    h = s.bandwidth
    # (m, n) kernel weights; problem sizes keep this comfortably in memory.
    k = gaussian_kernel((s.scores[None, :] - points[:, None]) / h)
    fhat = k.sum(axis=1) / (n * h)
    lhat = k @ s.responses / (n * h)
    fallback = fhat < DENSITY_FLOOR
    values = np.empty(points.size)
    values[fallback] = float(np.mean(s.responses))
    ok = ~fallback
    values[ok] = lhat[ok] / fhat[ok]
    return values, fallback


def smooth_at(s: KernelSmoother, w: float) -> float:
    """Ratio-form smoothed value at a single point."""
    values, _ = smooth_many(s, np.array([w]))
    return float(values[0])


def bandwidth_rot(scores: np.ndarray) -> float:
    """Rule-of-thumb bandwidth 1.06 * sd * n^(-1/5), floored at 1e-6."""
    scores = np.asarray(scores, dtype=float)
    if scores.size < 2:
        raise ValueError("need at least 2 scores")
    sd = float(np.std(scores, ddof=1))
    # constant arrays can leave ~1e-16 of float dust after mean subtraction
    if sd <= 1e-12 * max(1.0, float(np.abs(scores).max())):
        raise DegenerateScores("all scores are identical")
    return max(1.06 * sd * scores.size ** (-0.2), 1e-6)


def lscv_grid(scores: np.ndarray, size: int = 30) -> np.ndarray:
    """Log-spaced candidate bandwidths around the rule of thumb."""
    h0 = bandwidth_rot(scores)
    return np.geomspace(h0 / 10.0, 10.0 * h0, size)


def bandwidth_lscv(
    scores: np.ndarray, responses: np.ndarray, grid: np.ndarray
) -> float:
    """Bandwidth minimizing leave-one-out squared prediction error.

    Ties break to the smallest h. A point whose leave-one-out density is
    below the floor predicts the mean of the remaining responses.
    """
    scores = np.asarray(scores, dtype=float)
    responses = np.asarray(responses, dtype=float)
    grid = np.sort(np.atleast_1d(np.asarray(grid, dtype=float)))
    if grid.size == 0:
        raise ValueError("grid must be nonempty")
    if grid.size == 1:
        return float(grid[0])

    n = scores.size
    diff = scores[None, :] - scores[:, None]
    loo_means = (responses.sum() - responses) / (n - 1)
    best_h, best_loss = float(grid[0]), np.inf
    for h in grid:
        k = gaussian_kernel(diff / h)
        np.fill_diagonal(k, 0.0)
        denom = k.sum(axis=1) / (n * h)
        numer = k @ responses / (n * h)
        pred = np.where(denom >= DENSITY_FLOOR, numer / np.maximum(denom, DENSITY_FLOOR),
                        loo_means)
        loss = float(np.mean((pred - responses) ** 2))
        if loss < best_loss:
            best_loss, best_h = loss, float(h)
    return best_h
