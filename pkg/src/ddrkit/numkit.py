"""Dense numeric primitives shared by every other module.

Matrices are plain ``numpy.ndarray`` objects in float64, row-major, always
dense (problem sizes here stay around p <= 1000, so dense storage wins).
Randomness flows through :class:`RngStream`, a small splittable handle over
numpy's ``SeedSequence`` machinery: the same ``(seed, stream)`` pair always
reproduces the same draws, and distinct streams are statistically
independent, which is what lets Monte-Carlo replications run in parallel
with ``stream = replication index``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


class NotPositiveDefinite(Exception):
    """Raised when a Cholesky pivot falls at or below the tolerance."""


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    if isinstance(tag, str):
        # crc32 is stable across platforms and Python versions, unlike hash().
        return zlib.crc32(tag.encode("utf-8"))
    raise TypeError(f"stream tag must be int or str, got {type(tag)!r}")


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by ``(seed, stream)``.

    ``substream(*tags)`` splits off statistically independent child streams
    (tags may be ints or short strings); use one child per logically distinct
    consumer so that adding a new consumer never shifts the draws of an
    existing one. A stream is owned by a single task and never shared.
    """

    seed: int
    stream: int = 0
    path: tuple = field(default=())

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream, *self.path)
        )
        return np.random.default_rng(ss)

    def substream(self, *tags) -> "RngStream":
        extra = tuple(_tag_to_int(t) for t in tags)
        return RngStream(self.seed, self.stream, self.path + extra)


def cholesky(sigma: np.ndarray, pivot_tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular L with L @ L.T == sigma.

    ``sigma`` must be symmetric (checked to 1e-10) and positive definite;
    a pivot <= ``pivot_tol`` raises :class:`NotPositiveDefinite`. Row-by-row
    elimination keeps explicit pivot control, which numpy's LAPACK wrapper
    does not expose.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise ValueError("matrix entries must be finite")
    asym = np.max(np.abs(sigma - sigma.T)) if sigma.size else 0.0
    if asym > 1e-10:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")

    n = sigma.shape[0]
    lower = np.zeros_like(sigma)
    for j in range(n):
        pivot = sigma[j, j] - lower[j, :j] @ lower[j, :j]
        if pivot <= pivot_tol:
            raise NotPositiveDefinite(
                f"pivot {pivot:.3g} at column {j} is <= {pivot_tol:.0e}"
            )
        lower[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            lower[j + 1 :, j] = (
                sigma[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]
            ) / lower[j, j]
    return lower


def gaussian_vector(rng: RngStream | np.random.Generator, chol: np.ndarray) -> np.ndarray:
    """One draw of chol @ z with z i.i.d. standard normal from ``rng``."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    z = gen.standard_normal(chol.shape[1])
    return chol @ z


def gaussian_matrix(
    rng: RngStream | np.random.Generator, chol: np.ndarray, n: int
) -> np.ndarray:
    """n rows of chol @ z; row i uses the i-th block of draws from ``rng``."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    z = gen.standard_normal((n, chol.shape[1]))
    return z @ chol.T
