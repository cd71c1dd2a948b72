"""The one input data shape: observation indicators, masked outcomes, covariates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ObservedDataset:
    """n rows of (t, t*y, x).

    ``y[i]`` is meaningful only where ``t[i] == 1``; masked entries may hold
    anything (simulated data stores NaN there on purpose, so that any code
    path reading a masked outcome blows up loudly). Estimation code must
    index through ``complete_cases()`` before touching ``y``.
    """

    t: np.ndarray
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t)
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if t.ndim != 1 or y.ndim != 1 or x.ndim != 2:
            raise ValueError("expected t (n,), y (n,), x (n, p)")
        n = t.shape[0]
        if y.shape[0] != n or x.shape[0] != n:
            raise ValueError("t, y, x must share the same number of rows")
        if n < 2 or x.shape[1] < 1:
            raise ValueError("need n >= 2 rows and p >= 1 covariates")
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("t must be 0/1")
        if not np.all(np.isfinite(y[t == 1])):
            raise ValueError("observed outcomes (t == 1) must be finite")
        object.__setattr__(self, "t", t.astype(np.int8))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.t.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def complete_cases(self) -> np.ndarray:
        """Indices of rows with an observed outcome."""
        return np.flatnonzero(self.t == 1)

    def subset(self, rows: np.ndarray) -> "ObservedDataset":
        return ObservedDataset(self.t[rows], self.y[rows], self.x[rows])
