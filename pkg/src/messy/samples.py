"""Immutable sample matrices with cached column statistics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SampleSet:
    """N x d matrix of i.i.d. samples; entries must be finite.

    The underlying array is made read-only so instances can be shared
    freely.  1-d input is promoted to a single-column matrix.
    """

    values: np.ndarray
    source: str = ""
    seed: int | None = None
    mean: np.ndarray = field(init=False, repr=False, compare=False)
    std: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] < 1:
            raise ValueError("values must be a non-empty (n, d) matrix")
        if not np.isfinite(vals).all():
            raise ValueError("samples must be finite")
        vals = np.array(vals)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        mean = vals.mean(axis=0)
        std = vals.std(axis=0)
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    def column_min(self) -> np.ndarray:
        return self.values.min(axis=0)

    def column_max(self) -> np.ndarray:
        return self.values.max(axis=0)

    def bounding_box(self) -> np.ndarray:
        """(d, 2) array of per-dimension [min, max]."""
        return np.column_stack([self.column_min(), self.column_max()])

    def subset(self, index) -> "SampleSet":
        return SampleSet(self.values[index], source=self.source, seed=self.seed)

    def __len__(self):
        return self.n
