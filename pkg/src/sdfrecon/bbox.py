"""Axis-aligned scene bounding box."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ValueError("BBox is 3-D")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("BBox must have positive extent")

    @classmethod
    def cube(cls, half_extent, center=(0.0, 0.0, 0.0)):
        c = np.asarray(center, dtype=np.float64)
        h = float(half_extent)
        return cls(tuple(c - h), tuple(c + h))

    @property
    def lo_arr(self):
        return np.asarray(self.lo)

    @property
    def hi_arr(self):
        return np.asarray(self.hi)

    @property
    def center(self):
        return 0.5 * (self.lo_arr + self.hi_arr)

    @property
    def extent(self):
        return self.hi_arr - self.lo_arr

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.extent))

    def contains(self, x):
        x = np.atleast_2d(x)
        return np.all((x >= self.lo_arr) & (x <= self.hi_arr), axis=-1)

    def clamp(self, x):
        return np.clip(x, self.lo_arr, self.hi_arr)

    def sample(self, n, rng):
        """n points uniform in the box."""
        u = rng.random((n, 3))
        return self.lo_arr + u * self.extent
