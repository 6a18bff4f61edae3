"""Planar search-domain geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned box in the horizontal plane, bounds in metres."""

    x_min: float = 0.0
    x_max: float = 50.0
    y_min: float = 0.0
    y_max: float = 50.0

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError("box bounds are inverted")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max])

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, xy, atol: float = 1e-9):
        """True where points lie inside the box (closed, with tolerance).

        Accepts a single (2,) point or an (..., 2) array; returns a bool
        of matching leading shape.
        """
        xy = np.asarray(xy, dtype=float)
        ok = (xy[..., 0] >= self.x_min - atol) & (xy[..., 0] <= self.x_max + atol)
        ok &= (xy[..., 1] >= self.y_min - atol) & (xy[..., 1] <= self.y_max + atol)
        return ok

    def clip(self, xy) -> np.ndarray:
        """Project points onto the box."""
        return np.clip(np.asarray(xy, dtype=float), self.lo, self.hi)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n points uniformly from the box."""
        return rng.uniform(self.lo, self.hi, size=(n, 2))

    def ball_margin(self, other: "Box2D") -> float:
        """Largest r such that every point of `other` stays inside this box
        after adding any vector of Euclidean norm <= r. Negative when `other`
        already pokes out."""
        gaps = [
            other.x_min - self.x_min,
            self.x_max - other.x_max,
            other.y_min - self.y_min,
            self.y_max - other.y_max,
        ]
        return float(min(gaps))

    @staticmethod
    def point(xy) -> "Box2D":
        """Degenerate box holding a single point."""
        x, y = float(xy[0]), float(xy[1])
        return Box2D(x, x, y, y)
