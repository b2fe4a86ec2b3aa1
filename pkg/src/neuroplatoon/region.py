from dataclasses import dataclass

import numpy as np


@dataclass
class Region:
    """Axis-aligned box of error states that must contain the origin.

    ``grow`` scales the box by ``growth_factor`` and clips it to ``target``.
    """

    lower: np.ndarray
    upper: np.ndarray
    growth_factor: float = 1.5
    target_lower: np.ndarray = None
    target_upper: np.ndarray = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("lower/upper must be vectors of equal length")
        if np.any(self.lower >= self.upper):
            raise ValueError("need lower < upper in every coordinate")
        if np.any(self.lower > 0) or np.any(self.upper < 0):
            raise ValueError("region must contain the origin")
        if self.growth_factor <= 1:
            raise ValueError("growth_factor must exceed 1")
        self.target_lower = self.lower.copy() if self.target_lower is None else np.asarray(self.target_lower, dtype=float)
        self.target_upper = self.upper.copy() if self.target_upper is None else np.asarray(self.target_upper, dtype=float)
        if np.any(self.target_lower > self.lower) or np.any(self.target_upper < self.upper):
            raise ValueError("target bounds must enclose the starting region")

    @classmethod
    def symmetric(cls, half_widths, target=None, growth_factor=1.5):
        hw = np.asarray(half_widths, dtype=float)
        tgt = hw if target is None else np.asarray(target, dtype=float)
        return cls(-hw, hw, growth_factor, -tgt, tgt)

    @property
    def dim(self):
        return self.lower.shape[0]

    @property
    def at_target(self):
        return bool(np.all(self.lower <= self.target_lower) and np.all(self.upper >= self.target_upper))

    @property
    def scale(self):
        """Largest fraction of the target box covered along any axis."""
        span = self.upper - self.lower
        tspan = self.target_upper - self.target_lower
        return float(np.min(span / tspan))

    def grow(self):
        return Region(
            np.maximum(self.lower * self.growth_factor, self.target_lower),
            np.minimum(self.upper * self.growth_factor, self.target_upper),
            self.growth_factor,
            self.target_lower,
            self.target_upper,
        )

    def sample(self, rng: np.random.Generator, size=None):
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lower, self.upper, size=shape)

    def contains(self, x, tol=0.0):
        x = np.asarray(x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))
