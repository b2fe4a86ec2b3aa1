"""Interval bound propagation through leaky-ReLU networks."""

from dataclasses import dataclass
from typing import List

import numpy as np

from ..nn import MlpParams, leaky_relu


@dataclass
class ActivationBounds:
    """Pre-activation intervals per layer; ``lower[i][j] <= z_ij <= upper[i][j]``."""

    lower: List[np.ndarray]
    upper: List[np.ndarray]

    @property
    def output(self):
        return self.lower[-1], self.upper[-1]


def affine_interval(w, b, lo, hi):
    mid = 0.5 * (lo + hi)
    rad = 0.5 * (hi - lo)
    c = w @ mid + b
    r = np.abs(w) @ rad
    return c - r, c + r


def propagate_bounds(net: MlpParams, lo, hi) -> ActivationBounds:
    """Sound per-neuron pre-activation bounds for inputs in ``[lo, hi]``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != (net.n_in,) or np.any(lo > hi):
        raise ValueError("input box does not match the network")
    lowers, uppers = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        zl, zu = affine_interval(w, b, lo, hi)
        lowers.append(zl)
        uppers.append(zu)
        if i != last:
            # leaky ReLU with slope in [0, 1] is monotone
            lo, hi = leaky_relu(zl, net.slopes[i]), leaky_relu(zu, net.slopes[i])
    return ActivationBounds(lowers, uppers)
