from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


def grid_log_weights(nodes, mean=0.0, sd=1.0):
    """Log of the normal density on ``nodes``, renormalized to sum to one."""
    z = (nodes - mean) / sd
    lw = -0.5 * z * z
    return lw - logsumexp(lw)


@dataclass(frozen=True)
class Quadrature:
    """Fixed, equally spaced latent-trait grid.

    Each group's prior is its normal density evaluated on the grid and
    renormalized, so group distributions move the weights, not the nodes.
    """

    n_nodes: int = 49
    bound: float = 6.0

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(-self.bound, self.bound, self.n_nodes)

    def log_weights(self, mean: float = 0.0, sd: float = 1.0) -> np.ndarray:
        return grid_log_weights(self.nodes, mean, sd)


def dist_objective(nodes, counts, mean, sd) -> float:
    """``sum_q counts_q * log w_q(mean, sd)``: the group-prior part of the EM objective."""
    return float(counts @ grid_log_weights(nodes, mean, sd))


def dist_gradient(nodes, counts, mean, sd):
    """Gradient of :func:`dist_objective` with respect to (mean, sd)."""
    w = np.exp(grid_log_weights(nodes, mean, sd))
    d = nodes - mean
    total = counts.sum()
    g_mean = (counts @ d - total * (w @ d)) / sd**2
    g_sd = (counts @ (d * d) - total * (w @ (d * d))) / sd**3
    return g_mean, g_sd
