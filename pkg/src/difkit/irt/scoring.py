from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..data import ResponseMatrix
from .model import irf, log_tables
from .quadrature import grid_log_weights


def eap_scores(data: ResponseMatrix, fit) -> tuple[np.ndarray, np.ndarray]:
    """Expected a posteriori trait estimates and posterior sds, one per person.

    Persons without responses get their group's prior mean and sd.
    """
    pr = fit.problem
    st = fit.state
    nodes = pr.nodes
    score = np.empty(data.persons)
    sd = np.empty(data.persons)
    for g in range(data.n_groups):
        rows = np.flatnonzero(data.group_of == g)
        logp, log1mp = log_tables(nodes, st.A[:, g], st.C[:, g], st.Z[:, g], pr.is3pl)
        logw = grid_log_weights(nodes, st.mu[g], st.sd[g])
        block = kernels.prepare(data.cells[rows])
        _, post = kernels.posterior(block, logp, log1mp, logw)
        m = post @ nodes
        v = post @ (nodes * nodes) - m * m
        score[rows] = m
        sd[rows] = np.sqrt(np.maximum(v, 0.0))
    return score, sd


@dataclass(frozen=True)
class IccTable:
    """Response probabilities per item, group and grid point."""

    item_ids: tuple
    group_names: tuple
    theta: np.ndarray
    prob: np.ndarray  # (items, groups, grid)

    def rows(self, items=None):
        """Yield ``(item_id, group, theta, p)`` tuples, optionally for a subset of item ids."""
        keep = range(len(self.item_ids)) if items is None else [self.item_ids.index(i) for i in items]
        for j in keep:
            for g, name in enumerate(self.group_names):
                for t, p in zip(self.theta, self.prob[j, g]):
                    yield self.item_ids[j], name, float(t), float(p)


def icc_table(fit, theta_grid=None) -> IccTable:
    """Sample every item's response function per group on a trait grid (default 81 points on [-4, 4])."""
    theta = np.linspace(-4.0, 4.0, 81) if theta_grid is None else np.asarray(theta_grid, float)
    J, G = fit.A.shape
    prob = np.empty((J, G, theta.size))
    for j in range(J):
        for g in range(G):
            prob[j, g] = irf(theta, fit.params(j, g))
    return IccTable(fit.item_ids, fit.group_names, theta, prob)
