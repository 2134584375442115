"""Pure numpy E-step, used when the compiled extension is unavailable."""

from __future__ import annotations

import math

import numpy as np


class DenseBlock:
    __slots__ = ("x1", "x0", "xo", "n_persons", "n_items")

    def __init__(self, cells):
        cells = np.asarray(cells)
        self.x1 = (cells == 1).astype(float)
        self.x0 = (cells == 0).astype(float)
        self.xo = self.x1 + self.x0
        self.n_persons, self.n_items = cells.shape


def prepare(cells):
    return DenseBlock(cells)


def posterior(block, logp, log1mp, logw):
    ll = block.x1 @ logp + block.x0 @ log1mp + logw
    m = ll.max(axis=1, keepdims=True)
    post = np.exp(ll - m)
    s = post.sum(axis=1, keepdims=True)
    post /= s
    return (m + np.log(s)).ravel(), post


def estep(block, logp, log1mp, logw):
    ll, post = posterior(block, logp, log1mp, logw)
    r = block.x1.T @ post
    n = block.xo.T @ post
    return math.fsum(ll), r, n, post.sum(axis=0)
