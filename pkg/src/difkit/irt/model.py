"""Item response functions in slope-intercept form.

2PL: ``P = sigmoid(a * theta + c)``; 3PL adds a lower asymptote
``g = sigmoid(z)``: ``P = g + (1 - g) * sigmoid(a * theta + c)``.
Difficulty is derived as ``b = -c / a``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

SLOPE_FLOOR = 1e-3
KINDS = ("a", "c", "z")


@dataclass(frozen=True)
class ItemParams:
    a: float
    c: float
    z: float | None = None

    @property
    def b(self) -> float:
        return -self.c / self.a

    @property
    def g(self) -> float:
        return 0.0 if self.z is None else float(expit(self.z))

    @property
    def is_3pl(self) -> bool:
        return self.z is not None

    @classmethod
    def from_difficulty(cls, a: float, b: float, g: float | None = None) -> "ItemParams":
        z = None if g is None else float(np.log(g / (1.0 - g)))
        return cls(a, -a * b, z)


@dataclass(frozen=True)
class GroupDist:
    mean: float = 0.0
    sd: float = 1.0


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def irf(theta, item: ItemParams):
    """Probability of a correct response at ``theta``."""
    s = expit(item.a * np.asarray(theta, dtype=float) + item.c)
    if item.z is None:
        return s
    g = expit(item.z)
    return g + (1.0 - g) * s


def log_tables(nodes, a, c, z, is3pl):
    """``log P`` and ``log(1 - P)`` for every item (rows) at every node (columns).

    ``z`` entries are ignored where ``is3pl`` is false.
    """
    eta = a[:, None] * nodes[None, :] + c[:, None]
    ls = log_sigmoid(eta)
    l1s = log_sigmoid(-eta)
    zz = np.where(is3pl, z, 0.0)
    lg = np.where(is3pl, log_sigmoid(zz), -np.inf)[:, None]
    l1g = np.where(is3pl, log_sigmoid(-zz), 0.0)[:, None]
    logp = np.logaddexp(lg, l1g + ls)
    log1mp = l1g + l1s
    return np.ascontiguousarray(logp), np.ascontiguousarray(log1mp)


def item_objective(nodes, r, n, a, c, z, is3pl):
    """Expected complete-data log-likelihood per item, summed over nodes.

    ``a, c, z, is3pl`` have shape ``(B,)``; ``r, n`` have shape ``(B, Q)``.
    """
    logp, log1mp = log_tables(nodes, a, c, z, is3pl)
    return np.sum(r * logp + (n - r) * log1mp, axis=1)


def item_grad_info(nodes, r, n, a, c, z, is3pl):
    """Gradient and expected information of the item objective.

    Returns ``grad`` with shape ``(B, 3)`` over (a, c, z) and ``info`` with
    shape ``(B, 3, 3)``; z entries are zero for 2PL items.
    """
    eta = a[:, None] * nodes[None, :] + c[:, None]
    s = expit(eta)
    gam = np.where(is3pl, expit(np.where(is3pl, z, 0.0)), 0.0)[:, None]
    p = gam + (1.0 - gam) * s
    resid = r - n * p
    # dP/d(eta) / (P(1-P)) = s / P and dP/dz / (P(1-P)) = g / P
    ueta = s / p
    uz = gam / p
    x = nodes[None, :]
    grad = np.zeros((a.size, 3))
    grad[:, 0] = np.sum(resid * ueta * x, axis=1)
    grad[:, 1] = np.sum(resid * ueta, axis=1)
    grad[:, 2] = np.sum(resid * uz, axis=1)

    one_s = 1.0 - s
    w_ee = n * (1.0 - gam) * s * s * one_s / p
    w_ez = n * gam * (1.0 - gam) * s * one_s / p
    w_zz = n * gam * gam * (1.0 - gam) * one_s / p
    info = np.zeros((a.size, 3, 3))
    info[:, 0, 0] = np.sum(w_ee * x * x, axis=1)
    info[:, 0, 1] = info[:, 1, 0] = np.sum(w_ee * x, axis=1)
    info[:, 1, 1] = np.sum(w_ee, axis=1)
    info[:, 0, 2] = info[:, 2, 0] = np.sum(w_ez * x, axis=1)
    info[:, 1, 2] = info[:, 2, 1] = np.sum(w_ez, axis=1)
    info[:, 2, 2] = np.sum(w_zz, axis=1)
    return grad, info
