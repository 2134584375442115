"""Multi-group marginal maximum likelihood via EM.

Parameters live in two layouts. The *state* holds per-group arrays
``A, C, Z`` of shape (items, groups) plus group means and sds. The *flat*
vector holds one entry per free parameter ("slot"): an item parameter that
is equal across groups occupies one slot shared by every group, a free one
occupies one slot per group, and an estimated group distribution adds a
mean and an sd slot. Gradients and covariances are expressed over slots.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logit

from .. import kernels
from ..data import MISSING, ItemSpec, ResponseMatrix, align_specs
from ..errors import DegenerateItem, NonConvergence, ValidationError
from .model import (
    KINDS,
    SLOPE_FLOOR,
    GroupDist,
    ItemParams,
    item_grad_info,
    item_objective,
    log_tables,
)
from .quadrature import Quadrature, dist_gradient, dist_objective, grid_log_weights

logger = logging.getLogger(__name__)

# box for M-step candidates; keeps empty-cell items from running off
_BOUNDS = {0: (SLOPE_FLOOR, 50.0), 1: (-50.0, 50.0), 2: (-20.0, 20.0)}
_DIST_BOUNDS = ((-10.0, 10.0), (0.05, 20.0))
_MAX_HALVINGS = 10


@dataclass(frozen=True, eq=False)
class ConstraintPlan:
    """Which item parameters are free per group and which group distributions are fixed.

    ``item_free[j, k]`` is true when parameter ``k`` (a, c, z) of item ``j``
    is estimated separately in every group. ``dists[g]`` is a fixed
    :class:`GroupDist` or ``None`` to estimate it.
    """

    item_free: np.ndarray
    dists: tuple
    anchors: tuple = ()

    def __post_init__(self):
        free = np.array(self.item_free, dtype=bool)
        if free.ndim != 2 or free.shape[1] != 3:
            raise ValidationError("item_free must have shape (items, 3)")
        free.flags.writeable = False
        object.__setattr__(self, "item_free", free)
        object.__setattr__(self, "dists", tuple(self.dists))
        object.__setattr__(self, "anchors", tuple(int(a) for a in self.anchors))
        ref = self.dists[0]
        if ref is None or ref.mean != 0.0 or ref.sd != 1.0:
            raise ValidationError("reference group distribution must be fixed at (0, 1)")
        for a in self.anchors:
            if free[a].any():
                raise ValidationError(f"anchor item {a} must be equal across groups")

    @property
    def n_groups(self) -> int:
        return len(self.dists)

    @classmethod
    def equal_items(cls, n_items: int, n_groups: int) -> "ConstraintPlan":
        """All item parameters equal across groups; focal distributions estimated."""
        return cls(np.zeros((n_items, 3), bool), (GroupDist(),) + (None,) * (n_groups - 1))

    @classmethod
    def free_items(cls, n_items: int, dists: Sequence[GroupDist],
                   free_guessing: bool = True) -> "ConstraintPlan":
        """All item parameters free per group; every distribution fixed."""
        free = np.ones((n_items, 3), bool)
        free[:, 2] = free_guessing
        return cls(free, tuple(dists))

    @classmethod
    def anchored(cls, n_items: int, n_groups: int, anchors: Sequence[int],
                 free_guessing: bool = True) -> "ConstraintPlan":
        """Anchors equal across groups, all other items free; focal distributions estimated."""
        free = np.ones((n_items, 3), bool)
        free[:, 2] = free_guessing
        free[list(anchors)] = False
        return cls(free, (GroupDist(),) + (None,) * (n_groups - 1), tuple(anchors))


@dataclass
class FitOptions:
    tol: float = 1e-4
    max_cycles: int = 500
    n_nodes: int = 49
    bound: float = 6.0
    raise_on_nonconvergence: bool = True
    accelerate: bool = True
    polish_after: int | None = 40

    @property
    def quadrature(self) -> Quadrature:
        return Quadrature(self.n_nodes, self.bound)


@dataclass
class State:
    A: np.ndarray
    C: np.ndarray
    Z: np.ndarray
    mu: np.ndarray
    sd: np.ndarray

    def copy(self) -> "State":
        return State(self.A.copy(), self.C.copy(), self.Z.copy(), self.mu.copy(), self.sd.copy())


class _Batch:
    """Items sharing one model family and free-parameter pattern."""

    def __init__(self, items, is3pl, free, n_groups):
        self.items = np.asarray(items)
        self.is3pl = is3pl
        self.kinds = (0, 1, 2) if is3pl else (0, 1)
        self.free = tuple(bool(free[k]) for k in self.kinds)
        self.any_free = any(self.free)
        self.n_units = n_groups if self.any_free else 1
        nk = len(self.kinds)
        slots = np.empty((self.n_units, nk), dtype=int)
        s = 0
        for ki in range(nk):
            if self.free[ki]:
                slots[:, ki] = s + np.arange(self.n_units)
                s += self.n_units
            else:
                slots[:, ki] = s
                s += 1
        self.slots = slots
        self.n_slots = s
        onehot = np.zeros((self.n_units * nk, s))
        onehot[np.arange(self.n_units * nk), slots.ravel()] = 1.0
        self.onehot = onehot
        self.z_slots = np.unique(slots[:, 2]) if is3pl else np.empty(0, int)


class Problem:
    """Prepared data, constraint plan and slot maps for one multi-group fit."""

    def __init__(self, data: ResponseMatrix, specs: Sequence[ItemSpec],
                 plan: ConstraintPlan, quad: Quadrature, check: bool = True):
        specs = align_specs(data, specs)
        if plan.n_groups != data.n_groups or plan.item_free.shape[0] != data.items:
            raise ValidationError("constraint plan does not match the data")
        self.data = data
        self.specs = specs
        self.plan = plan
        self.quad = quad
        self.nodes = quad.nodes
        self.J = data.items
        self.G = data.n_groups
        self.is3pl = np.array([s.is_3pl for s in specs])
        self.prior_mean = np.array([s.guess_prior[0] if s.is_3pl else 0.0 for s in specs])
        self.prior_sd = np.array([s.guess_prior[1] if s.is_3pl else 1.0 for s in specs])

        self.blocks = []
        self.cells = []
        self.n_empty = 0
        for g in range(self.G):
            cells = data.cells[data.group_of == g]
            answered = (cells != MISSING).any(axis=1)
            self.n_empty += int((~answered).sum())
            self.cells.append(cells[answered])
            self.blocks.append(kernels.prepare(cells[answered]))
        if self.n_empty and check:
            logger.warning("%d persons without responses excluded from the likelihood", self.n_empty)
        if check:
            self._check_degenerate()
        self._build_slots()

    def _check_degenerate(self):
        cells = self.data.cells
        for j, spec in enumerate(self.specs):
            free = self.plan.item_free[j, : 3 if spec.is_3pl else 2].any()
            groups = range(self.G) if free else [None]
            for g in groups:
                col = cells[:, j] if g is None else cells[self.data.group_of == g, j]
                col = col[col != MISSING]
                if col.size == 0 or col.min() == col.max():
                    where = "" if g is None else f" in group {self.data.group_names[g]!r}"
                    raise DegenerateItem(spec.item_id, f"no response variance{where}")

    def _build_slots(self):
        J, G = self.J, self.G
        slot_of = np.full((J, 3, G), -1, dtype=int)
        labels = []
        s = 0
        for j in range(J):
            for k in range(3 if self.is3pl[j] else 2):
                if self.plan.item_free[j, k]:
                    slot_of[j, k] = s + np.arange(G)
                    labels += [(self.data.item_ids[j], KINDS[k], self.data.group_names[g]) for g in range(G)]
                    s += G
                else:
                    slot_of[j, k] = s
                    labels.append((self.data.item_ids[j], KINDS[k], None))
                    s += 1
        self.n_item_slots = s
        dist_slot = np.full((G, 2), -1, dtype=int)
        for g, d in enumerate(self.plan.dists):
            if d is None:
                dist_slot[g] = (s, s + 1)
                labels += [(None, "mean", self.data.group_names[g]), (None, "sd", self.data.group_names[g])]
                s += 2
        self.slot_of = slot_of
        self.dist_slot = dist_slot
        self.n_params = s
        self.labels = labels
        # z slots carry the guessing prior, once per slot
        zs = slot_of[:, 2, :]
        uniq, first = np.unique(zs[zs >= 0], return_index=True)
        item_of = np.broadcast_to(np.arange(J)[:, None], zs.shape)[zs >= 0]
        self.z_slot_items = item_of[first]
        self.z_slots = uniq

        sig = {}
        for j in range(J):
            key = (bool(self.is3pl[j]), tuple(self.plan.item_free[j]))
            sig.setdefault(key, []).append(j)
        self.batches = [_Batch(items, k[0], k[1], G) for k, items in sig.items()]

    # ---- layout conversions -------------------------------------------------

    def pack(self, st: State) -> np.ndarray:
        flat = np.empty(self.n_params)
        for k, arr in enumerate((st.A, st.C, st.Z)):
            idx = self.slot_of[:, k, :]
            m = idx >= 0
            flat[idx[m]] = arr[m]
        for g in range(self.G):
            if self.dist_slot[g, 0] >= 0:
                flat[self.dist_slot[g]] = (st.mu[g], st.sd[g])
        return flat

    def unpack(self, flat: np.ndarray, base: State) -> State:
        st = base.copy()
        for k, arr in enumerate((st.A, st.C, st.Z)):
            idx = self.slot_of[:, k, :]
            m = idx >= 0
            arr[m] = flat[idx[m]]
        for g in range(self.G):
            if self.dist_slot[g, 0] >= 0:
                st.mu[g], st.sd[g] = flat[self.dist_slot[g]]
        return st

    # ---- likelihood pieces ---------------------------------------------------

    def group_tables(self, g: int, st: State):
        logp, log1mp = log_tables(self.nodes, st.A[:, g], st.C[:, g], st.Z[:, g], self.is3pl)
        logw = grid_log_weights(self.nodes, st.mu[g], st.sd[g])
        return kernels.estep(self.blocks[g], logp, log1mp, logw)

    def log_prior(self, st: State) -> float:
        if self.z_slots.size == 0:
            return 0.0
        z = self.pack(st)[self.z_slots]
        m = self.prior_mean[self.z_slot_items]
        s = self.prior_sd[self.z_slot_items]
        return float(np.sum(-0.5 * ((z - m) / s) ** 2 - np.log(s * math.sqrt(2 * math.pi))))

    def loglik(self, st: State) -> float:
        """Penalized marginal log-likelihood (guessing prior included)."""
        return math.fsum(self.group_tables(g, st)[0] for g in range(self.G)) + self.log_prior(st)

    def group_gradient(self, g: int, st: State, tables=None) -> np.ndarray:
        """Contribution of group ``g`` to the gradient over slots (prior excluded)."""
        if tables is None:
            tables = self.group_tables(g, st)
        _, r, n, nq = tables
        grad, _ = item_grad_info(self.nodes, r, n, st.A[:, g], st.C[:, g], st.Z[:, g], self.is3pl)
        out = np.zeros(self.n_params)
        for k in range(3):
            idx = self.slot_of[:, k, g]
            m = idx >= 0
            np.add.at(out, idx[m], grad[m, k])
        if self.dist_slot[g, 0] >= 0:
            out[self.dist_slot[g]] += dist_gradient(self.nodes, nq, st.mu[g], st.sd[g])
        return out

    def prior_gradient(self, st: State) -> np.ndarray:
        out = np.zeros(self.n_params)
        if self.z_slots.size:
            z = self.pack(st)[self.z_slots]
            m = self.prior_mean[self.z_slot_items]
            s = self.prior_sd[self.z_slot_items]
            out[self.z_slots] = -(z - m) / s**2
        return out

    def prior_hessian_diag(self) -> np.ndarray:
        out = np.zeros(self.n_params)
        out[self.z_slots] = -1.0 / self.prior_sd[self.z_slot_items] ** 2
        return out

    def gradient(self, st: State) -> np.ndarray:
        """Analytic gradient of :meth:`loglik` over the free-parameter slots."""
        total = self.prior_gradient(st)
        for g in range(self.G):
            total += self.group_gradient(g, st)
        return total

    def groups_touching(self, slot: int) -> list[int]:
        hit = (self.slot_of == slot).any(axis=(0, 1)) | (self.dist_slot == slot).any(axis=1)
        return list(np.flatnonzero(hit))

    def clip(self, st: State) -> State:
        """Pull an extrapolated state back inside the parameter box."""
        st = st.copy()
        np.clip(st.A, *_BOUNDS[0], out=st.A)
        np.clip(st.C, *_BOUNDS[1], out=st.C)
        np.clip(st.Z, *_BOUNDS[2], out=st.Z)
        np.clip(st.mu, *_DIST_BOUNDS[0], out=st.mu)
        np.clip(st.sd, *_DIST_BOUNDS[1], out=st.sd)
        return st

    def slot_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.empty(self.n_params)
        hi = np.empty(self.n_params)
        for k in range(3):
            idx = self.slot_of[:, k, :]
            idx = idx[idx >= 0]
            lo[idx], hi[idx] = _BOUNDS[k]
        for k in range(2):
            idx = self.dist_slot[:, k]
            idx = idx[idx >= 0]
            lo[idx], hi[idx] = _DIST_BOUNDS[k]
        return lo, hi

    def at_bound(self, st: State) -> np.ndarray:
        """Slots whose value sits on the parameter box (estimate not interior)."""
        x = self.pack(st)
        lo, hi = self.slot_bounds()
        span = hi - lo
        return (x <= lo + 1e-6 * span) | (x >= hi - 1e-6 * span)

    # ---- EM ------------------------------------------------------------------

    def start_state(self) -> State:
        cells = self.data.cells
        obs = cells != MISSING
        p = (cells == 1).sum(axis=0) / np.maximum(obs.sum(axis=0), 1)
        c0 = np.clip(logit(np.clip(p, 1e-6, 1 - 1e-6)), -3.0, 3.0)
        A = np.ones((self.J, self.G))
        C = np.repeat(c0[:, None], self.G, axis=1)
        Z = np.where(self.is3pl[:, None], -1.1, 0.0) * np.ones((1, self.G))
        mu = np.zeros(self.G)
        sd = np.ones(self.G)
        score = np.where(obs, cells == 1, np.nan)
        pct = np.nanmean(score, axis=1)
        ref = pct[self.data.group_of == 0]
        ref_sd = np.nanstd(ref) or 1.0
        for g, d in enumerate(self.plan.dists):
            if d is None:
                mu[g] = (np.nanmean(pct[self.data.group_of == g]) - np.nanmean(ref)) / ref_sd
            else:
                mu[g], sd[g] = d.mean, d.sd
        return State(A, C, Z, mu, sd)

    def conform(self, st: State) -> State:
        """Project a state onto the plan: shared parameters equal, fixed dists applied."""
        st = st.copy()
        for j in range(self.J):
            for k, arr in enumerate((st.A, st.C, st.Z)):
                if not self.plan.item_free[j, k]:
                    arr[j, :] = arr[j].mean()
        for g, d in enumerate(self.plan.dists):
            if d is not None:
                st.mu[g], st.sd[g] = d.mean, d.sd
        return st

    def _batch_units(self, batch: _Batch, tables):
        """r, n arrays of shape (B, units, Q) for a batch."""
        r = np.stack([t[1][batch.items] for t in tables], axis=1)
        n = np.stack([t[2][batch.items] for t in tables], axis=1)
        if not batch.any_free:
            r = r.sum(axis=1, keepdims=True)
            n = n.sum(axis=1, keepdims=True)
        return r, n

    def _batch_objective(self, batch, theta, r, n):
        B, U = theta.shape[0], batch.n_units
        up = theta[:, batch.slots]                      # (B, U, nk)
        a = up[..., 0].ravel()
        c = up[..., 1].ravel()
        z = up[..., 2].ravel() if batch.is3pl else np.zeros(B * U)
        is3 = np.full(B * U, batch.is3pl)
        obj = item_objective(self.nodes, r.reshape(B * U, -1), n.reshape(B * U, -1), a, c, z, is3)
        obj = obj.reshape(B, U).sum(axis=1)
        if batch.is3pl:
            zs = theta[:, batch.z_slots]
            m = self.prior_mean[batch.items][:, None]
            s = self.prior_sd[batch.items][:, None]
            obj = obj - 0.5 * np.sum(((zs - m) / s) ** 2, axis=1)
        return obj

    def _mstep_batch(self, batch: _Batch, st: State, tables) -> float:
        items = batch.items
        B, U, nk = items.size, batch.n_units, len(batch.kinds)
        r, n = self._batch_units(batch, tables)
        theta = np.empty((B, batch.n_slots))
        arrs = (st.A, st.C, st.Z)
        for u in range(U):
            for ki, k in enumerate(batch.kinds):
                theta[:, batch.slots[u, ki]] = arrs[k][items, u]

        up = theta[:, batch.slots]
        z = up[..., 2].ravel() if batch.is3pl else np.zeros(B * U)
        grad_u, info_u = item_grad_info(
            self.nodes, r.reshape(B * U, -1), n.reshape(B * U, -1),
            up[..., 0].ravel(), up[..., 1].ravel(), z, np.full(B * U, batch.is3pl))
        grad_u = grad_u[:, :nk].reshape(B, U * nk)
        info_u = info_u[:, :nk, :nk].reshape(B, U, nk, nk)
        grad = grad_u @ batch.onehot
        block = np.zeros((B, U * nk, U * nk))
        for u in range(U):
            block[:, u * nk:(u + 1) * nk, u * nk:(u + 1) * nk] = info_u[:, u]
        info = np.einsum("ps,bpq,qt->bst", batch.onehot, block, batch.onehot)
        if batch.is3pl:
            zs = batch.z_slots
            m = self.prior_mean[items][:, None]
            s = self.prior_sd[items][:, None]
            grad[:, zs] -= (theta[:, zs] - m) / s**2
            info[:, zs, zs] += 1.0 / s**2
        ridge = 1e-8 * (1.0 + np.abs(np.diagonal(info, axis1=1, axis2=2)).max(axis=1))
        info += ridge[:, None, None] * np.eye(batch.n_slots)
        step = np.linalg.solve(info, grad[..., None])[..., 0]
        step[~np.isfinite(step)] = 0.0

        lo = np.empty(batch.n_slots)
        hi = np.empty(batch.n_slots)
        for u in range(U):
            for ki, k in enumerate(batch.kinds):
                lo[batch.slots[u, ki]], hi[batch.slots[u, ki]] = _BOUNDS[k]

        old = self._batch_objective(batch, theta, r, n)
        new_theta = theta.copy()
        pending = np.ones(B, bool)
        t = 1.0
        for _ in range(_MAX_HALVINGS + 1):
            cand = np.clip(theta + t * step, lo, hi)
            obj = self._batch_objective(batch, cand, r, n)
            ok = pending & (obj >= old)
            new_theta[ok] = cand[ok]
            pending &= ~ok
            if not pending.any():
                break
            t *= 0.5

        for u in range(U):
            for ki, k in enumerate(batch.kinds):
                col = new_theta[:, batch.slots[u, ki]]
                if batch.any_free:
                    arrs[k][items, u] = col
                else:
                    arrs[k][items, :] = col[:, None]
        return float(np.max(np.abs(new_theta - theta))) if B else 0.0

    def _mstep_dists(self, st: State, tables) -> float:
        change = 0.0
        x = self.nodes
        for g, d in enumerate(self.plan.dists):
            if d is not None:
                continue
            nq = tables[g][3]
            total = nq.sum()
            m = nq @ x / total
            s = math.sqrt(max(nq @ (x - m) ** 2 / total, 1e-12))
            old = dist_objective(x, nq, st.mu[g], st.sd[g])
            cm, cs = m, s
            for _ in range(_MAX_HALVINGS + 1):
                if dist_objective(x, nq, cm, cs) >= old:
                    break
                cm = 0.5 * (cm + st.mu[g])
                cs = 0.5 * (cs + st.sd[g])
            else:
                cm, cs = st.mu[g], st.sd[g]
            change = max(change, abs(cm - st.mu[g]), abs(cs - st.sd[g]))
            st.mu[g], st.sd[g] = cm, cs
        return change

    def mstep(self, st: State, tables) -> tuple[State, float]:
        new = st.copy()
        change = 0.0
        for batch in self.batches:
            change = max(change, self._mstep_batch(batch, new, tables))
        change = max(change, self._mstep_dists(new, tables))
        return new, change


@dataclass(eq=False)
class FitResult:
    """Outcome of :func:`fit_mml_em`."""

    item_ids: tuple
    group_names: tuple
    models: tuple
    A: np.ndarray
    C: np.ndarray
    Z: np.ndarray
    mu: np.ndarray
    sd: np.ndarray
    loglik: float
    converged: bool
    cycles: int
    last_change: float
    loglik_trace: list = field(default_factory=list)
    problem: Problem | None = field(default=None, repr=False)
    _cov: dict = field(default_factory=dict, repr=False)

    @property
    def state(self) -> State:
        z = np.where(np.isnan(self.Z), 0.0, self.Z)
        return State(self.A.copy(), self.C.copy(), z, self.mu.copy(), self.sd.copy())

    @property
    def dists(self) -> list[GroupDist]:
        return [GroupDist(float(m), float(s)) for m, s in zip(self.mu, self.sd)]

    def params(self, item: int, group: int) -> ItemParams:
        z = self.Z[item, group]
        return ItemParams(float(self.A[item, group]), float(self.C[item, group]),
                          None if np.isnan(z) else float(z))

    @property
    def B(self) -> np.ndarray:
        return -self.C / self.A

    def flat(self) -> np.ndarray:
        return self.problem.pack(self.state)

    def at_bound(self) -> np.ndarray:
        """Mask over slots whose estimate rests on the parameter box."""
        return self.problem.at_bound(self.state)

    def covariance(self, method: str = "fd") -> np.ndarray:
        from .covariance import param_covariance
        if method not in self._cov:
            self._cov[method] = param_covariance(self, method)
        return self._cov[method]


def _newton_polish(problem: Problem, st: State, ll: float, tol: float, max_steps: int):
    """Damped, box-projected Newton ascent on the penalized marginal log-likelihood.

    The missing-information Hessian is reused across steps (chord iterations)
    and refreshed when progress slows. Slots resting on the parameter box
    with the gradient pointing outward are held fixed. Returns ``(state,
    loglik, steps, converged, last_step)``. Convergence means the Newton
    step from ``state``, under a Hessian evaluated at ``state``, is below
    ``tol`` in every slot. A step that fails to raise the log-likelihood
    after halving ends the polish unconverged.
    """
    from .covariance import hessian_louis

    lo, hi = problem.slot_bounds()
    x = problem.pack(st)
    size = np.inf
    hess = None
    fresh = False
    for step in range(1, max_steps + 1):
        if hess is None:
            hess = hessian_louis(problem, st)
            if not np.all(np.isfinite(hess)):
                return st, ll, step, False, size
            fresh = True
        grad = problem.gradient(st)
        span = hi - lo
        active = (((x <= lo + 1e-6 * span) & (grad < 0))
                  | ((x >= hi - 1e-6 * span) & (grad > 0)))
        free = ~active
        w, V = np.linalg.eigh(-hess[np.ix_(free, free)])
        # shift toward gradient ascent where the surface is not concave
        floor = 1e-12 * max(w[-1], 1.0)
        shift = 0.0 if w[0] > floor else floor - w[0] + 1e-3 * max(w[-1], 1.0)
        d = np.zeros_like(x)
        d[free] = V @ ((V.T @ grad[free]) / (w + shift))
        prev, size = size, float(np.max(np.abs(d)))
        if size < tol:
            if fresh and shift == 0.0:
                return st, ll, step, True, size
            if not fresh:
                hess = None
                continue
            return st, ll, step, False, size
        t = 1.0
        for _ in range(_MAX_HALVINGS + 1):
            cand = problem.clip(problem.unpack(x + t * d, st))
            ll_c = problem.loglik(cand)
            if np.isfinite(ll_c) and ll_c >= ll:
                break
            t *= 0.5
        else:
            if fresh:
                return st, ll, step, False, size
            hess = None
            continue
        st, ll, x = cand, ll_c, problem.pack(cand)
        fresh = False
        if t < 1.0 or size > 0.25 * prev:
            hess = None
    return st, ll, max_steps, False, size


def _to_result(problem: Problem, st: State, loglik, converged, cycles, change, trace) -> FitResult:
    Z = np.where(problem.is3pl[:, None], st.Z, np.nan)
    return FitResult(
        item_ids=problem.data.item_ids,
        group_names=problem.data.group_names,
        models=tuple(s.model.value for s in problem.specs),
        A=st.A.copy(), C=st.C.copy(), Z=Z, mu=st.mu.copy(), sd=st.sd.copy(),
        loglik=loglik, converged=converged, cycles=cycles, last_change=change,
        loglik_trace=trace, problem=problem,
    )


def fit_mml_em(data: ResponseMatrix, specs: Sequence[ItemSpec], plan: ConstraintPlan,
               opts: FitOptions | None = None, start: State | FitResult | None = None,
               step: str | None = None) -> FitResult:
    """Fit a multi-group 2PL/3PL model by marginal maximum likelihood (EM).

    Each cycle computes expected counts on the quadrature grid (E-step), then
    takes one safeguarded Fisher-scoring step per item on the expected
    complete-data penalized log-likelihood, pooling groups for parameters
    constrained equal, and updates estimated group distributions from the
    posterior moments. Stops when the largest parameter change falls below
    ``opts.tol``.

    EM is slow along weakly identified directions, so once
    ``opts.polish_after`` cycles pass without convergence the estimate is
    finished by damped Newton steps on the penalized marginal log-likelihood
    (Hessian from the missing-information identity); each Newton step
    counts as a cycle and only ever raises the log-likelihood.

    Raises :class:`NonConvergence` (carrying the partial fit) when
    ``opts.max_cycles`` is reached and ``opts.raise_on_nonconvergence`` is set.
    """
    opts = opts or FitOptions()
    problem = Problem(data, specs, plan, opts.quadrature)
    if start is None:
        st = problem.start_state()
    else:
        st = problem.conform(start.state if isinstance(start, FitResult) else start)

    trace: list[float] = []
    converged = False
    change = float("inf")
    cycles = 0

    def evaluate(state):
        tables = [problem.group_tables(g, state) for g in range(problem.G)]
        return math.fsum(t[0] for t in tables) + problem.log_prior(state), tables

    def record(value):
        if trace and value < trace[-1] - 1e-9 * max(1.0, abs(trace[-1])):
            logger.warning("EM log-likelihood decreased at cycle %d", cycles)
        trace.append(value)

    next_polish = opts.polish_after
    ll, tables = evaluate(st)
    record(ll)
    while cycles < opts.max_cycles:
        if next_polish is not None and cycles >= next_polish:
            st, ll, used, converged, change = _newton_polish(
                problem, st, ll, opts.tol, min(100, opts.max_cycles - cycles))
            cycles += used
            trace.append(ll)
            if converged:
                break
            next_polish = cycles + opts.polish_after
            ll, tables = evaluate(st)
            continue
        st1, change = problem.mstep(st, tables)
        cycles += 1
        if change < opts.tol:
            st, converged = st1, True
            break
        ll1, tables1 = evaluate(st1)
        record(ll1)
        if not opts.accelerate or cycles >= opts.max_cycles:
            st, ll, tables = st1, ll1, tables1
            continue
        st2, change = problem.mstep(st1, tables1)
        cycles += 1
        if change < opts.tol:
            st, converged = st2, True
            break
        # SQUAREM extrapolation, kept only if it beats the first EM iterate
        x0, x1, x2 = problem.pack(st), problem.pack(st1), problem.pack(st2)
        r = x1 - x0
        v = x2 - 2.0 * x1 + x0
        nv = np.linalg.norm(v)
        accepted = False
        if nv > 0:
            alpha = min(-1.0, -np.linalg.norm(r) / nv)
            xp = x0 - 2.0 * alpha * r + alpha * alpha * v
            stp = problem.clip(problem.unpack(xp, st))
            llp, tablesp = evaluate(stp)
            if np.isfinite(llp) and llp >= ll1:
                record(llp)
                st, ll, tables = stp, llp, tablesp
                accepted = True
        if not accepted:
            ll, tables = evaluate(st2)
            record(ll)
            st = st2
    loglik = problem.loglik(st)
    record(loglik)
    fit = _to_result(problem, st, loglik, converged, cycles, change, trace)
    if not converged:
        logger.warning("EM stopped after %d cycles (change %.3g)", cycles, change)
        if opts.raise_on_nonconvergence:
            raise NonConvergence(cycles, change, partial=fit, step=step)
    return fit


def marginal_loglik(data: ResponseMatrix, specs: Sequence[ItemSpec], params, dists,
                    quad: Quadrature | None = None, penalized: bool = True) -> float:
    """Marginal log-likelihood at given parameters.

    ``params[j][g]`` is the :class:`ItemParams` of item ``j`` in group ``g``
    (a single :class:`ItemParams` per item applies to every group).
    """
    quad = quad or Quadrature()
    J, G = data.items, data.n_groups
    A = np.empty((J, G))
    C = np.empty((J, G))
    Z = np.zeros((J, G))
    free = np.zeros((J, 3), bool)
    for j in range(J):
        shared = isinstance(params[j], ItemParams)
        free[j] = not shared
        row = [params[j]] * G if shared else params[j]
        for g in range(G):
            A[j, g], C[j, g] = row[g].a, row[g].c
            Z[j, g] = 0.0 if row[g].z is None else row[g].z
    st = State(A, C, Z, np.array([d.mean for d in dists], float),
               np.array([d.sd for d in dists], float))
    plan = ConstraintPlan(free, (GroupDist(),) * G)
    problem = Problem(data, specs, plan, quad, check=False)
    total = math.fsum(problem.group_tables(g, st)[0] for g in range(G))
    return total + (problem.log_prior(st) if penalized else 0.0)
