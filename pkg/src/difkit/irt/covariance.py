"""Covariance of the free parameters of a fitted model."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .. import kernels
from ..errors import SingularInformation
from .model import item_grad_info, log_tables
from .quadrature import dist_gradient, grid_log_weights


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _invert_information(info: np.ndarray) -> np.ndarray:
    info = _symmetrize(info)
    w = np.linalg.eigvalsh(info)
    if w[0] <= 1e-10 * max(w[-1], 1.0) or w[-1] / w[0] > 1e12:
        raise SingularInformation(
            f"information matrix not invertible (eigenvalues {w[0]:.3g} .. {w[-1]:.3g})"
        )
    cov = _symmetrize(np.linalg.inv(info))
    return cov


def _fd_step(x: float) -> float:
    return 1e-4 * max(1.0, abs(x))


def hessian_fd(pr, st) -> np.ndarray:
    """Hessian of the penalized marginal log-likelihood of problem ``pr`` at state ``st``.

    Central differences of the analytic gradient, one slot at a time; only
    groups whose likelihood depends on the perturbed slot are re-evaluated.
    The guessing prior's Hessian is diagonal and added exactly.
    """
    flat = pr.pack(st)
    p = flat.size
    hess = np.zeros((p, p))
    for k in range(p):
        h = _fd_step(flat[k])
        up = flat.copy()
        dn = flat.copy()
        up[k] += h
        dn[k] -= h
        s_up = pr.unpack(up, st)
        s_dn = pr.unpack(dn, st)
        col = np.zeros(p)
        for g in pr.groups_touching(k):
            col += pr.group_gradient(g, s_up) - pr.group_gradient(g, s_dn)
        hess[:, k] = col / (2.0 * h)
    hess += np.diag(pr.prior_hessian_diag())
    return _symmetrize(hess)


def _item_scores(nodes, a, c, z, is3pl):
    """Derivatives of ``log P`` and ``log(1 - P)`` over (a, c, z), each shaped (items, nodes, 3)."""
    s = expit(a[:, None] * nodes[None, :] + c[:, None])
    gam = np.where(is3pl, expit(np.where(is3pl, z, 0.0)), 0.0)[:, None]
    p = gam + (1.0 - gam) * s
    x = np.broadcast_to(nodes, s.shape)
    de1 = (1.0 - gam) * s * (1.0 - s) / p
    d1 = np.stack([de1 * x, de1, gam * (1.0 - gam) * (1.0 - s) / p], axis=-1)
    d0 = np.stack([-s * x, -s, -np.broadcast_to(gam, s.shape)], axis=-1)
    d1[~is3pl, :, 2] = 0.0
    d0[~is3pl, :, 2] = 0.0
    return d1, d0


def _complete_item_hessian(nodes, r, n, a, c, z, is3pl):
    """Per-item 3x3 Hessians of the expected complete-data objective, tables held fixed."""
    J = a.size
    out = np.zeros((J, 3, 3))
    base = [a, c, np.where(is3pl, z, 0.0)]
    for k in range(3):
        h = 1e-5 * np.maximum(1.0, np.abs(base[k]))
        up = [v.copy() for v in base]
        dn = [v.copy() for v in base]
        up[k] += h
        dn[k] -= h
        gu, _ = item_grad_info(nodes, r, n, *up, is3pl)
        gd, _ = item_grad_info(nodes, r, n, *dn, is3pl)
        out[:, :, k] = (gu - gd) / (2.0 * h[:, None])
    out[~is3pl, 2, :] = 0.0
    out[~is3pl, :, 2] = 0.0
    return 0.5 * (out + out.transpose(0, 2, 1))


def _complete_dist_hessian(nodes, counts, mean, sd):
    out = np.zeros((2, 2))
    for k, h in enumerate((1e-5 * max(1.0, abs(mean)), 1e-5 * sd)):
        d = np.array([h, 0.0]) if k == 0 else np.array([0.0, h])
        up = dist_gradient(nodes, counts, mean + d[0], sd + d[1])
        dn = dist_gradient(nodes, counts, mean - d[0], sd - d[1])
        out[:, k] = (np.array(up) - np.array(dn)) / (2.0 * h)
    return 0.5 * (out + out.T)


def hessian_louis(pr, st) -> np.ndarray:
    """Hessian of the penalized marginal log-likelihood by the missing-information identity.

    Per group: the expected complete-data Hessian (posterior counts held
    fixed) plus the summed posterior covariance of each person's
    complete-data score. Needs one posterior pass per group instead of one
    per parameter.
    """
    nodes = pr.nodes
    p = pr.n_params
    hess = np.zeros((p, p))
    J = pr.J
    for g in range(pr.G):
        a, c, z = st.A[:, g], st.C[:, g], st.Z[:, g]
        logp, log1mp = log_tables(nodes, a, c, z, pr.is3pl)
        logw = grid_log_weights(nodes, st.mu[g], st.sd[g])
        _, post = kernels.posterior(pr.blocks[g], logp, log1mp, logw)
        _, r, n, nq = kernels.estep(pr.blocks[g], logp, log1mp, logw)
        cells = pr.cells[g]

        # local coordinates: (item, kind) flattened, then mean and sd
        slots = pr.slot_of[:, :, g].reshape(-1)
        has_dist = pr.dist_slot[g, 0] >= 0
        K = 3 * J + (2 if has_dist else 0)
        local = np.zeros((K, K))
        blocks = _complete_item_hessian(nodes, r, n, a, c, z, pr.is3pl)
        for j in range(J):
            local[3 * j:3 * j + 3, 3 * j:3 * j + 3] = blocks[j]

        d1, d0 = _item_scores(nodes, a, c, z, pr.is3pl)
        x = ((cells == 1).astype(float), (cells == 0).astype(float))
        d = (d1, d0)
        n_i = cells.shape[0]
        # posterior-weighted co-occurrence of response types per node: (Q, J, J)
        cross = np.zeros((J, 3, 3 * J))
        for u in range(2):
            t = np.zeros((nodes.size, J, J, 3))
            for v in range(2):
                pair = (x[u][:, :, None] * x[v][:, None, :]).reshape(n_i, J * J)
                co = (post.T @ pair).reshape(nodes.size, J, J)
                t += co[:, :, :, None] * d[v].transpose(1, 0, 2)[:, None, :, :]
            t = t.transpose(1, 0, 2, 3).reshape(J, nodes.size, 3 * J)
            cross += np.matmul(d[u].transpose(0, 2, 1), t)
        cross = cross.reshape(3 * J, 3 * J)
        mean_score = sum((post @ d[u].transpose(1, 0, 2).reshape(nodes.size, 3 * J)).reshape(n_i, J, 3)
                         * x[u][:, :, None] for u in range(2)).reshape(n_i, 3 * J)
        if has_dist:
            w = np.exp(logw)
            dev = nodes - st.mu[g]
            e = np.stack([(dev - w @ dev) / st.sd[g] ** 2,
                          (dev * dev - w @ (dev * dev)) / st.sd[g] ** 3], axis=-1)
            mass = [post.T @ xs for xs in x]
            item_dist = sum(np.einsum("jqk,qj,qm->jkm", d[u], mass[u], e) for u in range(2))
            cross_all = np.zeros((K, K))
            cross_all[:3 * J, :3 * J] = cross
            cross_all[:3 * J, 3 * J:] = item_dist.reshape(3 * J, 2)
            cross_all[3 * J:, :3 * J] = item_dist.reshape(3 * J, 2).T
            cross_all[3 * J:, 3 * J:] = (e * nq[:, None]).T @ e
            mean_score = np.concatenate([mean_score, post @ e], axis=1)
            local[3 * J:, 3 * J:] = _complete_dist_hessian(nodes, nq, st.mu[g], st.sd[g])
            slots = np.concatenate([slots, pr.dist_slot[g]])
        else:
            cross_all = cross
        local += cross_all - mean_score.T @ mean_score

        keep = slots >= 0
        idx = slots[keep]
        hess[np.ix_(idx, idx)] += local[np.ix_(keep, keep)]
    hess += np.diag(pr.prior_hessian_diag())
    return _symmetrize(hess)


def observed_hessian_fd(fit) -> np.ndarray:
    """Finite-difference Hessian at a fit's estimate."""
    return hessian_fd(fit.problem, fit.state)


def _complete_hessian_fd(pr, st, tables) -> np.ndarray:
    """Hessian of the expected complete-data objective with posterior weights held fixed."""
    flat = pr.pack(st)
    p = flat.size
    hess = np.zeros((p, p))
    for k in range(p):
        h = _fd_step(flat[k])
        up = flat.copy()
        dn = flat.copy()
        up[k] += h
        dn[k] -= h
        s_up = pr.unpack(up, st)
        s_dn = pr.unpack(dn, st)
        col = np.zeros(p)
        for g in pr.groups_touching(k):
            col += pr.group_gradient(g, s_up, tables[g]) - pr.group_gradient(g, s_dn, tables[g])
        hess[:, k] = col / (2.0 * h)
    hess += np.diag(pr.prior_hessian_diag())
    return _symmetrize(hess)


def _em_map(pr, st, max_iter: int = 200, tol: float = 1e-12):
    """One EM cycle from ``st`` with the M-step iterated to its maximum."""
    tables = [pr.group_tables(g, st) for g in range(pr.G)]
    cur = st
    for _ in range(max_iter):
        cur, change = pr.mstep(cur, tables)
        if change < tol:
            break
    return pr.pack(cur)


def sem_covariance(fit, delta: float = 1e-3) -> np.ndarray:
    """Supplemented-EM covariance.

    The Jacobian of the EM map is estimated by central differences around
    the estimate; the observed information is the complete-data information
    times ``(I - Jacobian)``.
    """
    pr = fit.problem
    st = fit.state
    flat = pr.pack(st)
    p = flat.size
    tables = [pr.group_tables(g, st) for g in range(pr.G)]
    info_complete = -_complete_hessian_fd(pr, st, tables)
    jac = np.zeros((p, p))
    for i in range(p):
        d = delta * max(1.0, abs(flat[i]))
        up = flat.copy()
        dn = flat.copy()
        up[i] += d
        dn[i] -= d
        jac[:, i] = (_em_map(pr, pr.unpack(up, st)) - _em_map(pr, pr.unpack(dn, st))) / (2.0 * d)
    info = info_complete @ (np.eye(p) - jac)
    return _invert_information(info)


def _interior_inverse(fit, hess_fn) -> np.ndarray:
    """Invert the information over interior slots; slots on the parameter box get NaN rows."""
    fixed = fit.at_bound()
    info = -hess_fn()
    if not fixed.any():
        return _invert_information(info)
    keep = ~fixed
    cov = np.full(info.shape, np.nan)
    cov[np.ix_(keep, keep)] = _invert_information(info[np.ix_(keep, keep)])
    return cov


def param_covariance(fit, method: str = "fd") -> np.ndarray:
    """Covariance matrix over the fit's free-parameter slots.

    ``method="fd"`` inverts the negative finite-difference Hessian of the
    penalized marginal log-likelihood; ``method="louis"`` uses the
    missing-information identity; ``method="sem"`` uses supplemented EM.
    Slots whose estimate rests on the parameter box are treated as fixed
    and get NaN rows and columns. Raises :class:`SingularInformation` for
    under-identified models.
    """
    if not fit.converged:
        raise ValueError("covariance requires a converged fit")
    if method == "fd":
        return _interior_inverse(fit, lambda: observed_hessian_fd(fit))
    if method == "louis":
        return _interior_inverse(fit, lambda: hessian_louis(fit.problem, fit.state))
    if method == "sem":
        return sem_covariance(fit)
    raise ValueError(f"unknown covariance method {method!r}")
