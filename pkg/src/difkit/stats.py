"""Statistical kernels: chi-square tail, multiplicity adjustment, eigen screen."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import special

from .errors import DegenerateCorrelation


def chisq_sf(x, df):
    """Upper-tail probability of a chi-square variate.

    Evaluated as the regularized upper incomplete gamma function
    ``Q(df / 2, x / 2)``. Accepts scalars or broadcastable arrays.
    """
    x = np.asarray(x, dtype=float)
    df = np.asarray(df, dtype=float)
    if np.any(x < 0):
        raise ValueError("chi-square statistic must be non-negative")
    if np.any(df < 1):
        raise ValueError("degrees of freedom must be >= 1")
    p = special.gammaincc(df / 2.0, x / 2.0)
    return float(p) if p.ndim == 0 else p


class Adjustment(str, Enum):
    NONE = "none"
    HOLM = "holm"
    BH = "bh"


def _check_pvalues(raw) -> np.ndarray:
    p = np.asarray(raw, dtype=float)
    if p.ndim != 1:
        raise ValueError("p-values must be a flat sequence")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    return p


def holm_adjust(raw) -> np.ndarray:
    """Holm step-down adjusted p-values, returned in input order."""
    p = _check_pvalues(raw)
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * (m - np.arange(m))
    adjusted = np.minimum(np.maximum.accumulate(scaled), 1.0)
    out = np.empty(m)
    out[order] = adjusted
    return out


def bh_adjust(raw) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, returned in input order."""
    p = _check_pvalues(raw)
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    out = np.empty(m)
    out[order] = adjusted
    return out


@dataclass(frozen=True)
class PValueFamily:
    raw: tuple
    method: Adjustment
    adjusted: tuple

    @classmethod
    def adjust(cls, raw, method: Adjustment | str = Adjustment.HOLM) -> "PValueFamily":
        """Adjust a family of p-values; NaN entries (untestable) are passed through."""
        method = Adjustment(method)
        p = np.asarray(raw, dtype=float)
        out = p.copy()
        ok = ~np.isnan(p)
        if method is Adjustment.HOLM:
            out[ok] = holm_adjust(p[ok])
        elif method is Adjustment.BH:
            out[ok] = bh_adjust(p[ok])
        return cls(tuple(p.tolist()), method, tuple(out.tolist()))


def pairwise_corr(x: np.ndarray) -> np.ndarray:
    """Pearson correlations over pairwise-complete rows; NaN marks missing cells.

    Pairs with no variance on their common rows get correlation 0.
    """
    x = np.asarray(x, dtype=float)
    obs = ~np.isnan(x)
    xz = np.where(obs, x, 0.0)
    o = obs.astype(float)
    n = o.T @ o
    sx = xz.T @ o            # sum of column i over rows where j observed
    sxx = (xz * xz).T @ o
    sxy = xz.T @ xz
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = sxy - sx * sx.T / n
        vi = sxx - sx * sx / n
        vj = vi.T
        r = cov / np.sqrt(vi * vj)
    r[~np.isfinite(r)] = 0.0
    np.fill_diagonal(r, 1.0)
    return np.clip(r, -1.0, 1.0)


def jacobi_eigh(matrix, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue;
    eigenvectors are the columns. Sweeps stop once the Frobenius norm of the
    off-diagonal part drops below ``tol``.
    """
    a = np.array(matrix, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-12):
        raise ValueError("matrix must be symmetric")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0)
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError("Jacobi iteration did not reach tolerance")
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


@dataclass(frozen=True)
class DimScreenResult:
    eigenvalues: tuple
    ratio_1_2: float
    unidimensional: bool
    items_used: tuple


def dim_screen(data, group: int, threshold: float = 3.0) -> DimScreenResult:
    """First-to-second eigenvalue ratio of the item correlation matrix in one group."""
    rows = data.group_of == group
    x = data.as_float()[rows]
    var = np.nanvar(x, axis=0)
    keep = np.flatnonzero(np.nan_to_num(var) > 0)
    if keep.size < 2:
        raise DegenerateCorrelation(
            f"group {data.group_names[group]!r}: fewer than 2 items with variance"
        )
    r = pairwise_corr(x[:, keep])
    w, _ = jacobi_eigh(r)
    ratio = float(w[0] / w[1]) if w[1] > 0 else float("inf")
    return DimScreenResult(
        eigenvalues=tuple(w.tolist()),
        ratio_1_2=ratio,
        unidimensional=bool(ratio >= threshold),
        items_used=tuple(data.item_ids[k] for k in keep),
    )
