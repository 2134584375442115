"""Generalized logistic regression DIF for several groups, with item purification.

For each item the probability of a correct answer is modelled on the
standardized matching score ``S``:

    logit P = alpha + beta * S + alpha_g + beta_g * S

with the group terms zero for the reference group. Three nested models
(common curve, group intercepts, group intercepts and slopes) give
likelihood-ratio tests for nonuniform DIF (slopes), uniform DIF
(intercepts, given no slope effect) and both together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .data import MISSING, MissingPolicy, ResponseMatrix, observed_scores
from .errors import (
    IterationLimit,
    NestingViolation,
    PurificationNonConvergence,
    SeparationDetected,
    ValidationError,
)
from .stats import Adjustment, PValueFamily, chisq_sf

logger = logging.getLogger(__name__)

SEPARATION_LIMIT = 15.0
FAMILIES = ("all", "nudif", "udif")


class LogisticModel(str, Enum):
    COMMON = "common"
    GROUP_INTERCEPTS = "group_intercepts"
    FULL = "full"


@dataclass(frozen=True, eq=False)
class LogisticFit:
    model: LogisticModel
    names: tuple
    coef: np.ndarray
    cov: np.ndarray
    loglik: float
    iterations: int

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def get(self, name: str) -> tuple[float, float]:
        i = self.names.index(name)
        return float(self.coef[i]), float(np.sqrt(self.cov[i, i]))


def design_matrix(score, group_of, n_groups: int, model: LogisticModel | str):
    """Columns ``alpha, beta`` then ``alpha_g`` and ``beta_g`` for focal groups as the model requires."""
    model = LogisticModel(model)
    score = np.asarray(score, dtype=float)
    group_of = np.asarray(group_of)
    cols = [np.ones_like(score), score]
    names = ["alpha", "beta"]
    focal = range(1, n_groups)
    if model is not LogisticModel.COMMON:
        cols += [(group_of == g).astype(float) for g in focal]
        names += [f"alpha_{g}" for g in focal]
    if model is LogisticModel.FULL:
        cols += [(group_of == g) * score for g in focal]
        names += [f"beta_{g}" for g in focal]
    return np.column_stack(cols), tuple(names)


def _loglik(X, y, b) -> float:
    eta = X @ b
    return float(np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))


def fit_logistic(y, score, group_of, model: LogisticModel | str = LogisticModel.FULL,
                 n_groups: int | None = None, tol: float = 1e-8, max_iter: int = 100) -> LogisticFit:
    """Maximum-likelihood logistic regression by Newton-Raphson with step halving.

    Stops when the largest coefficient change is below ``tol``. The
    covariance is the inverse observed information at the estimate.
    Raises :class:`SeparationDetected` when a coefficient leaves
    ``[-15, 15]`` and :class:`IterationLimit` after ``max_iter`` steps.
    """
    y = np.asarray(y, dtype=float)
    score = np.asarray(score, dtype=float)
    group_of = np.asarray(group_of)
    if n_groups is None:
        n_groups = int(group_of.max()) + 1
    if np.unique(score).size < 2:
        raise ValidationError("the matching score needs at least two distinct values")
    if np.bincount(group_of, minlength=n_groups).min() < 1:
        raise ValidationError("every group must be present")
    X, names = design_matrix(score, group_of, n_groups, model)
    b = np.zeros(X.shape[1])
    ll = _loglik(X, y, b)
    for it in range(1, max_iter + 1):
        p = expit(X @ b)
        grad = X.T @ (y - p)
        info = (X * (p * (1.0 - p))[:, None]).T @ X
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise SeparationDetected("information matrix is singular") from None
        t = 1.0
        for _ in range(30):
            cand = b + t * step
            ll_c = _loglik(X, y, cand)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        b, ll = cand, ll_c
        if np.max(np.abs(b)) > SEPARATION_LIMIT:
            raise SeparationDetected(f"coefficient beyond +/-{SEPARATION_LIMIT:g} (separation)")
        if np.max(np.abs(t * step)) < tol:
            break
    else:
        raise IterationLimit(f"logistic fit did not converge in {max_iter} iterations")
    p = expit(X @ b)
    info = (X * (p * (1.0 - p))[:, None]).T @ X
    cov = np.linalg.inv(info)
    return LogisticFit(LogisticModel(model), names, b, 0.5 * (cov + cov.T), ll, it)


def lr_lambda(l0: float, l1: float) -> float:
    """Likelihood-ratio statistic ``-2 (L0 - L1)`` for nested models, clipped at zero."""
    if l0 > l1 + 1e-6:
        raise NestingViolation(f"restricted model fits better ({l0:.6f} > {l1:.6f})")
    return max(0.0, -2.0 * (l0 - l1))


@dataclass(frozen=True)
class GenLogResult:
    """Likelihood-ratio DIF tests for one item; untestable items carry NaN statistics."""

    item_id: str
    lambda_all: float
    lambda_nudif: float
    lambda_udif: float
    df_all: int
    df_nudif: int
    df_udif: int
    p_all: float
    p_nudif: float
    p_udif: float
    adjustment: str = Adjustment.NONE.value
    p_adj_all: float = float("nan")
    p_adj_nudif: float = float("nan")
    p_adj_udif: float = float("nan")
    flag_all: bool = False
    flag_nudif: bool = False
    flag_udif: bool = False
    coefficients: dict = field(default_factory=dict)
    testable: bool = True
    note: str = ""

    @property
    def udif_conditional(self) -> bool:
        """The uniform test assumes no slope effect, which the nonuniform flag contradicts."""
        return self.flag_nudif


def _untestable(item_id: str, n_focal: int, note: str) -> GenLogResult:
    nan = float("nan")
    return GenLogResult(item_id, nan, nan, nan, 2 * n_focal, n_focal, n_focal, nan, nan, nan,
                        testable=False, note=note)


def test_item(data: ResponseMatrix, item: int, score_basis: Sequence[int], alpha: float = 0.05,
              policy: MissingPolicy | str = MissingPolicy.INCORRECT) -> GenLogResult:
    """Fit the three nested models for one item and return its likelihood-ratio tests.

    The matching score counts correct answers over ``score_basis`` plus the
    studied item and is standardized over the persons who answered the item.
    Flags here use raw p-values; :func:`purify_and_test` re-flags on adjusted ones.
    """
    basis = sorted(set(int(j) for j in score_basis) | {int(item)})
    item_id = data.item_ids[item]
    F = data.n_groups - 1
    score = observed_scores(data, basis, policy)
    y = data.cells[:, item]
    keep = (y != MISSING) & ~np.isnan(score)
    y, s, grp = y[keep].astype(float), score[keep], data.group_of[keep]
    sd = s.std()
    if sd == 0:
        return _untestable(item_id, F, "matching score has no variance")
    s = (s - s.mean()) / sd
    try:
        fits = {m: fit_logistic(y, s, grp, m, data.n_groups) for m in LogisticModel}
        lam_nudif = lr_lambda(fits[LogisticModel.GROUP_INTERCEPTS].loglik, fits[LogisticModel.FULL].loglik)
        lam_udif = lr_lambda(fits[LogisticModel.COMMON].loglik, fits[LogisticModel.GROUP_INTERCEPTS].loglik)
        lam_all = lr_lambda(fits[LogisticModel.COMMON].loglik, fits[LogisticModel.FULL].loglik)
    except (SeparationDetected, IterationLimit, NestingViolation, ValidationError) as exc:
        logger.info("item %s untestable: %s", item_id, exc)
        return _untestable(item_id, F, f"untestable: {exc}")
    full = fits[LogisticModel.FULL]
    coefs = {name: full.get(name) for name in full.names}
    p_all, p_nudif, p_udif = chisq_sf(lam_all, 2 * F), chisq_sf(lam_nudif, F), chisq_sf(lam_udif, F)
    return GenLogResult(
        item_id, lam_all, lam_nudif, lam_udif, 2 * F, F, F, p_all, p_nudif, p_udif,
        p_adj_all=p_all, p_adj_nudif=p_nudif, p_adj_udif=p_udif,
        flag_all=p_all < alpha, flag_nudif=p_nudif < alpha, flag_udif=p_udif < alpha,
        coefficients=coefs,
    )


def adjust_results(results: Sequence[GenLogResult], alpha: float,
                   adjust: Adjustment | str) -> list[GenLogResult]:
    """Adjust each test family across items and re-flag on the adjusted p-values."""
    adjust = Adjustment(adjust)
    adj = {f: PValueFamily.adjust([getattr(r, f"p_{f}") for r in results], adjust).adjusted
           for f in FAMILIES}
    out = []
    for i, r in enumerate(results):
        vals = {f"p_adj_{f}": adj[f][i] for f in FAMILIES}
        flags = {f"flag_{f}": bool(r.testable and adj[f][i] < alpha) for f in FAMILIES}
        out.append(replace(r, adjustment=adjust.value, **vals, **flags))
    return out


@dataclass(frozen=True)
class PurificationTrace:
    """Flagged item sets per iteration and the score basis each iteration used.

    The basis of the first iteration is every item, i.e. it follows the
    empty flag set; convergence means an iteration reproduced the flag set
    its basis was built from.
    """

    iterations: tuple
    score_basis: tuple
    converged: bool
    reason: str = ""


def purify_and_test(data: ResponseMatrix, alpha: float = 0.05,
                    adjust: Adjustment | str = Adjustment.HOLM, max_iter: int = 10,
                    policy: MissingPolicy | str = MissingPolicy.INCORRECT,
                    tester: Callable | None = None,
                    raise_on_nonconvergence: bool = True):
    """Test every item, then repeatedly rebuild the matching score without flagged items.

    Stops when an iteration returns the flag set it started from, when a
    flag set recurs (a cycle), when every item is flagged (no matching
    items remain), or after ``max_iter`` iterations. Items are flagged on
    the adjusted All test. Returns ``(results, trace)``; without
    convergence :class:`PurificationNonConvergence` is raised carrying both,
    unless ``raise_on_nonconvergence`` is false.
    """
    tester = tester or test_item
    if data.n_groups < 2:
        raise ValidationError("DIF testing needs at least two groups")
    if max_iter < 1:
        raise ValidationError("max_iter must be at least 1")
    J = data.items
    previous = frozenset()
    seen = [previous]
    sets, bases = [], []
    results = []
    converged, reason = False, "iteration limit"
    for _ in range(max_iter):
        basis = tuple(j for j in range(J) if j not in previous)
        raw = [tester(data, j, basis, alpha, policy) for j in range(J)]
        results = adjust_results(raw, alpha, adjust)
        flagged = frozenset(j for j, r in enumerate(results) if r.flag_all)
        sets.append(tuple(data.item_ids[j] for j in sorted(flagged)))
        bases.append(tuple(data.item_ids[j] for j in basis))
        if flagged == previous:
            converged, reason = True, "fixed point"
            break
        if len(flagged) == J:
            reason = "every item flagged"
            break
        if flagged in seen:
            reason = "cycle"
            break
        seen.append(flagged)
        previous = flagged
    trace = PurificationTrace(tuple(sets), tuple(bases), converged, reason)
    if not converged:
        logger.warning("purification did not converge (%s)", reason)
        if raise_on_nonconvergence:
            raise PurificationNonConvergence(results, trace)
    return results, trace


@dataclass(frozen=True)
class CoefficientRow:
    item_id: str
    alpha: tuple  # ((estimate, se) per focal group)
    beta: tuple


def coefficients_table(results: Sequence[GenLogResult]) -> list[CoefficientRow]:
    """Group-specific intercept and slope terms with standard errors, for flagged items only."""
    rows = []
    for r in results:
        if not (r.flag_all and r.testable and r.coefficients):
            continue
        n_focal = r.df_nudif
        rows.append(CoefficientRow(
            r.item_id,
            tuple(r.coefficients[f"alpha_{g}"] for g in range(1, n_focal + 1)),
            tuple(r.coefficients[f"beta_{g}"] for g in range(1, n_focal + 1)),
        ))
    return rows


__all__ = [
    "CoefficientRow",
    "GenLogResult",
    "LogisticFit",
    "LogisticModel",
    "PurificationTrace",
    "adjust_results",
    "coefficients_table",
    "design_matrix",
    "fit_logistic",
    "lr_lambda",
    "purify_and_test",
    "test_item",
]
