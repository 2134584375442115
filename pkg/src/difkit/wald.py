"""Multi-group Wald DIF tests: the two-step sweep, MP anchor selection and the anchored test."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg

from .data import ItemSpec, ResponseMatrix, align_specs
from .errors import SingularContrastCovariance, ValidationError
from .irt.em import ConstraintPlan, FitOptions, FitResult, fit_mml_em
from .stats import chisq_sf

logger = logging.getLogger(__name__)

_COND_LIMIT = 1e12


class Subset(str, Enum):
    ALL = "all"
    SLOPES = "nudif"
    INTERCEPTS = "udif"


@dataclass(frozen=True, eq=False)
class ContrastMatrix:
    """Reference-versus-focal contrasts over one item's stacked per-group parameters.

    Columns are ordered group-major: ``g * k + p`` is parameter ``p`` of
    group ``g`` (p = 0 slope, 1 intercept, 2 logit guessing).
    """

    C: np.ndarray
    n_groups: int
    k: int
    subset: Subset

    def __post_init__(self):
        C = np.array(self.C, dtype=float)
        if C.ndim != 2 or C.shape[1] != self.n_groups * self.k:
            raise ValidationError("contrast matrix has the wrong number of columns")
        if np.any(np.abs(C.sum(axis=1)) > 1e-12):
            raise ValidationError("contrast rows must sum to zero")
        if np.linalg.matrix_rank(C) != C.shape[0]:
            raise ValidationError("contrast matrix must have full row rank")
        C.flags.writeable = False
        object.__setattr__(self, "C", C)

    @property
    def rows(self) -> int:
        return self.C.shape[0]


def build_contrasts(n_groups: int, k: int, subset: Subset | str = Subset.ALL) -> ContrastMatrix:
    """Contrasts comparing each focal group with the reference, one row per compared parameter."""
    subset = Subset(subset)
    if n_groups < 2:
        raise ValidationError("need at least two groups")
    if k < 1:
        raise ValidationError("need at least one parameter per item")
    if subset is Subset.ALL:
        params = range(k)
    else:
        if k < 2:
            raise ValidationError("slope and intercept subsets need k >= 2")
        params = [0] if subset is Subset.SLOPES else [1]
    rows = []
    for g in range(1, n_groups):
        for p in params:
            row = np.zeros(n_groups * k)
            row[p] = 1.0
            row[g * k + p] = -1.0
            rows.append(row)
    return ContrastMatrix(np.array(rows), n_groups, k, subset)


def wald_q(v, sigma, C) -> tuple[float, int]:
    """``Q = (Cv)' (C Sigma C')^-1 (Cv)`` and its degrees of freedom (rows of C)."""
    C = C.C if isinstance(C, ContrastMatrix) else np.atleast_2d(np.asarray(C, dtype=float))
    v = np.asarray(v, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if v.shape != (C.shape[1],) or sigma.shape != (C.shape[1], C.shape[1]):
        raise ValidationError("dimension mismatch between v, Sigma and C")
    d = C @ v
    M = C @ sigma @ C.T
    M = 0.5 * (M + M.T)
    if not np.all(np.isfinite(M)) or np.linalg.cond(M) > _COND_LIMIT:
        raise SingularContrastCovariance("contrast covariance is singular or ill-conditioned")
    q = float(d @ linalg.solve(M, d, assume_a="sym"))
    if q < 0.0:
        if q < -1e-10 * max(1.0, float(d @ d)):
            raise SingularContrastCovariance("contrast covariance is not positive definite")
        q = 0.0
    return q, C.shape[0]


@dataclass(frozen=True)
class WaldItemResult:
    """Wald statistics for one item. Anchors and untestable items carry ``None`` statistics."""

    item_id: str
    q_all: float | None = None
    q_nudif: float | None = None
    q_udif: float | None = None
    df_all: int | None = None
    df_nudif: int | None = None
    df_udif: int | None = None
    p_all: float | None = None
    p_nudif: float | None = None
    p_udif: float | None = None
    is_anchor: bool = False
    note: str = ""

    @property
    def testable(self) -> bool:
        return self.p_all is not None

    @property
    def mean_p(self) -> float:
        return (self.p_all + self.p_nudif + self.p_udif) / 3.0

    def flags(self, alpha: float = 0.05) -> dict:
        """Raw-p flags per test family; false for anchors and untestable items."""
        out = {}
        for name in ("all", "nudif", "udif"):
            p = getattr(self, f"p_{name}")
            out[name] = p is not None and p < alpha
        return out


@dataclass(frozen=True)
class AnchorSelection:
    anchor_ids: tuple
    mean_p: dict

    def __post_init__(self):
        if not self.anchor_ids:
            raise ValidationError("anchor selection must name at least one item")


class Wald2Output(NamedTuple):
    step1: FitResult
    step2: FitResult
    results: list


def _item_block(fit: FitResult, cov: np.ndarray, j: int, k: int):
    """Stacked per-group estimates of item ``j``'s first ``k`` parameters and their covariance."""
    pr = fit.problem
    slots = pr.slot_of[j, :k, :].T.reshape(-1)  # group-major
    if np.any(slots < 0):
        raise ValidationError(f"item {fit.item_ids[j]} has no parameter slot for every group")
    st = fit.state
    v = np.stack([st.A[j], st.C[j], st.Z[j]], axis=1)[:, :k].reshape(-1)
    return v, cov[np.ix_(slots, slots)]


def _free_params(fit: FitResult, j: int, include_guessing: bool) -> int:
    free = fit.problem.plan.item_free[j]
    k = 3 if fit.problem.is3pl[j] and include_guessing and free[2] else 2
    if not free[:k].all():
        raise ValidationError(f"item {fit.item_ids[j]} is not free across groups")
    return k


def item_statistics(fit: FitResult, cov: np.ndarray, j: int,
                    include_guessing: bool = True) -> WaldItemResult:
    """All, NUDIF and UDIF Wald statistics for item ``j`` of a fit with per-group parameters."""
    k = _free_params(fit, j, include_guessing)
    G = len(fit.group_names)
    v, sigma = _item_block(fit, cov, j, k)
    vals = {}
    for subset in Subset:
        q, df = wald_q(v, sigma, build_contrasts(G, k, subset))
        vals[subset.value] = (q, df, chisq_sf(q, df))
    return WaldItemResult(
        fit.item_ids[j],
        q_all=vals["all"][0], q_nudif=vals["nudif"][0], q_udif=vals["udif"][0],
        df_all=vals["all"][1], df_nudif=vals["nudif"][1], df_udif=vals["udif"][1],
        p_all=vals["all"][2], p_nudif=vals["nudif"][2], p_udif=vals["udif"][2],
    )


def _test_items(fit: FitResult, cov: np.ndarray, items, include_guessing: bool) -> dict:
    out = {}
    bound = fit.at_bound()
    for j in items:
        slots = fit.problem.slot_of[j]
        if bound[slots[slots >= 0]].any():
            logger.warning("item %s untestable: estimate on the parameter bound", fit.item_ids[j])
            out[j] = WaldItemResult(fit.item_ids[j], note="untestable: estimate on the parameter bound")
            continue
        try:
            out[j] = item_statistics(fit, cov, j, include_guessing)
        except SingularContrastCovariance as exc:
            logger.warning("item %s untestable: %s", fit.item_ids[j], exc)
            out[j] = WaldItemResult(fit.item_ids[j], note="untestable: singular contrast covariance")
    return out


def _prepare(data: ResponseMatrix, specs, ref_group):
    if data.n_groups < 2:
        raise ValidationError("DIF testing needs at least two groups")
    if ref_group is not None:
        data = data.with_reference(ref_group)
    return data, align_specs(data, specs)


def run_wald2(data: ResponseMatrix, specs: Sequence[ItemSpec], ref_group: str | None = None,
              opts: FitOptions | None = None, include_guessing: bool = True,
              cov_method: str = "fd") -> Wald2Output:
    """Two-step sweep: equal-parameter fit for the group scales, then a free fit tested item by item.

    Step 1 constrains every item parameter equal across groups and
    estimates the focal means and sds (reference fixed at 0, 1). Step 2
    frees every item parameter per group with all distributions fixed at
    the step-1 values; each item's contrasts use its block of the step-2
    covariance matrix.
    """
    data, specs = _prepare(data, specs, ref_group)
    J, G = data.items, data.n_groups
    step1 = fit_mml_em(data, specs, ConstraintPlan.equal_items(J, G), opts, step="wald2 step 1")
    plan2 = ConstraintPlan.free_items(J, step1.dists, free_guessing=include_guessing)
    step2 = fit_mml_em(data, specs, plan2, opts, start=step1, step="wald2 step 2")
    cov = step2.covariance(cov_method)
    tested = _test_items(step2, cov, range(J), include_guessing)
    return Wald2Output(step1, step2, [tested[j] for j in range(J)])


def select_anchor_mp(results: Sequence[WaldItemResult], n_anchors: int = 1) -> AnchorSelection:
    """Pick the items with the highest mean of their All, NUDIF and UDIF p-values.

    Ties go to the smaller All statistic, then to the earlier item.
    Untestable items are never chosen.
    """
    if not results:
        raise ValidationError("no Wald results to select anchors from")
    if not 1 <= n_anchors < len(results):
        raise ValidationError("n_anchors must be at least 1 and below the item count")
    ranked = [(i, r) for i, r in enumerate(results) if r.testable]
    if len(ranked) < n_anchors:
        raise ValidationError("not enough testable items to select anchors")
    ranked.sort(key=lambda t: (-t[1].mean_p, t[1].q_all, t[0]))
    chosen = tuple(r.item_id for _, r in ranked[:n_anchors])
    return AnchorSelection(chosen, {r.item_id: r.mean_p for _, r in ranked})


def run_wald1(data: ResponseMatrix, specs: Sequence[ItemSpec], ref_group: str | None,
              anchors: AnchorSelection | Sequence[str], opts: FitOptions | None = None,
              include_guessing: bool = True, cov_method: str = "fd",
              start: FitResult | None = None, return_fit: bool = False):
    """Anchored test: one fit with the anchors equal across groups and every other item free.

    Focal means and sds are estimated jointly with the item parameters.
    Returns one result per item in item order (anchors flagged
    ``is_anchor`` without statistics); with every item anchored there is
    nothing to test and the list is empty.
    """
    data, specs = _prepare(data, specs, ref_group)
    ids = anchors.anchor_ids if isinstance(anchors, AnchorSelection) else tuple(anchors)
    if not ids:
        raise ValidationError("at least one anchor item is required")
    idx = [data.item_index(i) for i in ids]
    J, G = data.items, data.n_groups
    if len(set(idx)) == J:
        return ([], None) if return_fit else []
    plan = ConstraintPlan.anchored(J, G, idx, free_guessing=include_guessing)
    fit = fit_mml_em(data, specs, plan, opts, start=start, step="wald1")
    cov = fit.covariance(cov_method)
    tested = _test_items(fit, cov, [j for j in range(J) if j not in idx], include_guessing)
    out = [WaldItemResult(data.item_ids[j], is_anchor=True) if j in idx else tested[j]
           for j in range(J)]
    return (out, fit) if return_fit else out


@dataclass
class WaldPipelineResult:
    wald2: list
    anchors: AnchorSelection
    wald1: list
    fits: dict

    def flagged(self, alpha: float = 0.05, family: str = "all") -> list[str]:
        return [r.item_id for r in self.wald1 if r.flags(alpha)[family]]


def run_wald_pipeline(data: ResponseMatrix, specs: Sequence[ItemSpec], ref_group: str | None = None,
                      n_anchors: int = 1, opts: FitOptions | None = None,
                      include_guessing: bool = True, cov_method: str = "fd",
                      fixed_anchors: Sequence[str] | None = None) -> WaldPipelineResult:
    """Sweep, anchor selection and anchored test in sequence.

    With ``fixed_anchors`` the sweep is still run (its statistics are
    reported) but the given items are used as anchors.
    """
    data, specs = _prepare(data, specs, ref_group)
    for a in fixed_anchors or ():
        data.item_index(a)
    w2 = run_wald2(data, specs, None, opts, include_guessing, cov_method)
    if fixed_anchors:
        anchors = AnchorSelection(tuple(fixed_anchors), {r.item_id: r.mean_p for r in w2.results if r.testable})
    else:
        anchors = select_anchor_mp(w2.results, n_anchors)
    w1, fit1 = run_wald1(data, specs, None, anchors, opts, include_guessing, cov_method,
                         start=w2.step2, return_fit=True)
    return WaldPipelineResult(w2.results, anchors, w1,
                              {"wald2_step1": w2.step1, "wald2_step2": w2.step2, "wald1": fit1})


__all__ = [
    "AnchorSelection",
    "ContrastMatrix",
    "Subset",
    "Wald2Output",
    "WaldItemResult",
    "WaldPipelineResult",
    "build_contrasts",
    "item_statistics",
    "run_wald1",
    "run_wald2",
    "run_wald_pipeline",
    "select_anchor_mp",
    "wald_q",
]
