"""Simulated multi-group response data with planted DIF, and replication studies."""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .data import ItemSpec, Model, ResponseMatrix
from .errors import DifkitError, MissingFile, ValidationError
from .irt.model import GroupDist, ItemParams, irf

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimItem:
    item_id: str
    model: Model
    a: float
    b: float
    g: float = 0.0


@dataclass(frozen=True)
class DifEntry:
    """Shift of one item's difficulty and/or slope ratio in one focal group."""

    item_id: str
    group: str
    delta_b: float = 0.0
    a_ratio: float = 1.0


@dataclass(frozen=True)
class SimScenario:
    groups: tuple
    n_per_group: tuple
    items: tuple
    impact: tuple
    dif: tuple = ()
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if len(self.groups) < 1:
            raise ValidationError("scenario needs at least one group")
        if not (len(self.groups) == len(self.n_per_group) == len(self.impact)):
            raise ValidationError("groups, n_per_group and impact must have equal length")
        if len(set(self.groups)) != len(self.groups):
            raise ValidationError("duplicate group names")
        ids = [it.item_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate item ids")
        for d in self.dif:
            if d.group == self.groups[0]:
                raise ValidationError("the reference group cannot carry DIF")
            if d.group not in self.groups:
                raise ValidationError(f"DIF entry for unknown group {d.group!r}")
            if d.item_id not in ids:
                raise ValidationError(f"DIF entry for unknown item {d.item_id!r}")
            if not d.a_ratio > 0:
                raise ValidationError("a_ratio must be positive")
        for it in self.items:
            if not it.a > 0:
                raise ValidationError(f"item {it.item_id}: slope must be positive")
            if it.model is Model.THREE_PL and not 0 < it.g < 1:
                raise ValidationError(f"item {it.item_id}: guessing must lie in (0, 1)")
        if any(n < 1 for n in self.n_per_group):
            raise ValidationError("every group needs at least one person")

    @property
    def item_ids(self) -> tuple:
        return tuple(it.item_id for it in self.items)

    def specs(self) -> list[ItemSpec]:
        return [ItemSpec(it.item_id, it.model) for it in self.items]

    def dif_items(self) -> tuple:
        """Item ids with any planted DIF, in item order."""
        planted = {d.item_id for d in self.dif if d.delta_b != 0 or d.a_ratio != 1}
        return tuple(i for i in self.item_ids if i in planted)

    def true_params(self) -> list[list[ItemParams]]:
        """Generating parameters ``[item][group]`` with DIF applied."""
        shifts = {(d.item_id, d.group): d for d in self.dif}
        out = []
        for it in self.items:
            row = []
            for gname in self.groups:
                d = shifts.get((it.item_id, gname))
                a = it.a * (d.a_ratio if d else 1.0)
                b = it.b + (d.delta_b if d else 0.0)
                g = it.g if it.model is Model.THREE_PL else None
                row.append(ItemParams.from_difficulty(a, b, g))
            out.append(row)
        return out

    def with_groups(self, k: int) -> "SimScenario":
        """The first ``k`` groups of this scenario (DIF entries restricted accordingly)."""
        keep = self.groups[:k]
        return SimScenario(keep, self.n_per_group[:k], self.items, self.impact[:k],
                           tuple(d for d in self.dif if d.group in keep), self.seed, self.name)


def _stream(seed: int, replication: int, group: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, replication, group])))


def generate(scenario: SimScenario, replication: int = 0) -> ResponseMatrix:
    """Draw one replication's response matrix.

    Each group has its own counter-based stream keyed by (seed, replication,
    group index), so a group's data do not depend on which other groups exist.
    """
    params = scenario.true_params()
    cells, groups, pids = [], [], []
    for g, (name, n, dist) in enumerate(zip(scenario.groups, scenario.n_per_group, scenario.impact)):
        rng = _stream(scenario.seed, replication, g)
        theta = rng.normal(dist.mean, dist.sd, size=n)
        u = rng.random((n, len(scenario.items)))
        p = np.column_stack([irf(theta, params[j][g]) for j in range(len(scenario.items))])
        cells.append((u < p).astype(np.int8))
        groups.append(np.full(n, g))
        pids += [f"{name}-{i + 1}" for i in range(n)]
    return ResponseMatrix(np.vstack(cells), np.concatenate(groups), scenario.groups,
                          scenario.item_ids, tuple(pids))


def load_scenario(path) -> SimScenario:
    """Read a scenario TOML file.

    Layout: top-level ``seed`` and ``name``; one ``[[group]]`` table per group
    (``name``, ``n``, ``mean``, ``sd``; the first is the reference); one
    ``[[item]]`` table per item (``id``, ``model``, ``a``, ``b``, ``g``); and
    optional ``[[dif]]`` tables (``item``, ``group``, ``delta_b``, ``a_ratio``).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    with path.open("rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    return scenario_from_dict(doc)


def scenario_from_dict(doc: dict) -> SimScenario:
    try:
        groups = doc["group"]
        items = doc["item"]
        sim_items = tuple(
            SimItem(str(t["id"]), Model(str(t.get("model", "2PL")).upper()), float(t["a"]),
                    float(t["b"]), float(t.get("g", 0.0)))
            for t in items
        )
        dif = tuple(
            DifEntry(str(t["item"]), str(t["group"]), float(t.get("delta_b", 0.0)),
                     float(t.get("a_ratio", 1.0)))
            for t in doc.get("dif", [])
        )
        return SimScenario(
            groups=tuple(str(t["name"]) for t in groups),
            n_per_group=tuple(int(t["n"]) for t in groups),
            items=sim_items,
            impact=tuple(GroupDist(float(t.get("mean", 0.0)), float(t.get("sd", 1.0))) for t in groups),
            dif=dif,
            seed=int(doc.get("seed", 0)),
            name=str(doc.get("name", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid scenario: {exc!r}") from None


def bundled_scenario(name: str) -> SimScenario:
    """Load one of the scenario files shipped with the package."""
    path = Path(__file__).parent / "scenarios" / f"{name}.toml"
    return load_scenario(path)


class Method(str, Enum):
    WALD1 = "wald1"
    GENLOG = "genlog"


@dataclass(frozen=True)
class RepOutcome:
    """Flags from one method on one replication.

    ``completed`` is false when no results exist (EM failure); a purification
    that stops without a fixed point still completes, with ``converged`` false.
    """

    replication: int
    method: str
    completed: bool
    converged: bool
    tested: tuple = ()
    flags_all: tuple = ()
    flags_nudif: tuple = ()
    flags_udif: tuple = ()
    error: str = ""
    p_all: tuple = ()  # raw All-test p-values, aligned with ``tested``
    sweep_p_all: tuple = ()  # Wald-2 All-test p-values per item, None when untestable


@dataclass(frozen=True)
class StudyOptions:
    alpha: float = 0.05
    n_anchors: int = 1
    include_guessing: bool = True
    adjust: str = "holm"
    missing: str = "incorrect"
    max_iter: int = 10


def _run_wald(data, scenario, rep, opts: StudyOptions) -> RepOutcome:
    from .wald import run_wald_pipeline

    try:
        res = run_wald_pipeline(data, scenario.specs(), n_anchors=opts.n_anchors,
                                include_guessing=opts.include_guessing)
    except DifkitError as exc:
        return RepOutcome(rep, Method.WALD1.value, False, False, error=f"{type(exc).__name__}: {exc}")
    done = [r for r in res.wald1 if r.testable]
    flags = {f: tuple(r.item_id for r in res.wald1 if r.flags(opts.alpha)[f]) for f in ("all", "nudif", "udif")}
    return RepOutcome(rep, Method.WALD1.value, True, True, tuple(r.item_id for r in done),
                      flags["all"], flags["nudif"], flags["udif"], p_all=tuple(r.p_all for r in done),
                      sweep_p_all=tuple(r.p_all for r in res.wald2))


def _run_genlog(data, rep, opts: StudyOptions) -> RepOutcome:
    from .errors import PurificationNonConvergence
    from .genlogistic import purify_and_test

    converged, error = True, ""
    try:
        results, _ = purify_and_test(data, opts.alpha, opts.adjust, opts.max_iter, opts.missing)
    except PurificationNonConvergence as exc:
        results, converged, error = exc.results, False, f"PurificationNonConvergence: {exc.trace.reason}"
    except DifkitError as exc:
        return RepOutcome(rep, Method.GENLOG.value, False, False, error=f"{type(exc).__name__}: {exc}")
    done = [r for r in results if r.testable]
    flags = {f: tuple(r.item_id for r in results if getattr(r, f"flag_{f}")) for f in ("all", "nudif", "udif")}
    return RepOutcome(rep, Method.GENLOG.value, True, converged, tuple(r.item_id for r in done),
                      flags["all"], flags["nudif"], flags["udif"], error, tuple(r.p_all for r in done))


def run_replication(scenario: SimScenario, rep: int, methods: Sequence[str],
                    opts: StudyOptions = StudyOptions()) -> list[RepOutcome]:
    """Generate replication ``rep`` and run each method's full pipeline on it."""
    data = generate(scenario, rep)
    out = []
    for m in methods:
        m = Method(m)
        out.append(_run_wald(data, scenario, rep, opts) if m is Method.WALD1 else _run_genlog(data, rep, opts))
    return out


def _replication_job(args):
    scenario, rep, methods, opts = args
    logging.getLogger("difkit").setLevel(logging.ERROR)
    return run_replication(scenario, rep, methods, opts)


@dataclass
class SimSummary:
    """Per-method rejection rates, flag counts and failures over a replication study.

    Rejection rates use the replications in which the item was tested
    (completed, not an anchor, not untestable). Mean flag counts use the
    completed replications; a purification stopped without a fixed point
    contributes its last flag set and is counted in ``nonconverged``.
    """

    scenario: str
    replications: int
    alpha: float
    methods: tuple
    item_ids: tuple
    outcomes: list = field(repr=False, default_factory=list)

    def _of(self, method) -> list[RepOutcome]:
        return [o for o in self.outcomes if o.method == Method(method).value]

    def rejection_rates(self, method, family: str = "all") -> dict:
        tested = Counter()
        hits = Counter()
        for o in self._of(method):
            tested.update(o.tested)
            hits.update(getattr(o, f"flags_{family}"))
        return {i: (hits[i] / tested[i] if tested[i] else float("nan")) for i in self.item_ids}

    def tested_counts(self, method) -> dict:
        tested = Counter()
        for o in self._of(method):
            tested.update(o.tested)
        return {i: tested[i] for i in self.item_ids}

    def mean_flags(self, method, family: str = "all") -> float:
        done = [o for o in self._of(method) if o.completed]
        if not done:
            return float("nan")
        return sum(len(getattr(o, f"flags_{family}")) for o in done) / len(done)

    def raw_pvalues(self, method, item_id: str) -> np.ndarray:
        """Raw All-test p-values of one item over the replications that tested it."""
        return np.array([o.p_all[o.tested.index(item_id)] for o in self._of(method)
                         if item_id in o.tested and o.p_all])

    def sweep_rejection_rates(self) -> dict:
        """Wald-2 All-test rejection rates at ``alpha`` per item, over replications that tested it."""
        tested = Counter()
        hits = Counter()
        for o in self._of(Method.WALD1):
            for i, p in zip(self.item_ids, o.sweep_p_all):
                if p is not None:
                    tested[i] += 1
                    hits[i] += p < self.alpha
        return {i: (hits[i] / tested[i] if tested[i] else float("nan")) for i in self.item_ids}

    def completed(self, method) -> int:
        return sum(o.completed for o in self._of(method))

    def nonconverged(self, method) -> int:
        return sum(not o.converged for o in self._of(method))

    def failures(self, method) -> list:
        return [(o.replication, o.error) for o in self._of(method) if o.error]

    def to_dict(self) -> dict:
        methods = {}
        for m in self.methods:
            methods[m] = {
                "completed": self.completed(m),
                "nonconverged": self.nonconverged(m),
                "mean_flags": {f: self.mean_flags(m, f) for f in ("all", "nudif", "udif")},
                "rejection_rate": {f: self.rejection_rates(m, f) for f in ("all", "nudif", "udif")},
                "tested": self.tested_counts(m),
                "failures": [{"replication": r, "error": e} for r, e in self.failures(m)],
            }
        return {
            "schema": 1,
            "scenario": self.scenario,
            "replications": self.replications,
            "alpha": self.alpha,
            "items": list(self.item_ids),
            "methods": methods,
            "outcomes": [asdict(o) for o in self.outcomes],
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        """Write ``summary.json`` and ``summary.csv`` (one row per method, item and family)."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath = out_dir / "summary.json"
        jpath.write_text(json.dumps(_json_safe(self.to_dict()), indent=2, sort_keys=True) + "\n")
        cpath = out_dir / "summary.csv"
        with cpath.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "item_id", "family", "tested", "rejection_rate"])
            for m in self.methods:
                tested = self.tested_counts(m)
                for f in ("all", "nudif", "udif"):
                    rates = self.rejection_rates(m, f)
                    for i in self.item_ids:
                        rate = "" if np.isnan(rates[i]) else f"{rates[i]:.6f}"
                        w.writerow([m, i, f, tested[i], rate])
        return jpath, cpath


def _json_safe(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def thread_count() -> int:
    """Worker processes for studies: ``DIFKIT_THREADS`` when set, else 1."""
    raw = os.environ.get("DIFKIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError(f"DIFKIT_THREADS must be an integer, got {raw!r}") from None


def run_study(scenario: SimScenario, methods: Iterable[str] = ("wald1", "genlog"), reps: int = 100,
              alpha: float = 0.05, opts: StudyOptions | None = None,
              workers: int | None = None, replications: Sequence[int] | None = None) -> SimSummary:
    """Run ``reps`` replications (or the given replication indices) of every method.

    Replications are independent and may run in worker processes; results
    are gathered in replication order, so output does not depend on the
    worker count.
    """
    if reps < 1:
        raise ValidationError("reps must be at least 1")
    methods = tuple(dict.fromkeys(Method(m).value for m in methods))
    if not methods:
        raise ValidationError("at least one method is required")
    opts = opts or StudyOptions(alpha=alpha)
    if opts.alpha != alpha:
        opts = StudyOptions(**{**asdict(opts), "alpha": alpha})
    reps_idx = list(range(reps)) if replications is None else [int(r) for r in replications]
    workers = workers or thread_count()
    jobs = [(scenario, r, methods, opts) for r in reps_idx]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_replication_job, jobs))
    else:
        batches = [run_replication(scenario, r, methods, opts) for r in reps_idx]
    outcomes = [o for batch in batches for o in batch]
    return SimSummary(scenario.name, len(reps_idx), alpha, methods, scenario.item_ids, outcomes)
