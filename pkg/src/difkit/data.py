"""Response data, item metadata, loaders and item descriptives."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .errors import (
    MalformedRow,
    MissingFile,
    NonBinaryResponse,
    UnknownGroupLabel,
    UnknownItem,
    ValidationError,
)

logger = logging.getLogger(__name__)

MISSING = -1
DEFAULT_MISSING_TOKENS = frozenset({"", "NA", "."})


class Model(str, Enum):
    TWO_PL = "2PL"
    THREE_PL = "3PL"


@dataclass(frozen=True)
class ItemSpec:
    """Model family of one item, with the logit-guessing prior for 3PL items."""

    item_id: str
    model: Model = Model.TWO_PL
    guess_prior: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        if self.model is Model.THREE_PL and self.guess_prior is None:
            object.__setattr__(self, "guess_prior", (-1.1, 0.5))
        if self.model is Model.TWO_PL and self.guess_prior is not None:
            raise ValidationError(f"item {self.item_id}: guessing prior given for a 2PL item")
        if self.guess_prior is not None and not self.guess_prior[1] > 0:
            raise ValidationError(f"item {self.item_id}: prior sd must be positive")

    @property
    def is_3pl(self) -> bool:
        return self.model is Model.THREE_PL


@dataclass(frozen=True, eq=False)
class ResponseMatrix:
    """Persons x items dichotomous responses; ``MISSING`` (-1) marks empty cells.

    Group index 0 is the reference group.
    """

    cells: np.ndarray
    group_of: np.ndarray
    group_names: tuple
    item_ids: tuple
    person_ids: tuple | None = None

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int8)
        groups = np.array(self.group_of, dtype=np.intp)
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise ValidationError("need at least one person and one item")
        if not np.isin(cells, (0, 1, MISSING)).all():
            raise ValidationError("cells must be 0, 1 or missing")
        if groups.shape != (cells.shape[0],):
            raise ValidationError("group_of must have one entry per person")
        n_groups = len(self.group_names)
        if n_groups < 1:
            raise ValidationError("need at least one group")
        if groups.min() < 0 or groups.max() >= n_groups:
            raise ValidationError("group index out of range")
        if np.bincount(groups, minlength=n_groups).min() < 1:
            raise ValidationError("every group needs at least one person")
        if len(self.item_ids) != cells.shape[1]:
            raise ValidationError("item_ids length does not match the number of items")
        if self.person_ids is not None and len(self.person_ids) != cells.shape[0]:
            raise ValidationError("person_ids length does not match the number of persons")
        cells.flags.writeable = False
        groups.flags.writeable = False
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "group_of", groups)
        object.__setattr__(self, "group_names", tuple(self.group_names))
        object.__setattr__(self, "item_ids", tuple(self.item_ids))
        if self.person_ids is not None:
            object.__setattr__(self, "person_ids", tuple(self.person_ids))

    @property
    def persons(self) -> int:
        return self.cells.shape[0]

    @property
    def items(self) -> int:
        return self.cells.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    @property
    def observed(self) -> np.ndarray:
        return self.cells != MISSING

    def as_float(self) -> np.ndarray:
        """Cells as floats with NaN for missing."""
        out = self.cells.astype(float)
        out[self.cells == MISSING] = np.nan
        return out

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.n_groups)

    def item_index(self, item_id: str) -> int:
        try:
            return self.item_ids.index(item_id)
        except ValueError:
            raise UnknownItem(f"unknown item {item_id!r}") from None

    def subset_groups(self, names: Sequence[str]) -> "ResponseMatrix":
        """Keep only the named groups, in the given order (first = reference)."""
        idx = []
        for name in names:
            if name not in self.group_names:
                raise UnknownGroupLabel(f"unknown group {name!r}")
            idx.append(self.group_names.index(name))
        remap = np.full(self.n_groups, -1)
        remap[idx] = np.arange(len(idx))
        new_groups = remap[self.group_of]
        keep = new_groups >= 0
        pids = None if self.person_ids is None else tuple(np.asarray(self.person_ids, dtype=object)[keep])
        return ResponseMatrix(self.cells[keep], new_groups[keep], tuple(names), self.item_ids, pids)

    def with_reference(self, name: str) -> "ResponseMatrix":
        """Same persons with group ``name`` moved to index 0; other groups keep their order."""
        if name not in self.group_names:
            raise UnknownGroupLabel(f"unknown group {name!r}")
        if self.group_names[0] == name:
            return self
        return self.subset_groups([name] + [g for g in self.group_names if g != name])


@dataclass(frozen=True)
class CsvLayout:
    """How to read a response CSV."""

    group_column: str
    item_columns: tuple | None = None
    id_column: str | None = None
    missing_tokens: frozenset = DEFAULT_MISSING_TOKENS
    ref_group: str | None = None
    groups: tuple | None = None


def load_responses(path, layout: CsvLayout) -> ResponseMatrix:
    """Read a response CSV into a validated :class:`ResponseMatrix`.

    Groups are indexed in order of first appearance, except that
    ``layout.ref_group`` (when given) is moved to index 0.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedRow(1, "empty file") from None
        if layout.group_column not in header:
            raise MalformedRow(1, f"group column {layout.group_column!r} not in header")
        if layout.id_column is not None and layout.id_column not in header:
            raise MalformedRow(1, f"id column {layout.id_column!r} not in header")
        if layout.item_columns is None:
            skip = {layout.group_column, layout.id_column}
            item_cols = [h for h in header if h not in skip]
        else:
            item_cols = list(layout.item_columns)
            absent = [c for c in item_cols if c not in header]
            if absent:
                raise MalformedRow(1, f"item columns not in header: {absent}")
        col_pos = [header.index(c) for c in item_cols]
        g_pos = header.index(layout.group_column)
        id_pos = header.index(layout.id_column) if layout.id_column else None

        labels: list[str] = []
        rows: list[list[int]] = []
        pids: list[str] = []
        for line, raw in enumerate(reader, start=2):
            if not raw or all(not tok.strip() for tok in raw):
                continue
            if len(raw) != len(header):
                raise MalformedRow(line, f"expected {len(header)} fields, got {len(raw)}")
            label = raw[g_pos].strip()
            if layout.groups is not None and label not in layout.groups:
                raise UnknownGroupLabel(f"line {line}: unknown group {label!r}")
            labels.append(label)
            if id_pos is not None:
                pids.append(raw[id_pos].strip())
            row = []
            for name, pos in zip(item_cols, col_pos):
                tok = raw[pos].strip()
                if tok in layout.missing_tokens:
                    row.append(MISSING)
                elif tok in ("0", "1"):
                    row.append(int(tok))
                else:
                    raise NonBinaryResponse(line, name, tok)
            rows.append(row)
    if not rows:
        raise MalformedRow(2, "no data rows")

    order = list(dict.fromkeys(labels))
    if layout.ref_group is not None:
        if layout.ref_group not in order:
            raise UnknownGroupLabel(f"reference group {layout.ref_group!r} not present")
        order.remove(layout.ref_group)
        order.insert(0, layout.ref_group)
    index = {name: k for k, name in enumerate(order)}
    return ResponseMatrix(
        cells=np.array(rows, dtype=np.int8),
        group_of=np.array([index[lab] for lab in labels]),
        group_names=tuple(order),
        item_ids=tuple(item_cols),
        person_ids=tuple(pids) if id_pos is not None else None,
    )


def write_responses(data: ResponseMatrix, path, group_column: str = "group",
                    id_column: str = "pid", missing_token: str = "NA") -> None:
    """Write ``data`` as CSV readable by :func:`load_responses`."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([id_column, group_column, *data.item_ids])
        pids = data.person_ids or tuple(str(i + 1) for i in range(data.persons))
        for pid, g, row in zip(pids, data.group_of, data.cells):
            w.writerow([pid, data.group_names[g],
                        *(missing_token if v == MISSING else str(int(v)) for v in row)])


def load_item_specs(path) -> list[ItemSpec]:
    """Read item specs from a TOML file with one ``[[item]]`` table per item.

    Keys: ``id``, ``model`` (``"2PL"``/``"3PL"``), optional ``prior_mean``,
    ``prior_sd`` (3PL only; defaults -1.1 and 0.5).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    with path.open("rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    return parse_item_specs(doc.get("item", []))


def parse_item_specs(tables: Iterable[dict]) -> list[ItemSpec]:
    specs = []
    for t in tables:
        if "id" not in t:
            raise ValidationError("item table without an id")
        model = str(t.get("model", "2PL")).upper()
        if model not in ("2PL", "3PL"):
            raise ValidationError(f"item {t['id']}: unknown model {model!r}")
        prior = None
        if "prior_mean" in t or "prior_sd" in t:
            prior = (float(t.get("prior_mean", -1.1)), float(t.get("prior_sd", 0.5)))
        specs.append(ItemSpec(str(t["id"]), Model(model), prior))
    ids = [s.item_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate item ids in item specs")
    return specs


def align_specs(data: ResponseMatrix, specs: Sequence[ItemSpec]) -> list[ItemSpec]:
    """Order specs to match the data's item columns."""
    by_id = {s.item_id: s for s in specs}
    missing = [i for i in data.item_ids if i not in by_id]
    if missing:
        raise ValidationError(f"no item spec for items: {missing}")
    return [by_id[i] for i in data.item_ids]


class MissingPolicy(str, Enum):
    IGNORE = "ignore"          # skip in likelihood; rescale observed scores
    INCORRECT = "incorrect"    # score missing as 0


def apply_missing_policy(data: ResponseMatrix, policy: MissingPolicy | str) -> ResponseMatrix:
    """Response view under a missing-data policy.

    ``INCORRECT`` replaces missing cells by 0; ``IGNORE`` leaves them missing.
    """
    policy = MissingPolicy(policy)
    if policy is MissingPolicy.IGNORE:
        return data
    cells = np.where(data.cells == MISSING, 0, data.cells)
    return ResponseMatrix(cells, data.group_of, data.group_names, data.item_ids, data.person_ids)


def observed_scores(data: ResponseMatrix, basis: Sequence[int],
                    policy: MissingPolicy | str = MissingPolicy.INCORRECT) -> np.ndarray:
    """Total correct over the item indices in ``basis``.

    Under ``IGNORE`` a person's sum over answered basis items is rescaled
    to the full basis length; persons with no answered basis item get NaN.
    """
    policy = MissingPolicy(policy)
    x = data.cells[:, list(basis)]
    correct = (x == 1).sum(axis=1).astype(float)
    if policy is MissingPolicy.INCORRECT:
        return correct
    answered = (x != MISSING).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = correct * len(basis) / answered
    scaled[answered == 0] = np.nan
    return scaled


@dataclass(frozen=True)
class ItemDescriptives:
    item_id: str
    missing_rate: float
    prop_correct: float
    point_biserial: float
    group_missing_rate: tuple = field(default=())
    group_prop_correct: tuple = field(default=())
    group_point_biserial: tuple = field(default=())


def _rest_corr(item: np.ndarray, rest: np.ndarray) -> float:
    if item.size < 2 or item.std() == 0 or rest.std() == 0:
        return float("nan")
    return float(np.corrcoef(item, rest)[0, 1])


def describe_items(data: ResponseMatrix) -> list[ItemDescriptives]:
    """Missing rate, proportion correct and rest-score point-biserial per item.

    The point-biserial correlates the item (non-missing persons) with the
    sum of the person's other answered items. Values are reported pooled
    and per group; undefined correlations are NaN.
    """
    cells = data.cells
    obs = cells != MISSING
    correct = (cells == 1)
    total = correct.sum(axis=1)
    out = []
    for j, item_id in enumerate(data.item_ids):
        rest = total - correct[:, j]

        def stats_for(mask):
            n_all = mask.sum()
            m = mask & obs[:, j]
            miss = 1.0 - m.sum() / n_all if n_all else float("nan")
            pc = correct[m, j].mean() if m.any() else float("nan")
            r = _rest_corr(correct[m, j].astype(float), rest[m].astype(float))
            return float(miss), float(pc), r

        pooled = stats_for(np.ones(data.persons, dtype=bool))
        per_group = [stats_for(data.group_of == g) for g in range(data.n_groups)]
        out.append(ItemDescriptives(
            item_id=item_id,
            missing_rate=pooled[0],
            prop_correct=pooled[1],
            point_biserial=pooled[2],
            group_missing_rate=tuple(s[0] for s in per_group),
            group_prop_correct=tuple(s[1] for s in per_group),
            group_point_biserial=tuple(s[2] for s in per_group),
        ))
    return out
