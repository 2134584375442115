"""Analysis report: canonical JSON document, Markdown tables and ICC curve data."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import ValidationError

SCHEMA = 1
MISSING_CELL = "n/a"


def stars(p: float | None, alpha: float = 0.05) -> str:
    """Two stars below ``alpha / 5``, one below ``alpha`` (strict), else none.

    With the default ``alpha`` these are the ``p < .05`` and ``p < .01`` marks.
    """
    if p is None or (isinstance(p, float) and math.isnan(p)):
        return ""
    if p < alpha / 5.0:
        return "**"
    if p < alpha:
        return "*"
    return ""


def stat_cell(value: float | None, p: float | None, alpha: float = 0.05, anchor: bool = False) -> str:
    """Statistic to two decimals with significance stars; anchors render as '.'."""
    if anchor:
        return "."
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return MISSING_CELL
    return f"{value:.2f}{stars(p, alpha)}"


def coef_cell(estimate: float | None, se: float | None) -> str:
    """Estimate and standard error as ``"1.04 (0.22)"``."""
    if estimate is None or se is None or math.isnan(estimate) or math.isnan(se):
        return MISSING_CELL
    return f"{estimate:.2f} ({se:.2f})"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _clean(obj):
    """Make a value JSON-safe: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


_REQUIRED = ("schema", "metadata", "converged", "errors")


@dataclass
class AnalysisReport:
    """Report content as a plain JSON-compatible mapping with a schema version."""

    content: dict

    def __post_init__(self):
        self.content = _clean(self.content)
        for key in _REQUIRED:
            if key not in self.content:
                raise ValidationError(f"report is missing {key!r}")
        if self.content["schema"] != SCHEMA:
            raise ValidationError(f"unsupported report schema {self.content['schema']!r}")

    def to_json(self) -> str:
        return json.dumps(self.content, indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AnalysisReport":
        return cls(json.loads(text))

    def __getitem__(self, key):
        return self.content[key]

    def get(self, key, default=None):
        return self.content.get(key, default)


# ---- building sections -------------------------------------------------------

def descriptives_section(data, specs, descriptives) -> list[dict]:
    models = {s.item_id: s.model.value for s in specs}
    rows = []
    for d in descriptives:
        rows.append({
            "item_id": d.item_id,
            "model": models.get(d.item_id),
            "missing_rate": d.missing_rate,
            "prop_correct": d.prop_correct,
            "point_biserial": d.point_biserial,
            "groups": {
                g: {"missing_rate": m, "prop_correct": p, "point_biserial": r}
                for g, m, p, r in zip(data.group_names, d.group_missing_rate,
                                      d.group_prop_correct, d.group_point_biserial)
            },
        })
    return rows


def dimensionality_section(data, screens: dict) -> list[dict]:
    out = []
    for g in data.group_names:
        s = screens.get(g)
        if isinstance(s, str):
            out.append({"group": g, "error": s})
            continue
        out.append({"group": g, "eigenvalues": list(s.eigenvalues[:5]), "ratio_1_2": s.ratio_1_2,
                    "unidimensional": s.unidimensional})
    return out


def _p_entry(raw, method, adjusted):
    return {"raw": raw, "method": method, "adjusted": adjusted}


def wald_rows(results, alpha: float) -> list[dict]:
    rows = []
    for r in results:
        row = {"item_id": r.item_id, "is_anchor": r.is_anchor, "testable": r.testable, "note": r.note}
        for f in ("all", "nudif", "udif"):
            p = getattr(r, f"p_{f}")
            row[f] = {
                "q": getattr(r, f"q_{f}"),
                "df": getattr(r, f"df_{f}"),
                "p": _p_entry(p, "none", p),
                "flag": bool(p is not None and p < alpha),
            }
        rows.append(row)
    return rows


def wald_params(fit, flagged: Sequence[str], cov_method: str = "fd") -> list[dict]:
    """Per-group a, b and intercept with standard errors for the given items of a fit."""
    if fit is None or not flagged:
        return []
    cov = fit.covariance(cov_method)
    pr = fit.problem
    out = []
    for item_id in flagged:
        j = fit.item_ids.index(item_id)
        groups = {}
        for g, name in enumerate(fit.group_names):
            sa, sc = pr.slot_of[j, 0, g], pr.slot_of[j, 1, g]
            a, c = float(fit.A[j, g]), float(fit.C[j, g])
            b = -c / a
            va, vc, vac = cov[sa, sa], cov[sc, sc], cov[sa, sc]
            # delta method for b = -c / a
            vb = (vc + b * b * va + 2.0 * b * vac) / (a * a)
            groups[name] = {
                "a": [a, math.sqrt(va) if va >= 0 else float("nan")],
                "b": [b, math.sqrt(vb) if vb >= 0 else float("nan")],
                "c": [c, math.sqrt(vc) if vc >= 0 else float("nan")],
            }
        out.append({"item_id": item_id, "groups": groups})
    return out


def genlog_rows(results) -> list[dict]:
    rows = []
    for r in results:
        row = {"item_id": r.item_id, "testable": r.testable, "note": r.note,
               "udif_conditional": r.udif_conditional}
        for f in ("all", "nudif", "udif"):
            row[f] = {
                "lambda": getattr(r, f"lambda_{f}"),
                "df": getattr(r, f"df_{f}"),
                "p": _p_entry(getattr(r, f"p_{f}"), r.adjustment, getattr(r, f"p_adj_{f}")),
                "flag": getattr(r, f"flag_{f}"),
            }
        rows.append(row)
    return rows


def genlog_coefficients(rows, group_names) -> list[dict]:
    out = []
    for row in rows:
        out.append({
            "item_id": row.item_id,
            "groups": {group_names[g + 1]: {"alpha": list(row.alpha[g]), "beta": list(row.beta[g])}
                       for g in range(len(row.alpha))},
        })
    return out


def trace_section(trace) -> dict:
    return {
        "converged": trace.converged,
        "reason": trace.reason,
        "iterations": [list(s) for s in trace.iterations],
        "score_basis": [list(b) for b in trace.score_basis],
    }


def icc_rows(table, items: Sequence[str]) -> list[tuple]:
    return [(i, g, round(t, 6), p) for i, g, t, p in table.rows(items)]


def write_icc_csv(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "group", "theta", "p"])
        for item_id, group, theta, p in rows:
            w.writerow([item_id, group, f"{theta:.6g}", f"{p:.10f}"])


# ---- Markdown ----------------------------------------------------------------

def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return lines


def _fmt(v, digits=2):
    if v is None:
        return MISSING_CELL
    return f"{v:.{digits}f}"


def render_markdown(report: AnalysisReport) -> str:
    """Fixed-precision Markdown rendering of a report's tables."""
    c = report.content
    alpha = c["metadata"]["config"].get("alpha", 0.05)
    groups = c["metadata"]["groups"]
    out = ["# DIF analysis report", ""]
    out.append(f"Converged: {'yes' if c['converged'] else 'no'}")
    out.append("")

    if c.get("descriptives"):
        out += ["## Item statistics", ""]
        header = ["Item", "Model", "% missing"]
        for g in groups:
            header += [f"r ({g})", f"p ({g})"]
        rows = []
        for d in c["descriptives"]:
            row = [d["item_id"], d["model"] or "", _fmt(None if d["missing_rate"] is None else 100 * d["missing_rate"], 1)]
            for g in groups:
                gd = d["groups"][g]
                row += [_fmt(gd["point_biserial"]), _fmt(gd["prop_correct"])]
            rows.append(row)
        out += _table(header, rows) + [""]

    if c.get("dimensionality"):
        out += ["## Dimensionality screen", ""]
        rows = [[d["group"], _fmt(d.get("ratio_1_2")), ("yes" if d.get("unidimensional") else "no")
                 if "error" not in d else d["error"]] for d in c["dimensionality"]]
        out += _table(["Group", "Eigenvalue ratio 1/2", "Unidimensional"], rows) + [""]

    wald = c.get("wald")
    genlog = c.get("genlog")
    if wald or genlog:
        out += ["## DIF statistics", ""]
        header = ["Item"]
        if wald:
            header += ["Wald-1 All", "Wald-1 NUDIF", "Wald-1 UDIF"]
        if genlog:
            header += ["genLR All", "genLR NUDIF", "genLR UDIF"]
        ids = [r["item_id"] for r in (wald or {}).get("wald1", [])] or [r["item_id"] for r in genlog["results"]]
        wmap = {r["item_id"]: r for r in (wald or {}).get("wald1", [])}
        gmap = {r["item_id"]: r for r in (genlog or {}).get("results", [])}
        rows = []
        for i in ids:
            row = [i]
            if wald:
                r = wmap.get(i)
                for f in ("all", "nudif", "udif"):
                    if r is None:
                        row.append(MISSING_CELL)
                    else:
                        row.append(stat_cell(r[f]["q"], r[f]["p"]["raw"], alpha, r["is_anchor"]))
            if genlog:
                r = gmap.get(i)
                for f in ("all", "nudif", "udif"):
                    row.append(MISSING_CELL if r is None else stat_cell(r[f]["lambda"], r[f]["p"]["adjusted"], alpha))
            rows.append(row)
        out += _table(header, rows)
        out += ["", f"\\* p < {alpha:g}; \\*\\* p < {alpha / 5:g}. Wald stars use raw p-values; "
                f"genLR stars use {genlog['adjustment'] if genlog else 'adjusted'}-adjusted p-values.", ""]
        if wald and wald.get("anchors"):
            out += [f"Anchor items: {', '.join(wald['anchors']['anchor_ids'])}", ""]

    if wald and wald.get("parameters"):
        out += ["## Wald-1 parameter estimates of flagged items", ""]
        header = ["Item", "Group", "a", "b", "c"]
        rows = []
        for item in wald["parameters"]:
            for g in groups:
                e = item["groups"][g]
                rows.append([item["item_id"], g] + [coef_cell(*e[k]) for k in ("a", "b", "c")])
        out += _table(header, rows) + [""]

    if genlog and genlog.get("coefficients"):
        out += ["## Group-specific logistic coefficients of flagged items", ""]
        focal = groups[1:]
        header = ["Item"] + [f"alpha ({g})" for g in focal] + [f"beta ({g})" for g in focal]
        rows = []
        for item in genlog["coefficients"]:
            row = [item["item_id"]]
            row += [coef_cell(*item["groups"][g]["alpha"]) for g in focal]
            row += [coef_cell(*item["groups"][g]["beta"]) for g in focal]
            rows.append(row)
        out += _table(header, rows) + [""]

    if genlog and genlog.get("purification"):
        t = genlog["purification"]
        out += ["## Purification", ""]
        for k, s in enumerate(t["iterations"]):
            out.append(f"- iteration {k}: {', '.join(s) if s else 'none flagged'}")
        out += [f"- {'converged' if t['converged'] else 'not converged'} ({t['reason']})", ""]

    if c["errors"]:
        out += ["## Errors", ""]
        out += [f"- {e['stage']}: {e['type']}: {e['message']}" for e in c["errors"]] + [""]
    return "\n".join(out)


def metadata(data_path, items_path, config: dict, data, seed) -> dict:
    import numpy
    import scipy

    return {
        "tool": "difkit",
        "versions": {"difkit": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__},
        "inputs": {
            "data": {"name": Path(data_path).name, "sha256": file_digest(data_path)},
            "items": {"name": Path(items_path).name, "sha256": file_digest(items_path)},
        },
        "config": config,
        "seed": seed,
        "groups": list(data.group_names),
        "group_sizes": [int(n) for n in data.group_sizes()],
        "items": list(data.item_ids),
    }


__all__ = [
    "AnalysisReport",
    "SCHEMA",
    "coef_cell",
    "render_markdown",
    "stars",
    "stat_cell",
    "write_icc_csv",
]
