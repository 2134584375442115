"""Command-line entry points: ``analyze``, ``simulate``, ``describe`` and ``generate``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import report as rpt
from .data import (
    CsvLayout,
    MissingPolicy,
    apply_missing_policy,
    describe_items,
    load_item_specs,
    load_responses,
    write_responses,
)
from .errors import (
    DifkitError,
    NonConvergence,
    PurificationNonConvergence,
    SingularContrastCovariance,
    SingularInformation,
    ValidationError,
)
from .genlogistic import coefficients_table, purify_and_test
from .irt.em import FitOptions
from .irt.scoring import icc_table
from .stats import Adjustment, dim_screen
from .wald import run_wald_pipeline

logger = logging.getLogger("difkit")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NONCONVERGED = 3

_NONCONVERGED = (NonConvergence, PurificationNonConvergence, SingularInformation, SingularContrastCovariance)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _methods(text: str) -> list[str]:
    allowed = {"wald": "wald", "wald1": "wald", "genlog": "genlog"}
    out = []
    for m in _csv_list(text):
        if m not in allowed:
            raise argparse.ArgumentTypeError(f"unknown method {m!r}")
        if allowed[m] not in out:
            out.append(allowed[m])
    if not out:
        raise argparse.ArgumentTypeError("no methods given")
    return out


def _formats(text: str) -> list[str]:
    out = _csv_list(text)
    bad = set(out) - {"json", "md", "csv"}
    if bad:
        raise argparse.ArgumentTypeError(f"unknown format(s) {sorted(bad)}")
    return out


def _anchors(text: str) -> tuple[str, object]:
    kind, _, rest = text.partition(":")
    if kind == "mp":
        try:
            n = int(rest or 1)
        except ValueError:
            raise argparse.ArgumentTypeError("mp anchors take a count, e.g. mp:1") from None
        if n < 1:
            raise argparse.ArgumentTypeError("anchor count must be at least 1")
        return "mp", n
    if kind == "fixed":
        ids = _csv_list(rest)
        if not ids:
            raise argparse.ArgumentTypeError("fixed anchors need item ids, e.g. fixed:I20")
        return "fixed", ids
    raise argparse.ArgumentTypeError("anchors must be mp:N or fixed:ID[,ID...]")


def _alpha(text: str) -> float:
    a = float(text)
    if not 0 < a < 1:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return a


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="difkit", description="Multi-group DIF analysis")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="run DIF tests on a response file")
    a.add_argument("--data", required=True, type=Path)
    a.add_argument("--items", required=True, type=Path)
    a.add_argument("--ref-group", required=True)
    a.add_argument("--group-column", default="group")
    a.add_argument("--id-column", default=None)
    a.add_argument("--methods", type=_methods, default=["wald", "genlog"])
    a.add_argument("--alpha", type=_alpha, default=0.05)
    a.add_argument("--adjust", choices=[m.value for m in Adjustment], default="holm")
    a.add_argument("--anchors", type=_anchors, default=("mp", 1))
    a.add_argument("--missing", choices=[m.value for m in MissingPolicy], default=None,
                   help="missing-response policy for both paths (default: ignore in the IRT "
                        "likelihood, incorrect in observed scores)")
    a.add_argument("--out", type=Path, default=Path("."))
    a.add_argument("--format", dest="formats", type=_formats, default=["json", "md", "csv"])
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--max-iter", type=int, default=10, help="purification iteration limit")
    a.add_argument("--no-guessing-test", action="store_true",
                   help="leave 3PL guessing out of the Wald contrasts")
    a.add_argument("--cov", choices=["fd", "louis"], default="fd",
                   help="observed-information method for the Wald covariance")

    s = sub.add_parser("simulate", help="run a replication study")
    s.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    s.add_argument("--reps", type=int, required=True)
    s.add_argument("--methods", type=_methods, default=["wald", "genlog"])
    s.add_argument("--alpha", type=_alpha, default=0.05)
    s.add_argument("--groups", type=int, default=None, help="analyze only the first K groups")
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", type=Path, required=True)

    d = sub.add_parser("describe", help="item descriptives and dimensionality screen")
    d.add_argument("--data", required=True, type=Path)
    d.add_argument("--ref-group", default=None)
    d.add_argument("--group-column", default="group")
    d.add_argument("--id-column", default=None)

    g = sub.add_parser("generate", help="write one simulated response file")
    g.add_argument("--scenario", required=True)
    g.add_argument("--replication", type=int, default=0)
    g.add_argument("--out", required=True, type=Path)
    return parser


# ---- analyze -----------------------------------------------------------------

def _error_entry(stage: str, exc: BaseException) -> dict:
    return {"stage": stage, "type": type(exc).__name__, "message": str(exc)}


def _screens(data) -> dict:
    out = {}
    for g, name in enumerate(data.group_names):
        try:
            out[name] = dim_screen(data, g)
        except DifkitError as exc:
            out[name] = f"{type(exc).__name__}: {exc}"
    return out


def _irt_missing(args) -> str:
    return args.missing or MissingPolicy.IGNORE.value


def _genlog_missing(args) -> str:
    return args.missing or MissingPolicy.INCORRECT.value


def _config(args) -> dict:
    kind, val = args.anchors
    return {
        "methods": list(args.methods),
        "alpha": args.alpha,
        "adjust": args.adjust,
        "anchors": f"mp:{val}" if kind == "mp" else "fixed:" + ",".join(val),
        "missing": {"irt": _irt_missing(args), "genlog": _genlog_missing(args)},
        "ref_group": args.ref_group,
        "group_column": args.group_column,
        "max_iter": args.max_iter,
        "include_guessing": not args.no_guessing_test,
        "cov": args.cov,
    }


def analyze(args) -> int:
    layout = CsvLayout(args.group_column, id_column=args.id_column, ref_group=args.ref_group)
    data = load_responses(args.data, layout)
    specs = load_item_specs(args.items)
    if data.n_groups < 2:
        raise ValidationError("DIF analysis needs at least two groups")
    config = _config(args)
    content = {
        "schema": rpt.SCHEMA,
        "metadata": rpt.metadata(args.data, args.items, config, data, args.seed),
        "descriptives": rpt.descriptives_section(data, specs, describe_items(data)),
        "dimensionality": rpt.dimensionality_section(data, _screens(data)),
        "errors": [],
    }
    converged = True
    wald_flags = genlog_flags = None
    wald_fit = None

    if "wald" in args.methods:
        kind, val = args.anchors
        wdata = apply_missing_policy(data, _irt_missing(args))
        try:
            res = run_wald_pipeline(
                wdata, specs, None,
                n_anchors=val if kind == "mp" else 1,
                fixed_anchors=val if kind == "fixed" else None,
                include_guessing=not args.no_guessing_test,
                cov_method=args.cov,
            )
        except _NONCONVERGED as exc:
            converged = False
            content["errors"].append(_error_entry("wald", exc))
            content["wald"] = None
        else:
            wald_fit = res.fits["wald1"]
            wald_flags = res.flagged(args.alpha, "all")
            content["wald"] = {
                "anchors": {"anchor_ids": list(res.anchors.anchor_ids), "mean_p": res.anchors.mean_p},
                "wald2": rpt.wald_rows(res.wald2, args.alpha),
                "wald1": rpt.wald_rows(res.wald1, args.alpha),
                "flagged": wald_flags,
                "parameters": rpt.wald_params(wald_fit, wald_flags, args.cov),
                "fit": {"loglik": wald_fit.loglik, "cycles": wald_fit.cycles,
                        "groups": {n: [d.mean, d.sd] for n, d in zip(wald_fit.group_names, wald_fit.dists)}},
            }

    if "genlog" in args.methods:
        try:
            results, trace = purify_and_test(data, args.alpha, args.adjust, args.max_iter,
                                             _genlog_missing(args))
        except PurificationNonConvergence as exc:
            converged = False
            content["errors"].append(_error_entry("genlog", exc))
            results, trace = exc.results, exc.trace
        genlog_flags = [r.item_id for r in results if r.flag_all]
        content["genlog"] = {
            "adjustment": args.adjust,
            "results": rpt.genlog_rows(results),
            "flagged": genlog_flags,
            "coefficients": rpt.genlog_coefficients(coefficients_table(results), data.group_names),
            "purification": rpt.trace_section(trace),
        }

    if wald_fit is not None:
        icc_items = wald_flags if genlog_flags is None else [i for i in wald_flags if i in genlog_flags]
        content["icc_items"] = icc_items
        icc_rows = rpt.icc_rows(icc_table(wald_fit), icc_items)
    else:
        content["icc_items"] = []
        icc_rows = []

    content["converged"] = converged
    report = rpt.AnalysisReport(content)
    args.out.mkdir(parents=True, exist_ok=True)
    if "json" in args.formats:
        (args.out / "report.json").write_text(report.to_json())
    if "md" in args.formats:
        (args.out / "report.md").write_text(rpt.render_markdown(report))
    if "csv" in args.formats:
        rpt.write_icc_csv(icc_rows, args.out / "icc.csv")
    return EXIT_OK if converged else EXIT_NONCONVERGED


# ---- simulate, describe, generate ----------------------------------------------

def _scenario(ref: str):
    from .simulate import bundled_scenario, load_scenario

    p = Path(ref)
    return load_scenario(p) if p.suffix or p.exists() else bundled_scenario(ref)


def simulate(args) -> int:
    from .simulate import Method, run_study

    sc = _scenario(args.scenario)
    if args.groups is not None:
        if not 2 <= args.groups <= len(sc.groups):
            raise ValidationError(f"--groups must lie in [2, {len(sc.groups)}]")
        sc = sc.with_groups(args.groups)
    if args.reps < 1:
        raise ValidationError("--reps must be at least 1")
    methods = [Method.WALD1 if m == "wald" else Method.GENLOG for m in args.methods]
    summary = run_study(sc, methods, args.reps, args.alpha, workers=args.workers)
    summary.write(args.out)
    return EXIT_OK


def describe(args) -> int:
    data = load_responses(args.data, CsvLayout(args.group_column, id_column=args.id_column,
                                               ref_group=args.ref_group))
    print(f"{data.persons} persons, {data.items} items, groups: "
          + ", ".join(f"{n} ({k})" for n, k in zip(data.group_names, data.group_sizes())))
    print(f"{'item':<8} {'missing':>8} {'p':>6} {'r_pb':>6}")
    for d in describe_items(data):
        print(f"{d.item_id:<8} {d.missing_rate:8.3f} {d.prop_correct:6.3f} {d.point_biserial:6.3f}")
    for name, s in _screens(data).items():
        if isinstance(s, str):
            print(f"{name}: {s}")
        else:
            print(f"{name}: eigenvalue ratio {s.ratio_1_2:.2f} "
                  f"({'unidimensional' if s.unidimensional else 'check dimensionality'})")
    return EXIT_OK


def generate_cmd(args) -> int:
    from .simulate import generate

    data = generate(_scenario(args.scenario), args.replication)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_responses(data, args.out)
    return EXIT_OK


_COMMANDS = {"analyze": analyze, "simulate": simulate, "describe": describe, "generate": generate_cmd}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except _NONCONVERGED as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (DifkitError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
