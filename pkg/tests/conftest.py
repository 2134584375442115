from __future__ import annotations

import logging

import numpy as np
import pytest

from difkit.data import ItemSpec, ResponseMatrix
from difkit.irt.model import ItemParams, irf
from difkit.simulate import bundled_scenario, run_study

ACCEPTANCE_LINES: list[str] = []
_STUDIES: dict = {}


def record_acceptance(criterion: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def study(name: str, reps: int, methods=("wald1", "genlog"), groups: int | None = None):
    """Run a bundled scenario once per session; later requests reuse the summary."""
    key = (name, reps, tuple(methods), groups)
    if key not in _STUDIES:
        sc = bundled_scenario(name)
        if groups is not None:
            sc = sc.with_groups(groups)
        _STUDIES[key] = run_study(sc, methods, reps)
    return _STUDIES[key]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="difkit")


def simulate_matrix(params, dists, n_per_group, seed=0, missing_rate=0.0):
    """Responses for ``params[j][g]`` (ItemParams) and ``dists`` [(mean, sd)] per group."""
    rng = np.random.default_rng(seed)
    G = len(dists)
    blocks, groups = [], []
    for g, (m, s) in enumerate(dists):
        theta = rng.normal(m, s, n_per_group)
        p = np.column_stack([irf(theta, row[g]) for row in params])
        x = (rng.random(p.shape) < p).astype(np.int8)
        if missing_rate:
            x[rng.random(x.shape) < missing_rate] = -1
        blocks.append(x)
        groups.append(np.full(n_per_group, g))
    return ResponseMatrix(np.vstack(blocks), np.concatenate(groups),
                          tuple(["REF"] + [f"F{g}" for g in range(1, G)]),
                          tuple(f"I{j + 1:02d}" for j in range(len(params))))


def panel(n_items=10, n_groups=3, seed=0, three_pl=(), dif=None):
    """Item parameters shared across groups, with optional ``{(item, group): (db, a_ratio)}``."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.9, 1.8, n_items)
    b = rng.uniform(-1.0, 1.0, n_items)
    params, specs = [], []
    for j in range(n_items):
        g = 0.2 if j in three_pl else None
        row = []
        for k in range(n_groups):
            db, ar = (dif or {}).get((j, k), (0.0, 1.0))
            row.append(ItemParams.from_difficulty(a[j] * ar, b[j] + db, g))
        params.append(row)
        specs.append(ItemSpec(f"I{j + 1:02d}", "3PL" if j in three_pl else "2PL"))
    return params, specs


@pytest.fixture(scope="session")
def small_panel():
    """Three groups of 400 on 10 items (two 3PL) with impact and no DIF."""
    params, specs = panel(10, 3, seed=11, three_pl=(2, 7))
    data = simulate_matrix(params, [(0, 1), (0.3, 1.1), (-0.2, 0.9)], 400, seed=12, missing_rate=0.02)
    return data, specs


def swaminathan_rogers(y, score, focal):
    """Two-group logistic DIF deviances (both, nonuniform, uniform) from statsmodels fits."""
    import statsmodels.api as sm

    y = np.asarray(y, float)
    s = np.asarray(score, float)
    f = np.asarray(focal, float)
    designs = [
        np.column_stack([np.ones_like(s), s]),
        np.column_stack([np.ones_like(s), s, f]),
        np.column_stack([np.ones_like(s), s, f, s * f]),
    ]
    ll = [sm.Logit(y, X).fit(method="newton", tol=1e-14, maxiter=200, disp=False).llf for X in designs]
    return 2 * (ll[2] - ll[0]), 2 * (ll[2] - ll[1]), 2 * (ll[1] - ll[0])
