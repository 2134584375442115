"""Time the compiled E-step against the numpy fallback.

    python benchmarks/bench_estep.py [--persons 3000] [--items 28] [--repeat 20]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from difkit import kernels
from difkit.irt.model import log_tables
from difkit.irt.quadrature import Quadrature


def make_inputs(persons: int, items: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=persons)
    a = rng.uniform(0.8, 2.0, items)
    b = rng.uniform(-1.5, 1.5, items)
    p = 1.0 / (1.0 + np.exp(-a * (theta[:, None] - b)))
    cells = (rng.random((persons, items)) < p).astype(np.int8)
    cells[rng.random(cells.shape) < 0.03] = -1
    quad = Quadrature()
    logp, log1mp = log_tables(quad.nodes, a, -a * b, np.zeros(items), np.zeros(items, bool))
    logw = quad.log_weights()
    return cells, np.ascontiguousarray(logp), np.ascontiguousarray(log1mp), logw


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--persons", type=int, default=3000)
    ap.add_argument("--items", type=int, default=28)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    cells, logp, log1mp, logw = make_inputs(args.persons, args.items)
    timings = {}
    results = {}
    for name in ("python", "compiled"):
        try:
            impl = kernels.get_backend(name)
        except ImportError:
            print(f"{name:>9}: not available")
            continue
        block = impl.prepare(cells)
        results[name] = impl.estep(block, logp, log1mp, logw)
        t = min(timeit.repeat(lambda: impl.estep(block, logp, log1mp, logw), number=1, repeat=args.repeat))
        timings[name] = t
        print(f"{name:>9}: {1e3 * t:8.2f} ms per E-step ({args.persons} persons, {args.items} items)")
    if len(results) == 2:
        ll_py, r_py, n_py, _ = results["python"]
        ll_c, r_c, n_c, _ = results["compiled"]
        print(f"  loglik difference {abs(ll_py - ll_c):.2e}, "
              f"max count difference {max(np.abs(r_py - r_c).max(), np.abs(n_py - n_c).max()):.2e}")
        print(f"  speed-up {timings['python'] / timings['compiled']:.1f}x")


if __name__ == "__main__":
    main()
