"""Compiled versus pure-numpy quadrature kernel.

Times one marginal log-likelihood evaluation (with gradient) and one full
GLMM fit per backend on simulated ITSA data, and checks the backends agree.

    python3 benchmarks/bench_kernels.py --n 50000 --j 50 --repeats 5
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from tallmixed import simulate as sim
from tallmixed.data import collapse
from tallmixed.glmm import MarginalLikelihood, glmm_fit
from tallmixed.kernels import BACKENDS


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=50_000)
    ap.add_argument("--j", type=int, default=50)
    ap.add_argument("--quad-points", type=int, default=15)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    ds = sim.simulate_itsa_logistic(sim.ItsaParams(N=args.n, J=args.j), args.seed)
    spec = sim.itsa_spec()
    table = collapse(ds)
    x = None
    rows = []
    values = {}
    for name in sorted(BACKENDS):
        obj = MarginalLikelihood(spec, ds, args.quad_points, backend=name)
        if x is None:
            x = obj.pack(sim.ItsaParams().beta, 0.05)
        values[name] = obj.evaluate(x)
        t_eval = best_of(lambda: obj.evaluate(x), args.repeats)
        t_full = best_of(lambda: glmm_fit(spec, ds, args.quad_points, backend=name), 1)
        t_coll = best_of(lambda: glmm_fit(spec, table, args.quad_points, backend=name), args.repeats)
        rows.append((name, t_eval, t_full, t_coll))

    print(f"N={ds.n_rows} rows, J={ds.n_clusters} clusters, collapsed to {table.n_rows} rows, "
          f"{args.quad_points} nodes")
    print(f"{'backend':<8} {'eval+grad (ms)':>15} {'full fit (s)':>13} {'collapsed fit (s)':>18}")
    for name, te, tf, tc in rows:
        print(f"{name:<8} {1e3 * te:>15.2f} {tf:>13.2f} {tc:>18.3f}")
    if len(rows) == 2:
        (_, e0, f0, c0), (_, e1, f1, c1) = rows
        print(f"speedup (cython over python): eval {e1 / e0:.1f}x, full {f1 / f0:.1f}x, collapsed {c1 / c0:.1f}x")
        (l0, g0), (l1, g1) = values["cython"], values["python"]
        print(f"max |difference|: loglik {abs(l0 - l1):.2e}, gradient {np.max(np.abs(g0 - g1)):.2e}")


if __name__ == "__main__":
    main()
