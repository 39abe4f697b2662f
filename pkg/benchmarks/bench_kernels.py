"""Time the numba and numpy backward sweeps on the same inputs.

    python3 benchmarks/bench_kernels.py --J 200 --steps 200 --modes 4
"""
import argparse
import time

import numpy as np

from oopdmp import kernels
from oopdmp.grid import INF


def make_inputs(J, steps, M, seed=0):
    rng = np.random.default_rng(seed)
    n = J + 1
    h = 1.0 / J
    f = 1.0 + rng.random((n, n))
    dt = 0.9 * h / (np.sqrt(2.0) * f.max())
    K = 1.0 + rng.random((M, n, n))
    wK = rng.dirichlet(np.ones(M), size=steps + 1)
    active = np.ones((n, n), bool)
    active[n // 2 - 2:n // 2 + 2, n // 2 - 2:n // 2 + 2] = False
    bdry = np.zeros((n, n), bool)
    bdry[n // 2 - 3, n // 2 - 2:n // 2 + 2] = True
    V = np.where(bdry, 0.0, INF)
    W = rng.random((M, n, n)) * 5.0
    slot = np.full(steps + 1, -1, np.int64)
    slot[0] = 0
    out = np.empty((1, n, n))
    return dict(V=V, K=K, wK=wK, f=f, dt=dt, h=h, active=active,
                has_zeroth=True, wG=0.5 * wK, PHI=W.copy(),
                has_obs=True, W=W, wO=wK, ocost=np.full((n, n), 0.1),
                has_bdry=True, bdry=bdry, PSI=np.zeros((M, n, n)), wP=wK,
                save_slot=slot, out=out, inf=INF)


def run(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(**args)
        best = min(best, time.perf_counter() - t)
    return best


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--J", type=int, default=200)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--modes", type=int, default=4)
    p.add_argument("--repeat", type=int, default=3)
    a = p.parse_args()
    args = make_inputs(a.J, a.steps, a.modes)
    kernels.sweep_numba(**make_inputs(8, 2, a.modes))  # compile outside the timing
    t_nb = run(kernels.sweep_numba, args, a.repeat)
    out_nb = args["out"].copy()
    t_np = run(kernels.sweep_numpy, args, a.repeat)
    same = np.array_equal(out_nb, args["out"])
    pts = (a.J + 1) ** 2 * a.steps
    print(f"grid {a.J + 1}^2, {a.steps} steps, {a.modes} modes")
    print(f"numba : {t_nb:8.4f} s  ({pts / t_nb / 1e6:7.2f} Mpt-steps/s)")
    print(f"numpy : {t_np:8.4f} s  ({pts / t_np / 1e6:7.2f} Mpt-steps/s)")
    print(f"speedup {t_np / t_nb:.1f}x, outputs bitwise equal: {same}")


if __name__ == "__main__":
    main()
