"""Command-line entry point: ``oopdmp {solve,bound,simulate,evaluate,export-policy}``.

Exit status is 0 on success, 1 for bad input (unparseable scenario, missing
results, out-of-range layer or anchor) and 2 when an iterative solve stops
before reaching its tolerance.  Results are still written in that last case,
with ``"warning": "not converged"`` in the manifest.
"""
import argparse
import csv
import json
import os
import sys

import numpy as np

from ._accel import set_threads
from .eikonal import horizon_bound, solve_min_time
from .grid import INF
from .policy import DivergenceError, grad_threshold, mc_evaluate, trace_trajectory, _directions, _stencil, _sample_slices
from .scenario import (ScenarioError, bundled_scenario_path, load_result, load_scenario, read_manifest,
                       write_results)
from .solvers import NonConvergenceError, solve

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2


class InputError(Exception):
    pass


def resolve_scenario_path(name):
    """Plain path, or ``bundled:<name>`` for one of the packaged fixtures."""
    if name.startswith("bundled:"):
        p = bundled_scenario_path(name[len("bundled:"):])
    else:
        p = name
    if not os.path.exists(p):
        raise InputError(f"scenario file not found: {name}")
    return p


def parse_anchor(text):
    """``3`` -> 3, ``0.2,0.8`` -> [0.2, 0.8], other words pass through."""
    if text is None:
        return None
    t = text.strip()
    if "," in t:
        try:
            return [float(v) for v in t.split(",")]
        except ValueError:
            raise InputError(f"bad anchor {text!r}") from None
    try:
        return int(t)
    except ValueError:
        return t


def _overrides(args):
    ov = {}
    for k in ("J", "tol", "horizon"):
        v = getattr(args, k, None)
        if v is not None:
            ov[k] = v
    if getattr(args, "seed", None) is not None:
        ov["seed"] = args.seed
    if getattr(args, "anchor", None) is not None:
        ov["anchor"] = parse_anchor(args.anchor)
    return ov


def _load(args):
    sc = load_scenario(resolve_scenario_path(args.scenario))
    ov = _overrides(args)
    return sc.with_overrides(**ov), ov


# ---------------------------------------------------------------- verbs

def cmd_solve(args):
    sc, ov = _load(args)
    pb = sc.build()
    status = EXIT_OK
    extra = {"base_dir": sc.base_dir}
    try:
        res = solve(pb)
    except NonConvergenceError as e:
        res = e.result
        if res is None:
            raise
        status = EXIT_NONCONVERGED
        extra["warning"] = "not converged"
    write_results(res, [], args.out, scenario=sc, overrides=ov, extra=extra)
    final = res.residual_history[-1] if res.residual_history else 0.0
    print(f"iterations: {res.iterations_used}")
    print(f"final residual: {final:.6e}")
    if res.horizon_used is not None:
        print(f"horizon: {res.horizon_used:.6f}")
    if status == EXIT_NONCONVERGED:
        print("warning: tolerance not reached; results written anyway", file=sys.stderr)
    print(f"results: {args.out}")
    return status


def cmd_bound(args):
    sc, _ = _load(args)
    pb = sc.build()
    if not pb.grid.has_target:
        raise InputError("bound needs a scenario with a target")
    z = solve_min_time(pb.grid, pb.speed)
    K = pb.costs.K[:, pb.grid.active]
    psi_max = float(pb.costs.psi.max())
    b = horizon_bound(z, float(K.min()), float(K.max()), psi_max)
    print(f"max travel time: {z.max_finite:.6f}")
    print(f"K range: [{K.min():.6f}, {K.max():.6f}]  psi max: {psi_max:.6f}")
    print(f"horizon bound: {b:.6f}")
    return EXIT_OK


def _result(args):
    try:
        return load_result(args.out)
    except FileNotFoundError as e:
        raise InputError(str(e)) from None


def _start(args, sc):
    if getattr(args, "start", None):
        try:
            x, y = (float(v) for v in args.start.split(","))
        except ValueError:
            raise InputError(f"bad start {args.start!r}") from None
        return (x, y)
    return sc.start


def cmd_simulate(args):
    res, sc = _result(args)
    man = read_manifest(args.out, verify=False)
    start = _start(args, sc)
    n = max(1, args.runs or 1)
    stochastic = args.stochastic or n > 1
    seed = sc.seed if args.seed is None else args.seed
    traces = []
    for k in range(n):
        s = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        script = None if stochastic else sc.script
        try:
            traces.append(trace_trajectory(res, start, seed=s, stochastic=stochastic, script=script))
        except DivergenceError as e:
            print(f"run {k}: {e}", file=sys.stderr)
    ov = dict(man.get("overrides", {}))
    ov["simulate"] = {"seed": seed, "runs": n, "stochastic": stochastic, "start": list(start)}
    extra = {k: man[k] for k in ("base_dir", "warning") if k in man}
    write_results(res, traces, args.out, scenario=sc, overrides=ov, extra=extra)
    for k, tr in enumerate(traces):
        print(f"trace {k}: cost {tr.realized_cost:.6f}, observations {len(tr.observations())}, "
              f"steps {len(tr.path)}")
    return EXIT_OK


def _value_at(res, layer, anchor, start):
    vf = res.values[(layer, anchor)]
    x, y = np.array([start[0]]), np.array([start[1]])
    return float(_sample_slices(vf, np.zeros(1), x, y, res.problem.grid)[0])


def cmd_evaluate(args):
    res, sc = _result(args)
    start = _start(args, sc)
    seed = sc.seed if args.seed is None else args.seed
    n = args.runs or 1000
    mean, se, bad = mc_evaluate(res, start, n, seed=seed)
    key = _anchor_key(res, None)
    v = _value_at(res, 0, key, start)
    print(f"mean cost: {mean:.6f} +- {se:.6f} (n={n}, diverged={bad})")
    print(f"value at start: {v:.6f}")
    print(f"difference: {abs(mean - v):.6f}  ({abs(mean - v) / se if se > 0 else 0.0:.2f} stderr)")
    return EXIT_OK


def _anchor_key(res, text):
    if text is None:
        a = res.problem.spec.anchor
        return int(a) if isinstance(a, (int, np.integer)) else "q"
    a = parse_anchor(text)
    return a if isinstance(a, int) else "q"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def branch_contours(diff, level):
    """Marching-squares outlines of ``{diff <= level}`` as lists of (x, y) arrays."""
    from skimage.measure import find_contours

    d = np.asarray(diff, float)
    if not np.isfinite(d).all() or np.ptp(d) == 0.0:
        return []
    J = d.shape[0] - 1
    return [c / J for c in find_contours(d, level)]


def cmd_export(args):
    res, sc = _result(args)
    layer = 0 if args.layer is None else args.layer
    key = _anchor_key(res, args.anchor)
    if (layer, key) not in res.values:
        avail = ", ".join(f"({l}, {a})" for l, a in sorted(res.values, key=lambda k: (k[0], str(k[1]))))
        raise InputError(f"no value field for layer {layer}, anchor {key}; available: {avail}")
    out = os.path.join(args.out, "export")
    os.makedirs(out, exist_ok=True)
    grid = res.problem.grid
    vf = res.values[(layer, key)]
    V = vf.slice0
    X, Y = grid.coords()
    xs, ys = _stencil(X.ravel(), Y.ravel(), grid.h)
    S = _sample_slices(vf, np.zeros(xs.shape), xs, ys, grid)
    a, degenerate = _directions(S, xs, ys, grad_threshold(res))
    rows = []
    for n, (i, j) in enumerate(np.ndindex(V.shape)):
        v = V[i, j]
        rows.append([i, j, f"{X[i, j]:.10g}", f"{Y[i, j]:.10g}", "inf" if v >= INF else f"{v:.17g}",
                     f"{a[n, 0]:.10g}", f"{a[n, 1]:.10g}", int(degenerate[n])])
    stem = f"layer{layer}_anchor{key}"
    _write_csv(os.path.join(out, f"value_{stem}.csv"), ["i", "j", "x", "y", "value", "ax", "ay", "degenerate"], rows)

    # observation region: where the observe branch is active, V = (C +) Theta;
    # the first slice is capped by the branch evaluated one step later
    O = res.observation_value(layer, key, vf.dt)
    crows = []
    if O is not None:
        finite = (V < INF / 2) & (O < INF / 2)
        diff = np.where(finite, O - V, np.max(np.where(finite, O - V, 0.0)) + 1.0)
        scale = max(1.0, float(np.abs(V[finite]).max())) if finite.any() else 1.0
        for cid, c in enumerate(branch_contours(diff, 1e-7 * scale)):
            crows += [[cid, f"{p[0]:.10g}", f"{p[1]:.10g}"] for p in c]
    _write_csv(os.path.join(out, f"obs_region_{stem}.csv"), ["contour", "x", "y"], crows)

    tdir = os.path.join(args.out, "traces")
    n_tr = 0
    if os.path.isdir(tdir):
        from .policy import SimTrace

        for name in sorted(os.listdir(tdir)):
            if not name.endswith(".json"):
                continue
            with open(os.path.join(tdir, name)) as fh:
                tr = SimTrace.from_json(fh.read())
            _write_csv(os.path.join(out, name[:-5] + ".csv"), ["t", "x", "y"],
                       [[f"{t:.10g}", f"{x:.10g}", f"{y:.10g}"] for t, x, y in tr.path])
            n_tr += 1
    print(f"exported {stem}: {len(rows)} grid rows, {len(set(r[0] for r in crows))} contour(s), {n_tr} trace(s)")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="oopdmp", description="Planning under occasional mode observations.")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: OOPDMP_THREADS)")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, scenario=True, out=True):
        if scenario:
            sp.add_argument("--scenario", required=True, help="scenario JSON path or bundled:<name>")
        if out:
            sp.add_argument("--out", required=True, help="results directory")
        sp.add_argument("--threads", type=int, default=None, help=argparse.SUPPRESS)

    sp = sub.add_parser("solve", help="solve and write value slices")
    common(sp)
    sp.add_argument("--J", type=int)
    sp.add_argument("--tol", type=float)
    sp.add_argument("--horizon", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--anchor", help="initial belief: mode, comma list, stationary, conditioned_limit")

    sp = sub.add_parser("bound", help="print the time-to-target horizon bound")
    common(sp, out=False)
    sp.add_argument("--J", type=int)

    for verb, helptext in (("simulate", "trace trajectories from a solve"),
                           ("evaluate", "Monte Carlo estimate of the policy cost")):
        sp = sub.add_parser(verb, help=helptext)
        common(sp, scenario=False)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--runs", type=int)
        sp.add_argument("--start", help="x,y (default: scenario start)")
        if verb == "simulate":
            sp.add_argument("--stochastic", action="store_true", help="sample mode switches and terminations")

    sp = sub.add_parser("export-policy", help="write CSV value, policy, contour and trajectory files")
    common(sp, scenario=False)
    sp.add_argument("--layer", type=int)
    sp.add_argument("--anchor")
    return p


VERBS = {"solve": cmd_solve, "bound": cmd_bound, "simulate": cmd_simulate, "evaluate": cmd_evaluate,
         "export-policy": cmd_export}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    set_threads(args.threads)
    try:
        return VERBS[args.verb](args)
    except ScenarioError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INPUT
    except (InputError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NonConvergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
