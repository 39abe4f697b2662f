"""Feedback policies from solved value fields, trajectory tracing and Monte Carlo evaluation.

All runs of a batch advance in lockstep with forward Euler steps of length
``h / (2 f_max)``.  A single traced trajectory is a batch of one that also
records its path and events.
"""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import expm

from .grid import INF
from .mode_chain import sample_mode_path


class DegenerateGradientError(ValueError):
    """Value gradient too small to define a direction."""


class DivergenceError(RuntimeError):
    """Trajectory ran past the solved horizon without reaching the target."""


@dataclass
class SimTrace:
    path: list
    events: list
    realized_cost: float
    seed: object = None
    running_cost: float = 0.0
    charges: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["path"] = [tuple(p) for p in d["path"]]
        return cls(**d)

    def observations(self):
        return [e for e in self.events if e["kind"] == "observation"]


# ---------------------------------------------------------------- sampling helpers

def _cell(J, x, y):
    gx = np.clip(np.asarray(x, float) * J, 0.0, J)
    gy = np.clip(np.asarray(y, float) * J, 0.0, J)
    i0 = np.minimum(np.floor(gx).astype(np.int64), J - 1)
    j0 = np.minimum(np.floor(gy).astype(np.int64), J - 1)
    return i0, j0, gx - i0, gy - j0


def bilinear(arr, x, y):
    """Bilinear sample of ``arr[..., i, j]`` at domain coordinates (broadcast over points)."""
    J = arr.shape[-1] - 1
    i0, j0, fx, fy = _cell(J, x, y)
    return ((1 - fx) * (1 - fy) * arr[..., i0, j0] + fx * (1 - fy) * arr[..., i0 + 1, j0]
            + (1 - fx) * fy * arr[..., i0, j0 + 1] + fx * fy * arr[..., i0 + 1, j0 + 1])


def _sampling_slices(vf, grid):
    """Slices with target-interior sentinels replaced by the cheapest boundary value.

    Interpolating across the sentinel would wall the target off for the tracer.
    """
    A = getattr(vf, "_sampling", None)
    if A is None:
        A = vf.slices
        if grid is not None and grid.target_interior.any() and grid.target_boundary.any():
            A = A.copy()
            floor = A[:, grid.target_boundary].min(axis=1)
            A[:, grid.target_interior] = floor[:, None]
        vf._sampling = A
    return A


def _contact_slices(result, layer, akey, vf):
    """Per saved slice, the nodes where the observation branch is the active one."""
    C = getattr(vf, "_contact", None)
    if C is None:
        C = np.zeros(vf.slices.shape, dtype=bool)
        for s, k in enumerate(vf.index):
            if k >= vf.N:
                continue
            # the sweep producing slice k uses the belief at k + 1
            o = result.observation_value(layer, akey, (k + 1) * vf.dt)
            V = vf.slices[s]
            C[s] = (o < INF / 2) & (V >= o - 1e-9 * (1.0 + np.abs(o)))
        vf._contact = C
    return C


def _near_contact(C, vf, t, x, y):
    """True where a corner of the enclosing cell is in contact at a bracketing saved slice."""
    J = C.shape[-1] - 1
    i0, j0, _, _ = _cell(J, x, y)
    S = len(vf.index)
    if S == 1 or vf.N == 0:
        ps = [np.zeros_like(i0)]
    else:
        s = np.clip(np.asarray(t, float) / vf.dt, 0.0, float(vf.N))
        p = np.clip(np.searchsorted(vf.index, s, side="right") - 1, 0, S - 2)
        ps = [p, p + 1]
    hit = np.zeros(i0.shape, dtype=bool)
    for p in ps:
        for di in (0, 1):
            for dj in (0, 1):
                hit |= C[p, i0 + di, j0 + dj]
    return hit


def _sample_slices(vf, t, x, y, grid=None):
    """Value field at per-run times ``t`` and points ``x, y`` (same leading shape)."""
    S = len(vf.index)
    inside = (x >= -1e-12) & (x <= 1 + 1e-12) & (y >= -1e-12) & (y <= 1 + 1e-12)
    J = vf.slices.shape[-1] - 1
    i0, j0, fx, fy = _cell(J, x, y)

    A = _sampling_slices(vf, grid)

    def at(p):
        return ((1 - fx) * (1 - fy) * A[p, i0, j0] + fx * (1 - fy) * A[p, i0 + 1, j0]
                + (1 - fx) * fy * A[p, i0, j0 + 1] + fx * fy * A[p, i0 + 1, j0 + 1])

    if S == 1 or vf.N == 0:
        out = at(np.zeros_like(i0))
    else:
        s = np.clip(np.asarray(t, float) / vf.dt, 0.0, float(vf.N))
        p = np.clip(np.searchsorted(vf.index, s, side="right") - 1, 0, S - 2)
        a = vf.index[p]
        b = vf.index[p + 1]
        w = np.clip((s - a) / (b - a), 0.0, 1.0)
        out = (1.0 - w) * at(p) + w * at(p + 1)
    return np.where(inside, np.minimum(out, INF), INF)


def _stencil(x, y, h):
    """Centre and four axis neighbours at distance ``h``, clipped into the unit square."""
    xs = np.stack([x, np.minimum(x + h, 1.0), np.maximum(x - h, 0.0), x, x], axis=-1)
    ys = np.stack([y, y, y, np.minimum(y + h, 1.0), np.maximum(y - h, 0.0)], axis=-1)
    return xs, ys


def _one_sided(dv, d):
    # slope toward a neighbour; a neighbour clipped onto the centre contributes nothing
    ok = d > 1e-12
    return np.where(ok, dv / np.where(ok, d, 1.0), 0.0)


def _directions(V, xs, ys, eps):
    """Directions from 5-point samples ``V[:, (c, r, l, u, d)]`` at stencil ``xs, ys``; returns (a, degenerate)."""
    v, vr, vl, vu, vd = (V[:, k] for k in range(5))
    sr = _one_sided(vr - v, xs[:, 1] - xs[:, 0])
    sl = _one_sided(vl - v, xs[:, 0] - xs[:, 2])
    su = _one_sided(vu - v, ys[:, 3] - ys[:, 0])
    sd = _one_sided(vd - v, ys[:, 0] - ys[:, 4])
    dx = np.minimum(np.minimum(sr, sl), 0.0)
    dy = np.minimum(np.minimum(su, sd), 0.0)
    sx = np.where(sr < sl, 1.0, -1.0)
    sy = np.where(su < sd, 1.0, -1.0)
    norm = np.sqrt(dx * dx + dy * dy)
    ok = norm >= eps
    safe = np.where(ok, norm, 1.0)
    a = np.stack([-dx * sx / safe, -dy * sy / safe], axis=-1)
    # tie-break: step toward the smallest neighbour, or hold if none is lower
    nb = V[:, 1:]
    k = np.argmin(nb, axis=1)
    lower = nb[np.arange(len(k)), k] < v
    unit = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    tb = np.where(lower[:, None], unit[k], 0.0)
    return np.where(ok[:, None], a, tb), ~ok


def grad_threshold(result):
    pb = result.problem
    K_max = float(pb.costs.K[:, pb.grid.active].max())
    T = result.horizon_used or 1.0
    return 1e-9 * K_max * T / pb.grid.h


def policy_direction(result, position, t=0.0, layer=0, anchor=0):
    """Unit control direction ``-grad v / |grad v|`` at ``position``, time ``t`` since the last observation."""
    vf = result.values[(layer, anchor)]
    h = result.problem.grid.h
    x = np.array([float(position[0])])
    y = np.array([float(position[1])])
    xs, ys = _stencil(x, y, h)
    V = _sample_slices(vf, np.full(xs.shape, t), xs, ys, result.problem.grid)
    a, degenerate = _directions(V, xs, ys, grad_threshold(result))
    if degenerate[0]:
        raise DegenerateGradientError(f"value gradient vanishes at {tuple(position)}")
    return a[0]


# ---------------------------------------------------------------- batch tracer

class _Chain:
    """Cached one-step belief propagators."""

    def __init__(self, chain, conditioned):
        self.chain = chain
        G = chain.Lambda
        if conditioned:
            G = G - np.diag(chain.gamma - chain.gamma.min())
        self.G = G
        self._cache = {}

    def step(self, ds):
        key = round(ds, 15)
        P = self._cache.get(key)
        if P is None:
            P = expm(ds * self.G)
            self._cache[key] = P
        return P


def _mode_arrays(paths, n):
    width = max(1, max(len(p) for p in paths))
    times = np.full((n, width + 1), np.inf)
    modes = np.zeros((n, width + 1), dtype=np.int64)
    for r, p in enumerate(paths):
        for k, (t, m) in enumerate(p):
            times[r, k] = t
            modes[r, k] = m
    return times, modes


def _horizon_limit(result):
    spec = result.problem.spec
    if spec.regime == "finite":
        return float(spec.T)
    if spec.regime == "infinite_periodic":
        return 4.0 * spec.T
    n_obs = spec.L if spec.observations == "bounded" else (3 if spec.observations == "paid" else 0)
    return float(result.horizon_used) * (n_obs + 1)


def run_batch(result, start, n, seeds=None, stochastic=True, script=None, t_max=None,
              record=False, initial_modes=None):
    """Advance ``n`` runs in lockstep; returns per-run costs, divergence flags and (optionally) records."""
    pb = result.problem
    spec = pb.spec
    grid = pb.grid
    chain = pb.chain
    M, h, J = chain.M, grid.h, grid.J
    regime, kind = spec.regime, spec.observations
    conditioned = pb.conditioned
    gamma = chain.gamma if conditioned else np.zeros(M)
    phi = pb.costs.phi if conditioned else None
    target = regime in ("indefinite", "randomly_terminated")
    full = result.fully_observed
    t_max = _horizon_limit(result) if t_max is None else float(t_max)
    ds0 = 0.5 * h / pb.speed.f_max
    eps = grad_threshold(result)
    K_max = float(pb.costs.K[:, grid.active].max())
    eps_sw = 2.0 * h * K_max
    cost_field = None
    if kind == "paid":
        cost_field = np.broadcast_to(np.asarray(spec.cost, float), grid.shape)
    beta = spec.beta if regime == "infinite_periodic" else 0.0

    # initial anchor and true modes
    key0 = spec.anchor if isinstance(spec.anchor, (int, np.integer)) else "q"
    key0 = int(key0) if key0 != "q" else "q"
    q0 = result.anchors[key0]
    rngs = [np.random.default_rng(s) for s in (seeds if seeds is not None else [None] * n)]
    if initial_modes is not None:
        mode = np.asarray(initial_modes, dtype=np.int64).copy()
    elif key0 == "q":
        mode = np.array([int(r.choice(M, p=q0)) for r in rngs], dtype=np.int64)
    else:
        mode = np.full(n, key0, dtype=np.int64)
    if stochastic:
        paths = [sample_mode_path(chain, mode[r], t_max, rngs[r]) for r in range(n)]
        sw_t, sw_m = _mode_arrays(paths, n)
        E = np.array([r.exponential(1.0) for r in rngs]) if conditioned else np.full(n, np.inf)
    else:
        sw_t = np.full((n, 1), np.inf)
        sw_m = np.zeros((n, 1), dtype=np.int64)
        E = np.full(n, np.inf)
    sw_ptr = np.zeros(n, dtype=np.int64)
    hazard = np.zeros(n)

    pos = np.tile(np.asarray(start, float), (n, 1))
    T_abs = np.zeros(n)
    t_since = np.zeros(n)
    layer = np.zeros(n, dtype=np.int64)
    anchor = np.full(n, -1 if key0 == "q" else key0, dtype=np.int64)
    if full:
        anchor = mode.copy()
    b = np.tile(q0 if key0 == "q" else chain.basis(key0), (n, 1))
    if full:
        b = np.eye(M)[mode]
    surv = np.ones(n)
    cost = np.zeros(n)
    running = np.zeros(n)
    charges = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    diverged = np.zeros(n, dtype=bool)
    armed = np.ones(n, dtype=bool)
    n_obs = np.zeros(n, dtype=np.int64)
    cp = _Chain(chain, conditioned)
    script = list(script or [])
    path = [(0.0, float(pos[0, 0]), float(pos[0, 1]))] if record else None
    events = [] if record else None

    sched = []
    if kind == "scheduled":
        sched = [float(t) for t in spec.times]
    period = spec.T if regime == "infinite_periodic" else None

    def observe(idx, kind_label):
        for r in idx:
            if stochastic:
                seen = int(mode[r])
            elif script:
                seen = int(script.pop(0))
            else:
                seen = int(np.argmax(b[r]))
            paid = 0.0
            if cost_field is not None:
                paid = float(bilinear(cost_field, pos[r, 0], pos[r, 1])) * surv[r]
                cost[r] += paid
                charges[r] += paid
            if record:
                events.append({"kind": "observation", "time": float(T_abs[r]), "observed_mode": seen,
                               "cost_paid": paid, "trigger": kind_label})
            anchor[r] = seen
            b[r] = np.eye(M)[seen]
            t_since[r] = 0.0
            n_obs[r] += 1
            armed[r] = False
            if kind in ("scheduled", "bounded"):
                layer[r] += 1

    def goal_charge(idx):
        for r in idx:
            if stochastic:
                c = float(bilinear(pb.costs.psi[mode[r]], pos[r, 0], pos[r, 1]))
            else:
                c = surv[r] * float(b[r] @ bilinear(pb.costs.psi, pos[r, 0], pos[r, 1]))
            c *= math.exp(-beta * T_abs[r])
            cost[r] += c
            charges[r] += c
            if record:
                events.append({"kind": "goal_reached" if target else "horizon_end", "time": float(T_abs[r]),
                               "cost": c})

    guard = int(math.ceil(t_max / ds0)) + 10 * (len(sched) + 2)
    for _ in range(guard + 1):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        # target reached
        if target:
            gi = np.rint(pos[idx] * J).astype(np.int64)
            hit = grid.target[gi[:, 0], gi[:, 1]]
            if hit.any():
                done = idx[hit]
                goal_charge(done)
                alive[done] = False
                idx = idx[~hit]
                if idx.size == 0:
                    break
        # finite / periodic end
        if not target:
            end = T_abs[idx] >= t_max - 1e-12
            if end.any():
                done = idx[end]
                if regime == "finite":
                    goal_charge(done)
                alive[done] = False
                idx = idx[~end]
                if idx.size == 0:
                    break
        # scheduled or periodic observations
        if sched or period:
            if sched:
                due = np.array([n_obs[r] < len(sched) and T_abs[r] >= sched[n_obs[r]] - 1e-12 for r in idx], bool)
            else:
                due = t_since[idx] >= period - 1e-12
            if due.any():
                observe(idx[due], "scheduled")
        # on-demand observations
        if kind in ("bounded", "paid") and not full:
            for lay in np.unique(layer[idx]):
                if result.obs_source.get(int(lay)) is None:
                    continue
                sel = idx[layer[idx] == lay]
                for a in np.unique(anchor[sel]):
                    grp = sel[anchor[sel] == a]
                    akey = "q" if a < 0 else int(a)
                    vf = result.values[(int(lay), akey)]
                    v = _sample_slices(vf, t_since[grp], pos[grp, 0], pos[grp, 1], grid)
                    ov = _obs_value(result, int(lay), b[grp], pos[grp], cost_field)
                    gap = ov - v
                    armed[grp] |= gap > 2.0 * eps_sw
                    trig = armed[grp] & (gap <= eps_sw) & (ov < INF / 2)
                    if trig.any():
                        C = _contact_slices(result, int(lay), akey, vf)
                        trig &= _near_contact(C, vf, t_since[grp], pos[grp, 0], pos[grp, 1])
                    if trig.any():
                        observe(grp[trig], "on_demand")
        # divergence
        if target:
            over = np.zeros(idx.size, bool)
            for k, r in enumerate(idx):
                akey = "q" if anchor[r] < 0 else int(anchor[r])
                vf = result.values[(0 if full else int(layer[r]), akey)]
                over[k] = T_abs[r] > t_max or (not full and t_since[r] > vf.t_end + 1e-12)
            if over.any():
                diverged[idx[over]] = True
                alive[idx[over]] = False
                if record:
                    events.append({"kind": "divergence", "time": float(T_abs[idx[over][0]])})
                idx = idx[~over]
                if idx.size == 0:
                    break
        # step length: stop exactly at scheduled times and the horizon
        ds = np.full(idx.size, ds0)
        if not target:
            ds = np.minimum(ds, t_max - T_abs[idx])
        if sched:
            nxt = np.array([sched[n_obs[r]] - T_abs[r] if n_obs[r] < len(sched) else np.inf for r in idx])
            ds = np.minimum(ds, np.where(nxt > 1e-12, nxt, ds))
        if period:
            ds = np.minimum(ds, period - t_since[idx])
        ds = np.maximum(ds, 0.0)
        # directions
        dirs = np.zeros((idx.size, 2))
        for lay in np.unique(layer[idx]):
            sel_l = layer[idx] == lay
            for a in np.unique(anchor[idx][sel_l]):
                m = sel_l & (anchor[idx] == a)
                grp = idx[m]
                akey = "q" if a < 0 else int(a)
                vf = result.values[(int(lay), akey)]
                tt = T_abs[grp] if (full and regime == "finite") else t_since[grp]
                xs, ys = _stencil(pos[grp, 0], pos[grp, 1], h)
                V = _sample_slices(vf, np.repeat(tt[:, None], 5, axis=1), xs, ys, grid)
                dirs[m], _ = _directions(V, xs, ys, eps)
        # running cost over the step (left endpoint)
        Kx = bilinear(pb.costs.K, pos[idx, 0], pos[idx, 1]).T
        disc = np.exp(-beta * T_abs[idx])
        if stochastic:
            rate = Kx[np.arange(idx.size), mode[idx]]
        else:
            rate = np.einsum("rm,rm->r", b[idx], Kx)
            if conditioned:
                PH = bilinear(phi, pos[idx, 0], pos[idx, 1]).T
                rate = rate + np.einsum("rm,rm->r", b[idx] * gamma, PH)
            rate = rate * surv[idx]
        inc = disc * rate * ds
        cost[idx] += inc
        running[idx] += inc
        # premature termination (stochastic)
        if stochastic and conditioned:
            hazard[idx] += gamma[mode[idx]] * ds
            dead = hazard[idx] >= E[idx]
            for r, d in zip(idx[dead], ds[dead]):
                c = float(bilinear(phi[mode[r]], pos[r, 0], pos[r, 1]))
                cost[r] += c
                charges[r] += c
                alive[r] = False
                if record:
                    events.append({"kind": "premature_termination", "time": float(T_abs[r] + d),
                                   "mode": int(mode[r]), "cost": c})
            keep = ~dead
            idx, ds, dirs = idx[keep], ds[keep], dirs[keep]
        if conditioned and not stochastic:
            surv[idx] *= np.exp(-np.einsum("rm,m->r", b[idx], gamma) * ds)
        # move
        fx = bilinear(np.where(grid.obstacle, 0.0, pb.speed.f), pos[idx, 0], pos[idx, 1])
        pos[idx] = np.clip(pos[idx] + (ds * fx)[:, None] * dirs, 0.0, 1.0)
        T_abs[idx] += ds
        t_since[idx] += ds
        # beliefs
        for d in np.unique(ds):
            sel = idx[ds == d]
            if d > 0:
                r = b[sel] @ cp.step(d)
                b[sel] = r / r.sum(axis=1, keepdims=True)
        # mode switches
        if stochastic:
            for r in idx:
                while sw_t[r, sw_ptr[r]] <= T_abs[r]:
                    new = int(sw_m[r, sw_ptr[r]])
                    if record:
                        events.append({"kind": "mode_switch", "time": float(sw_t[r, sw_ptr[r]]),
                                       "from": int(mode[r]), "to": new})
                    mode[r] = new
                    sw_ptr[r] += 1
                    if full:
                        anchor[r] = new
                        b[r] = np.eye(M)[new]
        if record:
            path.append((float(T_abs[0]), float(pos[0, 0]), float(pos[0, 1])))
    else:
        diverged |= alive
        alive[:] = False
    if record:
        events.sort(key=lambda e: e["time"])
    return {"cost": cost, "running": running, "charges": charges, "diverged": diverged,
            "path": path, "events": events, "observations": n_obs}


def _obs_value(result, lay, b, pos, cost_field):
    src = result.obs_source[lay]
    M = result.problem.M
    S0 = np.stack([result.values[(src, n)].slice0 for n in range(M)])
    vals = bilinear(S0, pos[:, 0], pos[:, 1]).T
    out = np.einsum("rm,rm->r", b, np.minimum(vals, INF))
    if cost_field is not None:
        out = out + bilinear(cost_field, pos[:, 0], pos[:, 1])
    return np.minimum(out, INF)


def trace_trajectory(result, start, seed=None, stochastic=False, script=None, t_max=None, initial_mode=None):
    """Follow the extracted policy from ``start``; deterministic traces accrue expected cost."""
    pb = result.problem
    x, y = float(start[0]), float(start[1])
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError("start must lie in the unit square")
    J = pb.grid.J
    if pb.grid.obstacle[int(round(x * J)), int(round(y * J))]:
        raise ValueError("start lies inside an obstacle")
    init = None if initial_mode is None else [initial_mode]
    out = run_batch(result, (x, y), 1, seeds=[seed], stochastic=stochastic, script=script,
                    t_max=t_max, record=True, initial_modes=init)
    if out["diverged"][0]:
        raise DivergenceError("trajectory exceeded the solved horizon without reaching the target")
    return SimTrace(out["path"], out["events"], float(out["cost"][0]), seed,
                    float(out["running"][0]), float(out["charges"][0]))


def mc_evaluate(result, start, n_runs, seed=0, chunk=2000):
    """Mean and standard error of the realized cost over ``n_runs`` stochastic runs.

    Per-run generators come from ``SeedSequence(seed).spawn``, so the outcome
    does not depend on chunking.  Returns ``(mean, stderr, n_diverged)``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    seqs = np.random.SeedSequence(seed).spawn(n_runs)
    costs, bad = [], 0
    for lo in range(0, n_runs, chunk):
        part = seqs[lo:lo + chunk]
        out = run_batch(result, start, len(part), seeds=part, stochastic=True)
        ok = ~out["diverged"]
        bad += int((~ok).sum())
        costs.append(out["cost"][ok])
    c = np.concatenate(costs)
    if c.size == 0:
        raise DivergenceError("every run diverged")
    se = float(c.std(ddof=1) / math.sqrt(c.size)) if c.size > 1 else 0.0
    return float(c.mean()), se, bad
