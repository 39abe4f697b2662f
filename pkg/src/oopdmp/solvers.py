"""Value-function solvers for the mode-switching control problems.

Every solver marches backward in time with the explicit upwind kernel.  Only a
strided subset of time slices is stored (always slices 0, 1 and N), which is
enough for policy extraction, observation coupling and convergence checks.

Results are keyed by ``(layer, anchor)`` where ``anchor`` is a mode index for
a basis belief ``e_m`` or ``"q"`` for a user-supplied initial distribution.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .eikonal import horizon_bound, solve_min_time
from .grid import INF, Grid2D, SpeedField, cfl_timestep
from .mode_chain import CostBundle, ModeChain, belief_table, combine_slices, conditioned_belief, propagate_belief

REGIMES = ("finite", "infinite_periodic", "indefinite", "randomly_terminated")
OBSERVATIONS = ("none", "scheduled", "bounded", "paid", "full")


class NonConvergenceError(RuntimeError):
    """An iterative solve hit ``max_iters``; ``result`` holds the last iterate."""

    def __init__(self, message, residual_history, result=None):
        super().__init__(message)
        self.residual_history = list(residual_history)
        self.result = result


@dataclass
class SolveSpec:
    regime: str = "finite"
    observations: str = "none"
    times: tuple = ()
    L: int = 0
    cost: object = None
    T: float = None
    beta: float = 0.0
    anchor: object = 0
    tol: float = 1e-6
    max_iters: int = 500
    save_slices: int = 65
    horizon: float = None

    def validate(self):
        errs = []
        if self.regime not in REGIMES:
            errs.append(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.observations not in OBSERVATIONS:
            errs.append(f"observations must be one of {OBSERVATIONS}, got {self.observations!r}")
        if self.regime in ("finite", "infinite_periodic") and not (self.T and self.T > 0):
            errs.append("T must be positive for finite and periodic regimes")
        if self.regime == "infinite_periodic" and not self.beta > 0:
            errs.append("beta must be positive for the periodic infinite-horizon regime")
        if self.observations == "scheduled":
            t = np.asarray(self.times, float)
            if t.size == 0:
                errs.append("scheduled observations need at least one time")
            elif np.any(np.diff(t) <= 0) or t[0] <= 0 or (self.T and t[-1] > self.T):
                errs.append("scheduled times must be sorted, distinct and inside (0, T]")
            if self.regime != "finite":
                errs.append("scheduled observations are only defined for the finite regime")
        if self.observations == "bounded" and self.L < 1:
            errs.append("bounded observations need L >= 1")
        if self.observations == "paid":
            if self.cost is None or np.any(np.asarray(self.cost, float) <= 0):
                errs.append("paid observations need a strictly positive cost")
        if self.observations in ("bounded", "paid") and self.regime not in ("indefinite", "randomly_terminated"):
            errs.append("on-demand observations need an indefinite or randomly terminated regime")
        if self.tol <= 0:
            errs.append("tol must be positive")
        if self.max_iters < 1:
            errs.append("max_iters must be >= 1")
        if self.save_slices < 2:
            errs.append("save_slices must be >= 2")
        if self.horizon is not None and self.horizon <= 0:
            errs.append("horizon override must be positive")
        return errs


@dataclass
class Problem:
    grid: Grid2D
    speed: SpeedField
    chain: ModeChain
    costs: CostBundle
    spec: SolveSpec = field(default_factory=SolveSpec)

    @property
    def M(self):
        return self.chain.M

    @property
    def conditioned(self):
        return self.spec.regime == "randomly_terminated"


@dataclass
class ValueField:
    """Saved time slices of one value function (``slices[s]`` is time ``index[s] * dt``)."""

    slices: np.ndarray
    index: np.ndarray
    dt: float
    N: int
    inf: float = INF

    @property
    def t_end(self):
        return self.N * self.dt

    @property
    def times(self):
        return self.index * self.dt

    @property
    def slice0(self):
        return self.slices[0]

    def at(self, t):
        """Slice at time ``t``, linear between saved slices."""
        if self.N == 0:
            return self.slices[0]
        s = min(max(t / self.dt, 0.0), float(self.N))
        p = int(np.searchsorted(self.index, s, side="right")) - 1
        p = min(max(p, 0), len(self.index) - 2)
        a, b = self.index[p], self.index[p + 1]
        w = (s - a) / (b - a)
        if w <= 0.0:
            return self.slices[p]
        if w >= 1.0:
            return self.slices[p + 1]
        return (1.0 - w) * self.slices[p] + w * self.slices[p + 1]


@dataclass
class SolveResult:
    problem: Problem
    values: dict
    anchors: dict
    iterations_used: int = 1
    residual_history: list = field(default_factory=list)
    horizon_used: float = None
    converged: bool = True
    obs_source: dict = field(default_factory=dict)
    fully_observed: bool = False

    @property
    def layers(self):
        return sorted({k[0] for k in self.values})

    def value(self, layer=0, anchor=0):
        return self.values[(layer, anchor)]

    def belief(self, anchor, t):
        q = self.anchors[anchor]
        fn = conditioned_belief if self.problem.conditioned else propagate_belief
        return fn(self.problem.chain, q, t)

    def observation_value(self, layer, anchor, t):
        """Cost of observing now, ``C + Theta`` (or ``Theta`` when free), or ``None``."""
        src = self.obs_source.get(layer)
        if src is None:
            return None
        M = self.problem.M
        S0 = np.stack([self.values[(src, n)].slice0 for n in range(M)])
        out = combine_slices(self.belief(anchor, t), S0, INF)
        C = self.problem.spec.cost
        if self.problem.spec.observations == "paid":
            out = np.minimum(out + np.broadcast_to(np.asarray(C, float), out.shape), INF)
        return out


def anchor_key(chain, anchor):
    """``(key, belief)`` for a mode index or an explicit distribution."""
    if isinstance(anchor, (int, np.integer)):
        if not 0 <= anchor < chain.M:
            raise ValueError(f"anchor mode {anchor} out of range")
        return int(anchor), chain.basis(int(anchor))
    q = np.asarray(anchor, float).reshape(-1)
    if q.shape != (chain.M,) or np.any(q < -1e-10) or abs(q.sum() - 1.0) > 1e-10:
        raise ValueError("anchor must be a mode index or a probability vector")
    return "q", q


def save_plan(N, n_save):
    """Slot per time index (``-1`` when not stored) and the stored indices."""
    stride = max(1, math.ceil(N / max(n_save - 1, 1)))
    idx = sorted({0, 1, N, *range(0, N + 1, stride)} & set(range(N + 1)))
    slot = np.full(N + 1, -1, dtype=np.int64)
    slot[idx] = np.arange(len(idx))
    return slot, np.asarray(idx, dtype=np.int64)


def _contig(a, dtype=float):
    return np.ascontiguousarray(a, dtype=dtype)


class _Marcher:
    """Shared setup for one time grid: CFL step, masks, dummy buffers."""

    def __init__(self, pb, t_end, extra_rate=0.0):
        self.pb = pb
        self.grid = pb.grid
        if t_end > 0:
            self.dt, self.N = cfl_timestep(pb.grid, pb.speed, t_end, extra_rate)
        else:
            self.dt, self.N = 0.0, 0
        self.t = np.arange(self.N + 1) * self.dt
        self.slot, self.index = save_plan(self.N, pb.spec.save_slices)
        self.active = _contig(pb.grid.active, np.bool_)
        self.bdry = _contig(pb.grid.target_boundary & pb.grid.active, np.bool_)
        self.f = _contig(np.where(pb.grid.obstacle, 1.0, pb.speed.f))
        self.K = _contig(pb.costs.K)
        M = pb.M
        self._z3 = np.zeros((M, 1, 1))
        self._z2 = np.zeros((self.N + 1, M))
        self._zg = np.zeros((1, 1))

    def beliefs(self, q):
        return belief_table(self.pb.chain, q, self.t, conditioned=self.pb.conditioned)

    def run(self, terminal, wK, wB=None, zeroth=False, obs=None, bdry=False):
        """Backward sweep from ``terminal``.

        ``wK`` weights the running cost per slice, ``wB`` is the belief table
        used for the termination term and boundary cost, ``obs`` is
        ``(W, ocost)`` for the observation branch (weights = ``wB``).
        """
        pb = self.pb
        wB = wK if wB is None else wB
        V = _contig(np.minimum(np.where(self.grid.frozen, INF, terminal), INF))
        out = np.empty((len(self.index),) + V.shape)
        if self.N == 0:
            out[0] = V
            return ValueField(out, self.index, self.dt, 0)
        if zeroth:
            wG = _contig(wB * pb.chain.gamma[None, :])
            PHI = _contig(pb.costs.phi)
        else:
            wG, PHI = self._z2, self._z3
        if obs is not None:
            W, ocost = _contig(obs[0]), _contig(np.broadcast_to(np.asarray(obs[1], float), V.shape))
            wO = _contig(wB)
        else:
            W, ocost, wO = self._z3, self._zg, self._z2
        if bdry:
            PSI, wP = _contig(pb.costs.psi), _contig(wB)
        else:
            PSI, wP = self._z3, self._z2
        kernels.sweep(
            V, self.K, _contig(wK), self.f, self.dt, self.grid.h, self.active,
            bool(zeroth), wG, PHI,
            obs is not None, W, wO, ocost,
            bool(bdry), self.bdry, PSI, wP,
            self.slot, out, INF,
        )
        return ValueField(out, self.index.copy(), self.dt, self.N)


def _stack0(values, layer, M):
    return np.stack([values[(layer, n)].slice0 for n in range(M)])


def _delta(new, old, M, cap=INF / 2):
    """Sup-norm change over all slices, skipping entries above ``cap`` in either iterate.

    Entries above the a-priori value bound belong to the sentinel band behind the
    truncation horizon and carry no cost information.
    """
    out = 0.0
    for n in range(M):
        a, b = new[n].slices, old[n].slices
        keep = (a <= cap) & (b <= cap)
        if keep.any():
            out = max(out, float(np.max(np.abs(a - b)[keep])))
    return out


def value_cap(pb, horizon):
    """Upper bound on true values; anything above it is a truncation artifact."""
    c = pb.costs
    end = max(float(c.psi.max()), float(c.phi.max()) if c.phi is not None else 0.0)
    return float(c.K.max()) * horizon + end


def _initial_anchor(pb):
    return anchor_key(pb.chain, pb.spec.anchor)


# ---------------------------------------------------------------- finite

def solve_finite_no_obs(pb, anchor=None):
    """Finite horizon, no observations after time 0."""
    key, q = anchor_key(pb.chain, pb.spec.anchor if anchor is None else anchor)
    mk = _Marcher(pb, pb.spec.T)
    B = mk.beliefs(q)
    terminal = np.tensordot(B[-1], pb.costs.psi, axes=1)
    vf = mk.run(terminal, B)
    return SolveResult(pb, {(0, key): vf}, {key: q}, horizon_used=pb.spec.T)


def solve_finite_scheduled(pb):
    """Finite horizon with observations at prescribed times; one layer per interval."""
    spec = pb.spec
    M = pb.M
    cuts = [0.0, *[float(t) for t in spec.times], float(spec.T)]
    L = len(cuts) - 2
    key0, q0 = _initial_anchor(pb)
    anchors = {m: pb.chain.basis(m) for m in range(M)}
    values = {}
    for l in range(L, -1, -1):
        mk = _Marcher(pb, cuts[l + 1] - cuts[l])
        todo = list(range(M)) + (["q"] if (l == 0 and key0 == "q") else [])
        S0 = _stack0(values, l + 1, M) if l < L else None
        for a in todo:
            q = q0 if a == "q" else anchors[a]
            B = mk.beliefs(q)
            if l == L:
                terminal = np.tensordot(B[-1], pb.costs.psi, axes=1)
            else:
                terminal = combine_slices(B[-1], S0, INF)
            values[(l, a)] = mk.run(terminal, B)
    if key0 == "q":
        anchors["q"] = q0
    return SolveResult(pb, values, anchors, horizon_used=spec.T)


# ---------------------------------------------------------------- infinite, periodic observations

def solve_infinite_periodic(pb):
    """Discounted infinite horizon with an exact observation every ``T``."""
    spec = pb.spec
    M, beta, T = pb.M, spec.beta, spec.T
    mk = _Marcher(pb, T)
    disc = np.exp(-beta * mk.t)
    B = [mk.beliefs(pb.chain.basis(m)) for m in range(M)]
    anchors = {m: pb.chain.basis(m) for m in range(M)}
    prev, history = None, []
    l = 0
    while True:
        cur = {}
        for m in range(M):
            if prev is None:
                terminal = pb.costs.K[m] / beta
            else:
                S0 = np.stack([prev[n].slice0 for n in range(M)])
                terminal = math.exp(-beta * T) * combine_slices(B[m][-1], S0, INF)
            cur[m] = mk.run(terminal, B[m] * disc[:, None])
        if prev is not None:
            history.append(_delta(cur, prev, M))
        l += 1
        done = bool(history) and history[-1] <= spec.tol
        if done or l >= spec.max_iters:
            values = {(0, m): cur[m] for m in range(M)}
            key0, q0 = _initial_anchor(pb)
            if key0 == "q":
                S0 = np.stack([prev[n].slice0 for n in range(M)])
                Bq = mk.beliefs(q0)
                terminal = math.exp(-beta * T) * combine_slices(Bq[-1], S0, INF)
                values[(0, "q")] = mk.run(terminal, Bq * disc[:, None])
                anchors["q"] = q0
            res = SolveResult(pb, values, anchors, iterations_used=l, residual_history=history,
                              horizon_used=T, converged=done)
            if not done:
                raise NonConvergenceError(f"no convergence after {l} iterations", history, res)
            return res
        prev = cur


# ---------------------------------------------------------------- indefinite horizon

def indefinite_horizon(pb):
    """Truncation horizon: the override if given, else the time-to-target bound plus a decay margin."""
    if pb.spec.horizon is not None:
        return float(pb.spec.horizon)
    if not pb.grid.has_target:
        raise ValueError("indefinite regimes need a nonempty target")
    free = pb.grid.active
    K = pb.costs.K[:, free]
    K_min, K_max = float(K.min()), float(K.max())
    if K_min <= 0:
        raise ValueError("running cost vanishes somewhere; supply an explicit horizon")
    z = solve_min_time(pb.grid, pb.speed)
    return horizon_bound(z, K_min, K_max, float(pb.costs.psi.max())) + sentinel_margin(pb)


def sentinel_margin(pb):
    """Extra marching time for the sentinel band behind the front to decay below ``tol``."""
    return math.log(INF / pb.spec.tol) * pb.grid.h / pb.speed.f_min


def _indef_marcher(pb):
    if not pb.grid.has_target:
        raise ValueError("indefinite regimes need a nonempty target")
    T = indefinite_horizon(pb)
    extra = float(pb.chain.gamma.max()) if pb.conditioned else 0.0
    return _Marcher(pb, T, extra), T


def _indef_terminal(pb, B):
    psi_bar = np.tensordot(B[-1], pb.costs.psi, axes=1)
    return np.where(pb.grid.target_boundary, psi_bar, INF)


def _zeroth(pb):
    return pb.conditioned and bool(np.any(pb.chain.gamma > 0))


def solve_indefinite(pb, anchors=None):
    """Reach-the-target problem without observations after time 0."""
    mk, T = _indef_marcher(pb)
    if anchors is None:
        anchors = [pb.spec.anchor]
    values, avec = {}, {}
    for a in anchors:
        key, q = anchor_key(pb.chain, a)
        B = mk.beliefs(q)
        values[(0, key)] = mk.run(_indef_terminal(pb, B), B, zeroth=_zeroth(pb), bdry=True)
        avec[key] = q
    return SolveResult(pb, values, avec, horizon_used=T)


def solve_indefinite_bounded_obs(pb):
    """At most ``L`` free on-demand observations; layer ``l`` means ``l`` already used."""
    spec = pb.spec
    M, L = pb.M, spec.L
    mk, T = _indef_marcher(pb)
    key0, q0 = _initial_anchor(pb)
    anchors = {m: pb.chain.basis(m) for m in range(M)}
    B = {m: mk.beliefs(anchors[m]) for m in range(M)}
    if key0 == "q":
        anchors["q"] = q0
        B["q"] = mk.beliefs(q0)
    values = {}
    for l in range(L, -1, -1):
        todo = list(range(M)) + (["q"] if (l == 0 and key0 == "q") else [])
        obs = (_stack0(values, l + 1, M), 0.0) if l < L else None
        for a in todo:
            values[(l, a)] = mk.run(_indef_terminal(pb, B[a]), B[a], zeroth=_zeroth(pb), obs=obs, bdry=True)
    src = {l: l + 1 for l in range(L)}
    return SolveResult(pb, values, anchors, horizon_used=T, obs_source=src)


def solve_indefinite_paid_obs(pb):
    """Unlimited observations at cost ``C(x)``, by value iteration over observation count."""
    spec = pb.spec
    M = pb.M
    mk, T = _indef_marcher(pb)
    C = np.broadcast_to(np.asarray(spec.cost, float), pb.grid.shape)
    anchors = {m: pb.chain.basis(m) for m in range(M)}
    B = [mk.beliefs(anchors[m]) for m in range(M)]
    zt = _zeroth(pb)
    cap = value_cap(pb, T)
    prev, history, l = None, [], 0
    while True:
        cur = {}
        obs = None if prev is None else (np.stack([prev[n].slice0 for n in range(M)]), C)
        for m in range(M):
            cur[m] = mk.run(_indef_terminal(pb, B[m]), B[m], zeroth=zt, obs=obs, bdry=True)
        if prev is not None:
            history.append(_delta(cur, prev, M, cap))
        l += 1
        done = bool(history) and history[-1] <= spec.tol
        if done or l >= spec.max_iters:
            values = {(0, m): cur[m] for m in range(M)}
            key0, q0 = _initial_anchor(pb)
            if key0 == "q":
                Bq = mk.beliefs(q0)
                values[(0, "q")] = mk.run(_indef_terminal(pb, Bq), Bq, zeroth=zt, obs=obs, bdry=True)
                anchors["q"] = q0
            res = SolveResult(pb, values, anchors, iterations_used=l, residual_history=history,
                              horizon_used=T, converged=done, obs_source={0: 0})
            if not done:
                raise NonConvergenceError(f"no convergence after {l} iterations", history, res)
            return res
        prev = cur


def solve_randomly_terminated(pb, anchors=None):
    """Indefinite problem with premature termination at mode-dependent rates."""
    if pb.costs.phi is None:
        raise ValueError("randomly terminated problems need premature-termination costs")
    if not pb.conditioned:
        raise ValueError("problem regime is not randomly_terminated")
    kind = pb.spec.observations
    if kind == "bounded":
        return solve_indefinite_bounded_obs(pb)
    if kind == "paid":
        return solve_indefinite_paid_obs(pb)
    return solve_indefinite(pb, anchors)


# ---------------------------------------------------------------- fully observed

def solve_fully_observed(pb):
    """Mode always known: weakly coupled system with explicit coupling terms."""
    spec = pb.spec
    chain, grid = pb.chain, pb.grid
    M = pb.M
    Lam = chain.Lambda
    exit_rates = chain.exit_rates
    rate = exit_rates.copy()
    reward_phi = np.zeros((M,) + grid.shape)
    regime = spec.regime
    if regime == "infinite_periodic":
        rate = rate + spec.beta
    if regime == "randomly_terminated":
        if pb.costs.phi is None:
            raise ValueError("randomly terminated problems need premature-termination costs")
        rate = rate + chain.gamma
        reward_phi = chain.gamma[:, None, None] * pb.costs.phi
    extra = float(rate.max())
    target = regime in ("indefinite", "randomly_terminated")
    active = _contig(grid.active, np.bool_)
    f = _contig(np.where(grid.obstacle, 1.0, pb.speed.f))
    bdry = grid.target_boundary & grid.active
    has_zeroth = rate > 0

    def step(U, dt):
        out = np.empty_like(U)
        for i in range(M):
            coupled = np.zeros(grid.shape)
            for j in range(M):
                if j != i and Lam[i, j] > 0:
                    coupled = coupled + Lam[i, j] * U[j]
            coupled = coupled + reward_phi[i]
            if has_zeroth[i]:
                reward = _contig(np.minimum(coupled / rate[i], INF))
                r = np.full(grid.shape, rate[i])
            else:
                reward = r = np.zeros(grid.shape)
            kernels.update_step(U[i], out[i], _contig(pb.costs.K[i]), f, dt, grid.h, active,
                                bool(has_zeroth[i]), r, reward, INF)
            if target:
                out[i][bdry] = np.minimum(out[i][bdry], pb.costs.psi[i][bdry])
        return out

    anchors = {m: chain.basis(m) for m in range(M)}
    if regime == "finite":
        dt, N = cfl_timestep(grid, pb.speed, spec.T, extra)
        slot, index = save_plan(N, spec.save_slices)
        U = np.where(grid.frozen[None], INF, pb.costs.psi).astype(float)
        store = np.empty((M, len(index)) + grid.shape)
        store[:, slot[N]] = U
        for k in range(N, 0, -1):
            U = step(U, dt)
            if slot[k - 1] >= 0:
                store[:, slot[k - 1]] = U
        values = {(0, m): ValueField(store[m], index.copy(), dt, N) for m in range(M)}
        return SolveResult(pb, values, anchors, horizon_used=spec.T, fully_observed=True)

    # stationary regimes: long-time marching until the per-step change is below tol
    if target:
        if not grid.has_target:
            raise ValueError("indefinite regimes need a nonempty target")
        U = np.where(grid.target_boundary[None], pb.costs.psi, INF).astype(float)
    elif regime == "infinite_periodic":
        U = np.where(grid.frozen[None], INF, pb.costs.K / spec.beta)
    else:
        raise ValueError(f"no stationary fully observed problem for regime {regime!r}")
    dt, _ = cfl_timestep(grid, pb.speed, 1.0, extra)
    max_steps = spec.max_iters * max(1, math.ceil(1.0 / dt))
    history = []
    for n in range(1, max_steps + 1):
        new = step(U, dt)
        d = float(np.max(np.abs(new - U)))
        U = new
        history.append(d)
        if d <= spec.tol:
            break
    converged = history[-1] <= spec.tol
    one = np.zeros(1, dtype=np.int64)
    values = {(0, m): ValueField(U[m][None].copy(), one, dt, 0) for m in range(M)}
    res = SolveResult(pb, values, anchors, iterations_used=len(history), residual_history=history,
                      horizon_used=len(history) * dt, converged=converged, fully_observed=True)
    if not converged:
        raise NonConvergenceError(f"no convergence after {len(history)} steps", history, res)
    return res


# ---------------------------------------------------------------- dispatch

def solve(pb):
    """Run the solver matching ``pb.spec``."""
    errs = pb.spec.validate()
    if errs:
        raise ValueError("invalid solve settings:\n  " + "\n  ".join(errs))
    regime, kind = pb.spec.regime, pb.spec.observations
    if kind == "full":
        return solve_fully_observed(pb)
    if regime == "finite":
        if kind == "scheduled":
            return solve_finite_scheduled(pb)
        return solve_finite_no_obs(pb)
    if regime == "infinite_periodic":
        return solve_infinite_periodic(pb)
    if regime == "randomly_terminated":
        return solve_randomly_terminated(pb)
    if kind == "bounded":
        return solve_indefinite_bounded_obs(pb)
    if kind == "paid":
        return solve_indefinite_paid_obs(pb)
    return solve_indefinite(pb)
