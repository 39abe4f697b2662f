"""Continuous-time Markov chain mathematics for the unobserved operating mode.

Modes are indexed from 0.  Beliefs are row vectors, so a belief propagates as
``b(t) = q @ expm(t * Lambda)``.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.sparse.csgraph import connected_components

ROW_SUM_REPAIR = 1e-12
SIMPLEX_TOL = 1e-10
DRIFT_WARN = 1e-8
UNDERFLOW = 1e-300


class BeliefUnderflowError(FloatingPointError):
    """Survival mass of a conditioned belief fell below representable range."""


class ReducibleChainError(ValueError):
    """The chain has more than one stationary distribution."""


@dataclass
class ModeChain:
    Lambda: np.ndarray
    gamma: np.ndarray = None

    def __post_init__(self):
        L = np.array(self.Lambda, dtype=float)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValueError(f"rate matrix must be square, got shape {L.shape}")
        M = L.shape[0]
        off = L - np.diag(np.diag(L))
        if np.any(off < 0):
            raise ValueError("off-diagonal switching rates must be nonnegative")
        rows = L.sum(axis=1)
        bad = np.flatnonzero(np.abs(rows) > ROW_SUM_REPAIR)
        if bad.size:
            raise ValueError(
                "rows of the rate matrix must sum to zero; offending rows "
                + ", ".join(f"{i} (sum {rows[i]:.3g})" for i in bad)
            )
        # absorb tiny row-sum drift into the diagonal
        L[np.diag_indices(M)] = -off.sum(axis=1)
        self.Lambda = L
        if self.gamma is None:
            g = np.zeros(M)
        else:
            g = np.array(self.gamma, dtype=float).reshape(-1)
        if g.shape != (M,):
            raise ValueError(f"gamma must have length {M}")
        if np.any(g < 0):
            raise ValueError("termination rates must be nonnegative")
        self.gamma = g

    @property
    def M(self):
        return self.Lambda.shape[0]

    @property
    def exit_rates(self):
        return -np.diag(self.Lambda)

    def basis(self, m):
        e = np.zeros(self.M)
        e[m] = 1.0
        return e


def _as_belief(chain, q):
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape != (chain.M,):
        raise ValueError(f"belief must have length {chain.M}")
    if np.any(q < -SIMPLEX_TOL) or abs(q.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("belief must lie on the probability simplex")
    return q


def _normalize(r, warn=True):
    r = np.where(r < 0.0, 0.0, r)
    s = r.sum()
    if warn and abs(s - 1.0) > DRIFT_WARN:
        warnings.warn(f"belief drifted off the simplex by {abs(s - 1.0):.2e}", RuntimeWarning)
    return r / s


def propagate_belief(chain, q, t):
    """Belief after ``t`` time units without observations: ``q @ expm(t Lambda)``."""
    q = _as_belief(chain, q)
    if t < 0:
        raise ValueError("duration must be nonnegative")
    if t == 0:
        return q.copy()
    return _normalize(q @ expm(t * chain.Lambda))


def belief_table(chain, q, times, conditioned=False):
    """Beliefs at many times; rows of the returned (len(times), M) array.

    Uses one matrix exponential for the step when ``times`` is uniform.
    """
    times = np.asarray(times, dtype=float)
    q = _as_belief(chain, q)
    out = np.empty((times.size, chain.M))
    if times.size == 0:
        return out
    steps = np.diff(times)
    uniform = times[0] == 0.0 and steps.size and np.allclose(steps, steps[0], rtol=1e-12, atol=0.0)
    if not uniform:
        fn = conditioned_belief if conditioned else propagate_belief
        for k, t in enumerate(times):
            out[k] = fn(chain, q, t)
        return out
    G = _generator(chain, conditioned)
    step = expm(steps[0] * G)
    r = q.copy()
    out[0] = q
    for k in range(1, times.size):
        r = r @ step
        s = r.sum()
        if s < UNDERFLOW:
            raise BeliefUnderflowError(f"survival mass {s:.3g} underflowed at t={times[k]:.6g}")
        r = r / s
        out[k] = r
    return out


def survival_table(chain, q, times):
    """Unnormalized survival-weighted mode masses ``q @ expm(t (Lambda - diag gamma))``."""
    q = _as_belief(chain, q)
    G = chain.Lambda - np.diag(chain.gamma)
    return np.array([q @ expm(t * G) for t in np.asarray(times, dtype=float)])


def _generator(chain, conditioned):
    if not conditioned:
        return chain.Lambda
    # shifting by min(gamma) rescales every mass equally, so it cancels in
    # the normalization and only delays underflow
    g = chain.gamma - chain.gamma.min()
    return chain.Lambda - np.diag(g)


def stationary_distribution(chain):
    """Unique stationary distribution ``q_s`` with ``q_s @ Lambda = 0``."""
    M = chain.M
    if M == 1:
        return np.ones(1)
    adj = (chain.Lambda - np.diag(np.diag(chain.Lambda))) > 0
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    closed = []
    for c in range(n_comp):
        members = labels == c
        leaves = adj[np.ix_(members, ~members)].any()
        if not leaves:
            closed.append(c)
    if len(closed) != 1:
        raise ReducibleChainError(
            f"chain has {len(closed)} closed communicating classes; the stationary distribution is not unique"
        )
    A = np.vstack([chain.Lambda.T, np.ones((1, M))])
    rhs = np.zeros(M + 1)
    rhs[-1] = 1.0
    qs, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    qs = np.where(qs < 0.0, 0.0, qs)
    return qs / qs.sum()


def conditioned_belief(chain, q, t):
    """Mode belief given that no premature termination happened in ``[0, t]``."""
    q = _as_belief(chain, q)
    if t < 0:
        raise ValueError("duration must be nonnegative")
    if t == 0:
        return q.copy()
    r = q @ expm(t * _generator(chain, True))
    s = r.sum()
    if not s >= UNDERFLOW:
        raise BeliefUnderflowError(f"survival mass {s:.3g} underflowed at t={t:.6g}")
    return _normalize(r / s, warn=False)


def limiting_conditioned_belief(chain, q=None, tol=1e-13, t_max=1e6):
    """Long-time limit of :func:`conditioned_belief` (uniform start by default)."""
    q = np.full(chain.M, 1.0 / chain.M) if q is None else q
    t = 1.0
    b = conditioned_belief(chain, q, t)
    while t < t_max:
        t *= 2.0
        try:
            nb = conditioned_belief(chain, q, t)
        except BeliefUnderflowError:
            return b
        if np.max(np.abs(nb - b)) <= tol:
            return nb
        b = nb
    return b


def conditioned_belief_ode_oracle(chain, q, t, steps=2000):
    """RK4 integration of the nonlinear Bayes ODE for the survival-conditioned belief.

    Verification oracle only; production code uses :func:`conditioned_belief`.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    q = _as_belief(chain, q)
    if t < 0:
        raise ValueError("duration must be nonnegative")
    L = chain.Lambda
    g = chain.gamma

    def rhs(b):
        # keeping sum(b) as a factor makes the total mass a conserved quantity;
        # substituting sum(b) = 1 would turn rounding drift into an unstable mode
        return b @ L + b * (b @ g) - g * b * b.sum()

    b = q.copy()
    if t == 0:
        return b
    dt = t / steps
    for _ in range(steps):
        k1 = rhs(b)
        k2 = rhs(b + 0.5 * dt * k1)
        k3 = rhs(b + 0.5 * dt * k2)
        k4 = rhs(b + dt * k3)
        b = b + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return b


@dataclass
class CostBundle:
    """Per-mode cost fields on the grid, each shaped (M, J+1, J+1)."""

    K: np.ndarray
    psi: np.ndarray
    phi: np.ndarray = None
    _fields: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float)
        if self.phi is not None:
            self.phi = np.asarray(self.phi, dtype=float)
        for name, arr in (("K", self.K), ("psi", self.psi), ("phi", self.phi)):
            if arr is None:
                continue
            if arr.ndim != 3 or arr.shape != self.K.shape:
                raise ValueError(f"{name} must be shaped like K {self.K.shape}")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{name} must be finite and nonnegative")
        self._fields = {"running": self.K, "terminal": self.psi, "premature": self.phi}

    @property
    def M(self):
        return self.K.shape[0]


def expected_cost(bundle, b, which, x=None):
    """Belief-weighted cost ``sum_n b_n field_n`` at grid index ``x`` (or the whole grid)."""
    if which not in bundle._fields:
        raise ValueError(f"unknown cost kind {which!r}")
    fld = bundle._fields[which]
    if fld is None:
        raise ValueError(f"no {which} cost field in this bundle")
    b = np.asarray(b, dtype=float)
    if x is None:
        return np.tensordot(b, fld, axes=1)
    i, j = x
    return float(b @ fld[:, i, j])


def combine_slices(weights, slices, inf):
    """``sum_n w_n slices[n]`` where any positively weighted sentinel yields the sentinel."""
    weights = np.asarray(weights, dtype=float)
    out = np.tensordot(weights, slices, axes=1)
    used = weights > 0
    if used.any():
        hit = (slices[used] >= inf).any(axis=0)
        out[hit] = inf
    return out


def theta(values_at_zero, chain, anchor_mode, t, conditioned=False, inf=1e12):
    """Expected post-observation cost ``sum_n b_n(t) v_n(x, 0)`` for last-observed mode ``anchor_mode``."""
    v = np.asarray(values_at_zero, dtype=float)
    if v.ndim != 3 or v.shape[0] != chain.M:
        raise ValueError(f"need one slice per mode, got shape {v.shape}")
    e = chain.basis(anchor_mode)
    b = conditioned_belief(chain, e, t) if conditioned else propagate_belief(chain, e, t)
    return combine_slices(b, v, inf)


def sample_mode_path(chain, initial_mode, t_end, rng_seed=None, max_switches=None):
    """Exact (Gillespie) sample of the mode path on ``[0, t_end]``.

    Returns a list of ``(switch_time, new_mode)``.  ``rng_seed`` may be a seed or
    a ``numpy.random.Generator``; ``max_switches`` stops the path early.
    """
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    L = chain.Lambda
    out = []
    mode = int(initial_mode)
    t = 0.0
    while True:
        rate = -L[mode, mode]
        if rate <= 0.0:
            break
        t += rng.exponential(1.0 / rate)
        if t > t_end:
            break
        p = L[mode].copy()
        p[mode] = 0.0
        mode = int(rng.choice(chain.M, p=p / rate))
        out.append((t, mode))
        if max_switches is not None and len(out) >= max_switches:
            break
    return out
