"""Hot loops: the explicit upwind step and full backward sweeps.

Each kernel exists twice, a numba version (``*_numba``) and a vectorized numpy
version (``*_numpy``) with the same operation order, so both backends agree to
rounding.  The module-level names pick one according to ``OOPDMP_BACKEND``.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit, prange


@njit
def _upwind_norm(V, i, j, nx, ny, h, inf):
    v = V[i, j]
    vr = V[i + 1, j] if i + 1 < nx else inf
    vl = V[i - 1, j] if i > 0 else inf
    vu = V[i, j + 1] if j + 1 < ny else inf
    vd = V[i, j - 1] if j > 0 else inf
    dx = min(min(vr - v, vl - v), 0.0) / h
    dy = min(min(vu - v, vd - v), 0.0) / h
    return math.sqrt(dx * dx + dy * dy)


@njit(parallel=True)
def update_step_numba(V, out, kbar, f, dt, h, active, has_zeroth, rate, reward, inf):
    nx, ny = V.shape
    for i in prange(nx):
        for j in range(ny):
            if not active[i, j]:
                out[i, j] = inf
                continue
            v = V[i, j]
            u = v + dt * (kbar[i, j] - f[i, j] * _upwind_norm(V, i, j, nx, ny, h, inf))
            if has_zeroth:
                u = u + dt * rate[i, j] * (reward[i, j] - v)
            if u > inf:
                u = inf
            out[i, j] = u


@njit(parallel=True)
def sweep_numba(V, K, wK, f, dt, h, active,
                has_zeroth, wG, PHI,
                has_obs, W, wO, ocost,
                has_bdry, bdry, PSI, wP,
                save_slot, out, inf):
    nx, ny = V.shape
    M = K.shape[0]
    N = wK.shape[0] - 1
    cur = V.copy()
    nxt = np.empty_like(cur)
    if save_slot[N] >= 0:
        out[save_slot[N]] = cur
    for k in range(N, 0, -1):
        for i in prange(nx):
            for j in range(ny):
                if not active[i, j]:
                    nxt[i, j] = inf
                    continue
                v = cur[i, j]
                norm = _upwind_norm(cur, i, j, nx, ny, h, inf)
                kb = 0.0
                for n in range(M):
                    kb = kb + wK[k, n] * K[n, i, j]
                u = v + dt * (kb - f[i, j] * norm)
                if has_zeroth:
                    rate = 0.0
                    rphi = 0.0
                    for n in range(M):
                        rate = rate + wG[k, n]
                        rphi = rphi + wG[k, n] * PHI[n, i, j]
                    u = u + dt * (rphi - rate * v)
                if has_obs:
                    o = ocost[i, j]
                    hit = False
                    for n in range(M):
                        w = wO[k, n]
                        if w > 0.0:
                            wv = W[n, i, j]
                            if wv >= inf:
                                hit = True
                            o = o + w * wv
                    if hit:
                        o = inf
                    if o < u:
                        u = o
                if has_bdry and bdry[i, j]:
                    p = 0.0
                    for n in range(M):
                        p = p + wP[k - 1, n] * PSI[n, i, j]
                    if p < u:
                        u = p
                if u > inf:
                    u = inf
                nxt[i, j] = u
        tmp = cur
        cur = nxt
        nxt = tmp
        s = save_slot[k - 1]
        if s >= 0:
            out[s] = cur
    return cur


def _upwind_norm_numpy(V, h, inf):
    P = np.full((V.shape[0] + 2, V.shape[1] + 2), inf)
    P[1:-1, 1:-1] = V
    dx = np.minimum(np.minimum(P[2:, 1:-1] - V, P[:-2, 1:-1] - V), 0.0) / h
    dy = np.minimum(np.minimum(P[1:-1, 2:] - V, P[1:-1, :-2] - V), 0.0) / h
    return np.sqrt(dx * dx + dy * dy)


def update_step_numpy(V, out, kbar, f, dt, h, active, has_zeroth, rate, reward, inf):
    u = V + dt * (kbar - f * _upwind_norm_numpy(V, h, inf))
    if has_zeroth:
        u = u + dt * rate * (reward - V)
    np.minimum(u, inf, out=u)
    u[~active] = inf
    out[...] = u


def _wsum(w, A):
    acc = np.zeros(A.shape[1:])
    for n in range(A.shape[0]):
        acc = acc + w[n] * A[n]
    return acc


def sweep_numpy(V, K, wK, f, dt, h, active,
                has_zeroth, wG, PHI,
                has_obs, W, wO, ocost,
                has_bdry, bdry, PSI, wP,
                save_slot, out, inf):
    N = wK.shape[0] - 1
    M = K.shape[0]
    cur = V.copy()
    frozen = ~active
    if has_bdry:
        bdry = bdry & active
    if save_slot[N] >= 0:
        out[save_slot[N]] = cur
    for k in range(N, 0, -1):
        u = cur + dt * (_wsum(wK[k], K) - f * _upwind_norm_numpy(cur, h, inf))
        if has_zeroth:
            rate = 0.0
            for n in range(M):
                rate = rate + wG[k, n]
            u = u + dt * (_wsum(wG[k], PHI) - rate * cur)
        if has_obs:
            used = wO[k] > 0.0
            o = ocost.copy()
            for n in range(M):
                if used[n]:
                    o = o + wO[k, n] * W[n]
            if used.any():
                o[(W[used] >= inf).any(axis=0)] = inf
            u = np.minimum(u, o)
        if has_bdry:
            p = _wsum(wP[k - 1], PSI)
            u[bdry] = np.minimum(u[bdry], p[bdry])
        np.minimum(u, inf, out=u)
        u[frozen] = inf
        cur = u
        s = save_slot[k - 1]
        if s >= 0:
            out[s] = cur
    return cur


if USE_NUMBA:
    update_step = update_step_numba
    sweep = sweep_numba
else:
    update_step = update_step_numpy
    sweep = sweep_numpy
