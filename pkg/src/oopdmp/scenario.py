"""Scenario documents (JSON), field construction, and result files.

A scenario is one JSON object::

    {
      "name": "...", "time_unit": "...",
      "grid": {"J": 100},
      "modes": [{"cost": <field>, "psi": <field>, "phi": <field>}, ...],
      "Lambda": [[...]], "gamma": [...],
      "speed": <field>, "broken_speed": <field>,
      "obstacles": [<shape>, ...], "target": <shape>,
      "solve": {"regime": "indefinite", "observations": {"kind": "bounded", "L": 1},
                "T": ..., "beta": ..., "tol": 1e-6, "max_iters": 500,
                "save_slices": 65, "horizon": null},
      "initial_belief": 0 | [..] | "stationary" | "conditioned_limit",
      "start": [x, y], "script": [modes...], "seed": 0
    }

Fields are a number, ``{"kind": "constant", "value": c}``,
``{"kind": "gaussian_sum", "base": b, "terms": [...]}``,
``{"kind": "raster", "path": "file.csv", "scale": 1}`` or (for ``phi`` only)
``{"kind": "breakdown_cost", "scale": 1}``.  Gaussian terms carry ``weight``,
``center`` and either ``sigma`` (``weight / (2 pi sigma) exp(-r^2 / 2 sigma^2)``)
or ``covariance`` (``weight / (2 pi sqrt|S|) exp(-d' S^-1 d / 2)``).

Shapes are ``rectangle`` (``min``, ``max``), ``circle`` (``center``,
``radius``) or ``raster`` (``path``, ``threshold``).  CSV rasters have row 0 at
``y = 0``; PNG rasters have their bottom row at ``y = 0``.
"""
import copy
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .eikonal import solve_breakdown_cost
from .grid import INF, Grid2D, SpeedField
from .mode_chain import CostBundle, ModeChain, limiting_conditioned_belief, stationary_distribution
from .solvers import Problem, SolveResult, SolveSpec, ValueField, anchor_key

SOLVE_DEFAULTS = {"tol": 1e-6, "max_iters": 500, "save_slices": 65, "horizon": None, "beta": 0.0, "T": None}
OBS_KINDS = ("none", "scheduled", "bounded", "paid", "full")


class ScenarioError(ValueError):
    """Invalid scenario document; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.problems))


# ---------------------------------------------------------------- rasters and fields

def load_raster(path):
    """Raster as ``a[i, j]`` with ``i`` along x and ``j`` along y."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"raster file not found: {path}")
    if path.lower().endswith(".png"):
        from PIL import Image

        with Image.open(path) as im:
            raw = np.asarray(im)
        if raw.ndim != 2:
            raise ValueError(f"{path}: expected a grayscale image")
        top = 65535.0 if raw.dtype == np.uint16 or raw.max() > 255 else 255.0
        rows = raw[::-1].astype(float) / top
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # empty files are reported below
            rows = np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))
    if rows.size == 0 or 0 in rows.shape:
        raise ValueError(f"{path}: raster has a zero dimension")
    if not np.all(np.isfinite(rows)):
        raise ValueError(f"{path}: raster contains non-finite values")
    return np.ascontiguousarray(rows.T)


def resample(src, J):
    """Bilinear resampling of a raster spanning the unit square onto the (J+1)^2 grid.

    Interpolates as ``a + w (b - a)`` so constant rasters come back exactly.
    """
    src = np.asarray(src, float)
    nx, ny = src.shape
    x = np.linspace(0.0, 1.0, J + 1)

    def axis(n):
        if n == 1:
            return np.zeros(J + 1, np.int64), np.zeros(J + 1, np.int64), np.zeros(J + 1)
        g = x * (n - 1)
        i0 = np.minimum(np.floor(g).astype(np.int64), n - 2)
        return i0, i0 + 1, g - i0

    i0, i1, wx = axis(nx)
    j0, j1, wy = axis(ny)
    a = src[np.ix_(i0, j0)]
    b = src[np.ix_(i1, j0)]
    c = src[np.ix_(i0, j1)]
    d = src[np.ix_(i1, j1)]
    wx = wx[:, None]
    wy = wy[None, :]
    lo = a + wx * (b - a)
    hi = c + wx * (d - c)
    return lo + wy * (hi - lo)


def gaussian_term(term, X, Y):
    w = float(term["weight"])
    cx, cy = term["center"]
    dx, dy = X - cx, Y - cy
    if "covariance" in term:
        S = np.asarray(term["covariance"], float)
        det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
        P = np.linalg.inv(S)
        quad = P[0, 0] * dx * dx + (P[0, 1] + P[1, 0]) * dx * dy + P[1, 1] * dy * dy
        return w / (2.0 * np.pi * np.sqrt(det)) * np.exp(-0.5 * quad)
    s = float(term["sigma"])
    return w / (2.0 * np.pi * s) * np.exp(-(dx * dx + dy * dy) / (2.0 * s * s))


def rasterize_field(spec, grid, base_dir="."):
    """Evaluate a field description on the grid points."""
    if isinstance(spec, (int, float)):
        return np.full(grid.shape, float(spec))
    kind = spec.get("kind")
    if kind == "constant":
        return np.full(grid.shape, float(spec["value"]))
    if kind == "gaussian_sum":
        X, Y = grid.coords()
        out = np.full(grid.shape, float(spec.get("base", 0.0)))
        for term in spec.get("terms", []):
            out = out + gaussian_term(term, X, Y)
        return out
    if kind == "raster":
        src = load_raster(os.path.join(base_dir, spec["path"]))
        return resample(src, grid.J) * float(spec.get("scale", 1.0))
    raise ValueError(f"unknown field kind {kind!r}")


def rasterize_shape(spec, grid, base_dir="."):
    """Boolean mask of grid points inside a shape."""
    X, Y = grid.coords() if hasattr(grid, "coords") else np.meshgrid(*(2 * [np.linspace(0, 1, grid + 1)]), indexing="ij")
    kind = spec.get("kind")
    eps = 1e-12
    if kind == "rectangle":
        (x0, y0), (x1, y1) = spec["min"], spec["max"]
        return (X >= x0 - eps) & (X <= x1 + eps) & (Y >= y0 - eps) & (Y <= y1 + eps)
    if kind == "circle":
        cx, cy = spec["center"]
        r = float(spec["radius"])
        return (X - cx) ** 2 + (Y - cy) ** 2 <= r * r + eps
    if kind == "raster":
        src = load_raster(os.path.join(base_dir, spec["path"]))
        return resample(src, X.shape[0] - 1) >= float(spec.get("threshold", 0.5))
    raise ValueError(f"unknown shape kind {kind!r}")


# ---------------------------------------------------------------- validation

def _check_field(f, where, errs, phi=False):
    if isinstance(f, bool):
        errs.append(f"{where}: expected a number or field object")
        return
    if isinstance(f, (int, float)):
        if not np.isfinite(f) or f < 0:
            errs.append(f"{where}: must be finite and nonnegative")
        return
    if not isinstance(f, dict):
        errs.append(f"{where}: expected a number or field object")
        return
    kind = f.get("kind")
    if kind == "constant":
        v = f.get("value")
        if not isinstance(v, (int, float)) or v < 0:
            errs.append(f"{where}.value: must be a nonnegative number")
    elif kind == "gaussian_sum":
        terms = f.get("terms", [])
        if not isinstance(terms, list):
            errs.append(f"{where}.terms: must be a list")
            return
        for k, t in enumerate(terms):
            w = f"{where}.terms[{k}]"
            if not isinstance(t, dict):
                errs.append(f"{w}: must be an object")
                continue
            if not isinstance(t.get("weight"), (int, float)) or t["weight"] < 0:
                errs.append(f"{w}.weight: must be a nonnegative number")
            c = t.get("center")
            if not (isinstance(c, list) and len(c) == 2):
                errs.append(f"{w}.center: must be [x, y]")
            if "covariance" in t:
                S = np.asarray(t["covariance"], float)
                if S.shape != (2, 2) or not np.allclose(S, S.T) or np.any(np.linalg.eigvalsh(S) <= 0):
                    errs.append(f"{w}.covariance: must be symmetric positive definite 2x2")
            elif not isinstance(t.get("sigma"), (int, float)) or t["sigma"] <= 0:
                errs.append(f"{w}.sigma: must be a positive number")
        if f.get("base", 0.0) < 0:
            errs.append(f"{where}.base: must be nonnegative")
    elif kind == "raster":
        if not isinstance(f.get("path"), str):
            errs.append(f"{where}.path: must be a file path")
    elif kind == "breakdown_cost" and phi:
        pass
    else:
        errs.append(f"{where}.kind: unknown field kind {kind!r}")


def _check_shape(s, where, errs):
    if not isinstance(s, dict):
        errs.append(f"{where}: expected a shape object")
        return
    kind = s.get("kind")
    if kind == "rectangle":
        try:
            (x0, y0), (x1, y1) = s["min"], s["max"]
            if not (0 <= x0 <= x1 <= 1 and 0 <= y0 <= y1 <= 1):
                errs.append(f"{where}: rectangle must lie in the unit square with min <= max")
        except (KeyError, TypeError, ValueError):
            errs.append(f"{where}: rectangle needs min [x, y] and max [x, y]")
    elif kind == "circle":
        c, r = s.get("center"), s.get("radius")
        if not (isinstance(c, list) and len(c) == 2 and 0 <= c[0] <= 1 and 0 <= c[1] <= 1):
            errs.append(f"{where}.center: must be [x, y] in the unit square")
        if not isinstance(r, (int, float)) or r <= 0:
            errs.append(f"{where}.radius: must be positive")
    elif kind == "raster":
        if not isinstance(s.get("path"), str):
            errs.append(f"{where}.path: must be a file path")
    else:
        errs.append(f"{where}.kind: unknown shape kind {kind!r}")


def _line_of(text, key):
    for n, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return n
    return None


@dataclass
class Scenario:
    doc: dict
    base_dir: str = "."
    defaults_applied: list = field(default_factory=list)

    @property
    def M(self):
        return len(self.doc["modes"])

    @property
    def J(self):
        return int(self.doc["grid"]["J"])

    @property
    def name(self):
        return self.doc.get("name", "")

    @property
    def start(self):
        return tuple(self.doc.get("start", (0.5, 0.5)))

    @property
    def script(self):
        return list(self.doc.get("script", []))

    @property
    def seed(self):
        return int(self.doc.get("seed", 0))

    def to_dict(self):
        return copy.deepcopy(self.doc)

    def chain(self):
        return ModeChain(self.doc["Lambda"], self.doc.get("gamma"))

    def with_overrides(self, **kw):
        """Copy with ``J``, ``tol``, ``horizon``, ``seed`` or ``anchor`` replaced (``None`` keeps)."""
        d = self.to_dict()
        if kw.get("J") is not None:
            d["grid"]["J"] = int(kw["J"])
        for k in ("tol", "horizon", "max_iters", "save_slices"):
            if kw.get(k) is not None:
                d["solve"][k] = kw[k]
        if kw.get("seed") is not None:
            d["seed"] = int(kw["seed"])
        if kw.get("anchor") is not None:
            d["initial_belief"] = kw["anchor"]
        return Scenario(d, self.base_dir, list(self.defaults_applied))

    def build(self):
        """Grid, speed, chain, costs and solve settings as a :class:`Problem`."""
        d = self.doc
        J = self.J
        bd = self.base_dir
        plain = Grid2D(J)
        obstacle = np.zeros(plain.shape, bool)
        for s in d.get("obstacles", []):
            obstacle |= rasterize_shape(s, plain, bd)
        target = rasterize_shape(d["target"], plain, bd) if d.get("target") else None
        grid = Grid2D.from_masks(J, obstacle, target)
        f = rasterize_field(d.get("speed", 1.0), grid, bd)
        speed = SpeedField(np.where(obstacle, 1.0, f), grid)
        chain = self.chain()
        K = np.stack([rasterize_field(m["cost"], grid, bd) for m in d["modes"]])
        psi = np.stack([rasterize_field(m.get("psi", 0.0), grid, bd) for m in d["modes"]])
        phi = None
        if any("phi" in m for m in d["modes"]):
            broken = None
            rows = []
            for m in d["modes"]:
                spec = m.get("phi", 0.0)
                if isinstance(spec, dict) and spec.get("kind") == "breakdown_cost":
                    if broken is None:
                        fb = rasterize_field(d["broken_speed"], grid, bd)
                        bz = solve_breakdown_cost(grid, SpeedField(np.where(obstacle, 1.0, fb), grid)).values
                        # unreachable points keep a large but finite penalty
                        finite = bz[bz < INF]
                        broken = np.where(bz < INF, bz, finite.max() if finite.size else 0.0)
                    rows.append(broken * float(spec.get("scale", 1.0)))
                else:
                    rows.append(rasterize_field(spec, grid, bd))
            phi = np.stack(rows)
        costs = CostBundle(K, psi, phi)
        sv = d["solve"]
        obs = sv.get("observations", {"kind": "none"})
        cost = obs.get("cost")
        if isinstance(cost, dict):
            cost = rasterize_field(cost, grid, bd)
        spec = SolveSpec(
            regime=sv["regime"],
            observations=obs.get("kind", "none"),
            times=tuple(obs.get("times", ())),
            L=int(obs.get("L", 0)),
            cost=cost,
            T=sv.get("T"),
            beta=float(sv.get("beta", 0.0) or 0.0),
            anchor=self.initial_anchor(chain),
            tol=float(sv["tol"]),
            max_iters=int(sv["max_iters"]),
            save_slices=int(sv["save_slices"]),
            horizon=sv.get("horizon"),
        )
        return Problem(grid, speed, chain, costs, spec)

    def initial_anchor(self, chain=None):
        chain = chain or self.chain()
        ib = self.doc.get("initial_belief", 0)
        if ib == "stationary":
            return stationary_distribution(chain)
        if ib == "conditioned_limit":
            return limiting_conditioned_belief(chain)
        if isinstance(ib, list):
            return np.asarray(ib, float)
        return int(ib)


def parse_scenario(text, base_dir="."):
    """Parse and validate a scenario document; every problem is reported at once."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError([f"line {e.lineno}, column {e.colno}: {e.msg}"]) from None
    if not isinstance(d, dict):
        raise ScenarioError(["top level must be a JSON object"])
    errs = []

    def loc(key):
        n = _line_of(text, key)
        return f" (line {n})" if n else ""

    grid = d.get("grid")
    if not isinstance(grid, dict) or not isinstance(grid.get("J"), int) or grid["J"] < 2:
        errs.append(f"grid.J: must be an integer >= 2{loc('grid')}")
    modes = d.get("modes")
    if not isinstance(modes, list) or not modes:
        errs.append(f"modes: must be a nonempty list{loc('modes')}")
        modes = []
    for k, m in enumerate(modes):
        if not isinstance(m, dict) or "cost" not in m:
            errs.append(f"modes[{k}]: needs a cost field")
            continue
        _check_field(m["cost"], f"modes[{k}].cost", errs)
        if "psi" in m:
            _check_field(m["psi"], f"modes[{k}].psi", errs)
        if "phi" in m:
            _check_field(m["phi"], f"modes[{k}].phi", errs, phi=True)
            if isinstance(m["phi"], dict) and m["phi"].get("kind") == "breakdown_cost" and "broken_speed" not in d:
                errs.append(f"modes[{k}].phi: breakdown_cost needs broken_speed")
    M = len(modes)
    L = d.get("Lambda")
    try:
        Lam = np.asarray(L, float)
        if Lam.shape != (M, M):
            errs.append(f"Lambda: must be {M}x{M}, got shape {Lam.shape}{loc('Lambda')}")
        else:
            off = Lam - np.diag(np.diag(Lam))
            for i in np.flatnonzero((off < 0).any(axis=1)):
                errs.append(f"Lambda row {i}: negative off-diagonal rate{loc('Lambda')}")
            rows = Lam.sum(axis=1)
            for i in np.flatnonzero(np.abs(rows) > 1e-12):
                errs.append(f"Lambda row {i}: sums to {rows[i]:.6g}, must sum to 0{loc('Lambda')}")
    except (TypeError, ValueError):
        errs.append(f"Lambda: must be a numeric matrix{loc('Lambda')}")
    if "gamma" in d:
        g = np.asarray(d["gamma"], float)
        if g.shape != (M,) or np.any(g < 0):
            errs.append(f"gamma: must be {M} nonnegative rates{loc('gamma')}")
    for key in ("speed", "broken_speed"):
        if key in d:
            _check_field(d[key], key, errs)
            if isinstance(d[key], (int, float)) and d[key] <= 0:
                errs.append(f"{key}: must be positive")
    obstacles = d.get("obstacles", [])
    if not isinstance(obstacles, list):
        errs.append("obstacles: must be a list")
        obstacles = []
    for k, s in enumerate(obstacles):
        _check_shape(s, f"obstacles[{k}]", errs)
    if d.get("target") is not None:
        _check_shape(d["target"], "target", errs)
    applied = []
    sv = d.get("solve")
    if not isinstance(sv, dict):
        errs.append("solve: missing solve block")
        sv = {}
    else:
        for k, v in SOLVE_DEFAULTS.items():
            if k not in sv:
                sv[k] = v
                applied.append(f"solve.{k}={v}")
        obs = sv.setdefault("observations", {"kind": "none"})
        if obs.get("kind", "none") not in OBS_KINDS:
            errs.append(f"solve.observations.kind: must be one of {OBS_KINDS}{loc('observations')}")
        cost = obs.get("cost")
        if isinstance(cost, dict):
            _check_field(cost, "solve.observations.cost", errs)
        spec = SolveSpec(
            regime=sv.get("regime", "?"), observations=obs.get("kind", "none"),
            times=tuple(obs.get("times", ())), L=int(obs.get("L", 0)),
            cost=1.0 if isinstance(cost, dict) else cost, T=sv.get("T"),
            beta=float(sv.get("beta") or 0.0), tol=float(sv["tol"]), max_iters=int(sv["max_iters"]),
            save_slices=int(sv["save_slices"]), horizon=sv.get("horizon"),
        )
        errs.extend(f"solve: {e}" for e in spec.validate())
        if spec.regime in ("indefinite", "randomly_terminated") and not d.get("target"):
            errs.append("target: indefinite regimes need a target shape")
        if spec.regime == "randomly_terminated":
            if "gamma" not in d:
                errs.append("gamma: randomly terminated regime needs termination rates")
            if any(isinstance(m, dict) and "phi" not in m for m in modes):
                errs.append("modes: randomly terminated regime needs phi for every mode")
    ib = d.get("initial_belief", None)
    if ib is None:
        d["initial_belief"] = 0
        applied.append("initial_belief=0")
    elif ib in ("stationary", "conditioned_limit"):
        pass
    elif isinstance(ib, list):
        q = np.asarray(ib, float)
        if q.shape != (M,) or np.any(q < 0) or abs(q.sum() - 1) > 1e-10:
            errs.append(f"initial_belief: must be a probability vector of length {M}")
    elif not (isinstance(ib, int) and 0 <= ib < max(M, 1)):
        errs.append('initial_belief: must be a mode index, a distribution, "stationary" or "conditioned_limit"')
    if "start" in d:
        s = d["start"]
        if not (isinstance(s, list) and len(s) == 2 and all(0 <= c <= 1 for c in s)):
            errs.append("start: must be [x, y] in the unit square")
    if "seed" not in d:
        d["seed"] = 0
        applied.append("seed=0")
    for key in ("speed",):
        if key not in d:
            d[key] = 1.0
            applied.append("speed=1.0")
    for k, v in (("obstacles", []), ("gamma", None)):
        d.setdefault(k, v)
    if d["gamma"] is None:
        del d["gamma"]
    for path in _raster_paths(d):
        if not os.path.exists(os.path.join(base_dir, path)):
            errs.append(f"raster file not found: {path}")
    if errs:
        raise ScenarioError(errs)
    return Scenario(d, base_dir, applied)


def _raster_paths(d):
    out = []

    def walk(x):
        if isinstance(x, dict):
            if x.get("kind") == "raster" and isinstance(x.get("path"), str):
                out.append(x["path"])
            for v in x.values():
                walk(v)
        elif isinstance(x, list):
            for v in x:
                walk(v)

    walk(d)
    return out


def load_scenario(path):
    with open(path) as fh:
        text = fh.read()
    return parse_scenario(text, os.path.dirname(os.path.abspath(path)))


def serialize_scenario(sc):
    return json.dumps(sc.doc, indent=2, sort_keys=True)


def bundled_scenario_path(name):
    here = os.path.join(os.path.dirname(__file__), "scenarios")
    p = name if name.endswith(".json") else name + ".json"
    return os.path.join(here, p)


def bundled_scenarios():
    here = os.path.join(os.path.dirname(__file__), "scenarios")
    return sorted(f[:-5] for f in os.listdir(here) if f.endswith(".json"))


# ---------------------------------------------------------------- results

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    raise TypeError(f"cannot serialize {type(x)}")


def _write(path, data, mode="w"):
    try:
        with open(path, mode) as fh:
            fh.write(data)
    except OSError as e:
        raise OSError(f"could not write {path}: {e}") from e


def write_results(result, traces, out_dir, scenario=None, overrides=None, extra=None):
    """Write value slices, traces and a hashed manifest; returns the manifest dict."""
    try:
        os.makedirs(os.path.join(out_dir, "values"), exist_ok=True)
    except OSError as e:
        raise OSError(f"could not create {out_dir}: {e}") from e
    files = []
    grid = result.problem.grid
    for (layer, anchor) in sorted(result.values, key=lambda k: (k[0], str(k[1]))):
        vf = result.values[(layer, anchor)]
        stem = f"values/layer{layer}_anchor{anchor}"
        data = np.ascontiguousarray(vf.slices, dtype="<f8")
        _write(os.path.join(out_dir, stem + ".bin"), data.tobytes(), "wb")
        side = {
            "layer": layer, "anchor": anchor, "shape": list(data.shape), "dtype": "<f8", "order": "C",
            "J": grid.J, "dt": vf.dt, "N": vf.N, "slice_index": vf.index.tolist(),
            "slice_times": (vf.index * vf.dt).tolist(), "inf": INF,
        }
        _write(os.path.join(out_dir, stem + ".json"), _dump(side))
        files += [stem + ".bin", stem + ".json"]
    if traces:
        os.makedirs(os.path.join(out_dir, "traces"), exist_ok=True)
        for k, tr in enumerate(traces):
            p = f"traces/trace_{k:04d}.json"
            _write(os.path.join(out_dir, p), tr.to_json() + "\n")
            files.append(p)
    manifest = {
        "solve": {
            "iterations_used": result.iterations_used,
            "residual_history": [float(x) for x in result.residual_history],
            "final_residual": float(result.residual_history[-1]) if result.residual_history else None,
            "horizon_used": result.horizon_used,
            "converged": result.converged,
            "fully_observed": result.fully_observed,
            "obs_source": {str(k): v for k, v in result.obs_source.items()},
            "anchors": {str(k): np.asarray(v).tolist() for k, v in result.anchors.items()},
        },
        "scenario": scenario.to_dict() if scenario is not None else None,
        "overrides": overrides or {},
        "files": [{"path": p, "sha256": _sha256(os.path.join(out_dir, p)),
                   "bytes": os.path.getsize(os.path.join(out_dir, p))} for p in sorted(files)],
    }
    if extra:
        manifest.update(extra)
    _write(os.path.join(out_dir, "manifest.json"), _dump(manifest))
    return manifest


def read_manifest(out_dir, verify=True):
    path = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest in {out_dir}")
    with open(path) as fh:
        man = json.load(fh)
    if verify:
        bad = [f["path"] for f in man["files"] if _sha256(os.path.join(out_dir, f["path"])) != f["sha256"]]
        if bad:
            raise ValueError(f"hash mismatch for {', '.join(bad)}")
    return man


def read_results(out_dir, verify=True):
    """Value slices keyed ``(layer, anchor)`` as ValueFields, plus the manifest."""
    man = read_manifest(out_dir, verify)
    values = {}
    for f in man["files"]:
        p = f["path"]
        if not (p.startswith("values/") and p.endswith(".json")):
            continue
        with open(os.path.join(out_dir, p)) as fh:
            side = json.load(fh)
        raw = np.fromfile(os.path.join(out_dir, p[:-5] + ".bin"), dtype="<f8").reshape(side["shape"])
        a = side["anchor"]
        values[(side["layer"], a)] = ValueField(raw, np.asarray(side["slice_index"], np.int64), side["dt"], side["N"])
    return values, man


def load_result(out_dir, verify=True):
    """Rebuild a :class:`SolveResult` from a results directory written with its scenario."""
    values, man = read_results(out_dir, verify)
    if man.get("scenario") is None:
        raise ValueError("manifest does not embed its scenario")
    sc = Scenario(man["scenario"], man.get("base_dir", "."))
    pb = sc.build()
    s = man["solve"]
    anchors = {}
    for k, v in s["anchors"].items():
        anchors["q" if k == "q" else int(k)] = np.asarray(v, float)
    return SolveResult(pb, values, anchors, s["iterations_used"], s["residual_history"], s["horizon_used"],
                       s["converged"], {int(k): v for k, v in s["obs_source"].items()}, s["fully_observed"]), sc
