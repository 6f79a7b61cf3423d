"""Scenario files, run orchestration and reproducible output.

A scenario is plain text, one ``section.key = value`` per line; ``#`` starts
a comment. Example::

    ambient.kind = euclidean
    ambient.dim = 2
    initial.shape = circle
    initial.radius = 1
    flow.T = 0.25
    monitors.checks = radius

Commands: ``run``, ``verify``, ``sweep`` and ``audit`` (see ``--help``).
Randomized fixtures draw from numpy's PCG64 generator seeded with
``run.seed`` (or ``--seed``).
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import ambient as amb
from . import flows as fl
from . import immersion as im
from . import pseudolocality as pl
from .errors import ArtifactError, ParseError

__all__ = [
    "Scenario",
    "RunSummary",
    "parse_scenario",
    "expand_sweep",
    "run_scenario",
    "verify",
    "sweep",
    "main",
]


# -- schema ------------------------------------------------------------------------------


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _words(text: str) -> list[str]:
    return [v for v in text.replace(",", " ").split() if v]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_SHAPES = ("circle", "ellipse", "line", "line-with-bump", "line-with-spike", "sphere",
           "clifford-torus", "great-circle", "graph-of-function")
_CHECKS = ("radius", "fixed_point", "gauss_order", "metric_evolution", "commutation",
           "displacement_exponent", "equivalence", "diffeo", "monotonicity", "graph",
           "hessian", "uniqueness", "equivariance", "gradient")

# section -> key -> (parser, default, validator or choices)
_SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any, Any]]] = {
    "ambient": {
        "kind": (str, None, ("euclidean", "sphere", "hyperbolic", "flat-torus")),
        "dim": (int, 2, _pos),
        "radius": (float, 1.0, _pos),
        "curvature": (float, 1.0, _pos),
        "periods": (_floats, None, None),
    },
    "initial": {
        "shape": (str, None, _SHAPES),
        "n": (int, 256, lambda v: v >= 8),
        "n1": (int, 32, lambda v: v >= 8),
        "n2": (int, 32, lambda v: v >= 8),
        "n_lon": (int, 64, lambda v: v >= 8),
        "n_lat": (int, 32, lambda v: v >= 5),
        "radius": (float, 1.0, _pos),
        "center": (_floats, [0.0, 0.0], None),
        "warp": (float, 0.0, lambda v: abs(v) < 1),
        "a": (float, None, None),
        "b": (float, None, None),
        "width": (float, 0.05, _pos),
        "height": (float, None, _pos),
        "bump_center": (float, 0.85, None),
        "kappa": (float, 50.0, _pos),
        "h": (float, 2.5e-3, _pos),
        "ramp": (float, 0.01, _pos),
        "shear": (float, 0.0, None),
        "function": (str, "0*x", None),
        "band": (int, 2, lambda v: v >= 1),
    },
    "flow": {
        "scheme": (str, "explicit-euler", ("explicit-euler", "rk4-in-time")),
        "c_cfl": (float, 0.1, lambda v: 0 < v <= 0.25),
        "T": (float, 0.1, _pos),
        "gauge": (str, "geometric", ("geometric", "deturck")),
        "dt": (float, None, _pos),
        "record_every": (int, 1, _pos),
        "steps": (int, None, _pos),
        "snapshots": (int, 2, lambda v: v >= 0),
    },
    "monitors": {
        "checks": (_words, [], None),
        "tol": (float, 1e-3, _pos),
        "order_min": (float, 1.9, None),
        "t_eval": (float, 0.1, _pos),
        "samples": (int, 20, _pos),
        "xbar": (_floats, None, None),
        "tbar": (float, None, _pos),
        "eps": (float, 0.25, _pos),
        "r0": (float, 0.7, _pos),
        "node": (int, 0, _nonneg),
        "eta": (float, 1e-4, _nonneg),
        "slope_max": (float, 50.0, _pos),
        "angle": (float, math.pi / 5, None),
        "exponent_range": (_floats, [0.4, 0.6], None),
    },
    "audit": {
        "kind": (str, "none", ("none", "pseudolocality", "persistence")),
        "node": (int, None, _nonneg),
        "locate": (_floats, None, None),
        "r0": (float, 0.5, _pos),
        "eps": (float, 0.1, _pos),
        "alpha": (float, 0.1, _pos),
        "mode": (str, "cor76", ("thm75", "cor76")),
        "c0": (float, None, _pos),
        "T1": (float, None, _pos),
        "expect": (str, "pass", ("pass", "fail")),
    },
    "output": {
        "dir": (str, "out", None),
    },
    "run": {
        "seed": (int, 0, _nonneg),
        "name": (str, "scenario", None),
    },
    "sweep": {
        "axis": (str, None, None),
        "values": (_floats, None, None),
        "metric": (str, None, None),
    },
}

_REQUIRED = (("ambient", "kind"), ("initial", "shape"))


@dataclass
class Scenario:
    """Validated scenario with defaults applied."""

    values: dict
    text: str = ""

    def __getitem__(self, dotted: str) -> Any:
        sec, key = dotted.split(".", 1)
        return self.values[sec][key]

    def with_value(self, dotted: str, raw: str | float) -> "Scenario":
        """Copy with one key replaced (validated like a parsed line)."""
        new = copy.deepcopy(self.values)
        sec, key = dotted.split(".", 1)
        if sec not in _SCHEMA or key not in _SCHEMA[sec]:
            raise ParseError(f"unknown key {dotted}")
        new[sec][key] = _convert(sec, key, raw if isinstance(raw, str) else repr(raw), None)
        return Scenario(new, self.text)

    def echo(self) -> dict:
        return copy.deepcopy(self.values)


def _convert(sec: str, key: str, raw: str, lineno: int | None) -> Any:
    parser, _, check = _SCHEMA[sec][key]
    try:
        val = parser(raw.strip())
    except (TypeError, ValueError):
        raise ParseError(f"bad value for {sec}.{key}: {raw.strip()!r}", lineno) from None
    if isinstance(check, tuple):
        if val not in check:
            raise ParseError(f"unknown {sec}.{key} {val!r}", lineno)
    elif check is not None and not check(val):
        raise ParseError(f"{sec}.{key} out of range: {raw.strip()}", lineno)
    return val


def parse_scenario(text: str) -> Scenario:
    """Parse ``section.key = value`` lines into a :class:`Scenario`.

    Raises
    ------
    ParseError
        On unknown keys or values, out-of-range values, duplicate keys or a
        missing required key; the message carries the line number.
    """
    vals = {sec: {k: copy.deepcopy(entry[1]) for k, entry in keys.items()} for sec, keys in _SCHEMA.items()}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"expected 'section.key = value', got {body!r}", lineno)
        lhs, rhs = body.split("=", 1)
        lhs = lhs.strip()
        if "." not in lhs:
            raise ParseError(f"key {lhs!r} lacks a section", lineno)
        sec, key = lhs.split(".", 1)
        if sec not in _SCHEMA:
            raise ParseError(f"unknown section {sec!r}", lineno)
        if key not in _SCHEMA[sec]:
            raise ParseError(f"unknown key {lhs}", lineno)
        if lhs in seen:
            raise ParseError(f"duplicate key {lhs}", lineno)
        seen.add(lhs)
        vals[sec][key] = _convert(sec, key, rhs, lineno)
    last = max(1, len(text.splitlines()))
    for sec, key in _REQUIRED:
        if vals[sec][key] is None:
            raise ParseError(f"missing required key {sec}.{key}", last)
    for chk in vals["monitors"]["checks"]:
        if chk not in _CHECKS:
            raise ParseError(f"unknown monitors check {chk!r}", _line_of(text, "monitors.checks"))
    if vals["ambient"]["kind"] == "flat-torus" and not vals["ambient"]["periods"]:
        raise ParseError("ambient.periods required for flat-torus", last)
    return Scenario(vals, text)


def _line_of(text: str, key: str) -> int:
    for i, line in enumerate(text.splitlines(), start=1):
        if line.split("#", 1)[0].strip().startswith(key):
            return i
    return 0


def expand_sweep(sc: Scenario, axis: str | None = None, values: Sequence[float] | None = None) -> list[Scenario]:
    """Derived scenarios differing only in the ``axis`` key."""
    axis = axis or sc["sweep.axis"]
    values = values if values is not None else sc["sweep.values"]
    if not axis or not values:
        raise ParseError("sweep needs an axis and values")
    out = []
    for v in values:
        raw = repr(int(v)) if _SCHEMA[axis.split(".")[0]].get(axis.split(".", 1)[1], (None,))[0] is int else repr(float(v))
        out.append(sc.with_value(axis, raw))
    return out


# -- building objects ------------------------------------------------------------------------


def build_model(sc: Scenario) -> amb.AmbientModel:
    a = sc.values["ambient"]
    kind = a["kind"]
    if kind == "euclidean":
        return amb.AmbientModel.euclidean(a["dim"])
    if kind == "sphere":
        return amb.AmbientModel.sphere(a["dim"], a["radius"])
    if kind == "hyperbolic":
        return amb.AmbientModel.hyperbolic(a["dim"], a["curvature"])
    return amb.AmbientModel.flat_torus(a["periods"])


_SAFE_NAMES = {name: getattr(np, name) for name in
               ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "cosh", "sinh", "pi", "arctan")}


def _function(expr: str) -> Callable[[np.ndarray], np.ndarray]:
    code = compile(expr, "<initial.function>", "eval")
    for name in code.co_names:
        if name not in _SAFE_NAMES and name != "x":
            raise ParseError(f"initial.function uses unknown name {name!r}")

    def f(x):
        return np.broadcast_to(eval(code, {"__builtins__": {}}, dict(_SAFE_NAMES, x=x)), x.shape).astype(float)

    return f


def build_initial(sc: Scenario, model: amb.AmbientModel | None = None) -> im.ImmersionField:
    model = model or build_model(sc)
    p = sc.values["initial"]
    shape = p["shape"]
    s = im.shapes
    a = p["a"]
    b = p["b"]
    if shape == "circle":
        return s.circle(p["n"], p["radius"], tuple(p["center"]), p["warp"], model=model)
    if shape == "ellipse":
        return s.ellipse(p["n"], 1.0 if a is None else a, 0.6 if b is None else b, tuple(p["center"]), model=model)
    if shape == "line":
        return s.line(p["n"], -1.0 if a is None else a, 1.0 if b is None else b, p["band"], model=model)
    if shape == "line-with-bump":
        kw = {} if p["height"] is None else {"height": p["height"]}
        return s.line_with_bump(p["n"], -1.25 if a is None else a, 1.25 if b is None else b,
                                p["bump_center"], p["width"], band=p["band"], model=model, **kw)
    if shape == "line-with-spike":
        return s.line_with_spike(p["h"], -1.25 if a is None else a, 1.25 if b is None else b, p["bump_center"],
                                 p["kappa"], 0.03 if p["height"] is None else p["height"], p["ramp"],
                                 p["band"], model=model)
    if shape == "sphere":
        return s.sphere(p["n_lon"], p["n_lat"], p["radius"], model=model)
    if shape == "clifford-torus":
        return s.clifford_torus(p["n1"], p["n2"], p["shear"], model=model)
    if shape == "great-circle":
        return s.great_circle(p["n"], model)
    return s.graph_of_function(_function(p["function"]), p["n"], -1.0 if a is None else a,
                               1.0 if b is None else b, p["band"], model=model)


def build_config(sc: Scenario) -> fl.FlowConfig:
    f = sc.values["flow"]
    return fl.FlowConfig(f["scheme"], f["c_cfl"], f["T"], f["gauge"], f["dt"])


# -- checks ----------------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passes: bool
    value: float
    bound: float
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"name": self.name, "passes": bool(self.passes), "value": _num(self.value),
                "bound": _num(self.bound), "details": _clean(self.details)}


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else repr(v)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj


def _mean_radius(model: amb.AmbientModel, X: np.ndarray, grid: im.ParameterGrid) -> float:
    pts = X.reshape(-1, X.shape[-1])
    if grid.kind == "sphere":
        m = grid.regular_mask().reshape(-1)
        pts = pts[m]
    return float(np.mean(np.sqrt(np.sum(pts * pts, axis=-1))))


def semidiscrete_circle_radius(n: int, r0: float, t: float) -> float:
    """Radius of the uniform n-gon under the centered-difference semi-discrete flow.

    The uniform polygon stays uniform with r′ = −c_h/r,
    c_h = (2(1 − cos h)/h²)/(sin h/h)², h = 2π/n.
    """
    h = 2 * math.pi / n
    c = (2 * (1 - math.cos(h)) / h**2) / (math.sin(h) / h) ** 2
    return math.sqrt(r0 * r0 - 2 * c * t)


def _check_radius(sc, fld, hist, ctx) -> CheckResult:
    grid = fld.grid
    n = grid.dim
    r0 = sc["initial.radius"]
    t = hist.final.t
    exact = math.sqrt(r0 * r0 - 2 * n * t)
    r = _mean_radius(fld.model, hist.final.field.X, grid)
    rel = abs(r / exact - 1)
    det = {"t": t, "mean_radius": r, "analytic": exact}
    if grid.kind == "circle":
        semi = semidiscrete_circle_radius(grid.shape[0], r0, t)
        det["semidiscrete"] = semi
        det["semidiscrete_error"] = abs(r - semi)
    return CheckResult("radius", rel <= sc["monitors.tol"], rel, sc["monitors.tol"], det)


def _check_fixed_point(sc, fld, hist, ctx) -> CheckResult:
    drift = float(np.max(np.abs(hist.final.field.X - fld.X)))
    supH = max(float(np.max(np.sqrt(hist.model.metric_factor(X) * np.sum(H * H, axis=-1))))
               for X, H in zip(hist.X, hist.H))
    val = max(drift, supH)
    return CheckResult("fixed_point", val <= sc["monitors.tol"], val, sc["monitors.tol"],
                       {"drift": drift, "sup_H": supH, "steps": hist.final.steps})


def _gauss_mask(fld):
    grid = fld.grid
    if grid.kind == "sphere":
        theta = grid.mesh()[0]
        # nested metric differences are singular on the coordinate pole rows
        return (theta > math.pi / 12) & (theta < 11 * math.pi / 12) & grid.regular_mask()
    return grid.regular_mask()


def _check_gauss_order(sc, fld, hist, ctx) -> CheckResult:
    fine_sc = sc
    fine_sc = fine_sc.with_value("initial.n1", str(2 * sc["initial.n1"]))
    fine_sc = fine_sc.with_value("initial.n2", str(2 * sc["initial.n2"]))
    fine_sc = fine_sc.with_value("initial.n_lon", str(2 * sc["initial.n_lon"]))
    fine_sc = fine_sc.with_value("initial.n_lat", str(2 * sc["initial.n_lat"]))
    fine = build_initial(fine_sc, fld.model)
    r1 = im.gauss_residual(im.induced_geometry(fld), _gauss_mask(fld))
    r2 = im.gauss_residual(im.induced_geometry(fine), _gauss_mask(fine))
    order = math.log2(r1 / r2) if r1 > 0 and r2 > 0 else math.inf
    return CheckResult("gauss_order", order >= sc["monitors.order_min"], order, sc["monitors.order_min"],
                       {"coarse": r1, "fine": r2})


def _check_metric_evolution(sc, fld, hist, ctx) -> CheckResult:
    cfg = build_config(sc)
    s0 = fl.FlowState.start(fld)
    dt = 1e-4 * cfg.c_cfl / s0.geom.cfl_scale()
    s1 = fl.mcf_step(s0, cfg, dt)
    me = fl.metric_evolution_check(s0, s1)
    m = fld.grid.regular_mask() & fld.grid.free_mask()
    scale = float(np.max(np.abs(me.formula[m])))
    rel = float(np.max(np.abs(me.dg_dt - me.formula)[m])) / scale
    return CheckResult("metric_evolution", rel <= sc["monitors.tol"], rel, sc["monitors.tol"],
                       {"dg_dt_mean": float(np.mean(me.dg_dt[m][..., 0, 0])),
                        "formula_mean": float(np.mean(me.formula[m][..., 0, 0]))})


def _coupled_pair(fld, dt, T):
    cfg = fl.FlowConfig(c_cfl=0.25, T=T, dt=dt)
    hist = fl.coupled_run(fld, cfg, T, keep_states=True)
    return hist.states[-2], hist.maps[-2], hist.states[-1], hist.maps[-1]


def _check_commutation(sc, fld, hist, ctx) -> CheckResult:
    """Residual at the last full step of two coupled runs with h and dt both halved."""
    T = sc["monitors.t_eval"]
    fine = build_initial(sc.with_value("initial.n", str(2 * sc["initial.n"])), fld.model)
    # an even number of fine steps, each within the CFL limit, so both runs end on full steps
    m = 2 * math.ceil(T * im.induced_geometry(fine).cfl_scale() / (2 * sc["flow.c_cfl"]))
    res = []
    for f, dt in ((fld, 2 * T / m), (fine, T / m)):
        res.append(fl.commutation_check(*_coupled_pair(f, dt, T), k=1))
    order = math.log2(res[0] / res[1]) if res[1] > 0 else math.inf
    bound = 0.9
    return CheckResult("commutation", order >= bound, order, bound, {"coarse": res[0], "fine": res[1]})


def _coupled(sc, fld, ctx, T, sample_times=None):
    key = ("coupled", T, tuple(sample_times) if sample_times is not None else None)
    if key not in ctx:
        ctx[key] = fl.coupled_run(fld, build_config(sc), T, sample_times=sample_times)
    return ctx[key]


def _check_displacement(sc, fld, hist, ctx) -> CheckResult:
    ts = list(np.geomspace(1e-4, 1e-2, 9))
    ch = _coupled(sc, fld, ctx, 1e-2, ts)
    t = np.asarray(ch.times)
    d = np.asarray(ch.displacement)
    ok = d > 0
    lo, hi = sc["monitors.exponent_range"]
    if np.count_nonzero(ok) < 2:
        expo = math.nan
    else:
        expo = float(np.polyfit(np.log(t[ok]), np.log(d[ok]), 1)[0])
    passes = bool(lo <= expo <= hi)
    return CheckResult("displacement_exponent", passes, expo, hi,
                       {"range": [lo, hi], "times": t, "displacement": d})


def _check_equivalence(sc, fld, hist, ctx) -> CheckResult:
    T = sc["monitors.t_eval"]
    ch = _coupled(sc, fld, ctx, T)
    lam_min, lam_max = ch.eig_min[-1], ch.eig_max[-1]
    target = 1.0 / (1.0 - 2.0 * fld.grid.dim * T)
    rel = max(abs(lam_min / target - 1), abs(lam_max / target - 1))
    return CheckResult("equivalence", rel <= 0.05, rel, 0.05,
                       {"eig_min": lam_min, "eig_max": lam_max, "analytic": target})


def _check_diffeo(sc, fld, hist, ctx) -> CheckResult:
    ch = _coupled(sc, fld, ctx, sc["monitors.t_eval"])
    mindet = float(min(ch.min_det))
    inj = bool(all(ch.injective))
    return CheckResult("diffeo", mindet > 0 and inj, mindet, 0.0, {"injective": inj, "samples": len(ch.times)})


def _check_monotonicity(sc, fld, hist, ctx) -> CheckResult:
    xbar = sc["monitors.xbar"]
    if xbar is None:
        xbar = fld.X.reshape(-1, fld.X.shape[-1])[sc["monitors.node"]].tolist()
    tbar = sc["monitors.tbar"] or hist.final.t
    rep = pl.gaussian_density(hist, xbar, tbar, sc["monitors.eps"])
    mono = pl.monotonicity_check(rep)
    return CheckResult("monotonicity", mono.passes, mono["max_violation"], 0.0,
                       {"flag": mono["flag"], "samples": len(rep.times), "truncated": rep.truncated,
                        "D_last": float(rep.D[-1]) if len(rep.D) else math.nan})


def _check_graph(sc, fld, hist, ctx) -> CheckResult:
    r0 = sc["monitors.r0"]
    node = np.unravel_index(sc["monitors.node"], fld.grid.shape)
    patch = im.local_graph_extract(fld, tuple(int(i) for i in node), r0)
    bound = 36.0 / r0
    return CheckResult("graph", patch.ratio * 10 <= bound, patch.ratio, bound / 10,
                       {"margin": bound / patch.ratio if patch.ratio > 0 else math.inf})


def _check_hessian(sc, fld, hist, ctx) -> CheckResult:
    model = fld.model
    rng = ctx["rng"]
    worst = 0.0
    worst_c = 0.0
    for _ in range(sc["monitors.samples"]):
        y1, y2 = _random_pair(model, rng)
        hs = amb.distance_sq_hessian(model, y1, y2)
        vec = rng.standard_normal((10, 2 * model.dim))
        worst_c = max(worst_c, amb.fit_hessian_constant(hs, vec))
        fd = _fd_hessian(model, y1, y2)
        worst = max(worst, float(np.max(np.abs(hs.matrix - fd)) / np.max(np.abs(fd))))
    ok = worst <= 1e-4 and worst_c <= 10.0
    return CheckResult("hessian", ok, worst, 1e-4, {"fitted_C": worst_c})


def _random_pair(model, rng):
    """Random pair at ambient distance in (0.05, 0.2) near the chart origin."""
    n = model.dim
    while True:
        y1 = rng.uniform(-0.5, 0.5, n)
        step = rng.standard_normal(n)
        step *= rng.uniform(0.05, 0.2) / math.sqrt(float(model.metric_factor(y1)) * float(step @ step))
        y2 = y1 + step
        d = float(amb.distances_to(model, y1, y2[None, :])[0])
        limit = 0.25 / math.sqrt(abs(model.kappa)) if model.kappa != 0 else math.inf
        if 0 < d < min(limit, 0.24):
            return y1, y2


def _fd_hessian(model, y1, y2, step=1e-4):
    """Covariant finite-difference Hessian of d̄² on the product chart."""
    n = model.dim
    z0 = np.concatenate([y1, y2])

    def psi(z):
        return float(amb.distances_to(model, z[:n], z[None, n:])[0]) ** 2

    H = np.zeros((2 * n, 2 * n))
    grad = np.zeros(2 * n)
    e = np.eye(2 * n) * step
    for a in range(2 * n):
        grad[a] = (psi(z0 + e[a]) - psi(z0 - e[a])) / (2 * step)
        for b in range(a, 2 * n):
            v = (psi(z0 + e[a] + e[b]) - psi(z0 + e[a] - e[b]) - psi(z0 - e[a] + e[b]) + psi(z0 - e[a] - e[b]))
            H[a, b] = H[b, a] = v / (4 * step * step)
    G = np.zeros((2 * n, 2 * n, 2 * n))
    G[:n, :n, :n] = amb.christoffel_at(model, y1)
    G[n:, n:, n:] = amb.christoffel_at(model, y2)
    return H - np.einsum("cab,c->ab", G, grad)


def _check_uniqueness(sc, fld, hist, ctx) -> CheckResult:
    T = sc["monitors.t_eval"]
    h = fld.grid.h
    dt = sc["flow.dt"] or 0.1 * h * h
    times = list(np.linspace(0.0, T, 11))
    same = fl.uniqueness_experiment(fld, 0.0, fl.FlowConfig(dt=dt, T=T), fl.FlowConfig(dt=dt, T=T), times)
    ua = fl.uniqueness_experiment(fld, 0.0, fl.FlowConfig(dt=dt, T=T), fl.FlowConfig(dt=dt / 2, T=T), times)
    ub = fl.uniqueness_experiment(fld, 0.0, fl.FlowConfig(dt=dt / 2, T=T), fl.FlowConfig(dt=dt / 4, T=T), times)
    pert = fl.uniqueness_experiment(fld, sc["monitors.eta"], fl.FlowConfig(dt=dt, T=T), fl.FlowConfig(dt=dt, T=T), times)
    order = math.log2(math.sqrt(ua.u[-1]) / math.sqrt(ub.u[-1]))
    ok = same.u.max() <= 1e-24 and order >= 0.9 and pert.gronwall_slope <= sc["monitors.slope_max"]
    return CheckResult("uniqueness", ok, order, 0.9,
                       {"identical_max_u": float(same.u.max()), "gronwall_slope": pert.gronwall_slope})


def _check_equivariance(sc, fld, hist, ctx) -> CheckResult:
    cfg = build_config(sc)
    th = sc["monitors.angle"]
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    rot = fl.isometry_equivariance_check(fld, lambda X: X @ R.T, cfg)
    ref = fl.isometry_equivariance_check(fld, lambda X: X * np.array([1.0, -1.0]), cfg)
    val = max(rot, ref)
    return CheckResult("equivariance", val <= 1e-8, val, 1e-8, {"rotation": rot, "reflection": ref})


def _check_gradient(sc, fld, hist, ctx) -> CheckResult:
    g3 = fl.gradient_estimate_monitor(hist.final, 3)
    g4 = fl.gradient_estimate_monitor(hist.final, 4)
    return CheckResult("gradient", bool(np.isfinite(g3) and np.isfinite(g4)), g3, math.inf, {"k3": g3, "k4": g4})


_CHECK_FUNCS = {
    "radius": _check_radius,
    "fixed_point": _check_fixed_point,
    "gauss_order": _check_gauss_order,
    "metric_evolution": _check_metric_evolution,
    "commutation": _check_commutation,
    "displacement_exponent": _check_displacement,
    "equivalence": _check_equivalence,
    "diffeo": _check_diffeo,
    "monotonicity": _check_monotonicity,
    "graph": _check_graph,
    "hessian": _check_hessian,
    "uniqueness": _check_uniqueness,
    "equivariance": _check_equivariance,
    "gradient": _check_gradient,
}


# -- running ------------------------------------------------------------------------------


@dataclass
class RunSummary:
    """Scenario echo, per-check results and artifact paths (wall time is not serialized)."""

    scenario: dict
    checks: list
    artifacts: list
    errors: list
    audit: dict | None = None
    wall_time: float = 0.0

    @property
    def passes(self) -> bool:
        return not self.errors and all(c["passes"] for c in self.checks) and (
            self.audit is None or self.audit.get("meets_expectation", False))

    def to_json(self) -> str:
        body = {"scenario": _clean(self.scenario), "checks": self.checks, "artifacts": self.artifacts,
                "errors": self.errors, "passes": self.passes}
        if self.audit is not None:
            body["audit"] = self.audit
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _series_csv(hist: fl.FlowHistory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "t", "sup_A", "volume", "mean_radius"])
    for k, t in enumerate(hist.times):
        supA = float(np.sqrt(np.max(hist.A2[k])))
        vol = float(np.sum(hist.weights[k]))
        w.writerow([k, repr(float(t)), repr(supA), repr(vol), repr(_mean_radius(hist.model, hist.X[k], hist.grid))])
    return buf.getvalue()


def _run_flow(sc: Scenario, fld: im.ImmersionField) -> fl.FlowHistory:
    cfg = build_config(sc)
    steps = sc["flow.steps"]
    if steps is None:
        return fl.run_flow(fld, cfg, record_every=sc["flow.record_every"])
    # fixed number of steps: record every record_every steps
    bg = fl.Background.from_geometry(im.induced_geometry(fld)) if cfg.gauge == "deturck" else None
    state = fl.FlowState.start(fld)
    hist = fl.FlowHistory(fld.grid, fld.model)
    hist.add(state)
    for i in range(steps):
        state = fl.deturck_step(state, bg, cfg) if bg is not None else fl.mcf_step(state, cfg)
        if (i + 1) % sc["flow.record_every"] == 0 or i + 1 == steps:
            hist.add(state)
    hist.final = state
    return hist


def _audit(sc: Scenario, hist: fl.FlowHistory) -> dict:
    a = sc.values["audit"]
    node = a["node"]
    if node is None and a["locate"] is not None:
        target = np.asarray(a["locate"], dtype=float)
        X0 = hist.X[0].reshape(-1, hist.X[0].shape[-1])
        node = int(np.argmin(np.sum((X0 - target) ** 2, axis=-1)))
    if node is None:
        node = 0
    idx = tuple(int(i) for i in np.unravel_index(node, hist.grid.shape))
    if a["kind"] == "pseudolocality":
        rep = pl.pseudolocality_audit(hist, idx, a["r0"], a["eps"], a["alpha"])
    else:
        rep = pl.persistence_audit(hist, idx, a["r0"], a["eps"], a["mode"], c0=a["c0"], T1=a["T1"])
    out = json.loads(rep.to_json())
    out["expect"] = a["expect"]
    out["meets_expectation"] = bool(rep.passes) == (a["expect"] == "pass")
    return out


def run_scenario(sc: Scenario, out_dir: str | Path | None = None, *, seed: int | None = None,
                 audit_only: bool = False) -> RunSummary:
    """Run one scenario, write its artifacts and return the summary."""
    t0 = time.perf_counter()
    out = Path(out_dir if out_dir is not None else sc["output.dir"])
    seed = sc["run.seed"] if seed is None else seed
    ctx: dict = {"rng": np.random.Generator(np.random.PCG64(seed))}
    checks, artifacts, errors = [], [], []
    audit = None
    try:
        fld = build_initial(sc)
        hist = _run_flow(sc, fld)
        _atomic_write(out / "series.csv", _series_csv(hist))
        artifacts.append("series.csv")
        nsnap = sc["flow.snapshots"]
        if nsnap and len(hist):
            picks = sorted(set(np.linspace(0, len(hist) - 1, nsnap).round().astype(int).tolist()))
            for k in picks:
                name = f"snapshots/sample_{k:06d}.csv"
                _atomic_write(out / name, im.write_csv(im.ImmersionField(fld.grid, hist.X[k], fld.model)))
                artifacts.append(name)
        if not audit_only:
            for name in sc["monitors.checks"]:
                try:
                    checks.append(_CHECK_FUNCS[name](sc, fld, hist, ctx).as_dict())
                except ArtifactError as exc:
                    errors.append({"check": name, "error": f"{type(exc).__name__}: {exc}"})
        if sc["audit.kind"] != "none":
            audit = _audit(sc, hist)
            _atomic_write(out / "audit.json", json.dumps(audit, indent=2, sort_keys=True) + "\n")
            artifacts.append("audit.json")
    except ArtifactError as exc:
        errors.append({"check": None, "error": f"{type(exc).__name__}: {exc}"})
    summary = RunSummary(sc.echo(), checks, artifacts + ["summary.json"], errors, audit,
                         time.perf_counter() - t0)
    _atomic_write(out / "summary.json", summary.to_json())
    return summary


def verify(directory: str | Path, out_dir: str | Path, *, seed: int | None = None,
           quiet: bool = False) -> tuple[bool, list[tuple[str, RunSummary]]]:
    """Run every ``*.scn`` file in ``directory`` (sorted) and aggregate."""
    files = sorted(Path(directory).glob("*.scn"))
    results = []
    for f in files:
        sc = parse_scenario(f.read_text())
        summ = run_scenario(sc, Path(out_dir) / f.stem, seed=seed)
        results.append((f.stem, summ))
        if not quiet:
            _print_summary(f.stem, summ)
    ok = bool(files) and all(s.passes for _, s in results)
    return ok, results


def sweep(sc: Scenario, out_dir: str | Path, axis: str | None = None, values: Sequence[float] | None = None,
          *, seed: int | None = None, metric: str | None = None) -> dict:
    """Run derived scenarios along ``axis`` and tabulate one error metric.

    ``metric`` is ``check`` or ``check.detail`` (default: the first check's
    value, or ``radius.semidiscrete_error`` when a circle radius check runs).
    """
    derived = expand_sweep(sc, axis, values)
    axis = axis or sc["sweep.axis"]
    values = list(values if values is not None else sc["sweep.values"])
    metric = metric or sc["sweep.metric"]
    rows = []
    for v, d in zip(values, derived):
        summ = run_scenario(d, Path(out_dir) / f"{axis}={v!r}", seed=seed)
        if summ.errors:
            raise ArtifactError(f"sweep run failed at {axis}={v!r}: {summ.errors[0]['error']}")
        chk = summ.checks[0] if summ.checks else None
        if metric is None and chk is not None:
            metric = "radius.semidiscrete_error" if chk["name"] == "radius" and "semidiscrete_error" in chk["details"] else chk["name"]
        name, _, detail = (metric or "").partition(".")
        c = next(c for c in summ.checks if c["name"] == name)
        err = c["details"][detail] if detail else c["value"]
        rows.append({"value": v, "error": float(err)})
    errs = np.array([r["error"] for r in rows])
    vals = np.array(values, dtype=float)
    order = float(np.polyfit(np.log(vals), np.log(errs), 1)[0]) if np.all(errs > 0) and len(rows) > 1 else math.nan
    order_vs = vals[np.argsort(-vals)]
    errs_sorted = errs[np.argsort(-vals)]
    monotone = bool(np.all(np.diff(errs_sorted) < 0))
    table = {"axis": axis, "metric": metric, "rows": rows, "fitted_order": order, "monotone": monotone,
             "values_desc": order_vs.tolist()}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([axis, "error"])
    for r in rows:
        w.writerow([repr(r["value"]), repr(r["error"])])
    _atomic_write(Path(out_dir) / "sweep.csv", buf.getvalue())
    _atomic_write(Path(out_dir) / "sweep.json", json.dumps(_clean(table), indent=2, sort_keys=True) + "\n")
    return table


# -- command line ------------------------------------------------------------------------------


def _print_summary(name: str, summ: RunSummary) -> None:
    print(f"== {name}  ({summ.wall_time:.1f} s)")
    for c in summ.checks:
        flag = "PASS" if c["passes"] else "FAIL"
        print(f"  {flag}  {c['name']:<22} value={c['value']!s:<24} bound={c['bound']!s}")
    if summ.audit is not None:
        flag = "PASS" if summ.audit["meets_expectation"] else "FAIL"
        print(f"  {flag}  audit:{summ.audit['kind']:<16} passes={summ.audit['passes']} expect={summ.audit['expect']}")
    for e in summ.errors:
        print(f"  ERROR {e['check']}: {e['error']}")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="artifact", description="Mean curvature flow experiments and audits.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="PCG64 seed (u64)")
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("run", help="run one scenario")
    sp.add_argument("scenario")
    common(sp)
    sp = sub.add_parser("verify", help="run every *.scn scenario in a directory")
    sp.add_argument("directory")
    common(sp)
    sp = sub.add_parser("sweep", help="convergence table along one scenario key")
    sp.add_argument("scenario")
    sp.add_argument("--axis", default=None)
    sp.add_argument("--values", default=None, help="comma-separated values")
    sp.add_argument("--metric", default=None)
    common(sp)
    sp = sub.add_parser("audit", help="run the flow and the audit block only")
    sp.add_argument("scenario")
    common(sp)
    return p


def _read(path: str) -> Scenario:
    return parse_scenario(Path(path).read_text())


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        if args.command == "verify":
            ok, results = verify(args.directory, args.out or "out", seed=args.seed, quiet=args.quiet)
            if not args.quiet:
                print(f"{sum(s.passes for _, s in results)}/{len(results)} scenarios pass")
            return 0 if ok else 1
        sc = _read(args.scenario)
        if args.command == "sweep":
            vals = _floats(args.values) if args.values else None
            table = sweep(sc, args.out or sc["output.dir"], args.axis, vals, seed=args.seed, metric=args.metric)
            if not args.quiet:
                print(f"{table['axis']:>16}  error")
                for r in table["rows"]:
                    print(f"{r['value']!r:>16}  {r['error']!r}")
                print(f"fitted order {table['fitted_order']:.4f}  monotone={table['monotone']}")
            return 0 if table["monotone"] else 1
        summ = run_scenario(sc, args.out, seed=args.seed, audit_only=args.command == "audit")
        if not args.quiet:
            _print_summary(sc["run.name"], summ)
        return 0 if summ.passes else 1
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    except ArtifactError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
