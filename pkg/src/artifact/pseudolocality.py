"""Localized Gaussian density, point picking and curvature audits over flow histories.

Everything here is read-only over a :class:`~artifact.flows.FlowHistory`;
distances are ambient distances d̄ evaluated in closed form, and integrals are
node quadratures with the induced volume weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .ambient import AmbientModel, bounds_report, distances_to
from .errors import ArgumentError, PreconditionError
from .flows import FlowHistory
from .immersion import ImmersionField, induced_geometry, lipschitz_graph_check

__all__ = [
    "HeatKernelWeight",
    "CutoffWeight",
    "DensityReport",
    "PickedPoint",
    "AuditReport",
    "density_scale",
    "gaussian_density",
    "monotonicity_check",
    "point_pick",
    "exhaustive_pick_oracle",
    "pseudolocality_audit",
    "persistence_audit",
]


def density_scale(c0: float, i0: float, eps: float) -> float:
    """ρ = min{1/2, 1/(c₀√e), i₀, √ε}; a zero c₀ drops its term."""
    terms = [0.5, i0, math.sqrt(eps)]
    if c0 > 0:
        terms.append(1.0 / (c0 * math.sqrt(math.e)))
    return float(min(terms))


@dataclass(frozen=True)
class HeatKernelWeight:
    """φ(x,t) = (4π(t̄−t))^{−n/2} exp(−(1 + (t−t̄)/ε) d̄²/(4(t̄−t)) − n t/(2ε))."""

    center: NDArray
    tbar: float
    eps: float
    n: int

    def __call__(self, d2: ArrayLike, t: float) -> NDArray:
        tau = self.tbar - t
        if not tau > 0:
            raise ArgumentError("φ is defined for t < t̄ only")
        d2 = np.asarray(d2, dtype=float)
        expo = -(1.0 + (t - self.tbar) / self.eps) * d2 / (4.0 * tau) - self.n * t / (2.0 * self.eps)
        return (4.0 * math.pi * tau) ** (-self.n / 2.0) * np.exp(expo)


@dataclass(frozen=True)
class CutoffWeight:
    """ψ(x,t) = (1 − (d̄² + 3nt)/ρ²)₊³."""

    center: NDArray
    rho: float
    n: int

    def __call__(self, d2: ArrayLike, t: float) -> NDArray:
        ramp = 1.0 - (np.asarray(d2, dtype=float) + 3.0 * self.n * t) / self.rho**2
        return np.maximum(ramp, 0.0) ** 3


@dataclass
class DensityReport:
    """D(t) = ∫φψ and the dissipation ∫|H + (1+(t−t̄)/ε) d̄∇̄⊥d̄/(2(t̄−t))|² φψ."""

    times: NDArray
    D: NDArray
    dissipation: NDArray
    tbar: float
    eps: float
    rho: float
    n: int
    h: float
    nodes: int
    truncated: bool = False
    warnings: list = field(default_factory=list)


def _half_grad_d2(model: AmbientModel, center: NDArray, X: NDArray) -> NDArray:
    """Coordinate vector ḡ^{-1}∂(½d̄²) = d̄∇̄d̄ at every node."""
    if model.is_flat:
        d = X - center
        if model.kind == "flat-torus":
            per = np.asarray(model.periods)
            d = d - per * np.round(d / per)
        return d
    out = np.zeros_like(X)
    step = 1e-6
    for a in range(model.dim):
        e = np.zeros(model.dim)
        e[a] = step
        dp = distances_to(model, center, X + e) ** 2
        dm = distances_to(model, center, X - e) ** 2
        out[..., a] = 0.25 * (dp - dm) / step
    return out / model.metric_factor(X)[..., None]


def gaussian_density(
    history: FlowHistory,
    center: ArrayLike,
    tbar: float,
    eps: float,
    *,
    c0: float | None = None,
    i0: float | None = None,
) -> DensityReport:
    """Localized Gaussian density at every recorded time t < t̄.

    ``c0``/``i0`` default to :func:`~artifact.ambient.bounds_report` of the
    history's ambient model. A report whose ψ-support reaches a frozen band
    or open boundary carries a truncation warning.
    """
    if not history.times:
        raise ArgumentError("empty flow history")
    if not (history.times[0] <= tbar):
        raise PreconditionError("t̄ precedes the recorded history")
    model = history.model
    grid = history.grid
    n = grid.dim
    bc0, bi0 = bounds_report(model)
    c0 = bc0 if c0 is None else c0
    i0 = bi0 if i0 is None else i0
    rho = density_scale(c0, i0, eps)
    center = np.asarray(center, dtype=float)
    phi = HeatKernelWeight(center, float(tbar), float(eps), n)
    psi = CutoffWeight(center, rho, n)
    free = grid.free_mask()
    edge = np.zeros(grid.shape, dtype=bool)
    if grid.kind == "interval":
        edge[:1] = edge[-1:] = True
    edge |= ~free
    times, D, diss = [], [], []
    truncated = False
    for k, t in enumerate(history.times):
        if t >= tbar:
            continue
        X = history.X[k]
        w = history.weights[k]
        d2 = distances_to(model, center, X) ** 2
        ps = psi(d2, t)
        weight = phi(d2, t) * ps
        if np.any(ps[edge] > 0):
            truncated = True
        geom = induced_geometry(ImmersionField(grid, X, model), check=False)
        v = _half_grad_d2(model, center, X)
        # normal part of d̄∇̄d̄
        tang = np.einsum("...ia,...a->...i", geom.dX, v) * geom.lam[..., None]
        coef = np.einsum("...ij,...j->...i", geom.ginv, tang)
        vperp = v - np.einsum("...i,...ia->...a", coef, geom.dX)
        vec = geom.H + (1.0 + (t - tbar) / eps) * vperp / (2.0 * (tbar - t))
        integrand = geom.lam * np.sum(vec * vec, axis=-1)
        times.append(t)
        D.append(float(np.sum(weight * w)))
        diss.append(float(np.sum(integrand * weight * w)))
    rep = DensityReport(np.array(times), np.array(D), np.array(diss), float(tbar), float(eps), rho, n,
                        grid.h, int(np.prod(grid.shape)), truncated)
    if truncated:
        rep.warnings.append("ψ support reaches the grid boundary band; density is truncated")
    return rep


class MonotonicityResult(dict):
    """Mapping with keys ``max_violation``, ``passes``, ``flag``, ``slack``."""

    @property
    def passes(self) -> bool:
        return self["passes"]


def monotonicity_check(report: DensityReport) -> MonotonicityResult:
    """Discrete check of d/dt D ≤ −(dissipation) along the recorded samples.

    For each consecutive pair the slope (D₂ − D₁)/(t₂ − t₁) is compared with
    −½(diss₁ + diss₂) plus slack 1e−4·(1 + |D|)·q, where the resolution factor
    q = 1 + (h/ℓ)², ℓ = √(t̄ − t₂) the heat-kernel width at the later sample.
    The reported violation is max(slope + dissipation − slack), clipped below at
    −inf (negative means satisfied).
    """
    if len(report.times) < 3:
        return MonotonicityResult(max_violation=math.nan, passes=False, flag="insufficient samples", slack=[])
    t, D, q = report.times, report.D, report.dissipation
    slopes = np.diff(D) / np.diff(t)
    mean_diss = 0.5 * (q[1:] + q[:-1])
    width = np.sqrt(report.tbar - t[1:])
    factor = 1.0 + (report.h / width) ** 2
    slack = 1e-4 * (1.0 + np.maximum(np.abs(D[1:]), np.abs(D[:-1]))) * factor
    excess = slopes + mean_diss - slack
    worst = float(np.max(excess))
    return MonotonicityResult(max_violation=worst, passes=bool(worst <= 0.0), flag=None,
                              slack=slack.tolist())


# -- point picking -------------------------------------------------------------------------------


@dataclass
class PickedPoint:
    """Selected (x̄, t̄) with Q = |A|(x̄, t̄) and the iterate trace."""

    node: tuple
    time_index: int
    x: NDArray
    t: float
    Q: float
    K: float
    alpha: float
    trace: list
    verified: bool
    verification_incomplete: bool
    neighborhood_max: float


def _sup_A(history: FlowHistory) -> NDArray:
    return np.sqrt(np.maximum(np.stack(history.A2), 0.0))


def _node_list(history: FlowHistory) -> list[tuple]:
    return [tuple(int(i) for i in idx) for idx in np.ndindex(*history.grid.shape)]


def _in_E(A: float, t: float, alpha: float) -> bool:
    return t > 0 and A * A >= alpha / t


def _flat_dist(history: FlowHistory, p: NDArray, k: int) -> NDArray:
    return distances_to(history.model, p, history.X[k])


def point_pick(
    history: FlowHistory,
    alpha: float,
    K: float,
    seed: tuple | None = None,
    *,
    x0: ArrayLike | None = None,
    eps: float | None = None,
    window: float = 0.75,
) -> PickedPoint | None:
    """Iterated-quadrupling selection of a point controlling its neighbourhood.

    Starting from the seed (x_k, t_k) the next iterate is the sample of E_α
    with t ≤ t_k, d̄(x₀, x) ≤ d̄(x₀, x_k) + K/|A|(x_k, t_k) and
    |A| > 4|A|(x_k, t_k) of largest |A| (ties: first in (t, node) order).
    The final point's claim |A| ≤ 4Q on t̄ − window·αQ⁻² ≤ t ≤ t̄,
    d̄(x, x̄) ≤ K/Q is verified by exhaustive scan of the stored samples.

    ``seed`` is ``(time_index, node)``; when omitted the first sample in
    (t, node) order with |A|² ≥ α/t + ε⁻² (ε⁻² omitted when ``eps`` is None)
    is used. Returns None when no seed violation exists.
    """
    A = _sup_A(history)
    times = np.asarray(history.times)
    nodes = _node_list(history)
    extra = 0.0 if eps is None else eps**-2
    if seed is None:
        found = None
        for k, t in enumerate(times):
            if t <= 0:
                continue
            hit = np.argwhere(A[k] ** 2 >= alpha / t + extra)
            if hit.size:
                found = (k, tuple(int(i) for i in hit[0]))
                break
        if found is None:
            return None
        seed = found
    k0, node0 = int(seed[0]), tuple(int(i) for i in np.atleast_1d(seed[1]))
    if not (times[k0] > 0 and A[k0][node0] ** 2 >= alpha / times[k0] + extra):
        return None
    base = history.X[k0][node0] if x0 is None else np.asarray(x0, dtype=float)
    dist0 = [distances_to(history.model, base, history.X[k]) for k in range(len(times))]
    trace = [(k0, node0)]
    cur_k, cur_n = k0, node0
    while True:
        a_cur = float(A[cur_k][cur_n])
        limit = float(dist0[cur_k][cur_n]) + K / a_cur
        best = None
        for k in range(cur_k + 1):
            t = times[k]
            if t <= 0:
                continue
            mask = (A[k] > 4.0 * a_cur) & (A[k] ** 2 >= alpha / t) & (dist0[k] <= limit)
            if not np.any(mask):
                continue
            vals = np.where(mask, A[k], -np.inf)
            flat = int(np.argmax(vals))
            cand = float(vals.reshape(-1)[flat])
            if best is None or cand > best[0]:
                best = (cand, k, nodes[flat])
        if best is None:
            break
        cur_k, cur_n = best[1], best[2]
        trace.append((cur_k, cur_n))
        if len(trace) > 64:
            break
    Q = float(A[cur_k][cur_n])
    tbar = float(times[cur_k])
    xbar = history.X[cur_k][cur_n]
    verified, incomplete, nb = _verify_neighborhood(history, A, cur_k, xbar, Q, alpha, K, window)
    return PickedPoint(cur_n, cur_k, xbar.copy(), tbar, Q, float(K), float(alpha), trace,
                       verified, incomplete, nb)


def _verify_neighborhood(history, A, k_bar, xbar, Q, alpha, K, window):
    times = np.asarray(history.times)
    tbar = times[k_bar]
    t_lo = tbar - window * alpha / Q**2
    sel = [k for k in range(len(times)) if t_lo - 1e-15 <= times[k] <= tbar]
    nb = 0.0
    for k in sel:
        d = distances_to(history.model, xbar, history.X[k])
        m = d <= K / Q
        if np.any(m):
            nb = max(nb, float(np.max(A[k][m])))
    verified = nb <= 4.0 * Q * (1 + 1e-12)
    # cadence: every gap inside the window at most (α/8)Q⁻²
    in_win = times[(times >= t_lo) & (times <= tbar)]
    pts = np.concatenate([[max(t_lo, times[0])], in_win])
    cadence_ok = bool(np.all(np.diff(pts) <= alpha / (8.0 * Q * Q) + 1e-15)) if pts.size > 1 else False
    X = history.X[k_bar]
    if history.grid.dim == 1:
        seg = np.diff(X, axis=0)
        edge = float(np.max(np.sqrt(np.sum(seg * seg, axis=-1))))
    else:
        edge = float(np.max(np.sqrt(np.sum(np.diff(X, axis=0) ** 2, axis=-1))))
    incomplete = (not cadence_ok) or edge > K / Q
    return bool(verified), bool(incomplete), nb


def exhaustive_pick_oracle(history: FlowHistory, alpha: float, K: float, seed: tuple,
                           x0: ArrayLike | None = None) -> tuple[int, tuple]:
    """Reference selection by brute force over all (t, node) samples with plain loops."""
    A = _sup_A(history)
    times = list(history.times)
    nodes = _node_list(history)
    k, nd = int(seed[0]), tuple(int(i) for i in np.atleast_1d(seed[1]))
    base = history.X[k][nd] if x0 is None else np.asarray(x0, dtype=float)

    def d0(kk, node):
        return float(distances_to(history.model, base, history.X[kk][node][None, :])[0])

    while True:
        a = float(A[k][nd])
        lim = d0(k, nd) + K / a
        best = None
        for kk in range(k + 1):
            t = times[kk]
            for node in nodes:
                val = float(A[kk][node])
                if t > 0 and val * val >= alpha / t and val > 4 * a and d0(kk, node) <= lim:
                    if best is None or val > best[0]:
                        best = (val, kk, node)
        if best is None:
            return k, nd
        k, nd = best[1], best[2]


# -- audits -------------------------------------------------------------------------------------


@dataclass
class AuditReport:
    """Outcome of a curvature audit with witnesses and metadata."""

    kind: str
    inputs: dict
    passes: bool
    value: float
    witness: dict | None
    first_violation: dict | None = None
    flags: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _center_of(history: FlowHistory, x0) -> tuple[tuple | None, NDArray]:
    arr = np.atleast_1d(np.asarray(x0))
    if arr.dtype.kind in "iu" and arr.size == history.grid.dim:
        node = tuple(int(i) for i in arr)
        return node, history.X[0][node].copy()
    return None, np.asarray(x0, dtype=float)


def pseudolocality_audit(
    history: FlowHistory,
    x0,
    r0: float,
    eps: float,
    alpha: float,
) -> AuditReport:
    """Scan t·(|A|² − (εr₀)⁻²) ≤ α over B(x₀, εr₀) ∩ M_t for recorded 0 < t ≤ T.

    ``x0`` is a node index of M₀ (or an ambient point). The initial
    Lipschitz-graph measurement is recorded; T ≤ ε²r₀² is required.

    Raises
    ------
    PreconditionError
        If the history runs past ε²r₀².
    """
    node, p = _center_of(history, x0)
    T = float(history.times[-1])
    if T > eps**2 * r0**2 * (1 + 1e-9):
        raise PreconditionError(f"history extends to T = {T:.6g} > ε²r₀² = {eps ** 2 * r0 ** 2:.6g}")
    flags = []
    meta = {"T": T, "samples": len(history.times)}
    if node is not None:
        gc = lipschitz_graph_check(ImmersionField(history.grid, history.X[0], history.model), node, r0)
        meta["graph"] = {"is_graph": gc.is_graph, "delta": gc.delta, "covered_radius": gc.covered_radius}
        if not gc.is_graph:
            flags.append("initial data is not a Lipschitz graph at x0")
    radius = eps * r0
    thresh = radius**-2
    best = -math.inf
    wit = None
    count = 0
    for k, t in enumerate(history.times):
        if t <= 0:
            continue
        d = distances_to(history.model, p, history.X[k])
        m = d < radius
        if not np.any(m):
            continue
        count += int(np.sum(m))
        val = t * (history.A2[k] - thresh)
        val = np.where(m, val, -np.inf)
        i = int(np.argmax(val))
        if val.reshape(-1)[i] > best:
            best = float(val.reshape(-1)[i])
            wit = {"time_index": k, "t": float(t), "node": list(np.unravel_index(i, history.grid.shape)),
                   "value": best, "A": float(math.sqrt(max(history.A2[k].reshape(-1)[i], 0.0)))}
    if count == 0:
        flags.append("empty audit")
        passes = False
    else:
        passes = best <= alpha
    meta["audited_samples"] = count
    inputs = {"x0": p.tolist(), "node": list(node) if node else None, "r0": r0, "eps": eps, "alpha": alpha}
    return AuditReport("pseudolocality", inputs, bool(passes), best, wit, None, flags, meta)


def persistence_audit(
    history: FlowHistory,
    x0,
    r0: float,
    eps: float,
    mode: str = "cor76",
    *,
    c0: float | None = None,
    T1: float | None = None,
) -> AuditReport:
    """Curvature persistence scans.

    ``thm75``: |A| ≤ (εr₀)⁻¹ on B(x₀, εr₀) ∩ M_t for t ≤ ε²r₀², given
    |A| ≤ 1/r₀ on M₀ ∩ B(x₀, r₀) and M₀ graphic there.
    ``cor76``: |A| ≤ 2c₀ on all of M_t for t ≤ T₁, given |A| ≤ c₀ at t = 0.
    The first violation in (t, node) order is reported.
    """
    if mode not in ("thm75", "cor76"):
        raise ArgumentError(f"unknown persistence mode {mode!r}")
    node, p = _center_of(history, x0)
    flags = []
    meta = {"samples": len(history.times)}
    A0 = np.sqrt(np.maximum(history.A2[0], 0.0))
    if mode == "thm75":
        d0 = distances_to(history.model, p, history.X[0])
        ball = d0 < r0
        if np.any(A0[ball] > 1.0 / r0):
            flags.append("hypothesis |A| <= 1/r0 fails at t = 0")
        if node is not None:
            gc = lipschitz_graph_check(ImmersionField(history.grid, history.X[0], history.model), node, r0)
            meta["graph"] = {"is_graph": gc.is_graph, "delta": gc.delta}
            if not gc.is_graph:
                flags.append("initial data not graphic in the ball")
        else:
            flags.append("hypothesis-unknown: graphic condition needs a node centre")
        bound = 1.0 / (eps * r0)
        t_end = eps**2 * r0**2 if T1 is None else T1
        radius = eps * r0
    else:
        if c0 is None:
            raise ArgumentError("cor76 mode needs c0")
        if np.any(A0 > c0 * (1 + 1e-9)):
            flags.append("hypothesis |A| <= c0 fails at t = 0")
        flags.append("hypothesis-unknown: uniform graphic radius is not verified from stored data")
        bound = 2.0 * c0
        t_end = history.times[-1] if T1 is None else T1
        radius = math.inf
    first = None
    worst = 0.0
    for k, t in enumerate(history.times):
        if t > t_end * (1 + 1e-12):
            break
        A = np.sqrt(np.maximum(history.A2[k], 0.0))
        if math.isfinite(radius):
            m = distances_to(history.model, p, history.X[k]) < radius
        else:
            m = np.ones(A.shape, dtype=bool)
        if not np.any(m):
            continue
        worst = max(worst, float(np.max(A[m])))
        bad = np.argwhere(m & (A > bound))
        if bad.size and first is None:
            nd = tuple(int(i) for i in bad[0])
            first = {"time_index": k, "t": float(t), "node": list(nd), "A": float(A[nd])}
    inputs = {"x0": p.tolist(), "r0": r0, "eps": eps, "mode": mode, "c0": c0, "T1": t_end, "bound": bound}
    meta["max_A"] = worst
    return AuditReport("persistence", inputs, first is None, worst, first, first, flags, meta)
