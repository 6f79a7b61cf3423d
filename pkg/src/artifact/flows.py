"""Time steppers for MCF, the mean De Turck flow and the coupled harmonic map flow.

Mean curvature flow moves every free node by the harmonic-map Laplacian

    ΔX = g^{ij}(∂²_ij X − Γ^k_ij ∂_kX + Γ̄(∂_iX, ∂_jX)) = H,

the De Turck flow replaces Γ(g) by the connection Γ̂ of a fixed background
metric ĝ on the parameter domain, and the harmonic map flow evolves a map
F: (M, g(t)) → (M, ĝ) by the same operator with target Christoffels Γ̂(F).

Steps are explicit; ``dt = c_cfl / max_nodes Σ_i g^{ii}/h_i²`` unless a fixed
``dt`` is configured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from .ambient import AmbientModel, distance
from .errors import ArgumentError, ConstructionError, DegeneracyError, GaugeError, InstabilityError
from .immersion import (
    ImmersionField,
    InducedGeometry,
    ParameterGrid,
    grid_derivatives,
    induced_geometry,
    metric_intrinsic_curvature,
    gauss_intrinsic_curvature,
)

__all__ = [
    "FlowConfig",
    "FlowState",
    "FlowHistory",
    "Background",
    "MapField",
    "CutoffFamily",
    "mcf_step",
    "deturck_step",
    "harmonic_flow_step",
    "harmonic_laplacian",
    "run_flow",
    "coupled_run",
    "gauge_compose",
    "displacement_monitor",
    "metric_equivalence_monitor",
    "diffeo_monitor",
    "commutation_check",
    "metric_evolution_check",
    "gradient_estimate_monitor",
    "uniqueness_experiment",
    "isometry_equivariance_check",
    "build_cutoff",
    "covariant_derivative",
]

_SCHEMES = ("explicit-euler", "rk4-in-time")
_GAUGES = ("geometric", "deturck")


@dataclass(frozen=True)
class FlowConfig:
    """Scheme parameters.

    Attributes
    ----------
    scheme : {"explicit-euler", "rk4-in-time"}
    c_cfl : float
        CFL constant in (0, 0.25].
    T : float
        Final time.
    gauge : {"geometric", "deturck"}
    dt : float, optional
        Fixed time step overriding the CFL rule.
    max_halvings : int
        Roll-back attempts on a degenerate step.
    """

    scheme: str = "explicit-euler"
    c_cfl: float = 0.1
    T: float = 0.1
    gauge: str = "geometric"
    dt: float | None = None
    max_halvings: int = 8

    def __post_init__(self) -> None:
        if self.scheme not in _SCHEMES:
            raise ArgumentError(f"unknown scheme {self.scheme!r}")
        if self.gauge not in _GAUGES:
            raise ArgumentError(f"unknown gauge {self.gauge!r}")
        if not 0 < self.c_cfl <= 0.25:
            raise ArgumentError("c_cfl must lie in (0, 0.25]")
        if not self.T > 0:
            raise ArgumentError("T must be positive")
        if self.dt is not None and not self.dt > 0:
            raise ArgumentError("dt must be positive")


# -- background metric and interpolation -------------------------------------------------


def _periodic_spline(x: NDArray, y: NDArray, period: float) -> CubicSpline:
    xx = np.concatenate([x, [x[0] + period]])
    yy = np.concatenate([y, y[:1]], axis=0)
    return CubicSpline(xx, yy, axis=0, bc_type="periodic")


class _NodeInterpolator:
    """Interpolates a node field at arbitrary parameter positions."""

    def __init__(self, grid: ParameterGrid, values: NDArray):
        self.grid = grid
        self.shape = values.shape[grid.dim:]
        flat = values.reshape(grid.shape + (-1,))
        ax = grid.axes()
        if grid.kind == "circle":
            self._f = _periodic_spline(ax[0], flat, 2 * math.pi)
        elif grid.kind == "interval":
            self._f = CubicSpline(ax[0], flat, axis=0)
        elif grid.kind == "torus":
            a0 = np.concatenate([ax[0][-2:] - 2 * math.pi, ax[0], ax[0][:2] + 2 * math.pi])
            a1 = np.concatenate([ax[1][-2:] - 2 * math.pi, ax[1], ax[1][:2] + 2 * math.pi])
            padded = np.pad(flat, ((2, 2), (2, 2), (0, 0)), mode="wrap")
            self._f = RegularGridInterpolator((a0, a1), padded, method="cubic")
        else:
            raise ArgumentError("interpolation is not available on sphere grids")

    def __call__(self, pos: NDArray) -> NDArray:
        lead = pos.shape[:-1]
        if self.grid.kind == "circle":
            out = self._f(np.mod(pos[..., 0], 2 * math.pi))
        elif self.grid.kind == "interval":
            out = self._f(pos[..., 0])
        else:
            p = np.mod(pos.reshape(-1, 2), 2 * math.pi)
            out = self._f(p).reshape(lead + (-1,))
        return out.reshape(lead + self.shape)


@dataclass
class Background:
    """Fixed metric ĝ on the parameter domain with its Christoffel symbols."""

    grid: ParameterGrid
    ghat: NDArray
    christoffel: NDArray
    _interp: _NodeInterpolator | None = field(default=None, repr=False)

    @classmethod
    def from_geometry(cls, geom: InducedGeometry) -> "Background":
        """Freeze the induced metric and connection of ``geom``."""
        return cls(geom.grid, geom.g.copy(), geom.christoffel.copy())

    @classmethod
    def from_metric(cls, grid: ParameterGrid, ghat: ArrayLike) -> "Background":
        """Levi-Civita connection of a metric field by centered differences."""
        ghat = np.asarray(ghat, dtype=float)
        dg, _ = grid_derivatives(grid, ghat)
        ginv = np.linalg.inv(ghat)
        # dg[..., m, i, j] = ∂_m g_ij; low[..., i, j, l] = Γ_{l,ij}
        low = 0.5 * (
            np.einsum("...ijl->...ijl", dg)
            + np.einsum("...jil->...ijl", dg)
            - np.einsum("...lij->...ijl", dg)
        )
        chris = np.einsum("...kl,...ijl->...kij", ginv, low)
        return cls(grid, ghat, chris)

    @classmethod
    def flat(cls, grid: ParameterGrid) -> "Background":
        n = grid.dim
        return cls(grid, np.broadcast_to(np.eye(n), grid.shape + (n, n)).copy(), np.zeros(grid.shape + (n, n, n)))

    def christoffel_at(self, pos: NDArray) -> NDArray:
        """Γ̂ at parameter positions ``pos`` (cubic interpolation)."""
        if self._interp is None:
            self._interp = _NodeInterpolator(self.grid, self.christoffel)
        return self._interp(pos)

    def metric_at(self, pos: NDArray) -> NDArray:
        return _NodeInterpolator(self.grid, self.ghat)(pos)


# -- states and steps -----------------------------------------------------------------------------


@dataclass
class FlowState:
    """Current time, immersion and cached geometry plus diagnostic series."""

    t: float
    field: ImmersionField
    geom: InducedGeometry
    series: dict = field(default_factory=lambda: {"t": [], "sup_A": [], "volume": []})
    steps: int = 0

    @classmethod
    def start(cls, fld: ImmersionField, t: float = 0.0) -> "FlowState":
        st = cls(t, fld, induced_geometry(fld))
        st._record()
        return st

    def _record(self) -> None:
        self.series["t"].append(self.t)
        self.series["sup_A"].append(float(np.max(self.geom.A)))
        self.series["volume"].append(self.geom.volume())


def mcf_velocity(geom: InducedGeometry) -> NDArray:
    """ΔX = H at every node, zero on the frozen band."""
    v = geom.H.copy()
    v[~geom.grid.free_mask()] = 0.0
    return v


def deturck_velocity(geom: InducedGeometry, background: Background) -> NDArray:
    """g^{ij}(∂²X + Γ̄(∂X, ∂X) − Γ̂^k_ij ∂_kX)."""
    tang = np.einsum("...kij,...ka->...ija", background.christoffel, geom.dX)
    v = np.einsum("...ij,...ija->...a", geom.ginv, geom.W - tang)
    if geom.grid.kind == "sphere":
        v[0] = geom.H[0]
        v[-1] = geom.H[-1]
    v[~geom.grid.free_mask()] = 0.0
    return v


def _cfl_dt(geom: InducedGeometry, cfg: FlowConfig) -> float:
    if cfg.dt is not None:
        return cfg.dt
    return cfg.c_cfl / geom.cfl_scale()


def _geom_of(fld: ImmersionField, X: NDArray) -> InducedGeometry:
    new = fld.copy(X)
    if new.grid.kind == "sphere":
        new.X[0] = new.X[0, 0]
        new.X[-1] = new.X[-1, 0]
    return induced_geometry(new)


def _advance(state: FlowState, cfg: FlowConfig, vel: Callable[[InducedGeometry], NDArray],
             dt: float | None) -> FlowState:
    dt = _cfl_dt(state.geom, cfg) if dt is None else dt
    X0 = state.field.X
    supA = float(np.max(state.geom.A))
    for _ in range(cfg.max_halvings + 1):
        try:
            if cfg.scheme == "explicit-euler":
                X1 = X0 + dt * vel(state.geom)
            else:
                k1 = vel(state.geom)
                k2 = vel(_geom_of(state.field, X0 + 0.5 * dt * k1))
                k3 = vel(_geom_of(state.field, X0 + 0.5 * dt * k2))
                k4 = vel(_geom_of(state.field, X0 + dt * k3))
                X1 = X0 + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            geom = _geom_of(state.field, X1)
            break
        except DegeneracyError:
            dt *= 0.5
    else:
        raise DegeneracyError("metric degenerate after repeated step halving")
    new_supA = float(np.max(geom.A))
    if not np.isfinite(new_supA) or (supA > 0 and new_supA > 10 * supA and new_supA > 1e-8):
        raise InstabilityError(f"sup|A| jumped from {supA:.3g} to {new_supA:.3g} in one step")
    new = FlowState(state.t + dt, geom.field, geom, state.series, state.steps + 1)
    new._record()
    return new


def mcf_step(state: FlowState, cfg: FlowConfig, dt: float | None = None) -> FlowState:
    """One step of ∂ₜX = ΔX.

    Raises
    ------
    InstabilityError
        If sup|A| grows more than tenfold in one step.
    DegeneracyError
        If the metric stays degenerate after ``max_halvings`` halvings of dt.
    """
    return _advance(state, cfg, mcf_velocity, dt)


def deturck_step(state: FlowState, background: Background, cfg: FlowConfig,
                 dt: float | None = None) -> FlowState:
    """One step of the mean De Turck flow with background connection Γ̂."""
    return _advance(state, cfg, lambda g: deturck_velocity(g, background), dt)


@dataclass
class FlowHistory:
    """Recorded samples of a run (positions and the pointwise data audits need)."""

    grid: ParameterGrid
    model: AmbientModel
    times: list = field(default_factory=list)
    X: list = field(default_factory=list)
    A2: list = field(default_factory=list)
    H: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    final: FlowState | None = None

    def add(self, state: FlowState) -> None:
        self.times.append(state.t)
        self.X.append(state.field.X.copy())
        self.A2.append(state.geom.A2.copy())
        self.H.append(state.geom.H.copy())
        self.weights.append(state.geom.weights.copy())

    def __len__(self) -> int:
        return len(self.times)


def run_flow(
    fld: ImmersionField,
    cfg: FlowConfig,
    T: float | None = None,
    *,
    background: Background | None = None,
    record_every: int = 1,
    sample_times: Sequence[float] | None = None,
    callback: Callable[[FlowState], None] | None = None,
) -> FlowHistory:
    """Run MCF (or De Turck when ``cfg.gauge == 'deturck'``) up to ``T``.

    Samples are recorded every ``record_every`` steps, or exactly at
    ``sample_times`` when given (the step is shortened to land on each one).
    """
    T = cfg.T if T is None else T
    if cfg.gauge == "deturck" and background is None:
        background = Background.from_geometry(induced_geometry(fld))
    state = FlowState.start(fld)
    hist = FlowHistory(fld.grid, fld.model)
    targets = None if sample_times is None else sorted(float(s) for s in sample_times if s <= T)
    if targets is None or (targets and targets[0] == 0.0):
        hist.add(state)
        if targets:
            targets.pop(0)

    def step(st, dt):
        if cfg.gauge == "deturck":
            return deturck_step(st, background, cfg, dt)
        return mcf_step(st, cfg, dt)

    while state.t < T * (1 - 1e-14):
        dt = _cfl_dt(state.geom, cfg)
        stop = min(T, targets[0]) if targets else T
        hit = False
        if state.t + dt >= stop * (1 - 1e-14):
            dt = stop - state.t
            hit = True
        state = step(state, dt)
        if callback is not None:
            callback(state)
        if targets is not None:
            if hit and targets and abs(state.t - targets[0]) <= 1e-12 * max(1.0, targets[0]):
                hist.add(state)
                targets.pop(0)
        elif state.steps % record_every == 0 or state.t >= T * (1 - 1e-14):
            hist.add(state)
    hist.final = state
    return hist


# -- harmonic map flow ------------------------------------------------------------------------------


@dataclass
class MapField:
    """Map F: M → (M, ĝ) in parameter coordinates (lifted on periodic axes).

    Attributes
    ----------
    grid : ParameterGrid
    F : ndarray, shape grid.shape + (n,)
    background : Background
        Target metric ĝ, frozen for the run.
    t : float
    dirichlet : bool
        Pin the frozen boundary band to the identity.
    """

    grid: ParameterGrid
    F: NDArray
    background: Background
    t: float = 0.0
    dirichlet: bool = False

    @classmethod
    def identity(cls, background: Background, dirichlet: bool = False) -> "MapField":
        grid = background.grid
        F = np.stack(grid.mesh(), axis=-1)
        return cls(grid, F, background, 0.0, dirichlet)

    def identity_coords(self) -> NDArray:
        return np.stack(self.grid.mesh(), axis=-1)

    def derivatives(self) -> tuple[NDArray, NDArray]:
        """∂F and ∂²F (periodic axes differentiate F − id)."""
        grid = self.grid
        n = grid.dim
        if grid.kind == "interval":
            return grid_derivatives(grid, self.F)
        u = self.F - self.identity_coords()
        d1, d2 = grid_derivatives(grid, u)
        d1 = d1 + np.eye(n)
        return d1, d2

    def copy(self, F: NDArray | None = None, t: float | None = None) -> "MapField":
        return MapField(self.grid, np.array(self.F if F is None else F), self.background,
                        self.t if t is None else t, self.dirichlet)


def _target_gamma(mp: MapField) -> Callable[[NDArray, NDArray], NDArray]:
    gh = mp.background.christoffel_at(mp.F)

    def contract(u, v, gh=gh):
        extra = u.ndim - gh.ndim + 2
        g = gh.reshape(gh.shape[:-3] + (1,) * max(extra - 1, 0) + gh.shape[-3:]) if extra > 1 else gh
        return np.einsum("...abc,...b,...c->...a", g, u, v)

    return contract


def harmonic_laplacian(mp: MapField, geom: InducedGeometry) -> NDArray:
    """Δ_{g,ĝ}F = g^{ij}(∂²_ij F − Γ^k_ij ∂_kF + Γ̂(F)(∂_iF, ∂_jF))."""
    dF, d2F = mp.derivatives()
    gh = mp.background.christoffel_at(mp.F)
    term = d2F - np.einsum("...kij,...ka->...ija", geom.christoffel, dF)
    term = term + np.einsum("...abc,...ib,...jc->...ija", gh, dF, dF)
    return np.einsum("...ij,...ija->...a", geom.ginv, term)


def harmonic_flow_step(mp: MapField, driving: FlowState, cfg: FlowConfig, dt: float) -> MapField:
    """Explicit Euler step of ∂ₜF = Δ_{g(t),ĝ}F with g(t) from ``driving``."""
    lap = harmonic_laplacian(mp, driving.geom)
    F1 = mp.F + dt * lap
    if mp.dirichlet:
        pinned = ~mp.grid.free_mask()
        F1[pinned] = mp.identity_coords()[pinned]
    if not np.all(np.isfinite(F1)):
        raise InstabilityError("harmonic map flow produced non-finite values")
    return mp.copy(F1, mp.t + dt)


def displacement_monitor(mp: MapField) -> float:
    """sup_x d̂(x, F(x, t)) in the target metric ĝ.

    On one-dimensional grids d̂ is the ĝ-length of the parameter interval
    between x and F(x); on surfaces the first-order value √ĝ_x(F−x, F−x).
    """
    grid = mp.grid
    x = mp.identity_coords()
    if grid.dim == 1:
        s = x[..., 0]
        speed = np.sqrt(mp.background.ghat[..., 0, 0])
        h = grid.spacing[0]
        if grid.kind == "circle":
            cum = np.concatenate([[0.0], np.cumsum(0.5 * (speed + np.roll(speed, -1)) * h)])
            sc = np.concatenate([s, [s[0] + 2 * np.pi]])
            length = cum[-1]
            spl = CubicSpline(sc, cum - length * (sc - sc[0]) / (2 * np.pi), bc_type="periodic")

            def arclen(p):
                k = np.floor((p - s[0]) / (2 * np.pi))
                q = p - 2 * np.pi * k
                return spl(q) + length * (q - s[0]) / (2 * np.pi) + k * length
        else:
            cum = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * h)])
            spl = CubicSpline(s, cum)

            def arclen(p):
                return spl(p)
        return float(np.max(np.abs(arclen(mp.F[..., 0]) - arclen(s))))
    d = mp.F - x
    q = np.einsum("...ij,...i,...j->...", mp.background.ghat, d, d)
    return float(np.sqrt(np.max(q)))


def pullback_metric(mp: MapField) -> NDArray:
    """(F*ĝ)_ij = ĝ_ab(F) ∂_iF^a ∂_jF^b."""
    dF, _ = mp.derivatives()
    gh = mp.background.metric_at(mp.F)
    return np.einsum("...ab,...ia,...jb->...ij", gh, dF, dF)


def metric_equivalence_monitor(state: FlowState, mp: MapField) -> tuple[float, float]:
    """Extreme generalized eigenvalues λ of F*ĝ v = λ g v over all nodes."""
    pb = pullback_metric(mp)
    g = state.geom.g
    m = np.linalg.solve(g, pb)
    ev = np.linalg.eigvals(m).real
    return float(np.min(ev)), float(np.max(ev))


def diffeo_monitor(mp: MapField) -> tuple[float, bool]:
    """(min det DF, injective) with injectivity by cell-occupancy hashing.

    Images of the nodes are binned into cells of side ½·h·max(σ_min, 1e−3),
    σ_min the smallest singular value of DF; a shared cell means two nodes
    map to the same place at grid resolution.
    """
    dF, _ = mp.derivatives()
    det = np.linalg.det(dF)
    sv = np.linalg.svd(dF, compute_uv=False)
    smin = float(np.min(sv))
    cell = 0.5 * mp.grid.h * max(smin, 1e-3)
    img = mp.F.reshape(-1, mp.grid.dim).copy()
    for ax, per in enumerate(mp.grid.periodic):
        if per:
            img[:, ax] = np.mod(img[:, ax], 2 * np.pi)
    keys = np.floor(img / cell).astype(np.int64)
    uniq = np.unique(keys, axis=0)
    injective = uniq.shape[0] == keys.shape[0]
    if injective and mp.grid.dim == 1 and mp.grid.kind == "circle":
        f = mp.F[..., 0]
        wrap = f[0] + 2 * np.pi - f[-1]
        injective = bool(np.all(np.diff(f) > 0) and wrap > 0) or bool(np.all(np.diff(f) < 0) and wrap < 0)
    return float(np.min(det)), bool(injective)


@dataclass
class CoupledHistory:
    """Samples of a shrinking-surface run coupled with the harmonic map flow."""

    times: list = field(default_factory=list)
    displacement: list = field(default_factory=list)
    eig_min: list = field(default_factory=list)
    eig_max: list = field(default_factory=list)
    min_det: list = field(default_factory=list)
    injective: list = field(default_factory=list)
    states: list = field(default_factory=list)
    maps: list = field(default_factory=list)
    background: Background | None = None


def coupled_run(
    fld: ImmersionField,
    cfg: FlowConfig,
    T: float,
    *,
    t_freeze: float = 0.0,
    dirichlet: bool = False,
    sample_times: Sequence[float] | None = None,
    keep_states: bool = False,
) -> CoupledHistory:
    """MCF driving the harmonic map flow with F(0) = id and ĝ = g(t_freeze).

    Monitors (displacement, metric equivalence, diffeomorphism) are evaluated
    at every step, or at ``sample_times`` when given.
    """
    if t_freeze > 0:
        pre = run_flow(fld, cfg, t_freeze)
        bg = Background.from_geometry(pre.final.geom)
    else:
        bg = Background.from_geometry(induced_geometry(fld))
    state = FlowState.start(fld)
    mp = MapField.identity(bg, dirichlet=dirichlet)
    out = CoupledHistory(background=bg)
    targets = None if sample_times is None else sorted(float(s) for s in sample_times if s <= T)

    def record():
        out.times.append(state.t)
        out.displacement.append(displacement_monitor(mp))
        lo, hi = metric_equivalence_monitor(state, mp)
        out.eig_min.append(lo)
        out.eig_max.append(hi)
        det, inj = diffeo_monitor(mp)
        out.min_det.append(det)
        out.injective.append(inj)
        if keep_states:
            out.states.append(state)
            out.maps.append(mp)

    if targets is None or (targets and targets[0] == 0.0):
        record()
        if targets:
            targets.pop(0)
    while state.t < T * (1 - 1e-14):
        dt = _cfl_dt(state.geom, cfg)
        stop = min(T, targets[0]) if targets else T
        hit = state.t + dt >= stop * (1 - 1e-14)
        if hit:
            dt = stop - state.t
        new_map = harmonic_flow_step(mp, state, cfg, dt)
        state = mcf_step(state, cfg, dt)
        mp = new_map
        if targets is None:
            record()
        elif hit and targets:
            record()
            targets.pop(0)
    return out


def gauge_compose(state: FlowState, mp: MapField) -> ImmersionField:
    """X̄ = X ∘ F⁻¹ by periodic cubic inverse interpolation (closed curves).

    Raises
    ------
    GaugeError
        If F is not a monotone degree-one map of the circle.
    """
    grid = state.field.grid
    if grid.kind != "circle":
        raise GaugeError("gauge composition is implemented for closed curves")
    det, inj = diffeo_monitor(mp)
    if det <= 0 or not inj:
        raise GaugeError("reparametrization is not invertible")
    s = grid.axes()[0]
    f = mp.F[..., 0]
    # F⁻¹ at the nodes: invert the monotone lift, then interpolate X periodically
    ff = np.concatenate([f - 2 * np.pi, f, f + 2 * np.pi])
    ss = np.concatenate([s - 2 * np.pi, s, s + 2 * np.pi])
    inv = CubicSpline(ff, ss)(s)
    spline = _periodic_spline(s, state.field.X, 2 * np.pi)
    Xbar = spline(np.mod(inv, 2 * np.pi))
    return state.field.copy(Xbar)


# -- covariant derivatives and identity checks ---------------------------------------------------------


def covariant_derivative(
    grid: ParameterGrid,
    u: NDArray,
    chris: NDArray,
    dF: NDArray,
    target: Callable[[NDArray, NDArray], NDArray],
    p: int,
) -> NDArray:
    """∇u for a section u of (T*M)^{⊗p} ⊗ F⁻¹TN.

    ``u`` has shape grid.shape + (n,)*p + (m,); the result gains one more
    lower index in last position:

        (∇u)_{I k} = ∂_k u_I − Σ_slots Γ^l_{k i_s} u_{…l…} + Γ_N(∂_kF, u_I).
    """
    nd = grid.dim
    n = grid.dim
    du, _ = grid_derivatives(grid, u)
    # du: grid + (k,) + (n,)*p + (m,) → move k to the end of the lower indices
    du = np.moveaxis(du, nd, nd + p)
    out = du.copy()
    letters = "abcdefgh"[:p]
    for s in range(p):
        src = letters[:s] + "l" + letters[s + 1:]
        dst = letters + "k"
        out -= np.einsum(f"...lk{letters[s]},...{src}z->...{dst}z", chris, u)
    # target connection term
    for k in range(n):
        dfk = dF[..., k, :]
        dfk = dfk.reshape(dfk.shape[:nd] + (1,) * p + dfk.shape[-1:])
        dfk = np.broadcast_to(dfk, u.shape)
        out[(...,) + (slice(None),) * p + (k, slice(None))] += target(dfk, u)
    return out


def _ambient_target(geom: InducedGeometry) -> Callable[[NDArray, NDArray], NDArray]:
    X = geom.field.X
    model = geom.model

    def contract(a, b):
        extra = a.ndim - X.ndim
        Xb = X.reshape(X.shape[:-1] + (1,) * extra + X.shape[-1:])
        return model.gamma(Xb, a, b)

    return contract


def _map_target(gh: NDArray) -> Callable[[NDArray, NDArray], NDArray]:
    def contract(a, b):
        extra = a.ndim - (gh.ndim - 2)
        g = gh.reshape(gh.shape[:-3] + (1,) * extra + gh.shape[-3:])
        return np.einsum("...abc,...b,...c->...a", g, a, b)

    return contract


def _norm_sup(u: NDArray, ginv: NDArray, gt: NDArray, p: int, mask: NDArray) -> float:
    """sup over nodes of the norm with g^{-1} on the lower and ĝ/ḡ on the upper index."""
    letters = "abcdefgh"[: 2 * p]
    lo, hi = letters[:p], letters[p:]
    expr = ",".join(f"...{lo[s]}{hi[s]}" for s in range(p))
    sq = np.einsum(f"...{lo}y,...{hi}z,{expr},...yz->...", u, u, *([ginv] * p), gt)
    return float(np.sqrt(np.max(np.abs(sq[mask]))))


def commutation_check(prev_state: FlowState, prev_map: MapField, next_state: FlowState,
                      next_map: MapField, k: int = 1) -> float:
    """Residual of the commutation identity for (D_t − Δ)∇ᵏF at the half step.

    For k = 1 the right-hand side is −R_i^l ∇_lF + R̂(∇_iF, ∇_kF)∇_lF g^{kl};
    for k = 2 (flat domain and target curvature) it is −(∂ₜΓ^p_ij)∇_pF.
    Time derivatives are forward differences; every spatial term is the
    average of its values at the two time levels.
    """
    if k not in (1, 2):
        raise ArgumentError("commutation check supports k = 1 or 2")
    dt = next_state.t - prev_state.t
    if not dt > 0:
        raise ArgumentError("states must be ordered in time")
    grid = prev_map.grid
    n = grid.dim
    mask = grid.free_mask() & grid.regular_mask()
    if grid.dim == 1 and grid.kind == "interval":
        mask[:2] = mask[-2:] = False

    def level(state, mp):
        dF, _ = mp.derivatives()
        gh = mp.background.christoffel_at(mp.F)
        tgt = _map_target(gh)
        B = covariant_derivative(grid, dF, state.geom.christoffel, dF, tgt, 1)
        lap1 = np.einsum("...jk,...ijkz->...iz", state.geom.ginv,
                         covariant_derivative(grid, B, state.geom.christoffel, dF, tgt, 2))
        lap_f = np.einsum("...ij,...ijz->...z", state.geom.ginv, B)
        return dF, B, lap1, lap_f, gh, tgt

    dF0, B0, L0, lf0, gh0, t0 = level(prev_state, prev_map)
    dF1, B1, L1, lf1, gh1, t1 = level(next_state, next_map)
    Fdot = (next_map.F - prev_map.F) / dt
    ghm = 0.5 * (gh0 + gh1)
    tgt_m = _map_target(ghm)
    dFm = 0.5 * (dF0 + dF1)
    ginv_m = 0.5 * (prev_state.geom.ginv + next_state.geom.ginv)
    gt_m = prev_map.background.metric_at(0.5 * (prev_map.F + next_map.F))

    if k == 1:
        lhs = (dF1 - dF0) / dt + tgt_m(dFm, np.broadcast_to(Fdot[..., None, :], dFm.shape)) - 0.5 * (L0 + L1)
        rhs = np.zeros_like(lhs)
        if n > 1:
            for st, mp, dF, w in ((prev_state, prev_map, dF0, 0.5), (next_state, next_map, dF1, 0.5)):
                rm = gauss_intrinsic_curvature(st.geom)
                ric = np.einsum("...ab,...iabl->...il", st.geom.ginv, rm)  # R_il = g^{ab} R_{a i b l}
                ric_up = np.einsum("...il,...lm->...im", ric, st.geom.ginv)
                rhs -= w * np.einsum("...im,...mz->...iz", ric_up, dF)
                rhat = _NodeInterpolator(grid, _target_riemann_up(mp.background))(mp.F)
                rhs += w * np.einsum("...zdbc,...ib,...kd,...lc,...kl->...iz", rhat, dF, dF, dF, st.geom.ginv)
        res = lhs - rhs
        return _norm_sup(res, ginv_m, gt_m, 1, mask)

    if n > 1:
        raise ArgumentError("k = 2 is implemented for curves (flat domain and target)")
    # k = 2
    lhs = (B1 - B0) / dt + tgt_m(0.5 * (B0 + B1), np.broadcast_to(Fdot[..., None, None, :], B0.shape))
    L2_0 = np.einsum("...kl,...ijklz->...ijz", prev_state.geom.ginv,
                     covariant_derivative(grid, covariant_derivative(grid, B0, prev_state.geom.christoffel, dF0, t0, 2),
                                          prev_state.geom.christoffel, dF0, t0, 3))
    L2_1 = np.einsum("...kl,...ijklz->...ijz", next_state.geom.ginv,
                     covariant_derivative(grid, covariant_derivative(grid, B1, next_state.geom.christoffel, dF1, t1, 2),
                                          next_state.geom.christoffel, dF1, t1, 3))
    lhs = lhs - 0.5 * (L2_0 + L2_1)
    dchris = (next_state.geom.christoffel - prev_state.geom.christoffel) / dt
    rhs = -np.einsum("...pij,...pz->...ijz", dchris, dFm)
    mask2 = mask.copy()
    if grid.kind == "interval":
        mask2[:3] = mask2[-3:] = False
    return _norm_sup(lhs - rhs, ginv_m, gt_m, 2, mask2)


def _target_riemann_up(bg: Background) -> NDArray:
    """R̂^a_bcd of the background metric (index order a, b, c, d)."""
    ginv = np.linalg.inv(bg.ghat)
    low = metric_intrinsic_curvature(SimpleNamespace(grid=bg.grid, g=bg.ghat, ginv=ginv))
    return np.einsum("...ae,...ebcd->...abcd", ginv, low)


class MetricEvolution(NamedTuple):
    residual: float
    dg_dt: NDArray
    formula: NDArray


def metric_evolution_check(prev: FlowState, nxt: FlowState) -> MetricEvolution:
    """Compare (g(t₁) − g(t₀))/Δt with −2ḡ(H, h_ij) averaged over the two levels."""
    dt = nxt.t - prev.t
    dg = (nxt.geom.g - prev.geom.g) / dt

    def formula(geom):
        return -2.0 * geom.lam[..., None, None] * np.einsum("...a,...ija->...ij", geom.H, geom.h)

    f = 0.5 * (formula(prev.geom) + formula(nxt.geom))
    m = prev.geom.grid.regular_mask() & prev.geom.grid.free_mask()
    res = float(np.max(np.abs(dg - f)[m])) if np.any(m) else 0.0
    return MetricEvolution(res, dg, f)


def gradient_estimate_monitor(state: FlowState, k: int) -> float:
    """t^{(k−2)/2} · sup|∇ᵏX|, with ∇²X = h and further covariant derivatives."""
    if k not in (3, 4):
        raise ArgumentError("gradient monitor supports k = 3 or 4")
    geom = state.geom
    grid = geom.grid
    tgt = _ambient_target(geom)
    u = geom.h
    for p in range(2, k):
        u = covariant_derivative(grid, u, geom.christoffel, geom.dX, tgt, p)
    mask = grid.regular_mask().copy()
    if grid.kind == "sphere":
        mask[: k + 1] = mask[-(k + 1):] = False
    if grid.kind == "interval":
        mask[: k + 1] = mask[-(k + 1):] = False
    lam = geom.lam
    gt = lam[..., None, None] * np.eye(geom.model.dim)
    val = _norm_sup(u, geom.ginv, gt, k, mask)
    return state.t ** ((k - 2) / 2.0) * val


# -- uniqueness and equivariance ------------------------------------------------------------------


class UniquenessReport(NamedTuple):
    times: NDArray
    u: NDArray
    gronwall_slope: float


def discrete_normals(geom: InducedGeometry) -> NDArray:
    """Unit normal of a curve in a surface-dimensional ambient (n̄ = 2, n = 1)."""
    if geom.grid.dim != 1 or geom.model.dim != 2:
        raise ArgumentError("discrete normals are implemented for plane curves")
    t = geom.dX[..., 0, :]
    nrm = np.stack([t[..., 1], -t[..., 0]], axis=-1)
    return nrm / np.sqrt(geom.lam * np.sum(nrm * nrm, axis=-1))[..., None]


def _sample_run(fld: ImmersionField, bg: Background, cfg: FlowConfig, times: Sequence[float]) -> list[NDArray]:
    hist = run_flow(fld, FlowConfig(cfg.scheme, cfg.c_cfl, max(times), "deturck", cfg.dt, cfg.max_halvings),
                    max(times), background=bg, sample_times=times)
    return hist.X


def _sup_dist2(model: AmbientModel, X1: NDArray, X2: NDArray) -> float:
    if model.kind == "euclidean":
        return float(np.max(np.sum((X1 - X2) ** 2, axis=-1)))
    a = X1.reshape(-1, model.dim)
    b = X2.reshape(-1, model.dim)
    return max(distance(model, p, q) ** 2 for p, q in zip(a, b))


def uniqueness_experiment(
    initial: ImmersionField,
    eta: float,
    cfg1: FlowConfig,
    cfg2: FlowConfig,
    times: Sequence[float],
    *,
    profile: NDArray | None = None,
) -> UniquenessReport:
    """u(t) = sup d̄²(X̄₁, X̄₂) for two De Turck runs with the same background.

    The second run starts from X₀ + η·profile·ν with ν the discrete unit
    normal. The Gronwall slope is max_t log(u(t)/u(0))/t (zero when η = 0).
    """
    geom0 = induced_geometry(initial)
    bg = Background.from_geometry(geom0)
    times = sorted(float(t) for t in times)
    if times[0] != 0.0:
        times = [0.0] + times
    second = initial
    if eta > 0:
        nu = discrete_normals(geom0)
        prof = np.ones(initial.grid.shape) if profile is None else np.asarray(profile)
        second = initial.copy(initial.X + eta * prof[..., None] * nu)
    X1 = _sample_run(initial, bg, cfg1, times)
    X2 = _sample_run(second, bg, cfg2, times)
    u = np.array([_sup_dist2(initial.model, a, b) for a, b in zip(X1, X2)])
    tt = np.asarray(times)
    slope = 0.0
    if u[0] > 0:
        with np.errstate(divide="ignore"):
            rates = np.log(u[1:] / u[0]) / tt[1:]
        slope = float(np.max(rates))
    return UniquenessReport(tt, u, slope)


def isometry_equivariance_check(
    initial: ImmersionField,
    sigma: Callable[[NDArray], NDArray],
    cfg: FlowConfig,
    T: float | None = None,
) -> float:
    """sup node distance between flow(σ∘X₀) and σ∘flow(X₀) at the final time."""
    T = cfg.T if T is None else T
    a = run_flow(initial, cfg, T, record_every=10**9).final.field.X
    b = run_flow(initial.copy(sigma(initial.X)), cfg, T, record_every=10**9).final.field.X
    return math.sqrt(_sup_dist2(initial.model, sigma(a), b))


# -- cutoff family ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class CutoffFamily:
    """ξ_k(s) = σ(τ)^p, τ = (b − s)/(b − a), σ(τ) = 6τ⁵ − 15τ⁴ + 10τ³ on [0, 1].

    ξ = 1 for s ≤ a = 1/2 + 2^{−(k+1)} and ξ = 0 for s ≥ b = 1/2 + 2^{−k}.
    Near the outer edge ξ ~ τ^{3p}, so |ξ′| + |ξ″| ≤ C ξ^{1−ε} once 3pε ≥ 2.
    """

    k: int
    eps: float
    power: int
    C: float

    @property
    def a(self) -> float:
        return 0.5 + 2.0 ** (-(self.k + 1))

    @property
    def b(self) -> float:
        return 0.5 + 2.0 ** (-self.k)

    def _tau(self, s):
        return np.clip((self.b - np.asarray(s, dtype=float)) / (self.b - self.a), 0.0, 1.0)

    def __call__(self, s: ArrayLike) -> NDArray:
        t = self._tau(s)
        return (t**3 * (10 - 15 * t + 6 * t * t)) ** self.power

    def derivatives(self, s: ArrayLike) -> tuple[NDArray, NDArray]:
        """(ξ′, ξ″) in s."""
        t = self._tau(s)
        inside = (t > 0) & (t < 1)
        sig = t**3 * (10 - 15 * t + 6 * t * t)
        ds = 30 * t * t * (1 - t) ** 2
        dds = 60 * t * (1 - t) * (1 - 2 * t)
        p = self.power
        w = self.b - self.a
        with np.errstate(divide="ignore", invalid="ignore"):
            d1 = -p * sig ** (p - 1) * ds / w
            d2 = (p * (p - 1) * sig ** (p - 2) * ds**2 + p * sig ** (p - 1) * dds) / w**2
        d1 = np.where(inside, d1, 0.0)
        d2 = np.where(inside, d2, 0.0)
        return d1, d2

    def sampled_ratio(self, n: int = 20001) -> tuple[float, int]:
        """max of (|ξ′| + |ξ″|)/ξ^{1−ε} over the band and the argmax index."""
        s = np.linspace(self.a, self.b, n)[:-1]
        xi = self(s)
        d1, d2 = self.derivatives(s)
        pos = xi > 0
        r = np.zeros_like(s)
        r[pos] = (np.abs(d1[pos]) + np.abs(d2[pos])) / xi[pos] ** (1 - self.eps)
        i = int(np.argmax(r))
        return float(r[i]), i


def build_cutoff(k: int, eps: float, *, max_power: int = 200, samples: int = 20001) -> CutoffFamily:
    """Construct ξ_k and record the sampled constant C_{k,ε}.

    The power starts at the smallest p with 3pε ≥ 2 and is raised while the
    sampled ratio peaks at the outer edge of the band (a sign of blow-up).

    Raises
    ------
    ConstructionError
        If no power up to ``max_power`` passes.
    """
    if int(k) != k or k < 1:
        raise ArgumentError("k must be an integer >= 1")
    if not 0 < eps <= 0.5:
        raise ArgumentError("eps must lie in (0, 1/2]")
    p = max(1, math.ceil(2.0 / (3.0 * eps) - 1e-12))
    while p <= max_power:
        fam = CutoffFamily(int(k), float(eps), p, 0.0)
        ratio, idx = fam.sampled_ratio(samples)
        s = np.linspace(fam.a, fam.b, samples)[:-1]
        xi = fam(s)
        mono = bool(np.all(np.diff(xi) <= 1e-15))
        last_pos = int(np.max(np.nonzero(xi > 0)[0]))
        if np.isfinite(ratio) and mono and idx < last_pos - 1:
            return CutoffFamily(int(k), float(eps), p, ratio)
        p += 1
    raise ConstructionError("cutoff profile failed the sampled derivative bound")
