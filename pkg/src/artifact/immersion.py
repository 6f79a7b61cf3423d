"""Discrete immersions on structured parameter grids and their induced geometry.

An immersion stores the ambient chart coordinates X^α of every grid node.
From centered differences of X the module assembles

    g_ij  = ḡ_αβ ∂_iX^α ∂_jX^β,
    W_ij  = ∂²_ij X + Γ̄(∂_iX, ∂_jX),
    Γ^k_ij = g^{kl} ḡ(W_ij, ∂_lX),
    h_ij  = W_ij − Γ^k_ij ∂_kX,
    H     = g^{ij} h_ij,   |A|² = g^{ik} g^{jl} ḡ(h_ij, h_kl).

Grids
-----
``circle``      one periodic axis.
``interval``    one open axis with a frozen Dirichlet band at both ends.
``torus``       two periodic axes.
``sphere``      latitude × longitude including both poles. Pole rows hold a
                single shared position; their tensors are the longitude average
                of the adjacent ring and their mean curvature vector comes from
                the polar form of the Laplacian, 4(X̄_ring − X_pole)/s².
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .ambient import (
    INFINITE_RADIUS,
    AmbientModel,
    bounds_report,
    log_map,
)
from .errors import ArgumentError, DegeneracyError, MultiSheetError, PreconditionError, ResolutionError

__all__ = [
    "ParameterGrid",
    "ImmersionField",
    "InducedGeometry",
    "GraphPatch",
    "GraphCheck",
    "InjectivityBound",
    "induced_geometry",
    "gauss_intrinsic_curvature",
    "metric_intrinsic_curvature",
    "gauss_residual",
    "gaussian_curvature",
    "injectivity_lower_bound",
    "local_graph_extract",
    "lipschitz_graph_check",
    "shapes",
    "write_csv",
    "read_csv",
    "diff1",
    "diff2",
]


@dataclass(frozen=True)
class ParameterGrid:
    """Structured parameter grid.

    Attributes
    ----------
    kind : {"circle", "interval", "torus", "sphere"}
    shape : tuple of int
        Node counts per axis. For ``sphere`` this is (n_lat, n_lon) with both
        poles included in the latitude axis.
    spacing : tuple of float
    origin : tuple of float
        Parameter value of node 0 on each axis.
    band : int
        Width of the frozen boundary band (``interval`` only).
    """

    kind: str
    shape: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...]
    band: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("circle", "interval", "torus", "sphere"):
            raise ArgumentError(f"unknown grid kind {self.kind!r}")
        if min(self.shape) < 8:
            raise ArgumentError("grids need at least 8 nodes per axis")
        if min(self.spacing) <= 0:
            raise ArgumentError("grid spacing must be positive")
        if self.kind == "sphere" and self.shape[1] % 2:
            raise ArgumentError("sphere grids need an even longitude count")

    @classmethod
    def circle(cls, n: int) -> "ParameterGrid":
        return cls("circle", (n,), (2 * math.pi / n,), (0.0,))

    @classmethod
    def interval(cls, n: int, a: float, b: float, band: int = 2) -> "ParameterGrid":
        return cls("interval", (n,), ((b - a) / (n - 1),), (float(a),), band=band)

    @classmethod
    def torus(cls, n1: int, n2: int) -> "ParameterGrid":
        return cls("torus", (n1, n2), (2 * math.pi / n1, 2 * math.pi / n2), (0.0, 0.0))

    @classmethod
    def sphere(cls, n_lon: int, n_lat: int) -> "ParameterGrid":
        return cls("sphere", (n_lat, n_lon), (math.pi / (n_lat - 1), 2 * math.pi / n_lon), (0.0, 0.0))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def periodic(self) -> tuple[bool, ...]:
        return {
            "circle": (True,),
            "interval": (False,),
            "torus": (True, True),
            "sphere": (False, True),
        }[self.kind]

    @property
    def h(self) -> float:
        """Smallest spacing."""
        return min(self.spacing)

    def axes(self) -> list[NDArray]:
        return [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.shape)]

    def mesh(self) -> list[NDArray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def regular_mask(self) -> NDArray:
        """Nodes where the stencils of the interior scheme apply."""
        m = np.ones(self.shape, dtype=bool)
        if self.kind == "sphere":
            m[0] = m[-1] = False
        return m

    def free_mask(self) -> NDArray:
        """Nodes allowed to move in a flow."""
        m = np.ones(self.shape, dtype=bool)
        if self.kind == "interval" and self.band > 0:
            m[: self.band] = False
            m[-self.band :] = False
        return m

    def refine(self) -> "ParameterGrid":
        """Grid with the spacing halved (same parameter domain)."""
        if self.kind == "circle":
            return ParameterGrid.circle(2 * self.shape[0])
        if self.kind == "torus":
            return ParameterGrid.torus(2 * self.shape[0], 2 * self.shape[1])
        if self.kind == "sphere":
            return ParameterGrid.sphere(2 * self.shape[1], 2 * (self.shape[0] - 1) + 1)
        a = self.origin[0]
        b = a + self.spacing[0] * (self.shape[0] - 1)
        return ParameterGrid.interval(2 * (self.shape[0] - 1) + 1, a, b, band=2 * self.band)


# -- finite-difference stencils ----------------------------------------------------------


def diff1(a: NDArray, axis: int, h: float, periodic: bool) -> NDArray:
    """Second-order first derivative along ``axis`` (one-sided at open ends)."""
    if periodic:
        return (np.roll(a, -1, axis) - np.roll(a, 1, axis)) / (2 * h)
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - a[:-2]) / (2 * h)
    out[0] = (-3 * a[0] + 4 * a[1] - a[2]) / (2 * h)
    out[-1] = (3 * a[-1] - 4 * a[-2] + a[-3]) / (2 * h)
    return np.moveaxis(out, 0, axis)


def diff2(a: NDArray, axis: int, h: float, periodic: bool) -> NDArray:
    """Second-order second derivative along ``axis`` (one-sided at open ends)."""
    if periodic:
        return (np.roll(a, -1, axis) - 2 * a + np.roll(a, 1, axis)) / (h * h)
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - 2 * a[1:-1] + a[:-2]) / (h * h)
    out[0] = (2 * a[0] - 5 * a[1] + 4 * a[2] - a[3]) / (h * h)
    out[-1] = (2 * a[-1] - 5 * a[-2] + 4 * a[-3] - a[-4]) / (h * h)
    return np.moveaxis(out, 0, axis)


def grid_derivatives(grid: ParameterGrid, a: NDArray) -> tuple[NDArray, NDArray]:
    """First and second parameter derivatives of a node field.

    Returns arrays of shape grid.shape + (n,) + rest and grid.shape + (n, n) + rest.
    """
    n = grid.dim
    per = grid.periodic
    hs = grid.spacing
    d1 = [diff1(a, i, hs[i], per[i]) for i in range(n)]
    d2 = [[None] * n for _ in range(n)]
    for i in range(n):
        d2[i][i] = diff2(a, i, hs[i], per[i])
        for j in range(i + 1, n):
            d2[i][j] = d2[j][i] = diff1(d1[i], j, hs[j], per[j])
    nd = grid.dim
    first = np.stack(d1, axis=nd)
    second = np.stack([np.stack(row, axis=nd) for row in d2], axis=nd)
    return first, second


# -- immersion and geometry ------------------------------------------------------------------


@dataclass
class ImmersionField:
    """Node positions of a discrete immersion X: M → M̄."""

    grid: ParameterGrid
    X: NDArray
    model: AmbientModel

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=float)
        if self.X.shape != self.grid.shape + (self.model.dim,):
            raise ArgumentError(f"positions have shape {self.X.shape}, expected {self.grid.shape + (self.model.dim,)}")
        self.model.check_domain(self.X)

    def copy(self, X: NDArray | None = None) -> "ImmersionField":
        return ImmersionField(self.grid, np.array(self.X if X is None else X, dtype=float), self.model)

    @property
    def n(self) -> int:
        return self.grid.dim

    def max_edge(self) -> float:
        """Largest chart-metric length between grid neighbours (first order)."""
        best = 0.0
        for ax in range(self.grid.dim):
            if self.grid.periodic[ax]:
                d = np.roll(self.X, -1, ax) - self.X
            else:
                d = np.diff(self.X, axis=ax)
                sl = [slice(None)] * self.grid.dim
                sl[ax] = slice(0, -1)
                mid = self.X[tuple(sl)] + 0.5 * d
                best = max(best, float(np.max(np.sqrt(self.model.inner(mid, d, d)))))
                continue
            mid = self.X + 0.5 * d
            best = max(best, float(np.max(np.sqrt(self.model.inner(mid, d, d)))))
        return best

    def check_resolved(self) -> None:
        """Raise if neighbouring images are not closer than i₀/4."""
        _, i0 = bounds_report(self.model)
        if i0 < INFINITE_RADIUS and self.max_edge() >= i0 / 4:
            raise ResolutionError("neighbouring nodes farther apart than i0/4")


@dataclass
class InducedGeometry:
    """Per-node induced tensors; index order is node axes first.

    Attributes
    ----------
    dX : (..., n, n̄)        first derivatives ∂_iX
    g, ginv : (..., n, n)
    christoffel : (..., n, n, n)   ``christoffel[..., k, i, j] = Γ^k_ij``
    W : (..., n, n, n̄)      ∂²X + Γ̄(∂X, ∂X)
    h : (..., n, n, n̄)      second fundamental form
    H : (..., n̄)             mean curvature vector
    A2 : (...)               |A|²
    lam : (...)              ambient conformal factor at the nodes
    weights : (...)          quadrature weights √det g · ∏h (zero on pole rows)
    """

    field: ImmersionField
    dX: NDArray
    g: NDArray
    ginv: NDArray
    christoffel: NDArray
    W: NDArray
    h: NDArray
    H: NDArray
    A2: NDArray
    lam: NDArray
    weights: NDArray
    stencil: str = "centered-2"

    @property
    def grid(self) -> ParameterGrid:
        return self.field.grid

    @property
    def model(self) -> AmbientModel:
        return self.field.model

    @property
    def H_norm(self) -> NDArray:
        return np.sqrt(self.lam * np.sum(self.H * self.H, axis=-1))

    @property
    def A(self) -> NDArray:
        return np.sqrt(np.maximum(self.A2, 0.0))

    def volume(self) -> float:
        return float(np.sum(self.weights))

    def cfl_scale(self) -> float:
        """max over nodes of Σ_i g^{ii}/h_i²."""
        hs = np.asarray(self.grid.spacing)
        diag = np.diagonal(self.ginv, axis1=-2, axis2=-1)
        s = np.sum(diag / hs**2, axis=-1)
        return float(np.max(s[self.grid.regular_mask()]))

    def tangency_residual(self) -> float:
        """max |ḡ(h_ij, ∂_kX)| over regular nodes."""
        t = np.einsum("...ija,...ka->...ijk", self.h, self.dX) * self.lam[..., None, None, None]
        return float(np.max(np.abs(t[self.grid.regular_mask()])))


def _pole_fill(grid: ParameterGrid, arr: NDArray) -> NDArray:
    """Replace pole rows by the longitude mean of the adjacent rings."""
    arr = arr.copy()
    arr[0] = np.mean(arr[1], axis=0)
    arr[-1] = np.mean(arr[-2], axis=0)
    return arr


def _polar_laplacian(fld: ImmersionField, row: int, ring: int) -> NDArray:
    model = fld.model
    p = fld.X[row, 0]
    ringX = fld.X[ring]
    d = ringX - p
    lam = model.metric_factor(ringX)
    s2 = float(np.mean(lam * np.sum(d * d, axis=-1)))
    gam = model.gamma(np.broadcast_to(p, d.shape), d, d)
    return 4.0 * (np.mean(ringX, axis=0) - p) / s2 + 2.0 * np.mean(gam, axis=0) / s2


def induced_geometry(fld: ImmersionField, *, check: bool = True) -> InducedGeometry:
    """Induced metric, Christoffel symbols, second fundamental form and |A|².

    Raises
    ------
    DegeneracyError
        If g is not positive definite at a regular node.
    """
    grid = fld.grid
    model = fld.model
    X = fld.X
    dX, d2X = grid_derivatives(grid, X)
    lam = model.metric_factor(X)
    g = lam[..., None, None] * np.einsum("...ia,...ja->...ij", dX, dX)
    reg = grid.regular_mask()
    if grid.kind == "sphere":
        g = _pole_fill(grid, g)
    det = np.linalg.det(g)
    if check and np.any(~(det > 0)):
        bad = np.argwhere(~(det > 0))[0]
        raise DegeneracyError(f"induced metric degenerate at node {tuple(int(b) for b in bad)}", tuple(int(b) for b in bad))
    ginv = np.linalg.inv(g)
    n = grid.dim
    Xb = X[(...,) + (None,) * 2 + (slice(None),)]
    gam = model.gamma(Xb, dX[..., :, None, :], dX[..., None, :, :])
    W = d2X + gam
    proj = lam[..., None, None, None] * (W @ np.swapaxes(dX, -1, -2)[..., None, :, :])
    chris = np.moveaxis(proj @ ginv[..., None, :, :], -1, -3)  # ginv symmetric
    h = W - np.moveaxis(chris, -3, -1) @ dX[..., None, :, :]
    if grid.kind == "sphere":
        chris = _pole_fill(grid, chris)
        h = _pole_fill(grid, h)
        W = _pole_fill(grid, W)
        dX = dX.copy()
        dX[0] = dX[1]
        dX[-1] = dX[-2]
    H = np.einsum("...ij,...ija->...a", ginv, h)
    M = ginv[..., None, :, :] @ np.moveaxis(h, -1, -3)
    A2 = lam * np.einsum("...aij,...aji->...", M, M)
    if grid.kind == "sphere":
        A2 = _pole_fill(grid, A2)
        H = H.copy()
        H[0] = _polar_laplacian(fld, 0, 1)
        H[-1] = _polar_laplacian(fld, -1, -2)
    w = np.sqrt(np.maximum(det, 0.0)) * float(np.prod(grid.spacing))
    w = np.where(reg, w, 0.0)
    if grid.kind == "interval":
        w = w.copy()
        w[0] *= 0.5
        w[-1] *= 0.5
    return InducedGeometry(fld, dX, g, ginv, chris, W, h, H, A2, lam, w)


def gauss_intrinsic_curvature(geom: InducedGeometry) -> NDArray:
    """R_ijkl = R̄(∂_iX, ∂_jX, ∂_kX, ∂_lX) + ḡ(h_ik, h_jl) − ḡ(h_il, h_jk)."""
    g = geom.g
    kappa = geom.model.kappa
    rbar = kappa * (np.einsum("...ik,...jl->...ijkl", g, g) - np.einsum("...il,...jk->...ijkl", g, g))
    lam = geom.lam[..., None, None, None, None]
    hh = np.einsum("...ika,...jla->...ijkl", geom.h, geom.h) - np.einsum("...ila,...jka->...ijkl", geom.h, geom.h)
    return rbar + lam * hh


def metric_intrinsic_curvature(geom: InducedGeometry) -> NDArray:
    """R_ijkl from metric derivatives alone (nested centered differences).

    Uses Γ^k_ij = ½ g^{kl}(∂_i g_jl + ∂_j g_il − ∂_l g_ij) and
    R^a_bcd = ∂_cΓ^a_db − ∂_dΓ^a_cb + Γ^a_ce Γ^e_db − Γ^a_de Γ^e_cb,
    lowered as R_abcd = g_ae R^e_bcd, so that R_1212 = K det g.
    """
    grid = geom.grid
    n = grid.dim
    g = geom.g
    if n == 1:
        return np.zeros(grid.shape + (1, 1, 1, 1))
    dg, _ = grid_derivatives(grid, g)  # (..., m, i, j) = ∂_m g_ij
    ginv = geom.ginv
    low = 0.5 * (
        np.einsum("...ijl->...ijl", dg)
        + np.einsum("...jil->...ijl", dg)
        - np.einsum("...lij->...ijl", dg)
    )
    chris = np.einsum("...kl,...ijl->...kij", ginv, low)
    dchris, _ = grid_derivatives(grid, chris)  # (..., m, a, b, c) = ∂_m Γ^a_bc
    # R^a_bcd
    t1 = np.einsum("...cadb->...abcd", dchris)
    t2 = np.einsum("...dacb->...abcd", dchris)
    t3 = np.einsum("...ace,...edb->...abcd", chris, chris)
    t4 = np.einsum("...ade,...ecb->...abcd", chris, chris)
    rup = t1 - t2 + t3 - t4
    return np.einsum("...ae,...ebcd->...abcd", g, rup)


def gauss_residual(geom: InducedGeometry, mask: NDArray | None = None) -> float:
    """max |R_1212(metric) − R_1212(Gauss)| / det g over masked nodes."""
    if geom.grid.dim == 1:
        return 0.0
    r_int = metric_intrinsic_curvature(geom)[..., 0, 1, 0, 1]
    r_ext = gauss_intrinsic_curvature(geom)[..., 0, 1, 0, 1]
    det = np.linalg.det(geom.g)
    m = geom.grid.regular_mask() if mask is None else mask
    return float(np.max(np.abs(r_int - r_ext)[m] / det[m]))


def gaussian_curvature(geom: InducedGeometry) -> NDArray:
    """Sectional curvature R_1212 / det g of a surface (Gauss-equation route)."""
    if geom.grid.dim == 1:
        return np.zeros(geom.grid.shape)
    return gauss_intrinsic_curvature(geom)[..., 0, 1, 0, 1] / np.linalg.det(geom.g)


class InjectivityBound(NamedTuple):
    """Lower bound on the injectivity radius of the immersed submanifold.

    ``value = min(curvature_term, hessian_radius)`` where
    curvature_term = π/√(C̄ + 2C²) and hessian_radius = C̄₁.
    """

    value: float
    curvature_term: float
    hessian_radius: float
    C: float


def injectivity_lower_bound(geom: InducedGeometry, ambient_bounds: tuple[float, float]) -> InjectivityBound:
    """Klingenberg-type lower bound from |A| and ambient bounds (C̄, δ̄).

    C is the largest node value of the frame norm |A|; the Gauss equation
    bounds the intrinsic curvature by C̄ + 2C², and
    C̄₁ = min{δ̄, 1/(4√(C̄+1)), 1/(8(C+1))}.
    """
    cbar, dbar = ambient_bounds
    C = float(np.max(geom.A[geom.grid.regular_mask()]))
    k = cbar + 2.0 * C * C
    curv = INFINITE_RADIUS if k == 0 else math.pi / math.sqrt(k)
    c1 = min(dbar, 1.0 / (4.0 * math.sqrt(cbar + 1.0)), 1.0 / (8.0 * (C + 1.0)))
    return InjectivityBound(min(curv, c1), curv, c1, C)


# -- local graphs ------------------------------------------------------------------------------


@dataclass
class GraphPatch:
    """Graph representation of M near x₀ in normal coordinates.

    Attributes
    ----------
    center : tuple of int
        Grid index of x₀.
    r0 : float
    frame : (n̄, n̄)
        Columns: ḡ-orthonormal frame at X(x₀), tangent directions first.
    xprime : (m, n)
        Sample points |x′| < r₀/96 (the first is the origin).
    F : (m, n̄ − n)
    DF_norm : (m,)
        Operator norm of DF at the samples.
    ratio : float
        max over nonzero samples of |DF|(x′)/|x′|.
    """

    center: tuple[int, ...]
    r0: float
    frame: NDArray
    xprime: NDArray
    F: NDArray
    DF_norm: NDArray
    ratio: float


class GraphCheck(NamedTuple):
    is_graph: bool
    delta: float
    covered_radius: float


def _neighbors(grid: ParameterGrid, idx: tuple[int, ...]) -> Iterable[tuple[int, ...]]:
    for ax in range(grid.dim):
        for s in (-1, 1):
            j = list(idx)
            j[ax] += s
            if grid.periodic[ax]:
                j[ax] %= grid.shape[ax]
            elif not 0 <= j[ax] < grid.shape[ax]:
                continue
            yield tuple(j)


def _log_field(fld: ImmersionField, p: NDArray, nodes: Sequence[tuple[int, ...]]) -> dict:
    model = fld.model
    if model.kind == "euclidean":
        return {v: fld.X[v] - p for v in nodes}
    if model.kind == "flat-torus":
        per = np.asarray(model.periods)
        return {v: (fld.X[v] - p) - per * np.round((fld.X[v] - p) / per) for v in nodes}
    return {v: log_map(model, p, fld.X[v]).components for v in nodes}


def _ball_component(fld: ImmersionField, x0: tuple[int, ...], r0: float):
    """BFS over grid neighbours inside the ambient ball; returns logs for the
    component and one extra ring of nodes."""
    p = fld.X[x0]
    model = fld.model
    lam_p = float(model.metric_factor(p))
    logs: dict = {}
    inside: list = []
    frontier = [x0]
    seen = {x0}
    while frontier:
        nxt = []
        vals = _log_field(fld, p, [v for v in frontier if v not in logs])
        logs.update(vals)
        for v in frontier:
            lv = logs[v]
            if math.sqrt(lam_p * float(lv @ lv)) < r0:
                inside.append(v)
                for w in _neighbors(fld.grid, v):
                    if w not in seen:
                        seen.add(w)
                        nxt.append(w)
        frontier = nxt
    return inside, logs


def _local_derivatives(fld: ImmersionField, z: dict, v: tuple[int, ...]) -> tuple[NDArray, NDArray]:
    """Centered first/second differences of the normal-coordinate map at ``v``."""
    grid = fld.grid
    n = grid.dim
    hs = grid.spacing
    dim = len(z[v])
    d1 = np.zeros((n, dim))
    d2 = np.zeros((n, n, dim))

    def at(idx):
        idx = list(idx)
        for ax in range(n):
            if grid.periodic[ax]:
                idx[ax] %= grid.shape[ax]
        t = tuple(idx)
        if t not in z:
            raise ResolutionError("stencil leaves the sampled region")
        return z[t]

    def shift(idx, ax, s):
        j = list(idx)
        j[ax] += s
        return tuple(j)

    for i in range(n):
        zp, zm = at(shift(v, i, 1)), at(shift(v, i, -1))
        d1[i] = (zp - zm) / (2 * hs[i])
        d2[i, i] = (zp - 2 * z[v] + zm) / hs[i] ** 2
        for j in range(i + 1, n):
            zpp = at(shift(shift(v, i, 1), j, 1))
            zpm = at(shift(shift(v, i, 1), j, -1))
            zmp = at(shift(shift(v, i, -1), j, 1))
            zmm = at(shift(shift(v, i, -1), j, -1))
            d2[i, j] = d2[j, i] = (zpp - zpm - zmp + zmm) / (4 * hs[i] * hs[j])
    return d1, d2


def _single_sheet(fld: ImmersionField, comp: list, z: dict, n: int) -> bool:
    """Projection onto the tangent plane is orientation-preserving and injective."""
    if fld.grid.dim == 1:
        order = sorted(comp, key=lambda v: _unwrap_index(fld.grid, v, comp[0]))
        xs = np.array([z[v][0] for v in order])
        dx = np.diff(xs)
        return bool(np.all(dx > 0) or np.all(dx < 0))
    signs = []
    for v in comp:
        try:
            d1, _ = _local_derivatives(fld, z, v)
        except ResolutionError:
            continue
        signs.append(np.linalg.det(d1[:, :n]))
    signs = np.asarray(signs)
    return bool(np.all(signs > 0) or np.all(signs < 0))


def _unwrap_index(grid: ParameterGrid, v: tuple[int, ...], ref: tuple[int, ...]) -> int:
    i = v[0] - ref[0]
    if grid.periodic[0]:
        m = grid.shape[0]
        i = (i + m // 2) % m - m // 2
    return i


def _frame_from(model: AmbientModel, p: NDArray, tangents: NDArray) -> NDArray:
    lam = float(model.metric_factor(p))
    cols: list[NDArray] = []
    for s in list(tangents) + list(np.eye(model.dim)):
        w = np.array(s, dtype=float)
        for c in cols:
            w = w - lam * float(c @ w) * c
        nrm = math.sqrt(lam * float(w @ w))
        if nrm > 1e-8 * max(1.0, math.sqrt(lam * float(np.dot(s, s)))):
            cols.append(w / nrm)
        if len(cols) == model.dim:
            break
    return np.array(cols).T


def _normal_coordinates(fld: ImmersionField, x0: tuple[int, ...], r0: float):
    comp, logs = _ball_component(fld, x0, r0)
    d1, _ = _local_derivatives(fld, logs, x0)
    p = fld.X[x0]
    E = _frame_from(fld.model, p, d1)
    Einv = np.linalg.inv(E)
    z = {v: Einv @ lv for v, lv in logs.items()}
    return comp, z, E


def _graph_precondition(fld: ImmersionField, comp: list, r0: float, geom: InducedGeometry) -> None:
    c0, i0 = bounds_report(fld.model)
    limit = min(i0 / 2.0, INFINITE_RADIUS if c0 == 0 else 1.0 / (4.0 * c0))
    if r0 > limit:
        raise PreconditionError(f"r0 = {r0} exceeds the graph-lemma scale {limit:.6g}")
    amax = max(float(geom.A[v]) for v in comp)
    if amax > 1.0 / r0 * (1 + 1e-9):
        raise PreconditionError(f"sup|A| = {amax:.6g} exceeds 1/r0 on the ball")


def local_graph_extract(
    fld: ImmersionField, x0: tuple[int, ...], r0: float, *, samples: int = 33, check: bool = True
) -> GraphPatch:
    """Write the component of M ∩ B(X(x₀), r₀) through x₀ as a normal graph.

    The graph is sampled on |x′| < r₀/96. Each sample is seeded at the node
    with the nearest tangential projection and refined by Newton iteration on
    the local quadratic Taylor model of the normal-coordinate map.

    Raises
    ------
    PreconditionError
        If sup|A| > 1/r₀ on the ball or r₀ exceeds the admissible scale.
    MultiSheetError
        If the tangential projection of the component is not injective.
    ResolutionError
        If the grid is too coarse to resolve the sample disk.
    """
    x0 = tuple(int(i) for i in np.atleast_1d(x0))
    n = fld.grid.dim
    comp, z, E = _normal_coordinates(fld, x0, r0)
    if check:
        geom = induced_geometry(fld)
        _graph_precondition(fld, comp, r0, geom)
    if not _single_sheet(fld, comp, z, n):
        raise MultiSheetError("tangential projection is not single-sheeted")
    edge = max(float(np.linalg.norm(z[w] - z[v])) for v in comp for w in _neighbors(fld.grid, v) if w in z)
    rad = r0 / 96.0
    if edge > r0 / 4:
        raise ResolutionError("grid spacing too coarse for the requested radius")

    # sample set in the tangent disk
    if n == 1:
        xs = np.linspace(-rad, rad, samples + 2)[1:-1][:, None]
    else:
        m = max(4, int(math.sqrt(samples)))
        rr, tt = np.meshgrid(np.linspace(0, rad, m + 1)[1:-1] if m > 1 else [rad / 2], np.linspace(0, 2 * np.pi, 2 * m, endpoint=False))
        xs = np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])
    xs = np.vstack([np.zeros((1, n)), xs[np.linalg.norm(xs, axis=1) > 0]])
    nodes = [v for v in comp if all(w in z for w in _neighbors(fld.grid, v))]
    if not nodes:
        raise ResolutionError("no interior nodes inside the ball")
    proj = np.array([z[v][:n] for v in nodes])
    F = np.zeros((len(xs), fld.model.dim - n))
    dfn = np.zeros(len(xs))
    cache: dict = {}
    for s, xp in enumerate(xs):
        k = int(np.argmin(np.sum((proj - xp) ** 2, axis=1)))
        v = nodes[k]
        if v not in cache:
            cache[v] = _local_derivatives(fld, z, v)
        d1, d2 = cache[v]
        du = np.zeros(n)
        for _ in range(30):
            zt = z[v] + d1.T @ du + 0.5 * np.einsum("ija,i,j->a", d2, du, du)
            jac = (d1 + np.einsum("ija,j->ia", d2, du))[:, :n].T
            step = np.linalg.solve(jac, zt[:n] - xp)
            du = du - step
            if np.max(np.abs(step)) < 1e-15 * max(1.0, float(np.max(np.abs(du)))):
                break
        zt = z[v] + d1.T @ du + 0.5 * np.einsum("ija,i,j->a", d2, du, du)
        jac = (d1 + np.einsum("ija,j->ia", d2, du)).T  # (n̄, n)
        F[s] = zt[n:]
        DF = jac[n:] @ np.linalg.inv(jac[:n])
        dfn[s] = float(np.linalg.norm(DF, 2)) if DF.size else 0.0
    nz = np.linalg.norm(xs, axis=1) > 0
    ratio = float(np.max(dfn[nz] / np.linalg.norm(xs[nz], axis=1))) if np.any(nz) else 0.0
    return GraphPatch(x0, float(r0), E, xs, F, dfn, ratio)


def lipschitz_graph_check(
    fld: ImmersionField,
    x0: tuple[int, ...],
    r0: float,
    *,
    others: Sequence[ImmersionField] = (),
    component_only: bool = True,
) -> GraphCheck:
    """Test whether M ∩ B(X(x₀), r₀) is a single graph and measure sup|DF|.

    With ``component_only`` the check applies to the component through x₀;
    otherwise any node of ``others`` inside the ball makes the test fail.
    Failures are reported through the flag, never raised.
    """
    x0 = tuple(int(i) for i in np.atleast_1d(x0))
    n = fld.grid.dim
    try:
        comp, z, E = _normal_coordinates(fld, x0, r0)
    except ResolutionError:
        return GraphCheck(False, math.nan, 0.0)
    p = fld.X[x0]
    if not component_only:
        lam = float(fld.model.metric_factor(p))
        for other in others:
            flat = other.X.reshape(-1, other.model.dim)
            for x in flat:
                d = x - p if fld.model.is_flat else log_map(fld.model, p, x).components
                if math.sqrt(lam * float(d @ d)) < r0:
                    return GraphCheck(False, math.nan, 0.0)
    if not _single_sheet(fld, comp, z, n):
        return GraphCheck(False, math.nan, 0.0)
    delta = 0.0
    for v in comp:
        try:
            d1, _ = _local_derivatives(fld, z, v)
        except ResolutionError:
            continue
        jac = d1.T
        DF = jac[n:] @ np.linalg.inv(jac[:n])
        delta = max(delta, float(np.linalg.norm(DF, 2)) if DF.size else 0.0)
    covered = min(float(np.max(np.abs(np.array([z[v][:n] for v in comp])))), r0)
    return GraphCheck(True, delta, covered)


# -- builtin shapes -------------------------------------------------------------------------------


class shapes:
    """Constructors for the builtin initial immersions."""

    @staticmethod
    def circle(n: int = 256, radius: float = 1.0, center=(0.0, 0.0), warp: float = 0.0,
               model: AmbientModel | None = None) -> ImmersionField:
        """Circle parametrized by θ = s + warp·sin s (uniform when warp = 0)."""
        if abs(warp) >= 1:
            raise ArgumentError("warp must satisfy |warp| < 1")
        model = model or AmbientModel.euclidean(2)
        grid = ParameterGrid.circle(n)
        s = grid.axes()[0]
        th = s + warp * np.sin(s)
        X = np.zeros((n, model.dim))
        X[:, 0] = center[0] + radius * np.cos(th)
        X[:, 1] = center[1] + radius * np.sin(th)
        return ImmersionField(grid, X, model)

    @staticmethod
    def ellipse(n: int = 256, a: float = 1.0, b: float = 0.6, center=(0.0, 0.0),
                model: AmbientModel | None = None) -> ImmersionField:
        model = model or AmbientModel.euclidean(2)
        grid = ParameterGrid.circle(n)
        s = grid.axes()[0]
        X = np.zeros((n, model.dim))
        X[:, 0] = center[0] + a * np.cos(s)
        X[:, 1] = center[1] + b * np.sin(s)
        return ImmersionField(grid, X, model)

    @staticmethod
    def great_circle(n: int = 256, model: AmbientModel | None = None) -> ImmersionField:
        """Equator of the stereographic sphere chart (|y| = R in the first two axes)."""
        model = model or AmbientModel.sphere(2, 1.0)
        if model.kind != "sphere":
            raise ArgumentError("great-circle needs a sphere ambient")
        grid = ParameterGrid.circle(n)
        s = grid.axes()[0]
        X = np.zeros((n, model.dim))
        X[:, 0] = model.radius * np.cos(s)
        X[:, 1] = model.radius * np.sin(s)
        return ImmersionField(grid, X, model)

    @staticmethod
    def graph_of_function(f: Callable[[NDArray], NDArray], n: int, a: float, b: float, band: int = 2,
                          model: AmbientModel | None = None) -> ImmersionField:
        """Curve x ↦ (x, f(x)) on [a, b] with a frozen boundary band."""
        model = model or AmbientModel.euclidean(2)
        grid = ParameterGrid.interval(n, a, b, band=band)
        x = grid.axes()[0]
        X = np.zeros((n, model.dim))
        X[:, 0] = x
        X[:, 1] = f(x)
        return ImmersionField(grid, X, model)

    @staticmethod
    def line(n: int = 257, a: float = -1.0, b: float = 1.0, band: int = 2,
             model: AmbientModel | None = None) -> ImmersionField:
        return shapes.graph_of_function(np.zeros_like, n, a, b, band=band, model=model)

    @staticmethod
    def line_with_bump(n: int = 1001, a: float = -1.25, b: float = 1.25, center: float = 0.85,
                       width: float = 0.05, height: float = 0.015625, band: int = 2,
                       model: AmbientModel | None = None) -> ImmersionField:
        """Straight line with a compactly supported C³ bump.

        The bump is height·(1 − u²)⁴ with u = (x − center)/width, exactly
        flat for |x − center| ≥ width; its curvature peaks at the centre with
        value 8·height/width² (50 for the defaults).
        """

        def bump(x):
            u = (x - center) / width
            return height * np.clip(1.0 - u * u, 0.0, None) ** 4

        return shapes.graph_of_function(bump, n, a, b, band=band, model=model)

    @staticmethod
    def line_with_spike(h: float = 1.25e-3, a: float = -1.25, b: float = 1.25, center: float = 0.85,
                        kappa: float = 50.0, height: float = 0.1, ramp: float = 0.004, band: int = 2,
                        model: AmbientModel | None = None) -> ImmersionField:
        """Straight line carrying a thin vertical finger, parametrized by arclength.

        The tangent angle turns by +π/2, −π, +π/2 with curvature magnitude
        ``kappa`` on each turn (smoothed by quintic ramps of length ``ramp``),
        separated by two vertical walls of length ``height``. The tip apex
        sits above ``center``; the finger spans about center ± 2/kappa.
        Node spacing is ``h`` and the parameter equals x on the left segment.
        """
        model = model or AmbientModel.euclidean(2)
        if not ramp < 0.5 * math.pi / kappa:
            raise ArgumentError("ramp too long for the requested curvature")

        def turn(angle):
            p = abs(angle) / kappa - ramp
            return [(ramp, "up", math.copysign(kappa, angle)), (p, "flat", math.copysign(kappa, angle)),
                    (ramp, "down", math.copysign(kappa, angle))]

        pieces = turn(math.pi / 2) + [(height, "flat", 0.0)] + turn(-math.pi) + [(height, "flat", 0.0)]
        pieces += turn(math.pi / 2)
        fine = 4000
        ss, kk = [], []
        s0 = 0.0
        for length, kind, k in pieces:
            u = np.linspace(0.0, 1.0, fine, endpoint=False)
            if kind == "up":
                prof = u**3 * (10 - 15 * u + 6 * u * u)
            elif kind == "down":
                v = 1 - u
                prof = v**3 * (10 - 15 * v + 6 * v * v)
            else:
                prof = np.ones_like(u)
            ss.append(s0 + length * u)
            kk.append(k * prof)
            s0 += length
        ss = np.concatenate(ss + [[s0]])
        kk = np.concatenate(kk + [[0.0]])
        ds = np.diff(ss)
        theta = np.concatenate([[0.0], np.cumsum(0.5 * (kk[1:] + kk[:-1]) * ds)])
        cx = np.concatenate([[0.0], np.cumsum(0.5 * (np.cos(theta[1:]) + np.cos(theta[:-1])) * ds)])
        cy = np.concatenate([[0.0], np.cumsum(0.5 * (np.sin(theta[1:]) + np.sin(theta[:-1])) * ds)])
        apex = int(np.argmax(cy))
        x_start = center - cx[apex]
        width = cx[-1]
        left = x_start - a
        n_left = int(round(left / h))
        x_start = a + n_left * h  # keep a node at every multiple of h on the left segment
        n_total = int(math.ceil((left + s0 + (b - x_start - width)) / h)) + 1
        grid = ParameterGrid.interval(n_total, a, a + (n_total - 1) * h, band=band)
        prm = grid.axes()[0]
        X = np.zeros((n_total, model.dim))
        sl = prm - x_start
        before = sl <= 0
        after = sl >= s0
        mid = ~(before | after)
        X[before, 0] = prm[before]
        X[mid, 0] = x_start + np.interp(sl[mid], ss, cx)
        X[mid, 1] = np.interp(sl[mid], ss, cy)
        X[after, 0] = x_start + width + (sl[after] - s0)
        X[after, 1] = cy[-1]
        return ImmersionField(grid, X, model)

    @staticmethod
    def sphere(n_lon: int = 64, n_lat: int = 32, radius: float = 1.0,
               model: AmbientModel | None = None) -> ImmersionField:
        """Round sphere in R³ on the pole-including latitude-longitude grid."""
        model = model or AmbientModel.euclidean(3)
        grid = ParameterGrid.sphere(n_lon, n_lat)
        th, ph = grid.mesh()
        X = np.zeros(grid.shape + (model.dim,))
        X[..., 0] = radius * np.sin(th) * np.cos(ph)
        X[..., 1] = radius * np.sin(th) * np.sin(ph)
        X[..., 2] = radius * np.cos(th)
        X[0, :, :2] = 0.0
        X[-1, :, :2] = 0.0
        return ImmersionField(grid, X, model)

    @staticmethod
    def clifford_torus(n1: int = 32, n2: int = 32, shear: float = 0.0,
                       model: AmbientModel | None = None) -> ImmersionField:
        """Product of two unit circles in R⁴, optionally reparametrized by
        u = s + shear·sin t, v = t + shear·sin s."""
        model = model or AmbientModel.euclidean(4)
        if model.dim != 4:
            raise ArgumentError("clifford-torus needs a 4-dimensional ambient")
        grid = ParameterGrid.torus(n1, n2)
        s, t = grid.mesh()
        u = s + shear * np.sin(t)
        v = t + shear * np.sin(s)
        X = np.stack([np.cos(u), np.sin(u), np.cos(v), np.sin(v)], axis=-1)
        return ImmersionField(grid, X, model)


# -- CSV snapshots ----------------------------------------------------------------------------------


def write_csv(fld: ImmersionField, path=None) -> str:
    """Serialize node positions; rows in lexicographic index order, floats in repr form."""
    nd = fld.grid.dim
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"i{k}" for k in range(nd)] + [f"x{a}" for a in range(fld.model.dim)])
    for idx in np.ndindex(*fld.grid.shape):
        w.writerow([str(i) for i in idx] + [repr(float(c)) for c in fld.X[idx]])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_csv(text_or_path: str, grid: ParameterGrid, model: AmbientModel) -> ImmersionField:
    """Inverse of :func:`write_csv`."""
    text = text_or_path
    if "\n" not in text_or_path:
        with open(text_or_path) as fh:
            text = fh.read()
    rows = list(csv.reader(io.StringIO(text)))
    nd = grid.dim
    X = np.zeros(grid.shape + (model.dim,))
    for row in rows[1:]:
        idx = tuple(int(v) for v in row[:nd])
        X[idx] = [float(v) for v in row[nd:]]
    return ImmersionField(grid, X, model)
