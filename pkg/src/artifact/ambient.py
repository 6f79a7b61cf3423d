"""Closed-form ambient Riemannian manifolds.

Every supported model is conformally flat in its chart,

    ḡ_αβ(y) = λ(y) δ_αβ,   λ = e^{2f},

so the Levi-Civita connection reduces to

    Γ̄(u, v) = u (∇f·v) + v (∇f·u) − (u·v) ∇f,

and the curvature is that of a space form, R̄_αβγδ = κ(ḡ_αγ ḡ_βδ − ḡ_αδ ḡ_βγ).

Charts
------
euclidean, flat-torus
    identity chart, λ = 1.
sphere (radius R)
    stereographic projection onto the equatorial plane, λ = 4R⁴/(R² + |y|²)².
    The transition to the opposite pole is the inversion y ↦ R² y/|y|², which
    the geodesic integrator uses when a trajectory approaches the singular set.
hyperbolic (curvature −k)
    Poincaré ball of radius 1/√k, λ = 4/(1 − k|y|²)².

Geodesics and parallel transport are integrated with classical RK4 for every
model; closed forms are left to the test oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ArgumentError, DomainError, PreconditionError

__all__ = [
    "INFINITE_RADIUS",
    "AmbientModel",
    "AmbientPoint",
    "AmbientTangent",
    "ProductHessian",
    "metric_at",
    "christoffel_at",
    "riemann_at",
    "exp_map",
    "log_map",
    "distance",
    "distances_to",
    "parallel_transport",
    "distance_sq_hessian",
    "bounds_report",
    "curvature_bound",
    "fit_hessian_constant",
]

#: Sentinel for an infinite injectivity radius; compares greater than any float.
INFINITE_RADIUS = math.inf

Kind = Literal["euclidean", "sphere", "hyperbolic", "flat-torus"]
_KINDS = ("euclidean", "sphere", "hyperbolic", "flat-torus")

# Largest arc length covered by one RK4 step; the step is also ≤ |v|/64.
_MAX_ARC_STEP = 4e-3
_MIN_STEPS = 64
# Sphere trajectories switch to the opposite stereographic chart beyond this |y|/R.
_FLIP_RATIO = 2.0


@dataclass(frozen=True)
class AmbientModel:
    """A constant-curvature ambient manifold in a fixed chart.

    Parameters
    ----------
    kind : {"euclidean", "sphere", "hyperbolic", "flat-torus"}
    dim : int
        Ambient dimension n̄ ≥ 2.
    radius : float, optional
        Sphere radius R.
    curvature : float, optional
        Magnitude k of the (negative) hyperbolic curvature.
    periods : tuple of float, optional
        Torus periods, one per ambient axis.
    """

    kind: Kind
    dim: int
    radius: float | None = None
    curvature: float | None = None
    periods: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ArgumentError(f"unknown ambient kind {self.kind!r}")
        if int(self.dim) != self.dim or self.dim < 2:
            raise ArgumentError("ambient dimension must be an integer >= 2")
        if self.kind == "sphere" and not (self.radius and self.radius > 0):
            raise ArgumentError("sphere needs radius > 0")
        if self.kind == "hyperbolic" and not (self.curvature and self.curvature > 0):
            raise ArgumentError("hyperbolic needs curvature magnitude > 0")
        if self.kind == "flat-torus":
            if self.periods is None or len(self.periods) != self.dim:
                raise ArgumentError("flat-torus needs one period per axis")
            if min(self.periods) <= 0:
                raise ArgumentError("torus periods must be positive")
            object.__setattr__(self, "periods", tuple(float(p) for p in self.periods))

    @classmethod
    def euclidean(cls, dim: int) -> "AmbientModel":
        return cls("euclidean", dim)

    @classmethod
    def sphere(cls, dim: int, radius: float = 1.0) -> "AmbientModel":
        return cls("sphere", dim, radius=float(radius))

    @classmethod
    def hyperbolic(cls, dim: int, curvature: float = 1.0) -> "AmbientModel":
        return cls("hyperbolic", dim, curvature=float(curvature))

    @classmethod
    def flat_torus(cls, periods: ArrayLike) -> "AmbientModel":
        periods = tuple(float(p) for p in np.atleast_1d(periods))
        return cls("flat-torus", len(periods), periods=periods)

    @property
    def kappa(self) -> float:
        """Constant sectional curvature."""
        if self.kind == "sphere":
            return 1.0 / self.radius**2
        if self.kind == "hyperbolic":
            return -float(self.curvature)
        return 0.0

    @property
    def chart(self) -> str:
        return {
            "euclidean": "identity",
            "flat-torus": "identity",
            "sphere": "stereographic",
            "hyperbolic": "poincare-ball",
        }[self.kind]

    @property
    def is_flat(self) -> bool:
        return self.kind in ("euclidean", "flat-torus")

    # -- vectorized conformal data -------------------------------------------------

    def check_domain(self, y: NDArray) -> None:
        """Raise :class:`DomainError` if any point of ``y`` leaves the chart."""
        if not np.all(np.isfinite(y)):
            raise DomainError("non-finite ambient coordinates")
        if self.kind == "hyperbolic":
            if np.any(self.curvature * np.sum(y * y, axis=-1) >= 1.0):
                raise DomainError("point outside the Poincare ball")

    def conformal(self, y: ArrayLike) -> tuple[NDArray, NDArray]:
        """Return ``(λ, ∇f)`` at points ``y`` of shape (..., n̄)."""
        y = np.asarray(y, dtype=float)
        if self.is_flat:
            return np.ones(y.shape[:-1]), np.zeros_like(y)
        r2 = np.sum(y * y, axis=-1)
        if self.kind == "sphere":
            R2 = self.radius**2
            denom = R2 + r2
            return 4.0 * R2 * R2 / denom**2, -2.0 * y / denom[..., None]
        k = self.curvature
        denom = 1.0 - k * r2
        return 4.0 / denom**2, 2.0 * k * y / denom[..., None]

    def metric_factor(self, y: ArrayLike) -> NDArray:
        """Conformal factor λ at points ``y``."""
        return self.conformal(y)[0]

    def gamma(self, y: ArrayLike, u: ArrayLike, v: ArrayLike) -> NDArray:
        """Contraction Γ̄^γ_αβ u^α v^β, broadcast over leading axes."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.is_flat:
            return np.zeros(np.broadcast_shapes(u.shape, v.shape))
        _, df = self.conformal(y)
        du = np.sum(df * u, axis=-1)[..., None]
        dv = np.sum(df * v, axis=-1)[..., None]
        uv = np.sum(u * v, axis=-1)[..., None]
        return u * dv + v * du - uv * df

    def inner(self, y: ArrayLike, u: ArrayLike, v: ArrayLike) -> NDArray:
        """ḡ_y(u, v) broadcast over leading axes."""
        lam = self.metric_factor(y)
        return lam * np.sum(np.asarray(u) * np.asarray(v), axis=-1)

    # -- sphere chart transition -----------------------------------------------------

    def _invert(self, y: NDArray, vs: list[NDArray]) -> tuple[NDArray, list[NDArray]]:
        """Inversion y ↦ R²y/|y|² and its differential applied to ``vs``."""
        R2 = self.radius**2
        r2 = np.sum(y * y, axis=-1)[..., None]
        y_new = R2 * y / r2
        out = []
        for v in vs:
            if v.ndim == y.ndim + 1:  # a stack of vectors (..., m, n)
                yv = np.einsum("...n,...mn->...m", y, v)[..., None]
                rr = r2[..., None]
                out.append(R2 * (v / rr - 2.0 * y[..., None, :] * yv / rr**2))
            else:
                yv = np.sum(y * v, axis=-1)[..., None]
                out.append(R2 * (v / r2 - 2.0 * y * yv / r2**2))
        return y_new, out


@dataclass(frozen=True)
class AmbientPoint:
    """Chart coordinates of an ambient point.

    ``warning`` is set by :func:`exp_map` when the requested geodesic length
    reaches the injectivity radius.
    """

    coords: NDArray
    warning: bool = False

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.coords, dtype=dtype)


@dataclass(frozen=True)
class AmbientTangent:
    """Tangent vector components at a base point.

    ``ambiguous`` flags a non-unique minimal geodesic (antipodal sphere points).
    """

    base: NDArray
    components: NDArray
    ambiguous: bool = False

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.components, dtype=dtype)


@dataclass
class ProductHessian:
    """Hessian of ψ(y₁, y₂) = d²(y₁, y₂) on the product manifold.

    Attributes
    ----------
    matrix : ndarray, shape (2n̄, 2n̄)
        Covariant Hessian in product-chart coordinates, blocked (y₁, y₂).
    frame_matrix : ndarray, shape (2n̄, 2n̄)
        The same form in the orthonormal frame (e_i, P_γ e_i).
    y1, y2 : ndarray
    transport : ndarray, shape (n̄, n̄)
        Component matrix of P_γ from T_{y₁} to T_{y₂}.
    dist : float
    """

    matrix: NDArray
    frame_matrix: NDArray
    y1: NDArray
    y2: NDArray
    transport: NDArray
    dist: float
    model: AmbientModel = field(repr=False)

    def quadratic(self, x: ArrayLike) -> float:
        """(∇²d²)(X, X) for product-chart components X = (X₁, X₂)."""
        x = np.asarray(x, dtype=float)
        return float(x @ self.matrix @ x)

    def lower_bound_gap(self, x: ArrayLike) -> tuple[float, float]:
        """Return ``(Hess(X,X) − 2|X₁ − P⁻¹X₂|², |X|²)``."""
        x = np.asarray(x, dtype=float)
        n = self.model.dim
        x1, x2 = x[:n], x[n:]
        back = np.linalg.solve(self.transport, x2)
        diff = x1 - back
        gap = self.quadratic(x) - 2.0 * float(self.model.inner(self.y1, diff, diff))
        norm2 = float(self.model.inner(self.y1, x1, x1) + self.model.inner(self.y2, x2, x2))
        return gap, norm2


def _coords(p) -> NDArray:
    return np.asarray(getattr(p, "coords", p), dtype=float)


def _check_point(model: AmbientModel, p: NDArray) -> None:
    if p.shape[-1] != model.dim:
        raise ArgumentError(f"expected {model.dim} coordinates, got shape {p.shape}")
    model.check_domain(p)


def metric_at(model: AmbientModel, p) -> NDArray:
    """Metric matrix ḡ_αβ at ``p``.

    Raises
    ------
    DomainError
        If ``p`` is outside the chart.
    """
    p = _coords(p)
    _check_point(model, p)
    return model.metric_factor(p)[..., None, None] * np.eye(model.dim)


def christoffel_at(model: AmbientModel, p) -> NDArray:
    """Christoffel symbols ``G[γ, α, β] = Γ̄^γ_αβ`` at ``p``."""
    p = _coords(p)
    _check_point(model, p)
    n = model.dim
    _, df = model.conformal(p)
    eye = np.eye(n)
    # Γ^c_ab = δ^c_a f_b + δ^c_b f_a − δ_ab f^c
    return (
        np.einsum("ca,...b->...cab", eye, df)
        + np.einsum("cb,...a->...cab", eye, df)
        - np.einsum("ab,...c->...cab", eye, df)
    )


def riemann_at(model: AmbientModel, p, order: int = 0) -> NDArray:
    """Curvature tensor R̄_αβγδ (all indices down) or a covariant derivative.

    Parameters
    ----------
    order : int
        0 for the tensor itself, 1..3 for ∇̄^order R̄m (identically zero on
        every supported model).

    Raises
    ------
    ArgumentError
        If ``order`` is not in {0, 1, 2, 3}.
    """
    if order not in (0, 1, 2, 3):
        raise ArgumentError("curvature derivative order must be 0, 1, 2 or 3")
    g = metric_at(model, p)
    n = model.dim
    if order > 0:
        return np.zeros(g.shape[:-2] + (n,) * (4 + order))
    return model.kappa * (
        np.einsum("...ac,...bd->...abcd", g, g) - np.einsum("...ad,...bc->...abcd", g, g)
    )


def curvature_bound(model: AmbientModel) -> float:
    """Sectional-curvature bound K₀ = |κ| used for the Hessian precondition."""
    return abs(model.kappa)


def bounds_report(model: AmbientModel) -> tuple[float, float]:
    """Return ``(c₀, i₀)``.

    c₀² equals the full tensor norm |R̄m| = |κ|·√(2n̄(n̄−1)), which bounds the
    sum of the norms of R̄m and its vanishing covariant derivatives; i₀ is the
    exact injectivity radius (πR, half the shortest period, or the ∞ sentinel).
    """
    n = model.dim
    rm = abs(model.kappa) * math.sqrt(2.0 * n * (n - 1))
    c0 = math.sqrt(rm)
    if model.kind == "sphere":
        i0 = math.pi * model.radius
    elif model.kind == "flat-torus":
        i0 = 0.5 * min(model.periods)
    else:
        i0 = INFINITE_RADIUS
    return c0, i0


# -- geodesic integration ------------------------------------------------------------


def _geodesic_rhs(model: AmbientModel, y, v, w):
    acc = -model.gamma(y, v, v)
    if w is None:
        return v, acc, None
    dw = -model.gamma(y[..., None, :], v[..., None, :], w)
    return v, acc, dw


def _n_steps(model: AmbientModel, y: NDArray, v: NDArray, max_arc: float) -> int:
    speed = np.sqrt(model.inner(y, v, v))
    smax = float(np.max(speed)) if speed.size else 0.0
    return max(_MIN_STEPS, int(math.ceil(smax / max_arc)))


def geodesic_flow(
    model: AmbientModel,
    y0: ArrayLike,
    v0: ArrayLike,
    w0: ArrayLike | None = None,
    *,
    max_arc: float = _MAX_ARC_STEP,
) -> tuple[NDArray, NDArray, NDArray | None]:
    """Integrate the geodesic equation on [0, 1] with RK4.

    Parameters
    ----------
    y0, v0 : array_like, shape (..., n̄)
        Initial points and velocities (batched).
    w0 : array_like, shape (..., m, n̄), optional
        Vectors at ``y0`` transported in parallel along each geodesic.

    Returns
    -------
    y1, v1, w1
        Endpoint, final velocity and transported vectors (or ``None``).
    """
    y = np.array(y0, dtype=float)
    v = np.array(v0, dtype=float)
    w = None if w0 is None else np.array(w0, dtype=float)
    model.check_domain(y)
    steps = _n_steps(model, y, v, max_arc)
    dt = 1.0 / steps
    flipped = np.zeros(y.shape[:-1], dtype=bool)
    sphere = model.kind == "sphere"

    for _ in range(steps):
        k1 = _geodesic_rhs(model, y, v, w)
        k2 = _geodesic_rhs(model, y + 0.5 * dt * k1[0], v + 0.5 * dt * k1[1],
                           None if w is None else w + 0.5 * dt * k1[2])
        k3 = _geodesic_rhs(model, y + 0.5 * dt * k2[0], v + 0.5 * dt * k2[1],
                           None if w is None else w + 0.5 * dt * k2[2])
        k4 = _geodesic_rhs(model, y + dt * k3[0], v + dt * k3[1],
                           None if w is None else w + dt * k3[2])
        y = y + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v = v + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if w is not None:
            w = w + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if sphere:
            far = np.sum(y * y, axis=-1) > (_FLIP_RATIO * model.radius) ** 2
            if np.any(far):
                y, v, w = _flip_where(model, far, y, v, w)
                flipped ^= far
        if not np.all(np.isfinite(y)):
            raise DomainError("geodesic left the chart domain")

    if sphere and np.any(flipped):
        r2 = np.sum(y * y, axis=-1)
        if np.any(flipped & (r2 < 1e-24 * model.radius**2)):
            raise DomainError("geodesic ends at the stereographic pole")
        y, v, w = _flip_where(model, flipped, y, v, w)
    model.check_domain(y)
    return y, v, w


def _flip_where(model, mask, y, v, w):
    vs = [v] if w is None else [v, w]
    y_new, out = model._invert(y, vs)
    y = np.where(mask[..., None], y_new, y)
    v = np.where(mask[..., None], out[0], v)
    if w is not None:
        w = np.where(mask[..., None, None], out[1], w)
    return y, v, w


def exp_map(model: AmbientModel, p, v) -> AmbientPoint:
    """Time-one endpoint of the geodesic through ``p`` with velocity ``v``.

    The result carries ``warning=True`` when |v| ≥ i₀.
    """
    p = _coords(p)
    v = np.asarray(getattr(v, "components", v), dtype=float)
    _check_point(model, p)
    y1, _, _ = geodesic_flow(model, p, v)
    speed = float(np.sqrt(model.inner(p, v, v)))
    _, i0 = bounds_report(model)
    return AmbientPoint(y1, warning=bool(speed >= i0))


def _nearest_lift(model: AmbientModel, p: NDArray, q: NDArray) -> NDArray:
    """Translate of ``q`` nearest to ``p`` among the 3ⁿ̄ neighbouring cells."""
    per = np.asarray(model.periods)
    base = q - per * np.round((q - p) / per)
    shifts = np.array(np.meshgrid(*([[-1, 0, 1]] * model.dim), indexing="ij")).reshape(model.dim, -1).T
    cand = base + shifts * per
    d2 = np.sum((cand - p) ** 2, axis=-1)
    return cand[int(np.argmin(d2))]


def _sphere_ambiguous(model: AmbientModel, p: NDArray, q: NDArray) -> bool:
    R2 = model.radius**2

    def embed(y):
        r2 = float(y @ y)
        return np.concatenate([2 * R2 * y, [model.radius * (r2 - R2)]]) / (r2 + R2)

    c = float(embed(p) @ embed(q)) / R2
    return c < -1.0 + 1e-10


def log_map(model: AmbientModel, p, q, *, tol: float = 1e-13, max_iter: int = 40) -> AmbientTangent:
    """Initial velocity of the minimal geodesic from ``p`` to ``q``.

    Solved by Newton shooting on :func:`geodesic_flow`; the Jacobian of the
    endpoint map is obtained from a batch of perturbed shots.
    """
    p = _coords(p)
    q = _coords(q)
    _check_point(model, p)
    _check_point(model, q)
    if model.kind == "flat-torus":
        q = _nearest_lift(model, p, q)
    if model.kind == "sphere" and _sphere_ambiguous(model, p, q):
        return AmbientTangent(p, np.zeros(model.dim), ambiguous=True)

    n = model.dim
    v = q - p
    scale = max(float(np.max(np.abs(q - p))), 1.0)
    eye = np.eye(n)
    res_norm = math.inf
    for _ in range(max_iter):
        delta = 1e-6 * max(float(np.linalg.norm(v)), 1e-3)
        batch_v = np.vstack([v[None, :], v[None, :] + delta * eye])
        ends, _, _ = geodesic_flow(model, np.broadcast_to(p, batch_v.shape), batch_v)
        res = ends[0] - q
        new_norm = float(np.max(np.abs(res)))
        if new_norm <= tol * scale:
            break
        jac = (ends[1:] - ends[0]).T / delta
        step = np.linalg.solve(jac, res)
        if new_norm > res_norm:
            step *= 0.5
        res_norm = new_norm
        v = v - step
    return AmbientTangent(p, v)


def distance(model: AmbientModel, p, q) -> float:
    """Riemannian distance through :func:`log_map`."""
    p = _coords(p)
    lv = log_map(model, p, q)
    return float(np.sqrt(model.inner(p, lv.components, lv.components)))


def distances_to(model: AmbientModel, p, Q: ArrayLike) -> NDArray:
    """Closed-form distances from ``p`` to every point of ``Q`` (shape (..., n̄)).

    Uses the model geometry directly (chord length on the embedded sphere,
    the Poincare-ball formula, nearest lattice translate on the torus), so it
    is vectorized and independent of the shooting route in :func:`distance`.
    """
    p = _coords(p)
    Q = np.asarray(Q, dtype=float)
    if model.kind == "euclidean":
        return np.sqrt(np.sum((Q - p) ** 2, axis=-1))
    if model.kind == "flat-torus":
        per = np.asarray(model.periods)
        d = Q - p
        d = d - per * np.round(d / per)
        return np.sqrt(np.sum(d * d, axis=-1))
    if model.kind == "sphere":
        R = model.radius
        R2 = R * R

        def embed(y):
            r2 = np.sum(y * y, axis=-1)[..., None]
            return np.concatenate([2 * R2 * y, R * (r2 - R2)], axis=-1) / (r2 + R2)

        chord = np.sqrt(np.sum((embed(Q) - embed(p)) ** 2, axis=-1))
        return 2.0 * R * np.arcsin(np.clip(chord / (2.0 * R), 0.0, 1.0))
    k = model.curvature
    num = 2.0 * k * np.sum((Q - p) ** 2, axis=-1)
    den = (1.0 - k * np.sum(Q * Q, axis=-1)) * (1.0 - k * float(p @ p))
    return np.arccosh(1.0 + num / den) / math.sqrt(k)


def parallel_transport(model: AmbientModel, p, q, v) -> AmbientTangent:
    """Parallel transport of ``v`` (or a stack of vectors) from ``p`` to ``q``."""
    p = _coords(p)
    lv = log_map(model, p, q)
    v = np.asarray(getattr(v, "components", v), dtype=float)
    single = v.ndim == 1
    w0 = v[None, :] if single else v
    y1, _, w1 = geodesic_flow(model, p, lv.components, w0)
    out = w1[0] if single else w1
    return AmbientTangent(y1, out, ambiguous=lv.ambiguous)


# -- Hessian of the squared distance on the product ---------------------------------------


def _orthonormal_frame(model: AmbientModel, p: NDArray, first: NDArray | None) -> NDArray:
    """Columns form a ḡ_p-orthonormal basis, the first one along ``first``."""
    n = model.dim
    lam = float(model.metric_factor(p))
    cols = []
    seeds = [] if first is None else [first]
    seeds += list(np.eye(n))
    for s in seeds:
        w = np.array(s, dtype=float)
        for c in cols:
            w = w - lam * float(c @ w) * c
        nrm = math.sqrt(lam * float(w @ w))
        if nrm > 1e-8:
            cols.append(w / nrm)
        if len(cols) == n:
            break
    return np.array(cols).T


def _jacobi_fundamental(a_op: NDArray, r: float) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Fundamental solutions of V'' = −A V on [0, r] by RK4.

    Returns C(r), C'(r), S(r), S'(r) with C(0)=I, C'(0)=0, S(0)=0, S'(0)=I.
    """
    m = a_op.shape[0]
    state = np.zeros((2 * m, 2 * m))
    state[:m, :m] = np.eye(m)
    state[m:, m:] = np.eye(m)
    # columns: [C ; C'] and [S ; S']
    top = np.vstack([np.eye(m), np.zeros((m, m))])
    bot = np.vstack([np.zeros((m, m)), np.eye(m)])
    y = np.hstack([top, bot])
    gen = np.zeros((2 * m, 2 * m))
    gen[:m, m:] = np.eye(m)
    gen[m:, :m] = -a_op
    steps = max(_MIN_STEPS, int(math.ceil(r / 2e-3)))
    h = r / steps
    for _ in range(steps):
        k1 = gen @ y
        k2 = gen @ (y + 0.5 * h * k1)
        k3 = gen @ (y + 0.5 * h * k2)
        k4 = gen @ (y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y[:m, :m], y[m:, :m], y[:m, m:], y[m:, m:]


def distance_sq_hessian(model: AmbientModel, y1, y2) -> ProductHessian:
    """Hessian of d² on the product manifold at ``(y1, y2)``.

    In the frame (e_i at y₁, P_γ e_i at y₂) with e₁ along the minimal geodesic,

        ½ Hess(d²)(X, X) = (ξ₁ − η₁)² + r·[⟨V, V'⟩]₀^r,

    where V is the Jacobi field with boundary values the normal parts of
    (ξ, η). V is assembled from numerically integrated fundamental solutions
    of the Jacobi equation, whose operator A_ij = R̄(e₁, e_i, e₁, e_j) is
    constant along γ because ∇̄R̄m = 0.

    Raises
    ------
    PreconditionError
        If d(y₁, y₂) > min{i₀/2, 1/(4√K₀)}.
    """
    y1 = _coords(y1)
    y2 = _coords(y2)
    n = model.dim
    lv = log_map(model, y1, y2)
    if lv.ambiguous:
        raise PreconditionError("non-unique minimal geodesic")
    v = lv.components
    r = float(np.sqrt(model.inner(y1, v, v)))
    _, i0 = bounds_report(model)
    k0 = curvature_bound(model)
    limit = min(i0 / 2.0, INFINITE_RADIUS if k0 == 0 else 1.0 / (4.0 * math.sqrt(k0)))
    if r > limit:
        raise PreconditionError(f"d = {r:.6g} exceeds the admissible radius {limit:.6g}")

    degenerate = r < 1e-9
    e = _orthonormal_frame(model, y1, None if degenerate else v)
    if degenerate:
        ebar = e.copy()
        y2_end = y2
    else:
        y2_end, _, w = geodesic_flow(model, y1, v, e.T)
        ebar = w.T
    q = np.zeros((2 * n, 2 * n))
    if degenerate:
        blk = np.eye(n)
        q[:n, :n] = blk
        q[n:, n:] = blk
        q[:n, n:] = -blk
        q[n:, :n] = -blk
    else:
        rm = riemann_at(model, y1)
        a_full = np.einsum("abcd,a,bi,c,dj->ij", rm, e[:, 0], e, e[:, 0], e)
        m = n - 1
        q[0, 0] = q[n, n] = 1.0
        q[0, n] = q[n, 0] = -1.0
        if m > 0:
            a_op = a_full[1:, 1:]
            c, cp, s, sp = _jacobi_fundamental(a_op, r)
            s_inv = np.linalg.inv(s)
            # V'(r) = K_aa a + K_ab b, V'(0) = L_a a + L_b b
            k_a = cp - sp @ s_inv @ c
            k_b = sp @ s_inv
            l_a = -s_inv @ c
            l_b = s_inv
            # I = bᵀ V'(r) − aᵀ V'(0)
            blk = np.zeros((2 * m, 2 * m))
            blk[m:, :m] = k_a
            blk[m:, m:] = k_b
            blk[:m, :m] = -l_a
            blk[:m, m:] = -l_b
            blk = r * 0.5 * (blk + blk.T)
            ia = np.arange(1, n)
            ib = np.arange(n + 1, 2 * n)
            idx = np.concatenate([ia, ib])
            q[np.ix_(idx, idx)] += blk
    q *= 2.0
    t = np.zeros((2 * n, 2 * n))
    t[:n, :n] = np.linalg.inv(e)
    t[n:, n:] = np.linalg.inv(ebar)
    mat = t.T @ q @ t
    mat = 0.5 * (mat + mat.T)
    transport = ebar @ np.linalg.inv(e)
    return ProductHessian(mat, q, y1, np.asarray(y2_end), transport, r, model)


def fit_hessian_constant(hess: ProductHessian, vectors: ArrayLike) -> float:
    """Smallest C with Hess(X,X) ≥ 2|X₁ − P⁻¹X₂|² − C|X|²d² on ``vectors``.

    Returns 0 when the inequality holds with no correction term.
    """
    c = 0.0
    d2 = hess.dist**2
    for x in np.atleast_2d(vectors):
        gap, norm2 = hess.lower_bound_gap(x)
        if gap < 0:
            if d2 == 0 or norm2 == 0:
                return INFINITE_RADIUS
            c = max(c, -gap / (norm2 * d2))
    return c
