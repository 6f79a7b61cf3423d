import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact import ambient as amb
from artifact.errors import ArgumentError, DomainError, PreconditionError

# -- independent closed forms -----------------------------------------------------------


def sphere_embed(y, R):
    """Inverse stereographic projection from the north pole onto the equatorial plane."""
    y = np.asarray(y, float)
    s = y @ y
    return np.concatenate([2 * R * R * y, [R * (s - R * R)]]) / (s + R * R)


def sphere_chart(P, R):
    return R * P[:-1] / (R - P[-1])


def sphere_exp_oracle(y, v, R):
    P = sphere_embed(y, R)
    eps = 1e-6
    # pushforward of v by finite differences of the embedding (smooth, exact to O(eps²))
    dP = (sphere_embed(y + eps * v, R) - sphere_embed(y - eps * v, R)) / (2 * eps)
    speed = np.linalg.norm(dP)
    Q = math.cos(speed / R) * P + R * math.sin(speed / R) * dP / speed
    return sphere_chart(Q, R)


def poincare_distance(p, q, k=1.0):
    a = math.sqrt(k)
    p, q = a * np.asarray(p), a * np.asarray(q)
    arg = 1 + 2 * np.sum((p - q) ** 2) / ((1 - p @ p) * (1 - q @ q))
    return math.acosh(arg) / a


small_vec = st.lists(st.floats(-0.3, 0.3), min_size=3, max_size=3).map(np.array)


# -- construction -----------------------------------------------------------------------


def test_constructors_validate():
    with pytest.raises(ArgumentError):
        amb.AmbientModel("klein", 2)
    with pytest.raises(ArgumentError):
        amb.AmbientModel.euclidean(1)
    with pytest.raises(ArgumentError):
        amb.AmbientModel.sphere(2, -1.0)
    with pytest.raises(ArgumentError):
        amb.AmbientModel.flat_torus([1.0, 0.0])


def test_domain_error_outside_ball():
    m = amb.AmbientModel.hyperbolic(2, 4.0)
    with pytest.raises(DomainError):
        amb.metric_at(m, [0.6, 0.0])


@pytest.mark.parametrize(
    "model, c0sq, i0",
    [
        (amb.AmbientModel.euclidean(3), 0.0, amb.INFINITE_RADIUS),
        (amb.AmbientModel.sphere(2, 2.0), 0.25 * 2.0, 2 * math.pi),
        (amb.AmbientModel.hyperbolic(3, 1.0), math.sqrt(12.0), amb.INFINITE_RADIUS),
        (amb.AmbientModel.flat_torus([1.0, 3.0]), 0.0, 0.5),
    ],
)
def test_bounds_report(model, c0sq, i0):
    c0, got_i0 = amb.bounds_report(model)
    assert c0**2 == pytest.approx(c0sq)
    assert got_i0 == i0


def test_riemann_sectional_curvature():
    m = amb.AmbientModel.sphere(3, 2.0)
    y = np.array([0.3, -0.2, 0.5])
    R = amb.riemann_at(m, y)
    g = amb.metric_at(m, y)
    u, v = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    num = np.einsum("abcd,a,b,c,d->", R, u, v, u, v)
    den = (u @ g @ u) * (v @ g @ v) - (u @ g @ v) ** 2
    assert num / den == pytest.approx(0.25)
    assert np.all(amb.riemann_at(m, y, order=2) == 0)
    with pytest.raises(ArgumentError):
        amb.riemann_at(m, y, order=4)


def test_christoffel_matches_metric_derivative():
    m = amb.AmbientModel.hyperbolic(2, 1.0)
    y = np.array([0.2, 0.35])
    G = amb.christoffel_at(m, y)
    ginv = np.linalg.inv(amb.metric_at(m, y))
    e = 1e-6
    dg = np.stack([(amb.metric_at(m, y + e * d) - amb.metric_at(m, y - e * d)) / (2 * e) for d in np.eye(2)])
    # Γ^c_ab = ½ g^cd (∂_a g_db + ∂_b g_da − ∂_d g_ab)
    ref = 0.5 * np.einsum("cd,adb->cab", ginv, dg) + 0.5 * np.einsum("cd,bda->cab", ginv, dg) \
        - 0.5 * np.einsum("cd,dab->cab", ginv, dg)
    np.testing.assert_allclose(G, ref, atol=1e-8)


# -- geodesics --------------------------------------------------------------------------


def test_sphere_exp_matches_embedding():
    R = 1.5
    m = amb.AmbientModel.sphere(2, R)
    y = np.array([0.4, -0.3])
    v = np.array([0.7, 0.2])
    got = np.asarray(amb.exp_map(m, y, v))
    np.testing.assert_allclose(got, sphere_exp_oracle(y, v, R), atol=1e-8)


def test_exp_warns_past_injectivity_radius():
    m = amb.AmbientModel.sphere(2, 1.0)
    assert amb.exp_map(m, [0.0, 0.0], [2.0, 0.0]).warning  # speed 4 ≥ π
    assert not amb.exp_map(m, [0.0, 0.0], [0.5, 0.0]).warning


def test_antipodal_log_is_ambiguous():
    m = amb.AmbientModel.sphere(2, 1.0)
    P = sphere_embed([0.2, 0.1], 1.0)
    q = sphere_chart(-P, 1.0)
    assert amb.log_map(m, [0.2, 0.1], q).ambiguous


def test_torus_distance_uses_nearest_translate():
    m = amb.AmbientModel.flat_torus([1.0, 1.0])
    assert amb.distance(m, [0.05, 0.5], [0.95, 0.5]) == pytest.approx(0.1)
    assert amb.distances_to(m, [0.05, 0.5], np.array([[0.95, 0.5]]))[0] == pytest.approx(0.1)


@settings(max_examples=25, deadline=None)
@given(small_vec, small_vec)
def test_hyperbolic_distance_closed_form(p, q):
    m = amb.AmbientModel.hyperbolic(3, 2.0)
    p, q = p * 0.7, q * 0.7
    ref = poincare_distance(p, q, 2.0)
    assert amb.distance(m, p, q) == pytest.approx(ref, rel=1e-9, abs=1e-11)
    assert amb.distances_to(m, p, q[None])[0] == pytest.approx(ref, rel=1e-9, abs=1e-11)


@settings(max_examples=25, deadline=None)
@given(small_vec, small_vec)
def test_exp_log_round_trip(p, v):
    m = amb.AmbientModel.sphere(3, 1.0)
    q = np.asarray(amb.exp_map(m, p, v))
    back = amb.log_map(m, p, q).components
    np.testing.assert_allclose(back, v, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(small_vec, small_vec, small_vec)
def test_parallel_transport_is_isometric(p, q, w):
    m = amb.AmbientModel.hyperbolic(3, 1.0)
    out = amb.parallel_transport(m, p, q, w)
    n0 = m.inner(p, w, w)
    n1 = m.inner(out.base, out.components, out.components)
    assert float(n1) == pytest.approx(float(n0), rel=1e-8, abs=1e-14)
    np.testing.assert_allclose(out.base, q, atol=1e-9)


# -- squared distance Hessian -------------------------------------------------------------


def test_euclidean_hessian_is_exact():
    m = amb.AmbientModel.euclidean(2)
    hs = amb.distance_sq_hessian(m, [0.1, 0.2], [0.3, -0.1])
    eye = np.eye(2)
    np.testing.assert_allclose(hs.matrix, 2 * np.block([[eye, -eye], [-eye, eye]]), atol=1e-10)
    assert amb.fit_hessian_constant(hs, np.random.default_rng(0).standard_normal((20, 4))) == 0.0


def test_hessian_precondition():
    m = amb.AmbientModel.sphere(2, 1.0)
    with pytest.raises(PreconditionError):
        amb.distance_sq_hessian(m, [0.0, 0.0], [0.5, 0.0])  # distance ≈ 0.93 > 1/4


def test_sphere_hessian_parallel_normal_field():
    # V(s) = cos(s − r/2)/cos(r/2) solves V″ + V = 0 with V(0) = V(r) = 1, so
    # Hess(d²)(X, X) = 2r[V V′]₀^r = −4r tan(r/2) for unit normal parallel X.
    m = amb.AmbientModel.sphere(2, 1.0)
    p, q = [0.05, 0.0], [0.05, 0.08]
    hs = amb.distance_sq_hessian(m, p, q)
    P, Q = sphere_embed(p, 1.0), sphere_embed(q, 1.0)
    r = math.acos(np.clip(P @ Q, -1, 1))
    assert hs.dist == pytest.approx(r, rel=1e-10)
    x = np.array([0.0, 1.0, 0.0, 1.0])
    assert float(x @ hs.frame_matrix @ x) == pytest.approx(-4 * r * math.tan(r / 2), rel=1e-8)
    tangential = np.array([1.0, 0.0, -1.0, 0.0])
    assert float(tangential @ hs.frame_matrix @ tangential) == pytest.approx(8.0, rel=1e-8)
