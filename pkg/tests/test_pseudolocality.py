import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from artifact import flows as fl
from artifact import pseudolocality as pl
from artifact.ambient import AmbientModel
from artifact.errors import ArgumentError, PreconditionError
from artifact.immersion import shapes


def synthetic_history(A_of, times, n=101):
    """Static segment [−1, 1] with a prescribed |A| field A_of(k, x)."""
    fld = shapes.line(n)
    grid = fld.grid
    x = grid.mesh()[0]
    hist = fl.FlowHistory(grid, fld.model)
    w = np.full(grid.shape, grid.spacing[0])
    for k, t in enumerate(times):
        hist.times.append(float(t))
        hist.X.append(fld.X.copy())
        hist.A2.append(np.asarray(A_of(k, x), dtype=float) ** 2)
        hist.H.append(np.zeros_like(fld.X))
        hist.weights.append(w)
    return hist


def static_history(fld, times):
    """History of a stationary immersion (a line is a fixed point of the flow)."""
    hist = fl.FlowHistory(fld.grid, fld.model)
    for t in times:
        hist.add(fl.FlowState.start(fld, float(t)))
    return hist


# -- density ------------------------------------------------------------------------------------


def test_density_scale():
    assert pl.density_scale(0.0, math.inf, 0.1) == pytest.approx(math.sqrt(0.1))
    assert pl.density_scale(2.0, math.inf, 0.5) == pytest.approx(1 / (2 * math.sqrt(math.e)))
    assert pl.density_scale(0.0, 0.2, 0.5) == 0.2


def test_heat_kernel_mass_on_a_line():
    # ∫ φ dx over a line through the centre = (1 − τ/ε)^{−1/2} e^{−t/(2ε)}, τ = t̄ − t
    phi = pl.HeatKernelWeight(np.zeros(2), 0.05, 0.1, 1)
    t = 0.02
    tau = 0.03
    mass, _ = integrate.quad(lambda x: float(phi(x * x, t)), -np.inf, np.inf)
    assert mass == pytest.approx((1 - tau / 0.1) ** -0.5 * math.exp(-t / 0.2), rel=1e-10)
    with pytest.raises(ArgumentError):
        phi(0.0, 0.05)


def test_cutoff_weight_support():
    psi = pl.CutoffWeight(np.zeros(2), 0.5, 1)
    assert float(psi(0.0, 0.0)) == 1.0
    assert float(psi(0.25, 0.0)) == 0.0
    assert float(psi(0.0, 0.25 / 3)) == 0.0
    assert float(psi(0.1, 0.01)) == pytest.approx((1 - 0.13 / 0.25) ** 3)


def stationary_line_density(t, tbar, eps, rho):
    """D(t) for the static x-axis through the centre, by adaptive quadrature."""
    tau = tbar - t
    support = math.sqrt(max(rho * rho - 3 * t, 0.0))

    def f(x):
        phi = (4 * math.pi * tau) ** -0.5 * math.exp(-(1 - tau / eps) * x * x / (4 * tau) - t / (2 * eps))
        return phi * (1 - (x * x + 3 * t) / rho**2) ** 3

    val, _ = integrate.quad(f, -support, support, epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


def test_gaussian_density_matches_quadrature_on_line():
    hist = static_history(shapes.line(2001), np.linspace(0, 0.009, 4))
    rep = pl.gaussian_density(hist, [0.0, 0.0], 0.01, 0.1)
    assert rep.rho == pytest.approx(math.sqrt(0.1))
    for t, D in zip(rep.times, rep.D):
        assert D == pytest.approx(stationary_line_density(t, 0.01, 0.1, rep.rho), rel=1e-6)
    assert np.all(np.abs(rep.dissipation) < 1e-20)
    assert pl.monotonicity_check(rep).passes


def test_monotonicity_needs_three_samples():
    hist = fl.run_flow(shapes.line(201), fl.FlowConfig(T=0.001), sample_times=[0.0, 0.001])
    res = pl.monotonicity_check(pl.gaussian_density(hist, [0.0, 0.0], 0.01, 0.1))
    assert not res.passes and res["flag"] == "insufficient samples"


def test_density_precondition():
    hist = fl.run_flow(shapes.line(201), fl.FlowConfig(T=0.001), sample_times=[0.0, 0.001])
    with pytest.raises(PreconditionError):
        pl.gaussian_density(hist, [0.0, 0.0], -1.0, 0.1)


def test_density_truncation_warning():
    hist = fl.run_flow(shapes.line(201, -0.2, 0.2), fl.FlowConfig(T=0.001), sample_times=[0.0, 0.001])
    rep = pl.gaussian_density(hist, [0.0, 0.0], 0.01, 0.1)
    assert rep.truncated and rep.warnings


# -- point picking ----------------------------------------------------------------------------------

DENSE = np.arange(0, 201) * 1e-6


def test_single_spike_is_picked():
    hist = synthetic_history(lambda k, x: np.where(np.isclose(x, 0.2), 50.0, 0.0), DENSE)
    pick = pl.point_pick(hist, 0.1, 1.0, x0=[0.0, 0.0])
    node = int(np.argmin(np.abs(hist.grid.mesh()[0] - 0.2)))
    assert pick.node == (node,)
    assert pick.Q == 50.0
    assert pick.trace == [(pick.time_index, (node,))]
    assert pick.verified
    oracle = pl.exhaustive_pick_oracle(hist, 0.1, 1.0, pick.trace[0], x0=[0.0, 0.0])
    assert oracle == (pick.time_index, pick.node)


def cascade(k, x):
    A = np.zeros_like(x)
    A[30] = 20.0
    if k >= 100:
        A[35] = 100.0
    return A


def test_cascade_moves_to_larger_spike():
    hist = synthetic_history(cascade, DENSE)
    seed = (150, (30,))
    # node 35 lies 0.1 from the seed, inside the radius K/20 = 0.2
    pick = pl.point_pick(hist, 1e-4, 4.0, seed, x0=[-0.4, 0.0])
    assert len(pick.trace) == 2
    assert pick.node == (35,)
    assert pick.time_index == 100  # ties at equal |A| go to the earliest sample
    assert pl.exhaustive_pick_oracle(hist, 1e-4, 4.0, seed, x0=[-0.4, 0.0]) == (100, (35,))


def test_no_violation_returns_none():
    hist = synthetic_history(lambda k, x: np.full_like(x, 1.0), DENSE)
    assert pl.point_pick(hist, 0.1, 1.0) is None


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 100), st.integers(1, 12), st.floats(1.0, 500.0)), min_size=1, max_size=5),
       st.floats(0.05, 3.0))
def test_pick_agrees_with_oracle(spikes, K):
    times = np.arange(0, 13) * 1e-4

    def A_of(k, x):
        A = np.ones_like(x) * 0.5
        for node, start, val in spikes:
            if k >= start:
                A[node] = max(A[node], val)
        return A

    hist = synthetic_history(A_of, times)
    pick = pl.point_pick(hist, 1e-3, K, x0=[0.0, 0.0])
    if pick is None:
        return
    got = (pick.time_index, pick.node)
    assert got == pl.exhaustive_pick_oracle(hist, 1e-3, K, pick.trace[0], x0=[0.0, 0.0])
    # each iterate at least quadruples |A|
    A = [math.sqrt(hist.A2[k][n]) for k, n in pick.trace]
    assert all(b > 4 * a for a, b in zip(A, A[1:]))


# -- audits --------------------------------------------------------------------------------------


def test_pseudolocality_precondition_on_horizon():
    hist = fl.run_flow(shapes.line(201), fl.FlowConfig(T=0.01), sample_times=[0.0, 0.01])
    with pytest.raises(PreconditionError):
        pl.pseudolocality_audit(hist, (100,), 0.5, 0.1, 0.1)


def test_pseudolocality_on_flat_line():
    hist = fl.run_flow(shapes.line(201), fl.FlowConfig(T=0.0025), sample_times=[0.0, 0.001, 0.0025])
    rep = pl.pseudolocality_audit(hist, (100,), 0.5, 0.1, 0.1)
    assert rep.passes
    assert rep.value == pytest.approx(-0.001 / 0.05**2)  # t(|A|² − (εr₀)⁻²) peaks at the first sample
    assert rep.meta["graph"]["is_graph"]
    body = json.loads(rep.to_json())
    assert body["kind"] == "pseudolocality" and body["passes"] is True


def test_pseudolocality_empty_ball():
    hist = fl.run_flow(shapes.line(201), fl.FlowConfig(T=0.0025), sample_times=[0.0, 0.0025])
    rep = pl.pseudolocality_audit(hist, [0.0, 5.0], 0.5, 0.1, 0.1)
    assert not rep.passes and "empty audit" in rep.flags


def test_persistence_circle_modes():
    hist = fl.run_flow(shapes.circle(128), fl.FlowConfig(T=0.4), record_every=25)
    ok = pl.persistence_audit(hist, (0,), 1.0, 0.5, "cor76", c0=1.0, T1=0.3)
    assert ok.passes
    assert any(f.startswith("hypothesis-unknown") for f in ok.flags)
    bad = pl.persistence_audit(hist, (0,), 1.0, 0.5, "cor76", c0=1.0)
    assert not bad.passes
    # semi-discretely |A| = c_h/r with r² = 1 − 2c_h t, crossing 2 at t* (→ 3/8 as h → 0)
    h = 2 * math.pi / 128
    c = (2 * (1 - math.cos(h)) / h**2) / (math.sin(h) / h) ** 2
    t_star = (1 - c * c / 4) / (2 * c)
    assert t_star <= bad.first_violation["t"] <= t_star + 2e-3
    with pytest.raises(ArgumentError):
        pl.persistence_audit(hist, (0,), 1.0, 0.5, "cor76")
    with pytest.raises(ArgumentError):
        pl.persistence_audit(hist, (0,), 1.0, 0.5, "thm99")


def test_local_persistence_flags_curved_start():
    hist = fl.run_flow(shapes.circle(128, 0.5), fl.FlowConfig(T=0.002), record_every=25)
    rep = pl.persistence_audit(hist, (0,), 1.0, 0.1, "thm75")
    assert "hypothesis |A| <= 1/r0 fails at t = 0" in rep.flags


def test_audits_on_curved_ambient():
    model = AmbientModel.sphere(2, 1.0)
    hist = fl.run_flow(shapes.great_circle(256, model), fl.FlowConfig(T=0.0025), sample_times=[0.0, 0.0025])
    rep = pl.pseudolocality_audit(hist, (0,), 0.5, 0.1, 0.1)
    assert rep.passes and rep.value <= 0.0
