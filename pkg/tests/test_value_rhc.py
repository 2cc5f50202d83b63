import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from horizon_sde import merton_debt as md
from horizon_sde.sde_core import ControlledSde, ControlSet
from horizon_sde.value_rhc import (
    RhcPolicy,
    RunningCost,
    ValueFunction,
    auto_lower_bound,
    check_assumptions,
    horizon_monotonicity,
    phi_of,
)

import oracles

EPS = [1e-6, 1e-3, 1.0, 1e3]


def merton_parts(problem, variant=md.RUNNING):
    return (
        md.value_function(problem, variant),
        md.running_cost(problem, variant),
        md.rhc_policy(problem),
        md.problem_sde(problem),
    )


def with_beta(problem, beta, c1=-3.0):
    return md.DebtProblem(problem.market, beta, problem.T, c1, problem.c2, problem.x0)


# --- phi ---------------------------------------------------------------------


def test_phi_zero_at_origin(problem21):
    V, cost, pol, _ = merton_parts(problem21)
    assert phi_of(V, cost, pol, [0.0], 1.0) == 0.0


def test_phi_merton_value(problem21):
    V, cost, pol, _ = merton_parts(problem21)
    assert phi_of(V, cost, pol, [-100.0], 1.0) == pytest.approx(oracles.PHI, rel=1e-12)


@pytest.mark.parametrize("x", [1e-6, 3.0, 250.0])
def test_phi_zero_for_positive_wealth(problem21, x):
    V, cost, pol, _ = merton_parts(problem21)
    assert phi_of(V, cost, pol, [x], 1.0) == 0.0


def test_phi_rejects_nonpositive_horizon(problem21):
    V, cost, pol, _ = merton_parts(problem21)
    with pytest.raises(ValueError):
        phi_of(V, cost, pol, [-1.0], 0.0)


@settings(max_examples=60, deadline=None)
@given(
    x=st.floats(-1e3, -1e-3),
    T=st.floats(0.05, 20.0),
    beta=st.sampled_from([2.1, 3.3, 4.5, 7.8]),
)
def test_phi_matches_closed_form(problem21, x, T, beta):
    p = md.DebtProblem(problem21.market, beta, T, -3.0, 0.0, -1.0)
    V, cost, pol, _ = merton_parts(p)
    expected = (-x) ** beta * (-np.expm1(-p.eta * T))
    assert phi_of(V, cost, pol, [x], T) == pytest.approx(expected, rel=1e-10)


def test_phi_batched_shape(problem21):
    V, cost, pol, _ = merton_parts(problem21)
    xs = np.linspace(-200, 0, 11)[:, None]
    assert phi_of(V, cost, pol, xs, 1.0).shape == (11,)


# --- horizon derivative ----------------------------------------------------------


def test_horizon_derivative_value(problem21):
    V = md.value_function(problem21)
    assert horizon_monotonicity(V, [-100.0], 1.0) == pytest.approx(oracles.DV_DT, rel=1e-12)


@pytest.mark.parametrize("x", [[0.0], [5.0]])
def test_horizon_derivative_zero_off_debt(problem21, x):
    assert horizon_monotonicity(md.value_function(problem21), x, 1.0) == 0.0


@settings(max_examples=50, deadline=None)
@given(
    x=st.floats(-500.0, -1.0),
    T=st.floats(0.1, 30.0),
    variant=st.sampled_from(md.VARIANTS),
    beta=st.sampled_from([2.1, 4.5, 7.8]),
)
def test_horizon_derivative_matches_finite_difference(problem21, x, T, variant, beta):
    V = md.value_function(with_beta(problem21, beta), variant)
    h = 1e-5
    fd = (V.evaluate([x], T + h) - V.evaluate([x], T - h)) / (2 * h)
    assert V.horizon_derivative([x], T) == pytest.approx(fd, rel=1e-5)


# --- check_assumptions -------------------------------------------------------------


def test_stable_beta_passes_everything(problem21):
    V, cost, pol, sde = merton_parts(problem21)
    rep = check_assumptions(V, cost, pol, sde, ([-200.0], [0.0]), 256, EPS)
    assert rep.all_passed, rep.render()
    assert "A2.2 accepted" in " ".join(rep.notes)
    assert all(d > 0 for _, d in rep.a3_continuity_at_0.evidence["delta_table"])


def test_unstable_beta_fails_phi_positivity(problem21):
    p = with_beta(problem21, 7.8)
    V, cost, pol, sde = merton_parts(p)
    rep = check_assumptions(V, cost, pol, sde, ([-200.0], [0.0]), 256, EPS)
    assert not rep.a2_phi_positivity.passed
    assert rep.a2_phi_positivity.evidence["phi"] < 0
    assert rep.a2_phi_positivity.evidence["x"][0] < 0
    # the others still hold
    for name in ("A1", "A2.1", "A2.2", "A3", "A4"):
        assert rep.checks()[name].passed, name


def test_zero_value_fails_a2():
    zero = lambda x, *a: np.zeros(np.shape(x)[:-1])  # noqa: E731
    V = ValueFunction(zero, lambda x, T: np.zeros(np.shape(x)), lambda x, T: np.zeros(np.shape(x) + (1,)), zero)
    cost = RunningCost(f=lambda x, u: np.zeros(np.shape(x)[:-1]), g=lambda x: np.zeros(np.shape(x)[:-1]))
    pol = RhcPolicy(lambda x, T: np.zeros(np.shape(x)), 1.0)
    sde = ControlledSde(1, 1, 1, lambda x, u: -np.asarray(x), lambda x, u: np.zeros(np.shape(x) + (1,)), ControlSet([0.0], [0.0]))
    rep = check_assumptions(V, cost, pol, sde, ([-1.0], [1.0]), 32, EPS)
    assert not rep.a2_phi_positivity.passed
    assert not rep.a2_2_cost_positivity.passed
    assert not rep.a4_lower_bound.passed


def test_domain_must_contain_origin(problem21):
    V, cost, pol, sde = merton_parts(problem21)
    with pytest.raises(ValueError):
        check_assumptions(V, cost, pol, sde, ([-200.0], [-1.0]), 16, EPS)


def test_invariant_region_is_flagged(problem21):
    V, cost, pol, sde = merton_parts(problem21)
    # with x > 0 in the domain, f vanishes there, so A2 only holds on the debt side
    full = check_assumptions(V, cost, pol, sde, ([-200.0], [50.0]), 64, EPS)
    assert not full.a2_phi_positivity.passed
    restricted = check_assumptions(V, cost, pol, sde, ([-200.0], [50.0]), 64, EPS, invariant_region=([-200.0], [0.0]))
    assert restricted.a2_phi_positivity.passed
    assert any("invariant region" in n for n in restricted.notes)


def test_equilibrium_failure_detected():
    V = ValueFunction(
        lambda x, T: np.sum(np.asarray(x) ** 2, axis=-1) * T,
        lambda x, T: 2 * np.asarray(x) * T,
        lambda x, T: 2 * T * np.ones(np.shape(x) + (1,)),
        lambda x, T: np.sum(np.asarray(x) ** 2, axis=-1),
    )
    cost = RunningCost(lambda x, u: np.sum(np.asarray(x) ** 2, axis=-1) * 2, lambda x: np.zeros(np.shape(x)[:-1]))
    pol = RhcPolicy(lambda x, T: np.zeros(np.shape(x)), 1.0)
    sde = ControlledSde(1, 1, 1, lambda x, u: 1.0 - np.asarray(x), lambda x, u: np.zeros(np.shape(x) + (1,)), ControlSet([0.0], [0.0]))
    rep = check_assumptions(V, cost, pol, sde, ([-1.0], [1.0]), 32, EPS)
    assert not rep.a2_1_equilibrium.passed
    assert rep.a2_phi_positivity.passed


def test_report_is_deterministic_and_renders(problem21):
    V, cost, pol, sde = merton_parts(problem21)
    a = check_assumptions(V, cost, pol, sde, ([-200.0], [0.0]), 64, EPS).render()
    b = check_assumptions(V, cost, pol, sde, ([-200.0], [0.0]), 64, EPS).render()
    assert a == b
    assert a.count("PASS") == 6 and "[-200.0]" in a


def test_auto_lower_bound_recovers_value_in_one_dimension(problem21):
    V = md.value_function(problem21)
    radii = np.array([0.0, 1.0, 10.0, 100.0, 200.0, 300.0])
    h = auto_lower_bound(V, 1.0, np.array([-200.0]), np.array([0.0]), radii)
    assert np.allclose(h[:5], V.evaluate(-radii[:5, None], 1.0))
    assert h[5] == h[4]
    assert np.all(np.diff(h) >= 0)


def test_supplied_lower_bound_too_large_fails(problem21):
    V, cost, pol, sde = merton_parts(problem21)
    rep = check_assumptions(V, cost, pol, sde, ([-200.0], [0.0]), 64, EPS, h=lambda r: 2 * np.asarray(r) ** 2.1)
    assert not rep.a4_lower_bound.passed
    assert "V<h" in rep.a4_lower_bound.detail


def test_two_dimensional_quadratic_passes():
    A = np.array([1.0, 2.0])
    V = ValueFunction(
        lambda x, T: np.sum(A * np.asarray(x) ** 2, axis=-1) * (1 - np.exp(-T)),
        lambda x, T: 2 * A * np.asarray(x) * (1 - np.exp(-T)),
        lambda x, T: np.broadcast_to(np.diag(2 * A) * (1 - np.exp(-T)), np.shape(x) + (2,)),
        lambda x, T: np.sum(A * np.asarray(x) ** 2, axis=-1) * np.exp(-T),
    )
    cost = RunningCost(lambda x, u: np.sum(A * np.asarray(x) ** 2, axis=-1), lambda x: np.zeros(np.shape(x)[:-1]))
    pol = RhcPolicy(lambda x, T: -np.asarray(x)[..., :1], 2.0)
    sde = ControlledSde(
        2, 1, 2,
        lambda x, u: np.asarray(x) * np.asarray(u)[..., :1],
        lambda x, u: 0.1 * np.asarray(x)[..., :, None] * np.eye(2),
        ControlSet([-10.0], [10.0]),
    )
    rep = check_assumptions(V, cost, pol, sde, ([-1.0, -1.0], [1.0, 1.0]), 128, EPS)
    assert rep.all_passed, rep.render()
