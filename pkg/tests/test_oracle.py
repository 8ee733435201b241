import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otcmm.model import FixedPolicy, TierParams, ValuePolicy, desk_params, policy_entropy, zero_intensity_policy, zero_value
from otcmm.oracle import (
    K1_CAP,
    EpsGrid,
    exact_sup_value,
    grid_variational_optimum,
    hjb_backward_solve,
    k1_instance,
    lattice_policy_evaluation,
    mc_policy_eval,
    optimal_lattice_policy,
    policy_improvement_check,
    side_objective,
    side_sup_value,
    side_vertex,
)

TIER1 = TierParams(10, 20.0, 1.0)
K1 = k1_instance()
# lattice value V(0, S0, q0) on the single-tier instance, frozen from the backward solve
K1_LATTICE_V0 = 2.2570143963533003


def grid_log_partition(tier, H, gamma, n=200001, half_width=14.0):
    """gamma * ln of the Riemann sum of exp(f/gamma), computed in a stable way."""
    m = side_vertex(tier, H)
    sd = math.sqrt(gamma / (2 * tier.z * tier.B))
    x = np.linspace(m - half_width * sd, m + half_width * sd, n)
    f = side_objective(tier, H, x) / gamma
    top = f.max()
    return gamma * (top + math.log(np.sum(np.exp(f - top)) * (x[1] - x[0])))


def test_eps_grid_validation():
    with pytest.raises(ValueError):
        EpsGrid(1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        EpsGrid(0.0, 1.0, 0.1)
    assert EpsGrid(0.0, 1.0, 0.01).points().size == 101


def test_side_objective_roots_and_vertex():
    H = 3.0
    assert side_objective(TIER1, H, TIER1.A / TIER1.B) == 0
    assert side_objective(TIER1, H, -H / TIER1.z) == 0
    grid = np.arange(0.0, 20.0, 1e-4)
    m = side_vertex(TIER1, H)
    assert abs(grid[np.argmax(side_objective(TIER1, H, grid))] - m) <= 1e-4
    peak = TIER1.z * TIER1.B * (TIER1.A / (2 * TIER1.B) + H / (2 * TIER1.z)) ** 2
    assert side_objective(TIER1, H, m) == pytest.approx(peak)


def test_grid_optimum_desk_tier1():
    opt = grid_variational_optimum(TIER1, 0.0, 0.01, EpsGrid(9.0, 11.0, 1e-4))
    assert abs(opt.mean - 10.0) < 1e-3
    assert abs(opt.variance - 5.0e-4) < 1e-5
    assert opt.tv_distance < 1e-3


def test_grid_optimum_variance_linear_in_gamma():
    v = []
    for gamma in (10.0, 20.0):
        sd = math.sqrt(gamma / 20)
        v.append(grid_variational_optimum(TIER1, 0.0, gamma, EpsGrid.around(10.0, sd)).variance)
    assert abs(v[1] / v[0] - 2.0) < 0.02


def test_grid_optimum_translation():
    c = 0.37
    grid = EpsGrid(8.0, 12.0, 1e-4)
    a = grid_variational_optimum(TIER1, 0.0, 0.01, grid)
    b = grid_variational_optimum(TIER1, 2 * TIER1.z * c, 0.01, grid)
    assert abs((a.mean - b.mean) - c) < 1e-4


def test_grid_optimum_rejects_narrow_grid():
    with pytest.raises(ValueError):
        grid_variational_optimum(TIER1, 0.0, 0.01, EpsGrid(9.99, 10.01, 1e-4))


@settings(max_examples=20, deadline=None)
@given(
    st.sampled_from(desk_params().tiers + (TierParams(1, 2.0, 1.0),)),
    st.floats(-30, 30),
    st.floats(-30, 30),
    st.floats(0.005, 1.0),
)
def test_sup_value_matches_grid_integration(tier, hp, hm, gamma):
    exact = exact_sup_value(tier, hp, hm, gamma)
    numeric = grid_log_partition(tier, hp, gamma) + grid_log_partition(tier, hm, gamma)
    assert abs(exact - numeric) <= 1e-4 * max(abs(numeric), 1e-8)


def test_sup_value_vertex_at_zero():
    gamma = 0.05
    H = TIER1.z * TIER1.A / TIER1.B  # puts both vertices at zero
    zB = TIER1.z * TIER1.B
    expected = 2 * TIER1.A * H + gamma * math.log(math.pi * gamma / zB)
    assert exact_sup_value(TIER1, H, H, gamma) == pytest.approx(expected, rel=1e-14)


def test_sup_value_gamma_doubling():
    gamma, H = 0.02, 1.5
    d = exact_sup_value(TIER1, H, -H, 2 * gamma) - exact_sup_value(TIER1, H, -H, gamma)
    numeric = sum(grid_log_partition(TIER1, h, 2 * gamma) - grid_log_partition(TIER1, h, gamma) for h in (H, -H))
    assert d == pytest.approx(numeric, rel=1e-6)


def test_sup_value_dominates_random_densities():
    gamma, H = 0.01, 2.0
    m = side_vertex(TIER1, H)
    x = np.linspace(m - 0.2, m + 0.2, 801)
    dx = x[1] - x[0]
    f = side_objective(TIER1, H, x)
    sup = float(side_sup_value(TIER1, H, gamma))
    rng = np.random.default_rng(0)
    for _ in range(100):
        w = rng.dirichlet(np.full(x.size, 0.5))
        val = float(np.sum(w * f)) - gamma * float(np.sum(w * np.log(np.where(w > 0, w / dx, 1.0))))
        assert val <= sup + 1e-12


# ---- lattice solver

def test_lattice_refuses_volatility():
    with pytest.raises(ValueError):
        hjb_backward_solve(desk_params(), -50, 50)


def test_lattice_terminal_and_frozen_value():
    lat = hjb_backward_solve(K1, *K1_CAP)
    assert np.all(lat.V[-1] == 0)
    assert lat.value(0.0, 1.0, 0) == pytest.approx(K1_LATTICE_V0, rel=1e-12)


def test_lattice_single_step_closed_form():
    p = k1_instance(T=0.01, delta=0.0)
    lat = hjb_backward_solve(p, -5, 5)
    tier = p.tiers[0]
    expected = p.dt * exact_sup_value(tier, tier.z * p.S0, -tier.z * p.S0, p.gamma)
    assert lat.value(0.0, 1.0, 0) == pytest.approx(expected, rel=1e-12)


def test_lattice_heavy_penalty_prefers_flat_inventory():
    lat = hjb_backward_solve(k1_instance(delta=1e3), -5, 5)
    assert np.all(lat.V[0, 5] >= lat.V[0])


def test_lattice_moderate_penalty_prefers_flat_inventory():
    V0 = hjb_backward_solve(k1_instance(delta=1.0), -5, 5).V[0]
    assert np.all(V0[5] >= V0)
    assert np.all(np.diff(V0[5:]) < 0) and np.all(np.diff(V0[:6]) > 0)


def test_lattice_divergence_is_reported():
    with pytest.raises(FloatingPointError, match="diverged"):
        hjb_backward_solve(k1_instance(delta=50.0), -5, 5)


def test_lattice_monotone_in_penalty():
    lo = hjb_backward_solve(k1_instance(delta=0.1), -5, 5)
    hi = hjb_backward_solve(k1_instance(delta=0.5), -5, 5)
    assert np.all(hi.V <= lo.V + 1e-12)


def test_lattice_step_refinement_is_first_order():
    vals = [hjb_backward_solve(k1_instance(dt=dt), -5, 5).value(0.0, 1.0, 0) for dt in (0.02, 0.01, 0.005)]
    d1, d2 = vals[0] - vals[1], vals[1] - vals[2]
    assert abs(d2) < abs(d1)
    assert 1.5 < d1 / d2 < 2.5


def test_lattice_policy_evaluation_reproduces_optimum():
    lat = hjb_backward_solve(K1, *K1_CAP)
    ev = lattice_policy_evaluation(optimal_lattice_policy(lat, K1), K1, *K1_CAP)
    np.testing.assert_allclose(ev.V, lat.V, rtol=1e-10, atol=1e-10)


def test_lattice_policy_evaluation_is_below_optimum():
    lat = hjb_backward_solve(K1, *K1_CAP)
    ev = lattice_policy_evaluation(ValuePolicy(zero_value, K1), K1, *K1_CAP)
    assert np.all(ev.V <= lat.V + 1e-12)


# ---- Monte Carlo evaluation

def test_mc_zero_intensity_is_entropy_bonus():
    p = k1_instance(delta=0.0)
    mean, se = mc_policy_eval(zero_intensity_policy(p), p, 200, 0)
    assert mean == pytest.approx(p.gamma * policy_entropy(p) * p.T, rel=1e-12)
    assert se < 1e-12


def test_mc_requires_enough_episodes():
    with pytest.raises(ValueError):
        mc_policy_eval(zero_intensity_policy(K1), K1, 10, 0)


def test_mc_stderr_scaling():
    pol = optimal_lattice_policy(hjb_backward_solve(K1, *K1_CAP), K1)
    _, se1 = mc_policy_eval(pol, K1, 2000, 1, q_cap=K1_CAP)
    _, se2 = mc_policy_eval(pol, K1, 4000, 1, q_cap=K1_CAP)
    assert 1.3 <= se1 / se2 <= 1.55


def test_improvement_self_comparison():
    rep = policy_improvement_check(zero_value, K1, 500, 3, ValuePolicy(zero_value, K1), q_cap=K1_CAP)
    assert rep.old_mean == rep.new_mean and rep.passed


def test_improvement_over_wide_spreads():
    wide = FixedPolicy([1.9, 1.9], K1.policy_variance())
    rep = policy_improvement_check(zero_value, K1, 2000, 4, wide, q_cap=K1_CAP)
    assert rep.passed
    assert rep.improvement > 3 * rep.stderr
