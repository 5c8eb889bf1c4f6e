import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p2phvac.model import (
    BatteryParams,
    CostBreakdown,
    GridTariff,
    HvacParams,
    Schedule,
    TimeHorizon,
    TradeState,
    UserEnvironment,
    UserProfile,
    battery_cost,
    discomfort_cost,
    grid_cost,
    p2p_cost,
    simulate_temperature,
    thermal_step,
    validate_schedule,
)


def hvac(**kw):
    base = dict(thermal_rc=2.0, efficiency=-0.5, comfort_weight=0.2, preferred_temp=25.0,
                temp_min=15.0, temp_max=32.0, hvac_max=5.0)
    base.update(kw)
    return HvacParams(**base)


def test_thermal_equilibrium_is_fixed_point():
    assert thermal_step(30.0, 30.0, 0.0, hvac()) == 30.0


def test_thermal_decay_value():
    hv = hvac()
    assert hv.decay == pytest.approx(0.60653, abs=1e-5)
    # independent scalar recursion
    kappa = math.exp(-1.0 / 2.0)
    assert thermal_step(20.0, 30.0, 0.0, hv) == pytest.approx(30.0 - 10.0 * kappa, abs=1e-12)
    assert thermal_step(20.0, 30.0, 0.0, hv) == pytest.approx(23.9347, abs=1e-4)


def test_cooling_at_equilibrium():
    assert thermal_step(25.0, 25.0, 2.0, hvac()) == pytest.approx(24.0)


@settings(max_examples=50)
@given(st.floats(0, 1), st.floats(10, 35), st.floats(10, 35), st.floats(0, 5), st.floats(0, 5), st.floats(10, 35))
def test_thermal_step_affine(a, tau, tau2, h, h2, T):
    hv = hvac()
    mixed = thermal_step(a * tau + (1 - a) * tau2, T, a * h + (1 - a) * h2, hv)
    assert mixed == pytest.approx(a * thermal_step(tau, T, h, hv) + (1 - a) * thermal_step(tau2, T, h2, hv),
                                  abs=1e-9)


def test_simulate_temperature_chains_steps():
    hv = hvac(initial_temp=22.0)
    T = np.array([30.0, 31.0, 29.0])
    h = np.array([1.0, 0.0, 2.0])
    out = simulate_temperature(h, T, hv)
    tau = 22.0
    for t in range(3):
        tau = thermal_step(tau, T[t], h[t], hv)
        assert out[t] == pytest.approx(tau)


def test_grid_cost_examples():
    assert grid_cost(np.zeros(3), GridTariff.flat(0.1, 1.0, 0.05, 3)) == 0
    assert grid_cost([2, 4, 2], GridTariff.flat(0.1, 1.0, 0.05, 3)) == pytest.approx(4.8)
    assert grid_cost([5, 5], GridTariff.flat(0.2, 0.0, 0.05, 2)) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        grid_cost([1, 2], GridTariff.flat(0.1, 1.0, 0.05, 3), slot_count=3)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=8), st.floats(0, 5))
def test_grid_cost_positively_homogeneous(g, s):
    tar = GridTariff.flat(0.1, 1.0, 0.05, len(g))
    assert grid_cost(np.array(g) * s, tar) == pytest.approx(s * grid_cost(g, tar), rel=1e-9, abs=1e-9)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=1, max_size=8), st.floats(0, 1))
def test_grid_cost_convex(pairs, a):
    g1, g2 = np.array(pairs).T
    tar = GridTariff.flat(0.1, 1.0, 0.05, g1.size)
    mid = grid_cost(a * g1 + (1 - a) * g2, tar)
    assert mid <= a * grid_cost(g1, tar) + (1 - a) * grid_cost(g2, tar) + 1e-9


def test_battery_cost_examples():
    b = BatteryParams(10, 2, 2, 0.05)
    assert battery_cost([0, 0], [0, 0], b) == 0
    assert battery_cost([1, 0], [0, 1], b) == pytest.approx(0.1)
    assert battery_cost([3, 1], [2, 1], BatteryParams(10, 2, 2, 0.0)) == 0


def test_discomfort_cost_examples():
    hv = hvac()
    assert discomfort_cost([25.0, 25.0], hv) == 0
    assert discomfort_cost([24.0, 26.0], hv) == pytest.approx(0.4)
    assert discomfort_cost([23.0, 27.0], hv) == pytest.approx(4 * discomfort_cost([24.0, 26.0], hv))


def test_p2p_cost_examples():
    tar = GridTariff(0.2, 1.0, np.full(3, 0.08))
    assert p2p_cost(np.zeros((2, 3)), tar) == 0
    e = np.zeros((2, 3))
    e[1, 1] = 5.0
    assert p2p_cost(e, tar) == pytest.approx(0.4)


@settings(max_examples=50)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 1000))
def test_p2p_payments_cancel(n, h, seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n, n, h))
    e = raw - np.swapaxes(raw, 0, 1)
    tar = GridTariff(0.3, 1.0, rng.uniform(0, 0.2, h))
    assert abs(sum(p2p_cost(e[u], tar) for u in range(n))) < 1e-12


def test_tariff_invariants():
    with pytest.raises(ValueError, match="undercut|below"):
        GridTariff(0.1, 1.0, np.array([0.05, 0.1]))
    with pytest.raises(ValueError):
        GridTariff(-0.1, 1.0, np.array([0.0]))


def test_parameter_invariants():
    with pytest.raises(ValueError):
        BatteryParams(5, 1, 1, 0.0, initial_level=6)
    with pytest.raises(ValueError):
        BatteryParams(5, 0, 1, 0.0)
    with pytest.raises(ValueError):
        hvac(temp_min=30, temp_max=20)
    with pytest.raises(ValueError):
        hvac(efficiency=0.0)
    with pytest.raises(ValueError):
        UserProfile(1, 0.0, BatteryParams(5, 1, 1, 0.0), hvac())
    with pytest.raises(ValueError):
        TimeHorizon(0)
    with pytest.raises(ValueError):
        UserEnvironment(np.zeros(2), np.array([-1.0, 0.0]), np.zeros(2))


def test_trade_state_diagonal_and_antisymmetry():
    with pytest.raises(ValueError):
        e = np.zeros((2, 2, 1))
        e[0, 0, 0] = 1
        TradeState(e, np.zeros_like(e), np.zeros_like(e))
    with pytest.raises(ValueError):
        aux = np.zeros((2, 2, 1))
        aux[0, 1, 0] = 1
        TradeState(np.zeros_like(aux), aux, np.zeros_like(aux))


def test_cost_breakdown_total():
    c = CostBreakdown(1.0, 0.5, 0.25, -0.75)
    assert c.total == pytest.approx(1.0)
    assert (c + c).total == pytest.approx(2.0)


def _zero_world(H=3):
    hv = hvac(initial_temp=30.0)
    prof = UserProfile(1, 5.0, BatteryParams(4, 1, 1, 0.1), hv)
    env = UserEnvironment(np.full(H, 30.0), np.zeros(H), np.zeros(H))
    zero = np.zeros(H)
    sched = Schedule(grid=zero, renewable=zero, hvac=zero, charge=zero, discharge=zero, battery_level=zero,
                     indoor_temp=np.full(H, 30.0), peak=0.0)
    return prof, env, sched


def test_validate_accepts_equilibrium_zero_schedule():
    prof, env, sched = _zero_world()
    assert validate_schedule(sched, prof, env, TimeHorizon(3)) == []


def test_validate_names_charge_violation():
    prof, env, sched = _zero_world(H=5)
    charge = np.zeros(5)
    charge[3] = prof.battery.max_charge + 1
    bad = Schedule(grid=sched.grid, renewable=sched.renewable, hvac=sched.hvac, charge=charge,
                   discharge=sched.discharge, battery_level=np.cumsum(charge), indoor_temp=sched.indoor_temp,
                   peak=0.0)
    out = validate_schedule(bad, prof, env, TimeHorizon(5))
    charge_v = [v for v in out if v.constraint.startswith("charge")]
    assert len(charge_v) == 1 and charge_v[0].slot == 3
    assert charge_v[0].magnitude == pytest.approx(1.0)
