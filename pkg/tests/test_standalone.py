import numpy as np
import pytest

from p2phvac.formulation import RETURN_TO_INITIAL, InfeasibleScheduleError
from p2phvac.model import BatteryParams, UserProfile, validate_schedule
from p2phvac.standalone import assemble_standalone, solve_standalone, solve_standalone_days

import factory as fx
from oracles import lattice_min


def test_zero_load_at_preferred_temperature_costs_nothing():
    prof = fx.profile(pref=24.0)
    env = fx.environment(2, temp=24.0, load=0.0)
    res = solve_standalone(prof, env, fx.tariff(2), fx.horizon(2))
    assert res.objective == pytest.approx(0.0, abs=1e-9)
    assert np.allclose(res.schedule.grid, 0.0, atol=1e-8)
    assert np.allclose(res.schedule.hvac, 0.0, atol=1e-8)


def test_flat_load_single_user_matches_lattice():
    # no battery storage, no comfort cost, no renewables
    prof = UserProfile(1, 5.0, BatteryParams(0.0, 1.0, 1.0, 0.05), fx.profile(comfort=0.0).hvac)
    env = fx.environment(2, temp=24.0, load=1.0)
    tar = fx.tariff(2, energy=0.1, peak=1.0, p2p=0.05)
    res = solve_standalone(prof, env, tar, fx.horizon(2))
    assert res.schedule.grid == pytest.approx([1.0, 1.0], abs=1e-7)
    assert res.costs.total == pytest.approx(1.2, abs=1e-7)

    # grid draw must cover the load; surplus can only go to the HVAC
    grid = np.linspace(0.0, 2.0, 9)
    best = lattice_min(lambda g: 0.1 * g.sum() + 1.0 * g.max(), lambda g: np.all(g >= 1.0 - 1e-12),
                       [grid, grid])
    assert best[0] == pytest.approx(res.costs.total, abs=1e-7)
    assert best[1] == pytest.approx(res.schedule.grid, abs=1e-7)


def test_ample_renewables_mean_no_grid():
    env = fx.environment(6, temp=26.0, renewable=20.0, load=1.5)
    res = solve_standalone(fx.profile(), env, fx.tariff(6), fx.horizon(6))
    assert np.max(res.schedule.grid) <= 1e-7


def test_result_is_valid_and_costs_match_objective():
    H = 12
    env = fx.environment(H, temp=30.0 + np.sin(np.arange(H)), renewable=np.linspace(0, 3, H),
                         load=1.0 + 0.5 * np.cos(np.arange(H)))
    prof = fx.profile()
    res = solve_standalone(prof, env, fx.tariff(H), fx.horizon(H))
    assert validate_schedule(res.schedule, prof, env, fx.horizon(H)) == []
    assert res.costs.total == pytest.approx(res.objective, abs=1e-6)
    assert res.costs.p2p_cost == 0


def test_layout_of_assembled_problem():
    H = 4
    asm = assemble_standalone(fx.profile(), fx.environment(H), fx.tariff(H), fx.horizon(H))
    L = asm.layout
    assert asm.problem.dim == 8 * H + 1
    assert (L.g.start, L.r.start, L.h.start, L.c.start, L.d.start, L.b.start, L.tau.start, L.m) == \
        (0, H, 2 * H, 3 * H, 4 * H, 5 * H, 6 * H, 7 * H)


def test_infeasible_load_reported_before_solving():
    prof = fx.profile(grid_cap=2.0, rate=0.5)
    env = fx.environment(3, renewable=0.5, load=np.array([1.0, 4.0, 1.0]))
    with pytest.raises(InfeasibleScheduleError, match="slot 1"):
        solve_standalone(prof, env, fx.tariff(3), fx.horizon(3))


def test_battery_never_charges_and_discharges_together(bundled, day1_standalone):
    for user, res in zip(bundled.users, day1_standalone):
        assert user.battery.degradation_cost > 0
        assert np.max(res.schedule.charge * res.schedule.discharge) <= 1e-6


def test_peak_epigraph_is_tight(day1_standalone):
    for res in day1_standalone:
        assert res.schedule.peak == pytest.approx(np.max(res.schedule.grid), abs=1e-8)


@pytest.mark.parametrize("field", ["capacity", "grid_cap", "renewable"])
def test_more_capacity_never_costs_more(field):
    rng = np.random.default_rng(len(field))
    H = 8
    for _ in range(4):
        env = fx.environment(H, temp=rng.uniform(25, 33, H), renewable=rng.uniform(0, 2, H),
                             load=rng.uniform(0.5, 2, H))
        base = fx.profile(capacity=3.0, grid_cap=4.0)
        bigger, env2 = base, env
        if field == "capacity":
            bigger = fx.profile(capacity=6.0, grid_cap=4.0)
        elif field == "grid_cap":
            bigger = fx.profile(capacity=3.0, grid_cap=6.0, hvac_max=4.0)
        else:
            env2 = fx.environment(H, temp=env.outdoor_temp, renewable=env.renewable_cap * 1.5,
                                  load=env.inflexible_load)
        a = solve_standalone(base, env, fx.tariff(H), fx.horizon(H)).objective
        b = solve_standalone(bigger, env2, fx.tariff(H), fx.horizon(H)).objective
        assert b <= a + 1e-7


def test_comfort_weight_pulls_temperature_to_preference():
    H = 10
    env = fx.environment(H, temp=np.linspace(28, 34, H), load=1.0)
    devs = []
    for w in (0.01, 0.05, 0.2, 1.0, 5.0):
        prof = fx.profile(comfort=w, pref=24.0)
        res = solve_standalone(prof, env, fx.tariff(H), fx.horizon(H))
        devs.append(float(np.sum((res.schedule.indoor_temp - 24.0) ** 2)))
    assert all(b <= a + 1e-7 for a, b in zip(devs, devs[1:]))


def test_multi_day_chains_state():
    H = 6
    prof = fx.profile(capacity=5.0)
    env = fx.environment(2 * H, temp=30.0, renewable=np.tile([0, 3, 4, 2, 0, 0], 2), load=1.0)
    days = solve_standalone_days(prof, env, fx.tariff(2 * H), fx.horizon(H), days=2)
    first, second = days
    env2 = fx.environment(H, temp=30.0, renewable=[0, 3, 4, 2, 0, 0], load=1.0)
    assert validate_schedule(second.schedule, prof, env2, fx.horizon(H),
                             initial_level=first.schedule.battery_level[-1],
                             initial_temp=first.schedule.indoor_temp[-1]) == []


def test_return_to_initial_terminal_mode():
    H = 6
    prof = fx.profile(capacity=5.0, initial_level=2.0)
    env = fx.environment(H, temp=30.0, renewable=[0, 3, 4, 2, 0, 0], load=1.0)
    res = solve_standalone(prof, env, fx.tariff(H), fx.horizon(H), terminal_soc=RETURN_TO_INITIAL)
    assert res.schedule.battery_level[-1] == pytest.approx(2.0, abs=1e-8)
