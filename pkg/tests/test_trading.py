import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp

from p2phvac.model import EnvironmentSeries, Schedule, TradeState, UserEnvironment
from p2phvac.qp import QpProblem, solve_qp
from p2phvac.standalone import solve_standalone
from p2phvac.trading import (
    CONVERGED,
    ITERATION_LIMIT,
    AdmmSettings,
    AdmmTrace,
    Coordinator,
    CoordinatorBroadcast,
    HomeAgent,
    TradeProposal,
    assemble_net_trade,
    assemble_primal,
    centralized_oracle,
    check_convergence,
    coordinator_update_aux,
    coordinator_update_duals,
    run_admm,
    split_net_trade,
)

import factory as fx
from oracles import lattice_min


def _state(e, lam):
    return TradeState(e, np.zeros_like(e), lam)


def coordinator_qp(e, lam, rho):
    """The auxiliary update posed as a QP over every ordered-pair entry."""
    N, _, H = e.shape
    n = N * N * H

    def idx(u, v, t):
        return (u * N + v) * H + t

    rows, cols = [], []
    r = 0
    for u in range(N):
        for v in range(u + 1, N):
            for t in range(H):
                rows += [r, r]
                cols += [idx(u, v, t), idx(v, u, t)]
                r += 1
    A = sp.csc_matrix((np.ones(len(rows)), (rows, cols)), shape=(r, n))
    lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    for u in range(N):
        for t in range(H):
            lo[idx(u, u, t)] = hi[idx(u, u, t)] = 0.0
    p = QpProblem(sp.identity(n, format="csc") * rho, (lam - rho * e).ravel(), A, np.zeros(r), lo, hi)
    return solve_qp(p).primal.reshape(N, N, H)


def test_aux_fixed_point_for_antisymmetric_trades():
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(3, 3, 4))
    e = raw - np.swapaxes(raw, 0, 1)
    assert np.allclose(coordinator_update_aux(_state(e, np.zeros_like(e)), 1.3), e, atol=1e-15)


def test_aux_two_user_example():
    e = np.zeros((2, 2, 1))
    e[0, 1, 0] = 2.0
    aux = coordinator_update_aux(_state(e, np.zeros_like(e)), 1.0)
    assert aux[0, 1, 0] == 1.0 and aux[1, 0, 0] == -1.0
    assert np.allclose(coordinator_qp(e, np.zeros_like(e), 1.0), aux, atol=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_aux_closed_form_matches_qp(seed):
    rng = np.random.default_rng(seed)
    N, H = int(rng.integers(2, 5)), int(rng.integers(1, 7))
    e = rng.normal(size=(N, N, H))
    lam = rng.normal(size=(N, N, H))
    e[np.arange(N), np.arange(N)] = 0
    rho = float(rng.uniform(0.1, 10))
    aux = coordinator_update_aux(_state(e, lam), rho)
    assert np.max(np.abs(aux - coordinator_qp(e, lam, rho))) <= 1e-8
    assert np.array_equal(aux, -np.swapaxes(aux, 0, 1))
    assert np.all(aux[np.arange(N), np.arange(N)] == 0)


def test_dual_update_examples():
    e = np.zeros((2, 2, 1))
    same = TradeState(e, e, np.ones_like(e))
    assert np.array_equal(coordinator_update_duals(same, 1.0), same.duals)
    aux = np.zeros((2, 2, 1))
    aux[0, 1, 0], aux[1, 0, 0] = 0.5, -0.5
    st = TradeState(np.zeros_like(aux), aux, np.zeros_like(aux))
    assert coordinator_update_duals(st, 1.0)[0, 1, 0] == 0.5


def test_check_convergence_examples():
    s = AdmmSettings()
    assert check_convergence(AdmmTrace([0.0, 0.0], [0.0, 0.0]), s)
    assert not check_convergence(AdmmTrace([1e-3, 1e-3], [0.0, 0.0]), s)
    assert not check_convergence(AdmmTrace([0.0], [0.0]), s)


def test_messages_carry_only_trades():
    assert [f.name for f in dataclasses.fields(TradeProposal)] == ["user_id", "trades"]
    assert [f.name for f in dataclasses.fields(CoordinatorBroadcast)] == ["user_id", "auxiliary", "duals"]
    msg = TradeProposal(3, np.arange(6.0).reshape(2, 3))
    back = TradeProposal.from_json(msg.to_json())
    assert back.user_id == 3 and np.array_equal(back.trades, msg.trades)


def test_coordinator_rejects_anything_but_proposals():
    coord = Coordinator([1, 2], 2, AdmmSettings())
    z = np.zeros(2)
    sched = Schedule(z, z, z, z, z, z, z, 0.0)
    with pytest.raises(TypeError):
        coord.receive([sched, TradeProposal(2, np.zeros((2, 2)))])
    with pytest.raises(ValueError):
        coord.receive([TradeProposal(1, np.zeros((2, 2)))])


def _rand_rows(rng, N, H, u):
    aux = rng.normal(size=(N, H))
    lam = rng.normal(size=(N, H)) * 0.1
    aux[u] = lam[u] = 0
    return aux, lam


@pytest.mark.parametrize("seed", range(4))
def test_net_trade_form_agrees_with_full_form(seed):
    rng = np.random.default_rng(seed)
    N, H = 4, 6
    profiles, env = fx.community(N, H, seed)
    tar = fx.tariff(H)
    u = int(rng.integers(N))
    aux, lam = _rand_rows(rng, N, H, u)
    rho = float(rng.uniform(0.5, 3))
    full = assemble_primal(profiles[u], env.for_user(u), tar, fx.horizon(H), aux, lam, rho, u)
    net = assemble_net_trade(profiles[u], env.for_user(u), tar, fx.horizon(H), aux, lam, rho, u)
    xf, xn = solve_qp(full.problem).primal, solve_qp(net.problem).primal
    assert full.cost(xf) == pytest.approx(net.cost(xn), abs=1e-7)
    assert np.allclose(full.layout.schedule(xf).indoor_temp, net.layout.schedule(xn).indoor_temp, atol=1e-6)
    split = split_net_trade(xn[net.layout.e], tar, aux, lam, rho, u)
    assert np.allclose(full.layout.trades(xf), split, atol=1e-6)
    assert np.all(split[u] == 0)


def test_large_penalty_pins_trades_to_zero():
    N, H = 3, 4
    profiles, env = fx.community(N, H, 1)
    tar = fx.tariff(H)
    zeros = np.zeros((N, H))
    asm = assemble_primal(profiles[0], env.for_user(0), tar, fx.horizon(H), zeros, zeros, 1e5, 0)
    x = solve_qp(asm.problem).primal
    alone = solve_standalone(profiles[0], env.for_user(0), tar, fx.horizon(H))
    assert np.max(np.abs(asm.layout.trades(x))) < 1e-3
    assert asm.cost(x) == pytest.approx(alone.objective, abs=1e-3)


def test_single_user_community_is_standalone():
    profiles, env = fx.community(1, 6, 2)
    tar = fx.tariff(6)
    res = run_admm(profiles, env, tar, fx.horizon(6))
    central = centralized_oracle(profiles, env, tar, fx.horizon(6))
    alone = solve_standalone(profiles[0], env.for_user(0), tar, fx.horizon(6))
    assert res.status == CONVERGED
    assert res.costs[0].total == pytest.approx(alone.costs.total, abs=1e-6)
    assert central.costs[0].total == pytest.approx(alone.costs.total, abs=1e-6)


def _toy():
    seller = fx.profile(uid=1, capacity=0.0, comfort=0.0, pref=25.0)
    buyer = fx.profile(uid=2, capacity=0.0, comfort=0.0, pref=25.0)
    env = EnvironmentSeries(np.array([25.0]), np.array([[3.0, 0.0]]), np.array([[0.0, 3.0]]))
    return [seller, buyer], env, fx.tariff(1, energy=0.2, peak=0.5, p2p=0.1)


def test_two_user_toy_trades_surplus():
    profiles, env, tar = _toy()
    hz = fx.horizon(1)
    res = run_admm(profiles, env, tar, hz)
    central = centralized_oracle(profiles, env, tar, hz)

    # brute force on the scalar trade: the buyer covers 3 - x from the grid
    best = lattice_min(lambda x: (tar.energy_price + tar.peak_price) * (3.0 - x[0]),
                       lambda x: 0.0 <= x[0] <= 3.0, [np.linspace(0, 3, 301)])
    assert best[1][0] == pytest.approx(3.0)
    assert res.status == CONVERGED
    assert res.trade_state.trades[1, 0, 0] == pytest.approx(3.0, abs=1e-4)
    assert central.trade_state.trades[1, 0, 0] == pytest.approx(3.0, abs=1e-6)
    assert res.total_cost == pytest.approx(best[0], abs=1e-5)
    for k, p in enumerate(profiles):
        alone = solve_standalone(p, env.for_user(k), tar, hz)
        assert res.costs[k].total <= alone.costs.total + 1e-6


def _small():
    profiles, env = fx.community(4, 6, 3)
    return profiles, env, fx.tariff(6), fx.horizon(6)


@pytest.mark.parametrize("rho", [0.5, 1.0, 5.0])
def test_penalty_changes_path_not_optimum(rho):
    profiles, env, tar, hz = _small()
    central = centralized_oracle(profiles, env, tar, hz)
    res = run_admm(profiles, env, tar, hz, AdmmSettings(rho=rho, max_iterations=2000))
    assert res.status == CONVERGED
    assert res.total_cost == pytest.approx(central.total_cost, rel=1e-4)


def test_clearing_and_zero_sum_at_convergence():
    profiles, env, tar, hz = _small()
    res = run_admm(profiles, env, tar, hz)
    e = res.trade_state.trades
    assert np.max(np.abs(e + np.swapaxes(e, 0, 1))) <= 1e-5
    assert abs(sum(c.p2p_cost for c in res.costs)) <= 1e-6
    assert res.trace.dual_change[-1] < res.trace.rho[-1] * AdmmSettings().eps_primal


def test_iteration_limit_status():
    profiles, env, tar, hz = _small()
    res = run_admm(profiles, env, tar, hz, AdmmSettings(max_iterations=3))
    assert res.status == ITERATION_LIMIT
    assert res.iterations == 3 and len(res.trace) == 3


def test_worker_count_does_not_change_results():
    profiles, env, tar, hz = _small()
    one = run_admm(profiles, env, tar, hz, AdmmSettings(workers=1))
    two = run_admm(profiles, env, tar, hz, AdmmSettings(workers=2))
    assert one.trade_state.trades.tobytes() == two.trade_state.trades.tobytes()
    for a, b in zip(one.schedules, two.schedules):
        assert a.grid.tobytes() == b.grid.tobytes()
    assert one.trace.primal_residual == two.trace.primal_residual


class _DualsFirst(Coordinator):
    def step(self, state):
        lam = coordinator_update_duals(state, self.rho)
        aux = coordinator_update_aux(TradeState(state.trades, state.auxiliary, lam), self.rho)
        return aux, lam


def _drive(coordinator_cls, iterations):
    profiles, env, tar, hz = _small()
    agents = [HomeAgent(p, env.for_user(k), tar, hz, k, len(profiles)) for k, p in enumerate(profiles)]
    coord = coordinator_cls([p.user_id for p in profiles], hz.slot_count, AdmmSettings())
    for _ in range(iterations):
        props = [a.respond(b, coord.rho) for a, b in zip(agents, coord.broadcasts())]
        if coord.receive(props):
            break
    return coord.trace


def test_update_order_is_guarded():
    default = _drive(Coordinator, 8)
    swapped = _drive(_DualsFirst, 8)
    assert not np.allclose(default.primal_residual, swapped.primal_residual)
    reference = run_admm(*_small(), AdmmSettings(max_iterations=8))
    assert reference.trace.primal_residual == default.primal_residual
