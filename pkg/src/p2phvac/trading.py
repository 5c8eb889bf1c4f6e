"""Peer-to-peer trading solved by ADMM between home agents and a coordinator.

Each home agent privately solves its scheduling problem with an augmented
trade penalty and reports only its trade vector.  The coordinator keeps the
market-clearing copies of the trades and the multipliers; it never sees any
home's grid, battery, HVAC or load data.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .formulation import FREE, AssembledQp, Layout, SolverFailure, build_user_block
from .model import (
    CostBreakdown,
    EnvironmentSeries,
    GridTariff,
    Schedule,
    TimeHorizon,
    TradeState,
    UserEnvironment,
    UserProfile,
    schedule_costs,
)
from .qp import OPTIMAL, QpProblem, SolverSettings, solve_qp

CONVERGED = "converged"
ITERATION_LIMIT = "iteration_limit"

# agent subproblems are re-solved every iteration and warm started, so the
# kernel polishes after a handful of steps
AGENT_QP_SETTINGS = SolverSettings(check_interval=5, polish_passes=2)


@dataclass(frozen=True)
class AdmmSettings:
    rho: float = 1.0
    eps_primal: float = 1e-6
    eps_dual: float = 1e-6
    max_iterations: int = 500
    record_trace: bool = True
    norm: str = "l2"  # or "inf"
    adaptive_rho: bool = False
    # also require the auxiliary copies to have settled (rho * |aux change| < eps_dual)
    aux_stationarity: bool = True
    workers: int = 1
    qp: SolverSettings = AGENT_QP_SETTINGS

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.eps_primal <= 0 or self.eps_dual <= 0:
            raise ValueError("convergence thresholds must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.norm not in ("l2", "inf"):
            raise ValueError("norm must be 'l2' or 'inf'")


def _norm(arr, kind):
    arr = np.asarray(arr).ravel()
    if arr.size == 0:
        return 0.0
    return float(np.max(np.abs(arr)) if kind == "inf" else np.linalg.norm(arr))


@dataclass(frozen=True, eq=False)
class TradeProposal:
    """Trades ``e[v, t]`` that one home proposes with every counterparty ``v``."""

    user_id: int
    trades: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"user_id": self.user_id, "trades": np.asarray(self.trades).tolist()})

    @classmethod
    def from_json(cls, text: str) -> "TradeProposal":
        data = json.loads(text)
        if set(data) != {"user_id", "trades"}:
            raise ValueError(f"unexpected fields in trade proposal: {sorted(data)}")
        return cls(int(data["user_id"]), np.array(data["trades"], dtype=float))


@dataclass(frozen=True, eq=False)
class CoordinatorBroadcast:
    user_id: int
    auxiliary: np.ndarray
    duals: np.ndarray

    def to_json(self) -> str:
        return json.dumps({
            "user_id": self.user_id,
            "auxiliary": np.asarray(self.auxiliary).tolist(),
            "duals": np.asarray(self.duals).tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "CoordinatorBroadcast":
        data = json.loads(text)
        return cls(int(data["user_id"]), np.array(data["auxiliary"], dtype=float),
                   np.array(data["duals"], dtype=float))


@dataclass
class AdmmTrace:
    primal_residual: list = field(default_factory=list)
    dual_change: list = field(default_factory=list)
    aux_change: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    objectives: list = field(default_factory=list)  # per-user S2 cost of each iterate

    def __len__(self):
        return len(self.primal_residual)

    def total_objective(self) -> list:
        return [float(sum(row)) for row in self.objectives]

    def to_csv(self, path, iteration_offset: int = 0, day=None) -> None:
        with open(path, "w") as fh:
            write_trace_rows(fh, self, iteration_offset, day, header=True)


def write_trace_rows(fh, trace: AdmmTrace, iteration_offset=0, day=None, header=False):
    cols = ["iteration", "primal_residual", "dual_change", "total_objective"]
    if day is not None:
        cols = ["day"] + cols
    if header:
        fh.write(",".join(cols) + "\n")
    totals = trace.total_objective()
    for k in range(len(trace)):
        row = [str(k + 1 + iteration_offset), repr(trace.primal_residual[k]), repr(trace.dual_change[k]),
               repr(totals[k]) if k < len(totals) else ""]
        if day is not None:
            row = [str(day)] + row
        fh.write(",".join(row) + "\n")


@dataclass(frozen=True, eq=False)
class TradingResult:
    schedules: tuple
    costs: tuple
    trade_state: TradeState
    trace: AdmmTrace
    status: str
    iterations: int = 0

    @property
    def total_cost(self) -> float:
        return float(sum(c.total for c in self.costs))


# ---------------------------------------------------------------- agent side

def assemble_primal(
    profile: UserProfile,
    env: UserEnvironment,
    tariff: GridTariff,
    horizon: TimeHorizon,
    aux_row,
    dual_row,
    rho: float,
    user_index: int,
    terminal_soc: str = FREE,
    initial_level=None,
    initial_temp=None,
) -> AssembledQp:
    """Home ``user_index``'s subproblem for fixed auxiliary trades and multipliers.

    ``aux_row`` and ``dual_row`` are ``(N, H)`` arrays over counterparties.
    Adds ``phi_t e + rho/2 (aux - e)^2 - dual e`` per trade entry; the self
    trade is pinned to zero.
    """
    aux = np.asarray(aux_row, dtype=float)
    lam = np.asarray(dual_row, dtype=float)
    H = horizon.slot_count
    if aux.ndim != 2 or aux.shape[1] != H or aux.shape != lam.shape:
        raise ValueError(f"aux/dual rows must both have shape (N, {H})")
    N = aux.shape[0]
    if not 0 <= user_index < N:
        raise ValueError("user_index out of range")
    block = build_user_block(profile, env, tariff, horizon, counterparties=N, terminal_soc=terminal_soc,
                             initial_level=initial_level, initial_temp=initial_temp)
    L = block.layout
    lin = block.lin.copy()
    lin[L.e] = (tariff.p2p_price[None, :] - rho * aux - lam).ravel()
    quad = block.quad.diagonal().copy()
    quad[L.e] = rho
    lower, upper = block.lower.copy(), block.upper.copy()
    own = slice(L.e.start + user_index * H, L.e.start + (user_index + 1) * H)
    lower[own] = upper[own] = 0.0
    offset = block.offset + 0.5 * rho * float(np.sum(aux**2))
    problem = QpProblem(sp.diags(quad, format="csc"), lin, block.eq_matrix, block.eq_rhs, lower, upper)
    return AssembledQp(problem, L, offset)


def assemble_net_trade(
    profile: UserProfile,
    env: UserEnvironment,
    tariff: GridTariff,
    horizon: TimeHorizon,
    aux_row,
    dual_row,
    rho: float,
    user_index: int,
    terminal_soc: str = FREE,
    initial_level=None,
    initial_temp=None,
) -> AssembledQp:
    """Same subproblem as :func:`assemble_primal`, with the trade block collapsed to one net trade per slot.

    For a fixed net trade ``n = sum_v e_v`` the per-counterparty terms are
    separable quadratics with equal curvature ``rho``, so their minimum is
    ``rho/(2K) n^2 + (S/K) n + const`` with ``K`` counterparties and
    ``S = sum_v c_v``, where ``c_v`` is the linear trade coefficient.  The
    split is recovered by :func:`split_net_trade`.  The problem size no
    longer grows with the community.
    """
    aux = np.asarray(aux_row, dtype=float)
    lam = np.asarray(dual_row, dtype=float)
    H = horizon.slot_count
    if aux.ndim != 2 or aux.shape[1] != H or aux.shape != lam.shape:
        raise ValueError(f"aux/dual rows must both have shape (N, {H})")
    N = aux.shape[0]
    if not 0 <= user_index < N:
        raise ValueError("user_index out of range")
    block = build_user_block(profile, env, tariff, horizon, counterparties=1, terminal_soc=terminal_soc,
                             initial_level=initial_level, initial_temp=initial_temp)
    L = block.layout
    lin = block.lin.copy()
    quad = block.quad.diagonal().copy()
    lower, upper = block.lower.copy(), block.upper.copy()
    offset = block.offset + 0.5 * rho * float(np.sum(aux**2))
    K = N - 1
    if K == 0:
        lower[L.e] = upper[L.e] = 0.0
    else:
        coef = _trade_coefficients(tariff, aux, lam, rho, user_index)
        S = coef.sum(axis=0)
        quad[L.e] = rho / K
        lin[L.e] = S / K
        offset += float(np.sum(S**2) / (2.0 * rho * K) - np.sum(coef**2) / (2.0 * rho))
    problem = QpProblem(sp.diags(quad, format="csc"), lin, block.eq_matrix, block.eq_rhs, lower, upper)
    return AssembledQp(problem, L, offset)


def _trade_coefficients(tariff, aux, lam, rho, user_index):
    # linear coefficient of every trade entry, self row removed
    coef = tariff.p2p_price[None, :] - rho * aux - lam
    return np.delete(coef, user_index, axis=0)


def split_net_trade(net, tariff, aux_row, dual_row, rho, user_index) -> np.ndarray:
    """Per-counterparty trades ``(N, H)`` minimizing the trade terms for the given net trade."""
    aux = np.asarray(aux_row, dtype=float)
    lam = np.asarray(dual_row, dtype=float)
    N = aux.shape[0]
    trades = np.zeros_like(aux)
    if N == 1:
        return trades
    coef = _trade_coefficients(tariff, aux, lam, rho, user_index)
    mu = (rho * np.asarray(net, dtype=float) + coef.sum(axis=0)) / (N - 1)
    others = np.delete(np.arange(N), user_index)
    trades[others] = (mu[None, :] - coef) / rho
    return trades


class HomeAgent:
    """One home's private scheduler; exchanges only trade messages."""

    def __init__(self, profile, env: UserEnvironment, tariff, horizon, index, n_users,
                 terminal_soc=FREE, initial_level=None, initial_temp=None, qp_settings=AGENT_QP_SETTINGS):
        self.profile = profile
        self.env = env
        self.tariff = tariff
        self.horizon = horizon
        self.index = index
        self.n_users = n_users
        self.terminal_soc = terminal_soc
        self.initial_level = initial_level
        self.initial_temp = initial_temp
        self.qp_settings = qp_settings
        self._last = None
        self._layout = None
        self._trades = None

    def respond(self, broadcast: CoordinatorBroadcast, rho: float) -> TradeProposal:
        asm = assemble_net_trade(self.profile, self.env, self.tariff, self.horizon, broadcast.auxiliary,
                                 broadcast.duals, rho, self.index, self.terminal_soc,
                                 self.initial_level, self.initial_temp)
        sol = solve_qp(asm.problem, self.qp_settings, initial=self._last)
        if sol.status != OPTIMAL:
            raise SolverFailure(self.profile.user_id, sol.status)
        self._last = sol
        self._layout = asm.layout
        self._trades = split_net_trade(sol.primal[asm.layout.e], self.tariff, broadcast.auxiliary,
                                       broadcast.duals, rho, self.index)
        return TradeProposal(self.profile.user_id, self._trades)

    @property
    def schedule(self) -> Schedule:
        return self._layout.schedule(self._last.primal)

    @property
    def trades(self) -> np.ndarray:
        return self._trades

    def costs(self) -> CostBreakdown:
        return schedule_costs(self.schedule, self.profile, self.tariff, self.trades)


def _respond(args):
    agent, message, rho = args
    proposal = agent.respond(CoordinatorBroadcast.from_json(message), rho)
    return agent, proposal.to_json()


# ----------------------------------------------------------- coordinator side

def coordinator_update_aux(trade_state: TradeState, rho: float) -> np.ndarray:
    """Closed-form market-clearing projection of the trades.

    For every ordered pair ``aux[u, v] = (rho (e[u, v] - e[v, u]) - (lam[u, v] - lam[v, u])) / (2 rho)``,
    which is antisymmetric with zero diagonal by construction.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    e, lam = trade_state.trades, trade_state.duals
    e_sw = np.swapaxes(e, 0, 1)
    lam_sw = np.swapaxes(lam, 0, 1)
    return (rho * (e - e_sw) - (lam - lam_sw)) / (2.0 * rho)


def coordinator_update_duals(trade_state: TradeState, rho: float) -> np.ndarray:
    return trade_state.duals + rho * (trade_state.auxiliary - trade_state.trades)


def check_convergence(trace: AdmmTrace, settings: AdmmSettings) -> bool:
    """Primal residual and multiplier change below their thresholds.

    The multiplier change equals ``rho`` times the disagreement between trades
    and the fresh auxiliary copies, so both tests vanish whenever the agents
    reproduce the auxiliary values, even far from the optimum.  With
    ``aux_stationarity`` the movement of the auxiliary copies themselves
    must also be small, which is the usual ADMM dual residual.
    """
    if len(trace) < 2:
        return False
    ok = trace.primal_residual[-1] < settings.eps_primal and trace.dual_change[-1] < settings.eps_dual
    if ok and settings.aux_stationarity and trace.aux_change:
        ok = trace.aux_change[-1] < settings.eps_dual
    return ok


class Coordinator:
    """Grid-operator side of the exchange.  Accepts TradeProposal messages only."""

    def __init__(self, user_ids: Sequence[int], slots: int, settings: AdmmSettings):
        self.user_ids = list(user_ids)
        self.position = {uid: k for k, uid in enumerate(self.user_ids)}
        n = len(self.user_ids)
        self.settings = settings
        self.rho = settings.rho
        self.state = TradeState.zeros(n, slots)
        self.trace = AdmmTrace()

    def broadcasts(self) -> list:
        st = self.state
        return [CoordinatorBroadcast(uid, st.auxiliary[k], st.duals[k]) for k, uid in enumerate(self.user_ids)]

    def receive(self, proposals) -> bool:
        """Run one coordinator step on the collected proposals; True once converged."""
        proposals = list(proposals)
        if any(not isinstance(p, TradeProposal) for p in proposals):
            raise TypeError("the coordinator accepts TradeProposal messages only")
        if sorted(self.position[p.user_id] for p in proposals) != list(range(len(self.user_ids))):
            raise ValueError("need exactly one proposal per user")
        e = np.zeros_like(self.state.trades)
        for p in proposals:
            e[self.position[p.user_id]] = p.trades
        prev = self.state
        aux, lam = self.step(TradeState(e, prev.auxiliary, prev.duals))
        self.state = TradeState(e, aux, lam)
        self._record(prev)
        if self.settings.adaptive_rho:
            self._balance_rho()
        return check_convergence(self.trace, self.settings)

    def step(self, state: TradeState):
        aux = coordinator_update_aux(state, self.rho)
        lam = coordinator_update_duals(TradeState(state.trades, aux, state.duals), self.rho)
        return aux, lam

    def _record(self, prev: TradeState):
        kind = self.settings.norm
        st = self.state
        self.trace.primal_residual.append(
            float(sum(_norm(st.trades[u] - st.auxiliary[u], kind) for u in range(len(self.user_ids))))
        )
        self.trace.dual_change.append(_norm(st.duals - prev.duals, kind))
        self.trace.aux_change.append(self.rho * _norm(st.auxiliary - prev.auxiliary, kind))
        self.trace.rho.append(self.rho)

    def _balance_rho(self):
        r, s = self.trace.primal_residual[-1], self.trace.aux_change[-1]
        if r > 10.0 * s:
            self.rho *= 2.0
        elif s > 10.0 * r:
            self.rho /= 2.0


# ------------------------------------------------------------------ drivers

def run_admm(
    community: Sequence[UserProfile],
    env: EnvironmentSeries,
    tariff: GridTariff,
    horizon: TimeHorizon,
    settings: AdmmSettings = AdmmSettings(),
    terminal_soc: str = FREE,
    initial_levels=None,
    initial_temps=None,
) -> TradingResult:
    """Distributed day-ahead trading; one column of ``env`` per profile."""
    community = list(community)
    N = len(community)
    if N < 1:
        raise ValueError("community must contain at least one user")
    if env.user_count != N:
        raise ValueError(f"environment has {env.user_count} users, community has {N}")
    if len({p.user_id for p in community}) != N:
        raise ValueError("user ids must be unique")
    H = horizon.slot_count
    levels = initial_levels if initial_levels is not None else [None] * N
    temps = initial_temps if initial_temps is not None else [None] * N
    agents = [
        HomeAgent(p, env.for_user(k), tariff, horizon, k, N, terminal_soc, levels[k], temps[k], settings.qp)
        for k, p in enumerate(community)
    ]
    coordinator = Coordinator([p.user_id for p in community], H, settings)

    pool = ProcessPoolExecutor(max_workers=settings.workers) if settings.workers > 1 else None
    status = ITERATION_LIMIT
    try:
        for _ in range(settings.max_iterations):
            messages = [b.to_json() for b in coordinator.broadcasts()]
            jobs = [(a, m, coordinator.rho) for a, m in zip(agents, messages)]
            replies = list(pool.map(_respond, jobs)) if pool else [_respond(j) for j in jobs]
            agents = [a for a, _ in replies]
            proposals = [TradeProposal.from_json(text) for _, text in replies]
            done = coordinator.receive(proposals)
            if settings.record_trace:
                coordinator.trace.objectives.append(tuple(a.costs().total for a in agents))
            if done:
                status = CONVERGED
                break
    finally:
        if pool:
            pool.shutdown()

    trace = coordinator.trace
    if not settings.record_trace:
        trace = AdmmTrace(trace.primal_residual[-2:], trace.dual_change[-2:], trace.aux_change[-2:],
                          trace.rho[-2:])
    return TradingResult(
        schedules=tuple(a.schedule for a in agents),
        costs=tuple(a.costs() for a in agents),
        trade_state=coordinator.state,
        trace=trace,
        status=status,
        iterations=len(coordinator.trace),
    )


def centralized_oracle(
    community: Sequence[UserProfile],
    env: EnvironmentSeries,
    tariff: GridTariff,
    horizon: TimeHorizon,
    terminal_soc: str = FREE,
    initial_levels=None,
    initial_temps=None,
    settings: SolverSettings = SolverSettings(),
    max_variables: int = 100_000,
) -> TradingResult:
    """Solve the whole community as one QP with market clearing as equality rows."""
    community = list(community)
    N, H = len(community), horizon.slot_count
    levels = initial_levels if initial_levels is not None else [None] * N
    temps = initial_temps if initial_temps is not None else [None] * N
    blocks = [
        build_user_block(p, env.for_user(k), tariff, horizon, counterparties=N, terminal_soc=terminal_soc,
                         initial_level=levels[k], initial_temp=temps[k])
        for k, p in enumerate(community)
    ]
    L = blocks[0].layout
    n_user = L.size
    if N * n_user > max_variables:
        raise ValueError(f"{N * n_user} variables exceed the centralized limit of {max_variables}")

    lin, lower, upper = [], [], []
    for k, blk in enumerate(blocks):
        q = blk.lin.copy()
        q[L.e] = np.tile(tariff.p2p_price, N)
        lo, up = blk.lower.copy(), blk.upper.copy()
        own = slice(L.e.start + k * H, L.e.start + (k + 1) * H)
        lo[own] = up[own] = 0.0
        lin.append(q)
        lower.append(lo)
        upper.append(up)

    rows, cols = [], []
    r = 0
    for u in range(N):
        for v in range(u + 1, N):
            for t in range(H):
                rows += [r, r]
                cols += [u * n_user + L.e.start + v * H + t, v * n_user + L.e.start + u * H + t]
                r += 1
    clearing = sp.csc_matrix((np.ones(len(rows)), (rows, cols)), shape=(r, N * n_user))
    eq = sp.vstack([sp.block_diag([b.eq_matrix for b in blocks]), clearing], format="csc")
    rhs = np.concatenate([b.eq_rhs for b in blocks] + [np.zeros(r)])
    problem = QpProblem(
        sp.block_diag([b.quad for b in blocks], format="csc"),
        np.concatenate(lin), eq, rhs, np.concatenate(lower), np.concatenate(upper),
    )
    sol = solve_qp(problem, settings)
    if sol.status != OPTIMAL:
        raise SolverFailure("centralized", sol.status)

    schedules, costs, trades = [], [], np.zeros((N, N, H))
    for k, p in enumerate(community):
        x = sol.primal[k * n_user:(k + 1) * n_user]
        sched = L.schedule(x)
        trades[k] = L.trades(x)
        schedules.append(sched)
        costs.append(schedule_costs(sched, p, tariff, trades[k]))
    state = TradeState(trades, 0.5 * (trades - np.swapaxes(trades, 0, 1)), np.zeros_like(trades))
    return TradingResult(tuple(schedules), tuple(costs), state, AdmmTrace(), CONVERGED, 0)


@dataclass(frozen=True, eq=False)
class MultiDayTrading:
    days: tuple  # TradingResult per day

    @property
    def status(self) -> str:
        return CONVERGED if all(d.status == CONVERGED for d in self.days) else ITERATION_LIMIT

    def schedules(self) -> list:
        n = len(self.days[0].schedules)
        return [Schedule.concatenate(d.schedules[u] for d in self.days) for u in range(n)]

    def costs(self) -> list:
        n = len(self.days[0].costs)
        out = []
        for u in range(n):
            total = CostBreakdown(0.0, 0.0, 0.0, 0.0)
            for d in self.days:
                total = total + d.costs[u]
            out.append(total)
        return out

    def trades(self) -> np.ndarray:
        return np.concatenate([d.trade_state.trades for d in self.days], axis=2)


def run_trading_days(community, env: EnvironmentSeries, tariff: GridTariff, horizon: TimeHorizon, days: int = 1,
                     settings: AdmmSettings = AdmmSettings(), terminal_soc: str = FREE,
                     centralized: bool = False) -> MultiDayTrading:
    """Consecutive day-ahead trading problems with battery level and indoor temperature carried over."""
    community = list(community)
    H = horizon.slot_count
    levels = [p.battery.initial_level for p in community]
    temps = [p.hvac.initial_temp for p in community]
    out = []
    for day in range(days):
        w = slice(day * H, (day + 1) * H)
        env_d = env.window(w.start, w.stop)
        tar_d = tariff.window(w.start, w.stop)
        if centralized:
            res = centralized_oracle(community, env_d, tar_d, horizon, terminal_soc, levels, temps)
        else:
            res = run_admm(community, env_d, tar_d, horizon, settings, terminal_soc, levels, temps)
        out.append(res)
        levels = [float(s.battery_level[-1]) for s in res.schedules]
        temps = [float(s.indoor_temp[-1]) for s in res.schedules]
    return MultiDayTrading(tuple(out))
