"""Standalone scheduling: every home minimizes its own bill without trading."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .formulation import FREE, AssembledQp, SolverFailure, build_user_block
from .model import (
    CostBreakdown,
    GridTariff,
    Schedule,
    TimeHorizon,
    UserEnvironment,
    UserProfile,
    schedule_costs,
)
from .qp import OPTIMAL, QpProblem, SolverSettings, solve_qp


@dataclass(frozen=True)
class StandaloneResult:
    schedule: Schedule
    costs: CostBreakdown
    solver_status: str
    objective: float


def assemble_standalone(
    profile: UserProfile,
    env: UserEnvironment,
    tariff: GridTariff,
    horizon: TimeHorizon,
    terminal_soc: str = FREE,
    initial_level=None,
    initial_temp=None,
) -> AssembledQp:
    block = build_user_block(
        profile, env, tariff, horizon, terminal_soc=terminal_soc,
        initial_level=initial_level, initial_temp=initial_temp,
    )
    problem = QpProblem(block.quad, block.lin, block.eq_matrix, block.eq_rhs, block.lower, block.upper)
    return AssembledQp(problem, block.layout, block.offset)


def solve_standalone(
    profile: UserProfile,
    env: UserEnvironment,
    tariff: GridTariff,
    horizon: TimeHorizon,
    settings: SolverSettings = SolverSettings(),
    terminal_soc: str = FREE,
    initial_level=None,
    initial_temp=None,
) -> StandaloneResult:
    asm = assemble_standalone(profile, env, tariff, horizon, terminal_soc, initial_level, initial_temp)
    sol = solve_qp(asm.problem, settings)
    if sol.status != OPTIMAL:
        raise SolverFailure(profile.user_id, sol.status)
    schedule = asm.layout.schedule(sol.primal)
    return StandaloneResult(schedule, schedule_costs(schedule, profile, tariff), sol.status, asm.cost(sol.primal))


def solve_standalone_days(
    profile: UserProfile,
    env: UserEnvironment,
    tariff: GridTariff,
    horizon: TimeHorizon,
    days: int = 1,
    settings: SolverSettings = SolverSettings(),
    terminal_soc: str = FREE,
) -> list:
    """Solve consecutive day-ahead problems, carrying battery level and indoor temperature over.

    ``env`` and ``tariff`` cover ``days * horizon.slot_count`` slots; one
    StandaloneResult is returned per day.
    """
    H = horizon.slot_count
    results = []
    level, temp = profile.battery.initial_level, profile.hvac.initial_temp
    for day in range(days):
        w = slice(day * H, (day + 1) * H)
        env_d = UserEnvironment(env.outdoor_temp[w], env.renewable_cap[w], env.inflexible_load[w])
        res = solve_standalone(profile, env_d, tariff.window(w.start, w.stop), horizon, settings,
                               terminal_soc, level, temp)
        results.append(res)
        level = float(res.schedule.battery_level[-1])
        temp = float(res.schedule.indoor_temp[-1])
    return results


def _solve_user(args):
    return solve_standalone_days(*args)


def solve_community_standalone(profiles, env, tariff, horizon, days=1, settings=SolverSettings(),
                               terminal_soc=FREE, workers=1) -> list:
    """Per-user results (lists of daily results) in profile order."""
    jobs = [(p, env.for_user(k), tariff, horizon, days, settings, terminal_soc) for k, p in enumerate(profiles)]
    if workers <= 1:
        return [_solve_user(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_solve_user, jobs))
