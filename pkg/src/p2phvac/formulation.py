"""Per-user QP blocks shared by the standalone, agent and centralized problems.

Variable layout of one user over ``H`` slots::

    [g (H), r (H), h (H), c (H), d (H), b (H), tau (H), m (1), s (H), e (N*H)?]

``m`` is the epigraph variable of the peak grid draw and ``s = m - g`` its
nonnegative slack, so ``g_t <= m`` becomes an equality plus a bound.  The
optional trade block ``e`` is ordered counterparty-major (``e[v, t]``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .model import GridTariff, Schedule, TimeHorizon, UserEnvironment, UserProfile
from .qp import QpProblem

FREE = "free"
RETURN_TO_INITIAL = "return_to_initial"
TERMINAL_MODES = (FREE, RETURN_TO_INITIAL)


class InfeasibleScheduleError(ValueError):
    """Raised before solving when static data admit no feasible schedule."""

    def __init__(self, user_id, problems):
        self.user_id = user_id
        self.problems = list(problems)
        super().__init__(f"user {user_id}: " + "; ".join(self.problems))


@dataclass(frozen=True)
class Layout:
    slots: int
    counterparties: int = 0  # N when the trade block is present, else 0

    def _at(self, k):
        return slice(k * self.slots, (k + 1) * self.slots)

    @property
    def g(self):
        return self._at(0)

    @property
    def r(self):
        return self._at(1)

    @property
    def h(self):
        return self._at(2)

    @property
    def c(self):
        return self._at(3)

    @property
    def d(self):
        return self._at(4)

    @property
    def b(self):
        return self._at(5)

    @property
    def tau(self):
        return self._at(6)

    @property
    def m(self):
        return 7 * self.slots

    @property
    def s(self):
        start = 7 * self.slots + 1
        return slice(start, start + self.slots)

    @property
    def e(self):
        start = 8 * self.slots + 1
        return slice(start, start + self.counterparties * self.slots)

    @property
    def size(self):
        return 8 * self.slots + 1 + self.counterparties * self.slots

    def trades(self, x) -> np.ndarray:
        return np.asarray(x[self.e]).reshape(self.counterparties, self.slots)

    def schedule(self, x) -> Schedule:
        return Schedule(
            grid=x[self.g],
            renewable=x[self.r],
            hvac=x[self.h],
            charge=x[self.c],
            discharge=x[self.d],
            battery_level=x[self.b],
            indoor_temp=x[self.tau],
            peak=x[self.m],
        )


@dataclass(frozen=True)
class UserBlock:
    """QP data of one user; ``offset`` is the constant dropped from the objective."""

    layout: Layout
    quad: sp.csc_matrix
    lin: np.ndarray
    eq_matrix: sp.csc_matrix
    eq_rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    offset: float


def precheck(profile: UserProfile, env: UserEnvironment, trading: bool = False, initial_temp=None) -> list:
    """Human-readable reasons why no schedule can exist (empty if none found)."""
    problems = []
    bat, hv = profile.battery, profile.hvac
    headroom = profile.grid_cap + env.renewable_cap + bat.max_discharge - env.inflexible_load
    if not trading:
        for t in np.flatnonzero(headroom < -1e-9):
            problems.append(
                f"slot {t}: inflexible load {env.inflexible_load[t]:.4g} exceeds grid cap + renewable"
                f" + max discharge = {env.inflexible_load[t] + headroom[t]:.4g}"
            )
        h_cap = np.clip(headroom, 0.0, hv.hvac_max)
    else:
        h_cap = np.full(len(env), hv.hvac_max)

    # reachable indoor temperature interval, propagated slot by slot
    lo = hi = hv.initial_temp if initial_temp is None else initial_temp
    kappa = hv.decay
    for t, T in enumerate(env.outdoor_temp):
        base_lo, base_hi = T - (T - lo) * kappa, T - (T - hi) * kappa
        shift = hv.efficiency * h_cap[t]
        lo = max(base_lo + min(0.0, shift), hv.temp_min)
        hi = min(base_hi + max(0.0, shift), hv.temp_max)
        if lo > hi + 1e-9:
            problems.append(
                f"slot {t}: indoor temperature cannot be kept within"
                f" [{hv.temp_min}, {hv.temp_max}] with hvac_max={hv.hvac_max}"
            )
            break
    return problems


def build_user_block(
    profile: UserProfile,
    env: UserEnvironment,
    tariff: GridTariff,
    horizon: TimeHorizon,
    counterparties: int = 0,
    terminal_soc: str = FREE,
    initial_level=None,
    initial_temp=None,
) -> UserBlock:
    """Assemble grid, battery and comfort cost with balance, battery and thermal rows.

    With ``counterparties > 0`` a zero-cost trade block enters the balance
    rows; callers add trade prices and penalties themselves.
    """
    H = horizon.slot_count
    if len(env) != H:
        raise ValueError(f"environment has {len(env)} slots, horizon has {H}")
    if tariff.p2p_price.size != H:
        raise ValueError(f"p2p_price has {tariff.p2p_price.size} slots, horizon has {H}")
    if terminal_soc not in TERMINAL_MODES:
        raise ValueError(f"terminal_soc must be one of {TERMINAL_MODES}")
    bat, hv = profile.battery, profile.hvac
    b0 = bat.initial_level if initial_level is None else float(initial_level)
    tau0 = hv.initial_temp if initial_temp is None else float(initial_temp)
    problems = precheck(profile, env, trading=counterparties > 0, initial_temp=tau0)
    if problems:
        raise InfeasibleScheduleError(profile.user_id, problems)

    L = Layout(H, counterparties)
    n = L.size
    idx = np.arange(H)

    def col(block):
        return block.start + idx

    lin = np.zeros(n)
    lin[L.g] = tariff.energy_price
    lin[L.m] = tariff.peak_price
    lin[L.c] = bat.degradation_cost
    lin[L.d] = bat.degradation_cost
    lin[L.tau] = -2.0 * hv.comfort_weight * hv.preferred_temp
    quad_diag = np.zeros(n)
    quad_diag[L.tau] = 2.0 * hv.comfort_weight
    offset = hv.comfort_weight * H * hv.preferred_temp**2

    rows, cols, vals, rhs = [], [], [], []
    row = 0

    def add(r, c, v):
        rows.extend(np.broadcast_to(r, np.shape(c)).ravel())
        cols.extend(np.ravel(c))
        vals.extend(np.broadcast_to(v, np.shape(c)).ravel())

    # balance: r + g + d (+ sum_v e) - h - c = l
    bal = row + idx
    for block, sign in ((L.r, 1.0), (L.g, 1.0), (L.d, 1.0), (L.h, -1.0), (L.c, -1.0)):
        add(bal, col(block), sign)
    for v in range(counterparties):
        add(bal, L.e.start + v * H + idx, 1.0)
    rhs.extend(env.inflexible_load)
    row += H

    # battery: b_t - b_{t-1} - c_t + d_t = 0, b_{-1} = b0
    rec = row + idx
    add(rec, col(L.b), 1.0)
    add(rec[1:], col(L.b)[:-1], -1.0)
    add(rec, col(L.c), -1.0)
    add(rec, col(L.d), 1.0)
    rhs.extend([b0] + [0.0] * (H - 1))
    row += H

    # thermal: tau_t - kappa tau_{t-1} - alpha h_t = (1 - kappa) T_t
    kappa = hv.decay
    th = row + idx
    add(th, col(L.tau), 1.0)
    add(th[1:], col(L.tau)[:-1], -kappa)
    add(th, col(L.h), -hv.efficiency)
    th_rhs = (1.0 - kappa) * env.outdoor_temp
    th_rhs[0] += kappa * tau0
    rhs.extend(th_rhs)
    row += H

    # epigraph: g_t - m + s_t = 0
    ep = row + idx
    add(ep, col(L.g), 1.0)
    add(ep, np.full(H, L.m), -1.0)
    add(ep, col(L.s), 1.0)
    rhs.extend(np.zeros(H))
    row += H

    if terminal_soc == RETURN_TO_INITIAL:
        add(np.array([row]), np.array([L.b.start + H - 1]), 1.0)
        rhs.append(b0)
        row += 1

    eq = sp.csc_matrix((vals, (rows, cols)), shape=(row, n))

    lower = np.zeros(n)
    upper = np.zeros(n)
    upper[L.g] = profile.grid_cap
    upper[L.r] = env.renewable_cap
    upper[L.h] = hv.hvac_max
    upper[L.c] = bat.max_charge
    upper[L.d] = bat.max_discharge
    upper[L.b] = bat.capacity
    lower[L.tau] = hv.temp_min
    upper[L.tau] = hv.temp_max
    upper[L.m] = profile.grid_cap
    upper[L.s] = profile.grid_cap
    lower[L.e] = -np.inf
    upper[L.e] = np.inf

    return UserBlock(L, sp.diags(quad_diag, format="csc"), lin, eq, np.asarray(rhs, dtype=float), lower, upper, offset)


@dataclass(frozen=True, eq=False)
class AssembledQp:
    """A QpProblem together with its variable layout and objective constant."""

    problem: QpProblem
    layout: Layout
    offset: float = 0.0

    def cost(self, x) -> float:
        return self.problem.objective(x) + self.offset


class SolverFailure(RuntimeError):
    def __init__(self, user_id, status):
        self.user_id = user_id
        self.status = status
        super().__init__(f"solver returned status {status!r} for user {user_id}")
