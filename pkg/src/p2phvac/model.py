"""Domain types, cost terms and schedule validation for prosumer homes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


def _vec(values) -> np.ndarray:
    arr = np.array(values, dtype=float).ravel()
    arr.setflags(write=False)
    return arr


def _mat(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D array")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeHorizon:
    slot_count: int = 24
    slot_duration: float = 1.0

    def __post_init__(self):
        if int(self.slot_count) != self.slot_count or self.slot_count < 1:
            raise ValueError("slot_count must be a positive integer")
        if self.slot_duration != 1.0:
            raise ValueError("only hourly slots are supported")


@dataclass(frozen=True)
class GridTariff:
    """Two-part grid tariff plus the fixed peer-to-peer price per slot."""

    energy_price: float
    peak_price: float
    p2p_price: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p2p_price", _vec(self.p2p_price))
        if self.energy_price < 0 or self.peak_price < 0 or np.any(self.p2p_price < 0):
            raise ValueError("tariff prices must be nonnegative")
        if np.any(self.p2p_price >= self.energy_price):
            raise ValueError("p2p_price must be strictly below energy_price in every slot")

    @classmethod
    def flat(cls, energy_price, peak_price, p2p_price, slot_count):
        return cls(energy_price, peak_price, np.full(slot_count, float(p2p_price)))

    def window(self, start: int, stop: int) -> "GridTariff":
        return GridTariff(self.energy_price, self.peak_price, self.p2p_price[start:stop])


@dataclass(frozen=True)
class BatteryParams:
    capacity: float
    max_charge: float
    max_discharge: float
    degradation_cost: float
    initial_level: float = 0.0

    def __post_init__(self):
        if not 0 <= self.initial_level <= self.capacity:
            raise ValueError("initial_level must lie in [0, capacity]")
        if self.max_charge <= 0 or self.max_discharge <= 0:
            raise ValueError("max_charge and max_discharge must be positive")
        if self.degradation_cost < 0:
            raise ValueError("degradation_cost must be nonnegative")


@dataclass(frozen=True)
class HvacParams:
    """First-order thermal model and comfort preference of one home.

    ``efficiency`` is in degC per kWh: positive heats, negative cools.
    ``initial_temp`` defaults to ``preferred_temp``.
    """

    thermal_rc: float
    efficiency: float
    comfort_weight: float
    preferred_temp: float
    temp_min: float
    temp_max: float
    hvac_max: float
    initial_temp: Optional[float] = None

    def __post_init__(self):
        if self.initial_temp is None:
            object.__setattr__(self, "initial_temp", float(self.preferred_temp))
        if self.temp_min > self.temp_max:
            raise ValueError("temp_min must not exceed temp_max")
        if not self.temp_min <= self.preferred_temp <= self.temp_max:
            raise ValueError("preferred_temp must lie in [temp_min, temp_max]")
        if self.comfort_weight < 0:
            raise ValueError("comfort_weight must be nonnegative")
        if self.efficiency == 0:
            raise ValueError("efficiency must be nonzero")
        if self.thermal_rc <= 0:
            raise ValueError("thermal_rc must be positive")
        if self.hvac_max <= 0:
            raise ValueError("hvac_max must be positive")

    @property
    def decay(self) -> float:
        return math.exp(-1.0 / self.thermal_rc)


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    grid_cap: float
    battery: BatteryParams
    hvac: HvacParams

    def __post_init__(self):
        if self.grid_cap <= 0:
            raise ValueError("grid_cap must be positive")


@dataclass(frozen=True)
class UserEnvironment:
    """Exogenous series seen by a single user."""

    outdoor_temp: np.ndarray
    renewable_cap: np.ndarray
    inflexible_load: np.ndarray

    def __post_init__(self):
        for name in ("outdoor_temp", "renewable_cap", "inflexible_load"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        n = self.outdoor_temp.size
        if self.renewable_cap.size != n or self.inflexible_load.size != n:
            raise ValueError("environment series lengths differ")
        if np.any(self.renewable_cap < 0) or np.any(self.inflexible_load < 0):
            raise ValueError("renewable_cap and inflexible_load must be nonnegative")

    def __len__(self):
        return self.outdoor_temp.size


@dataclass(frozen=True)
class EnvironmentSeries:
    """Shared outdoor temperature and per-user (column) renewable/load traces."""

    outdoor_temp: np.ndarray
    renewable_cap: np.ndarray  # (slots, users)
    inflexible_load: np.ndarray  # (slots, users)

    def __post_init__(self):
        object.__setattr__(self, "outdoor_temp", _vec(self.outdoor_temp))
        object.__setattr__(self, "renewable_cap", _mat(self.renewable_cap))
        object.__setattr__(self, "inflexible_load", _mat(self.inflexible_load))
        n = self.outdoor_temp.size
        if self.renewable_cap.shape[0] != n or self.inflexible_load.shape[0] != n:
            raise ValueError("all series must have the same number of slots")
        if self.renewable_cap.shape != self.inflexible_load.shape:
            raise ValueError("renewable and load matrices must have the same shape")
        if np.any(self.renewable_cap < 0) or np.any(self.inflexible_load < 0):
            raise ValueError("renewable_cap and inflexible_load must be nonnegative")

    @property
    def slot_count(self) -> int:
        return self.outdoor_temp.size

    @property
    def user_count(self) -> int:
        return self.renewable_cap.shape[1]

    def for_user(self, index: int) -> UserEnvironment:
        return UserEnvironment(self.outdoor_temp, self.renewable_cap[:, index], self.inflexible_load[:, index])

    def window(self, start: int, stop: int) -> "EnvironmentSeries":
        return EnvironmentSeries(
            self.outdoor_temp[start:stop], self.renewable_cap[start:stop], self.inflexible_load[start:stop]
        )

    def select_users(self, indices) -> "EnvironmentSeries":
        idx = list(indices)
        return EnvironmentSeries(self.outdoor_temp, self.renewable_cap[:, idx], self.inflexible_load[:, idx])


@dataclass(frozen=True)
class Schedule:
    grid: np.ndarray
    renewable: np.ndarray
    hvac: np.ndarray
    charge: np.ndarray
    discharge: np.ndarray
    battery_level: np.ndarray
    indoor_temp: np.ndarray
    peak: float

    FIELDS = ("grid", "renewable", "hvac", "charge", "discharge", "battery_level", "indoor_temp")

    def __post_init__(self):
        for name in self.FIELDS:
            object.__setattr__(self, name, _vec(getattr(self, name)))
        object.__setattr__(self, "peak", float(self.peak))
        if len({getattr(self, name).size for name in self.FIELDS}) != 1:
            raise ValueError("schedule vectors must share one length")

    def __len__(self):
        return self.grid.size

    @classmethod
    def concatenate(cls, parts) -> "Schedule":
        parts = list(parts)
        kw = {name: np.concatenate([getattr(p, name) for p in parts]) for name in cls.FIELDS}
        return cls(**kw, peak=max(p.peak for p in parts))


@dataclass(frozen=True)
class TradeState:
    """Trades ``e[u, v, t]``, auxiliary copies and duals over ordered pairs."""

    trades: np.ndarray
    auxiliary: np.ndarray
    duals: np.ndarray

    def __post_init__(self):
        for name in ("trades", "auxiliary", "duals"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.ndim != 3 or arr.shape[0] != arr.shape[1]:
                raise ValueError(f"{name} must have shape (N, N, H)")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.trades.shape == self.auxiliary.shape == self.duals.shape:
            raise ValueError("trade tensors must share one shape")
        diag = np.arange(self.trades.shape[0])
        if np.any(self.trades[diag, diag] != 0) or np.any(self.auxiliary[diag, diag] != 0):
            raise ValueError("self-trades must be zero")
        if np.any(self.auxiliary != -np.swapaxes(self.auxiliary, 0, 1)):
            raise ValueError("auxiliary trades must be antisymmetric")

    @classmethod
    def zeros(cls, users: int, slots: int) -> "TradeState":
        z = np.zeros((users, users, slots))
        return cls(z, z, z)


@dataclass(frozen=True)
class CostBreakdown:
    grid_cost: float
    battery_cost: float
    discomfort_cost: float
    p2p_cost: float = 0.0

    @property
    def total(self) -> float:
        return self.grid_cost + self.battery_cost + self.discomfort_cost + self.p2p_cost

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(
            self.grid_cost + other.grid_cost,
            self.battery_cost + other.battery_cost,
            self.discomfort_cost + other.discomfort_cost,
            self.p2p_cost + other.p2p_cost,
        )


def thermal_step(tau_t: float, T_next: float, h_t: float, hvac: HvacParams) -> float:
    """Indoor temperature after one slot of HVAC energy ``h_t``.

    The indoor temperature relaxes towards the outdoor temperature with decay
    ``exp(-1/RC)`` per slot and is shifted by ``efficiency * h_t``.
    """
    kappa = hvac.decay
    return T_next - (T_next - tau_t) * kappa + hvac.efficiency * h_t


def simulate_temperature(hvac_load, outdoor_temp, hvac: HvacParams, initial_temp=None) -> np.ndarray:
    """Roll ``thermal_step`` forward; entry t is the temperature at the end of slot t."""
    tau = hvac.initial_temp if initial_temp is None else initial_temp
    out = np.empty(len(hvac_load))
    for t, (h, T) in enumerate(zip(hvac_load, outdoor_temp)):
        tau = thermal_step(tau, T, h, hvac)
        out[t] = tau
    return out


def _check_len(vec, n, what):
    if n is not None and len(vec) != n:
        raise ValueError(f"{what} has length {len(vec)}, expected {n}")


def grid_cost(grid, tariff: GridTariff, slot_count: Optional[int] = None) -> float:
    g = np.asarray(grid, dtype=float)
    _check_len(g, slot_count, "grid")
    if g.size == 0:
        return 0.0
    return float(tariff.energy_price * g.sum() + tariff.peak_price * g.max())


def battery_cost(charge, discharge, params: BatteryParams) -> float:
    c = np.asarray(charge, dtype=float)
    d = np.asarray(discharge, dtype=float)
    if c.shape != d.shape:
        raise ValueError("charge and discharge lengths differ")
    return float(params.degradation_cost * (c.sum() + d.sum()))


def discomfort_cost(indoor_temp, hvac: HvacParams) -> float:
    tau = np.asarray(indoor_temp, dtype=float)
    return float(hvac.comfort_weight * np.sum((tau - hvac.preferred_temp) ** 2))


def p2p_cost(trades_of_user, tariff: GridTariff) -> float:
    """Payment of one user for its trades ``e[v, t]``; negative means earnings."""
    e = np.asarray(trades_of_user, dtype=float)
    return float(np.dot(tariff.p2p_price, e.sum(axis=0)))


def schedule_costs(schedule: Schedule, profile: UserProfile, tariff: GridTariff, trades_of_user=None) -> CostBreakdown:
    return CostBreakdown(
        grid_cost(schedule.grid, tariff),
        battery_cost(schedule.charge, schedule.discharge, profile.battery),
        discomfort_cost(schedule.indoor_temp, profile.hvac),
        0.0 if trades_of_user is None else p2p_cost(trades_of_user, tariff),
    )


@dataclass(frozen=True)
class Violation:
    constraint: str
    slot: Optional[int]
    magnitude: float

    def __str__(self):
        where = "" if self.slot is None else f" at slot {self.slot}"
        return f"{self.constraint}{where}: violated by {self.magnitude:.3g}"


def validate_schedule(
    schedule: Schedule,
    profile: UserProfile,
    env: UserEnvironment,
    horizon: Optional[TimeHorizon] = None,
    net_trade=None,
    initial_level: Optional[float] = None,
    initial_temp: Optional[float] = None,
    tol: float = 1e-6,
) -> list:
    """Return every constraint the schedule breaks; empty means feasible.

    ``net_trade`` (energy bought from peers per slot) switches the balance
    check to the trading form.  Initial battery level and indoor temperature
    default to the profile values.
    """
    out = []
    n = len(schedule) if horizon is None else horizon.slot_count
    for name in Schedule.FIELDS:
        if getattr(schedule, name).size != n:
            return [Violation(f"{name} length", None, abs(getattr(schedule, name).size - n))]
    if len(env) != n:
        return [Violation("environment length", None, abs(len(env) - n))]

    bat, hv = profile.battery, profile.hvac

    def bounds(name, vec, lo, hi):
        lo = np.broadcast_to(lo, vec.shape)
        hi = np.broadcast_to(hi, vec.shape)
        for t in range(vec.size):
            if vec[t] < lo[t] - tol:
                out.append(Violation(f"{name} lower bound", t, float(lo[t] - vec[t])))
            elif vec[t] > hi[t] + tol:
                out.append(Violation(f"{name} upper bound", t, float(vec[t] - hi[t])))

    s = schedule
    bounds("grid", s.grid, 0.0, profile.grid_cap)
    bounds("renewable", s.renewable, 0.0, env.renewable_cap)
    bounds("hvac", s.hvac, 0.0, hv.hvac_max)
    bounds("charge", s.charge, 0.0, bat.max_charge)
    bounds("discharge", s.discharge, 0.0, bat.max_discharge)
    bounds("battery_level", s.battery_level, 0.0, bat.capacity)
    bounds("indoor_temp", s.indoor_temp, hv.temp_min, hv.temp_max)
    for t in np.flatnonzero(s.grid > s.peak + tol):
        out.append(Violation("peak epigraph", int(t), float(s.grid[t] - s.peak)))

    b_prev = bat.initial_level if initial_level is None else initial_level
    for t in range(n):
        gap = s.battery_level[t] - (b_prev + s.charge[t] - s.discharge[t])
        if abs(gap) > tol:
            out.append(Violation("battery recursion", t, abs(float(gap))))
        b_prev = s.battery_level[t]

    tau_prev = hv.initial_temp if initial_temp is None else initial_temp
    for t in range(n):
        gap = s.indoor_temp[t] - thermal_step(tau_prev, env.outdoor_temp[t], s.hvac[t], hv)
        if abs(gap) > tol:
            out.append(Violation("thermal recursion", t, abs(float(gap))))
        tau_prev = s.indoor_temp[t]

    supply = s.renewable + s.grid + s.discharge
    if net_trade is not None:
        supply = supply + np.asarray(net_trade, dtype=float)
    demand = s.hvac + env.inflexible_load + s.charge
    for t in np.flatnonzero(np.abs(supply - demand) > tol):
        out.append(Violation("energy balance", int(t), abs(float(supply[t] - demand[t]))))
    return out
