"""Configuration, CSV series, synthetic community data and result files.

Config schema (YAML)::

    horizon:   {slot_count: 24, days: 7}
    tariff:    {energy_price: .., peak_price: .., p2p_price: scalar or list}
    series:    {outdoor_temp: temp.csv, renewable: renewable.csv, inflexible_load: load.csv}
    admm:      {rho: 1.0, eps_primal: 1e-6, eps_dual: 1e-6, max_iterations: 500, norm: l2}
    run:       {scenario: both, seed: 42, terminal_soc: free, days: 7}
    users:
      - id: 1
        grid_cap: 8.8
        battery: {capacity, max_charge, max_discharge, degradation_cost, initial_level}
        hvac: {thermal_rc, efficiency, comfort_weight, preferred_temp,
               temp_min, temp_max, hvac_max, initial_temp}

``run.days`` simulates only the first days of the data (default: all).
Series paths are relative to the config file.  ``hvac_max`` defaults to
``grid_cap``, ``initial_level`` to 0 and ``initial_temp`` to
``preferred_temp``.  Temperature CSVs have header ``t,temp``; renewable and
load CSVs have ``t,u<id>,...`` with one column per user in config order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .formulation import TERMINAL_MODES
from .model import (
    BatteryParams,
    EnvironmentSeries,
    GridTariff,
    HvacParams,
    TimeHorizon,
    UserProfile,
)
from .trading import AdmmSettings, write_trace_rows

SCENARIOS = ("standalone", "trading", "both")
SCHEDULE_COLUMNS = ("t", "g", "r", "h", "c", "d", "b", "tau")


class ConfigError(ValueError):
    """Parse or validation failure, located by file and line where possible."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class SeriesError(ValueError):
    pass


@dataclass(frozen=True)
class CommunityConfig:
    horizon: TimeHorizon
    days: int
    tariff: GridTariff  # p2p_price covers days * slot_count slots
    users: tuple
    env: EnvironmentSeries
    admm: AdmmSettings = AdmmSettings()
    scenario: str = "both"
    seed: int = 0
    terminal_soc: str = "free"
    path: Optional[Path] = None
    series_paths: dict = field(default_factory=dict)

    @property
    def user_ids(self):
        return [u.user_id for u in self.users]


# ------------------------------------------------------------------ config

def _line_index(node, prefix=()):
    """Map key paths of a composed YAML node tree to 1-based line numbers."""
    out = {prefix: node.start_mark.line + 1}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = prefix + (k.value,)
            out[key] = k.start_mark.line + 1
            for sub, line in _line_index(v, key).items():
                out.setdefault(sub, line)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out.update(_line_index(v, prefix + (i,)))
    return out


class _Reader:
    def __init__(self, data, lines, path):
        self.data, self.lines, self.path = data, lines, path

    def fail(self, message, key=()):
        line = None
        k = tuple(key)
        while k and k not in self.lines:
            k = k[:-1]
        line = self.lines.get(k)
        raise ConfigError(message, self.path, line)

    def get(self, key, default=..., kind=float):
        node = self.data
        for part in key:
            if isinstance(node, dict) and part in node:
                node = node[part]
            elif isinstance(node, list) and isinstance(part, int) and part < len(node):
                node = node[part]
            else:
                if default is ...:
                    self.fail(f"missing required field '{'.'.join(map(str, key))}'", key)
                return default
        if kind is None:
            return node
        try:
            val = kind(node)
        except (TypeError, ValueError):
            self.fail(f"field '{'.'.join(map(str, key))}' must be {kind.__name__}, got {node!r}", key)
        if kind is float and not math.isfinite(val):
            self.fail(f"field '{'.'.join(map(str, key))}' must be finite", key)
        return val


ADMM_KEYS = ("rho", "eps_primal", "eps_dual", "max_iterations", "norm", "adaptive_rho", "workers")
RUN_KEYS = ("scenario", "seed", "terminal_soc", "days")


def apply_override(data: dict, key: str, value):
    """Set a dotted ``key`` in a parsed config mapping.

    Bare ADMM keys (``rho``, ``max_iterations``, ...) and run keys
    (``scenario``, ``seed``, ...) are accepted without their section.
    Integer path parts index lists, so ``users.0.grid_cap`` works.
    """
    parts = key.split(".")
    if len(parts) == 1 and parts[0] in ADMM_KEYS:
        parts = ["admm"] + parts
    elif len(parts) == 1 and parts[0] in RUN_KEYS:
        parts = ["run"] + parts
    node = data
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise ConfigError(f"--set {key}: no list entry {part!r}")
            part = int(part)
        elif not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {'.'.join(parts[:i])} is not a mapping")
        if last:
            node[part] = value
        else:
            if isinstance(node, dict) and part not in node:
                node[part] = {}
            node = node[part]


def parse_override(text: str):
    """``KEY=VALUE`` with VALUE parsed as a YAML scalar."""
    if "=" not in text:
        raise ConfigError(f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError:
        raise ConfigError(f"--set {key}: cannot parse value {raw!r}") from None


def load_config(path, load_series: bool = True, overrides=None) -> CommunityConfig:
    """Parse and validate a community config.

    ``overrides`` is an optional sequence of ``(dotted_key, value)`` pairs
    applied before validation.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError("file not found", path)
    text = path.read_text()
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"parse error: {getattr(exc, 'problem', exc)}", path,
                          None if mark is None else mark.line + 1) from None
    if node is None or not isinstance(data, dict):
        raise ConfigError("parse error: config is empty or not a mapping", path, 1)
    for key, value in overrides or ():
        apply_override(data, key, value)
    rd = _Reader(data, _line_index(node), path)

    H = rd.get(("horizon", "slot_count"), 24, int)
    days = rd.get(("horizon", "days"), 1, int)
    try:
        horizon = TimeHorizon(H)
    except ValueError as exc:
        rd.fail(str(exc), ("horizon", "slot_count"))
    if days < 1:
        rd.fail("horizon.days must be at least 1", ("horizon", "days"))
    total = H * days

    energy = rd.get(("tariff", "energy_price"))
    peak = rd.get(("tariff", "peak_price"))
    raw_p2p = rd.get(("tariff", "p2p_price"), kind=None)
    if isinstance(raw_p2p, list):
        p2p = np.array([rd.get(("tariff", "p2p_price", i)) for i in range(len(raw_p2p))])
        if p2p.size == H:
            p2p = np.tile(p2p, days)
        elif p2p.size != total:
            rd.fail(f"tariff.p2p_price must have {H} or {total} entries", ("tariff", "p2p_price"))
    else:
        p2p = np.full(total, rd.get(("tariff", "p2p_price")))
    if np.any(p2p >= energy):
        rd.fail("tariff.p2p_price must undercut energy_price in every slot (trading must be cheaper"
                " than the grid)", ("tariff", "p2p_price"))
    try:
        tariff = GridTariff(energy, peak, p2p)
    except ValueError as exc:
        rd.fail(f"tariff: {exc}", ("tariff",))

    raw_users = rd.get(("users",), kind=None)
    if not isinstance(raw_users, list) or not raw_users:
        rd.fail("users must be a non-empty list", ("users",))
    users, seen = [], set()
    for i in range(len(raw_users)):
        users.append(_read_user(rd, i, seen))

    defaults = AdmmSettings()
    try:
        admm = AdmmSettings(
            rho=rd.get(("admm", "rho"), defaults.rho),
            eps_primal=rd.get(("admm", "eps_primal"), defaults.eps_primal),
            eps_dual=rd.get(("admm", "eps_dual"), defaults.eps_dual),
            max_iterations=rd.get(("admm", "max_iterations"), defaults.max_iterations, int),
            norm=rd.get(("admm", "norm"), defaults.norm, str),
            adaptive_rho=rd.get(("admm", "adaptive_rho"), defaults.adaptive_rho, bool),
            workers=rd.get(("admm", "workers"), defaults.workers, int),
        )
    except ValueError as exc:
        rd.fail(f"admm: {exc}", ("admm",))
    scenario = rd.get(("run", "scenario"), "both", str)
    if scenario not in SCENARIOS:
        rd.fail(f"run.scenario must be one of {SCENARIOS}", ("run", "scenario"))
    terminal = rd.get(("run", "terminal_soc"), "free", str)
    if terminal not in TERMINAL_MODES:
        rd.fail(f"run.terminal_soc must be one of {TERMINAL_MODES}", ("run", "terminal_soc"))
    seed = rd.get(("run", "seed"), 0, int)
    run_days = rd.get(("run", "days"), days, int)
    if not 1 <= run_days <= days:
        rd.fail(f"run.days must lie in [1, horizon.days={days}]", ("run", "days"))

    series_paths = {}
    for key in ("outdoor_temp", "renewable", "inflexible_load"):
        rel = rd.get(("series", key), kind=str)
        p = (path.parent / rel).resolve()
        if not p.exists():
            rd.fail(f"series file '{rel}' does not exist", ("series", key))
        series_paths[key] = p

    if load_series:
        ids = [u.user_id for u in users]
        cols = [f"u{uid}" for uid in ids]
        try:
            temp = load_series_csv(series_paths["outdoor_temp"], ["temp"], total)[:, 0]
            ren = load_series_csv(series_paths["renewable"], cols, total, nonnegative=True)
            load = load_series_csv(series_paths["inflexible_load"], cols, total, nonnegative=True)
        except SeriesError as exc:
            raise ConfigError(str(exc), path) from None
        env = EnvironmentSeries(temp, ren, load)
    else:
        env = EnvironmentSeries(np.zeros(total), np.zeros((total, len(users))), np.zeros((total, len(users))))

    if run_days < days:
        # simulate a prefix of the data; the files themselves still cover all days
        env = env.window(0, run_days * H)
        tariff = tariff.window(0, run_days * H)
    return CommunityConfig(horizon, run_days, tariff, tuple(users), env, admm, scenario, seed, terminal, path,
                           series_paths)


def _read_user(rd: _Reader, i: int, seen: set) -> UserProfile:
    base = ("users", i)
    uid = rd.get(base + ("id",), kind=int)
    label = f"user {uid}"
    if uid in seen:
        rd.fail(f"{label}: duplicate user id", base + ("id",))
    seen.add(uid)
    grid_cap = rd.get(base + ("grid_cap",))
    if grid_cap <= 0:
        rd.fail(f"{label}: grid_cap must be positive", base + ("grid_cap",))

    b = base + ("battery",)
    cap = rd.get(b + ("capacity",))
    level = rd.get(b + ("initial_level",), 0.0)
    if cap < 0:
        rd.fail(f"{label}: battery.capacity must be nonnegative", b + ("capacity",))
    if not 0 <= level <= cap:
        rd.fail(f"{label}: battery.initial_level must lie in [0, capacity]", b + ("initial_level",))
    for key in ("max_charge", "max_discharge"):
        if rd.get(b + (key,)) <= 0:
            rd.fail(f"{label}: battery.{key} must be positive", b + (key,))
    if rd.get(b + ("degradation_cost",)) < 0:
        rd.fail(f"{label}: battery.degradation_cost must be nonnegative", b + ("degradation_cost",))
    battery = BatteryParams(cap, rd.get(b + ("max_charge",)), rd.get(b + ("max_discharge",)),
                            rd.get(b + ("degradation_cost",)), level)

    h = base + ("hvac",)
    tmin, tmax = rd.get(h + ("temp_min",)), rd.get(h + ("temp_max",))
    pref = rd.get(h + ("preferred_temp",))
    if tmin > tmax:
        rd.fail(f"{label}: hvac.temp_min ({tmin}) exceeds hvac.temp_max ({tmax})", h + ("temp_min",))
    if not tmin <= pref <= tmax:
        rd.fail(f"{label}: hvac.preferred_temp must lie in [temp_min, temp_max]", h + ("preferred_temp",))
    checks = (("thermal_rc", lambda v: v > 0, "positive"), ("efficiency", lambda v: v != 0, "nonzero"),
              ("comfort_weight", lambda v: v >= 0, "nonnegative"))
    for key, ok, what in checks:
        if not ok(rd.get(h + (key,))):
            rd.fail(f"{label}: hvac.{key} must be {what}", h + (key,))
    hvac_max = rd.get(h + ("hvac_max",), grid_cap)
    if hvac_max <= 0:
        rd.fail(f"{label}: hvac.hvac_max must be positive", h + ("hvac_max",))
    init = rd.get(h + ("initial_temp",), pref)
    if not tmin <= init <= tmax:
        rd.fail(f"{label}: hvac.initial_temp must lie in [temp_min, temp_max]", h + ("initial_temp",))
    hvac = HvacParams(rd.get(h + ("thermal_rc",)), rd.get(h + ("efficiency",)), rd.get(h + ("comfort_weight",)),
                      pref, tmin, tmax, hvac_max, init)
    return UserProfile(uid, grid_cap, battery, hvac)


# ------------------------------------------------------------------ series

def load_series_csv(path, expected_columns, expected_rows: int, nonnegative: bool = False) -> np.ndarray:
    """Read a ``t,<columns>`` CSV into a ``(rows, columns)`` float matrix."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SeriesError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    want = ["t"] + list(expected_columns)
    if header != want:
        raise SeriesError(f"{path}: header {header} does not match expected {want}")
    body = rows[1:]
    if len(body) != expected_rows:
        raise SeriesError(f"{path}: {len(body)} data rows, expected {expected_rows}")
    out = np.empty((expected_rows, len(expected_columns)))
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(want):
            raise SeriesError(f"{path}:{line}: {len(row)} cells, expected {len(want)}")
        for j, cell in enumerate(row[1:]):
            try:
                val = float(cell)
            except ValueError:
                raise SeriesError(f"{path}:{line}: non-numeric value {cell!r} in column {want[j + 1]}") from None
            if not math.isfinite(val):
                raise SeriesError(f"{path}:{line}: non-finite value in column {want[j + 1]}")
            if nonnegative and val < 0:
                raise SeriesError(f"{path}:{line}: negative value {val} in column {want[j + 1]}")
            out[i, j] = val
    return out


def write_series_csv(path, columns, matrix) -> None:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + list(columns))
        for t, row in enumerate(matrix):
            w.writerow([t] + [repr(float(v)) for v in row])


# --------------------------------------------------------------- synthetic

SEASONS = {
    # mean outdoor temperature, daily swing, sign of HVAC efficiency
    "summer": (28.0, 4.5, -1.0),
    "winter": (13.0, 5.0, 1.0),
}


def generate_synthetic(seed: int, n_users: int, days: int, season: str = "summer", slot_count: int = 24,
                       grid_cap: float = 8.8):
    """Deterministic synthetic community data for ``days`` days of ``slot_count`` slots.

    Returns ``(EnvironmentSeries, profiles, caps)`` where ``caps`` holds the
    per-user installed solar and wind capacities (kW).
    """
    if season not in SEASONS:
        raise ValueError(f"season must be one of {sorted(SEASONS)}")
    rng = np.random.default_rng(seed)
    T = slot_count * days
    hour = np.arange(T) % slot_count * 24.0 / slot_count
    mean, swing, mode = SEASONS[season]

    day_offset = np.repeat(rng.normal(0.0, 1.0, days), slot_count)
    temp = mean + day_offset + swing * np.sin(2 * np.pi * (hour - 9.0) / 24.0) + rng.normal(0.0, 0.4, T)

    # a few homes with large rooftop systems, the rest small or none
    solar_kw = np.round(rng.choice([0.0, 1.0, 2.0, 5.0, 7.0], size=n_users, p=[0.2, 0.2, 0.2, 0.2, 0.2])
                        * rng.uniform(0.8, 1.2, n_users), 2)
    wind_kw = np.round(rng.choice([0.0, 1.0, 2.5], size=n_users, p=[0.5, 0.3, 0.2]) * rng.uniform(0.8, 1.2, n_users), 2)

    daylight = np.clip(np.sin(np.pi * (hour - 6.0) / 12.0), 0.0, None)
    cloud = np.repeat(rng.uniform(0.6, 1.0, (days, n_users)), slot_count, axis=0)
    solar = np.clip(daylight[:, None] * cloud * rng.uniform(0.85, 1.0, (T, n_users)), 0.0, 1.0) * solar_kw

    wind_raw = np.empty((T, n_users))
    state = rng.uniform(0.2, 0.6, n_users)
    shocks = rng.normal(0.0, 0.12, (T, n_users))
    for t in range(T):
        state = 0.9 * state + 0.1 * 0.4 + shocks[t]
        wind_raw[t] = state
    wind = np.clip(wind_raw, 0.0, 1.0) * wind_kw

    base = rng.uniform(0.25, 0.5, n_users)
    morning = rng.uniform(0.4, 1.0, n_users)
    evening = rng.uniform(0.8, 1.8, n_users)
    shape = (base[None, :]
             + morning[None, :] * np.exp(-0.5 * ((hour[:, None] - 7.5) / 1.2) ** 2)
             + evening[None, :] * np.exp(-0.5 * ((hour[:, None] - 19.5) / 1.8) ** 2))
    load = shape * rng.uniform(0.85, 1.15, (T, n_users))

    renewable = np.round(solar + wind, 6)
    env = EnvironmentSeries(np.round(temp, 4), renewable, np.round(load, 6))

    capacity = np.round(rng.uniform(6.0, 15.0, n_users) * 2) / 2
    pref = np.round(rng.uniform(20.0, 27.0, n_users) * 2) / 2
    rc = np.round(rng.uniform(2.0, 5.0, n_users), 2)
    eff = mode * np.round(rng.uniform(1.5, 3.0, n_users), 2)
    weight = np.round(rng.uniform(0.03, 0.08, n_users), 3)
    profiles = []
    for k in range(n_users):
        rate = float(np.round(min(capacity[k] / 2.5, 7.0), 2))
        profiles.append(UserProfile(
            user_id=k + 1,
            grid_cap=grid_cap,
            battery=BatteryParams(float(capacity[k]), rate, rate, 0.02, 0.0),
            hvac=HvacParams(float(rc[k]), float(eff[k]), float(weight[k]), float(pref[k]),
                            temp_min=15.0, temp_max=32.0, hvac_max=grid_cap),
        ))
    caps = {"solar_kw": solar_kw, "wind_kw": wind_kw}
    return env, profiles, caps


def write_bundle(out_dir, seed: int = 42, n_users: int = 10, days: int = 7, season: str = "summer",
                 tariff=(0.25, 0.6, 0.15), name: str = "community10.cfg") -> Path:
    """Write a synthetic community as a config file plus its three series CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    env, profiles, _ = generate_synthetic(seed, n_users, days, season)
    cols = [f"u{p.user_id}" for p in profiles]
    write_series_csv(out_dir / "temp.csv", ["temp"], env.outdoor_temp)
    write_series_csv(out_dir / "renewable.csv", cols, env.renewable_cap)
    write_series_csv(out_dir / "load.csv", cols, env.inflexible_load)
    energy, peak, p2p = tariff
    doc = {
        "horizon": {"slot_count": 24, "days": days},
        "tariff": {"energy_price": energy, "peak_price": peak, "p2p_price": p2p},
        "series": {"outdoor_temp": "temp.csv", "renewable": "renewable.csv", "inflexible_load": "load.csv"},
        "admm": {"rho": 1.0, "eps_primal": 1e-6, "eps_dual": 1e-6, "max_iterations": 500, "norm": "l2"},
        "run": {"scenario": "both", "seed": seed, "terminal_soc": "free", "season": season},
        "users": [_user_doc(p) for p in profiles],
    }
    path = out_dir / name
    header = f"# synthetic {season} community, seed {seed}; regenerate with p2phvac.dataio.write_bundle\n"
    path.write_text(header + yaml.safe_dump(doc, sort_keys=False, default_flow_style=None, width=100))
    return path


def _user_doc(p: UserProfile) -> dict:
    b, h = p.battery, p.hvac
    return {
        "id": p.user_id,
        "grid_cap": p.grid_cap,
        "battery": {"capacity": b.capacity, "max_charge": b.max_charge, "max_discharge": b.max_discharge,
                    "degradation_cost": b.degradation_cost, "initial_level": b.initial_level},
        "hvac": {"thermal_rc": h.thermal_rc, "efficiency": h.efficiency, "comfort_weight": h.comfort_weight,
                 "preferred_temp": h.preferred_temp, "temp_min": h.temp_min, "temp_max": h.temp_max,
                 "hvac_max": h.hvac_max, "initial_temp": h.initial_temp},
    }


def bundled_config_path() -> Path:
    return Path(__file__).resolve().parent / "data" / "community10.cfg"


# ----------------------------------------------------------------- results

@dataclass(frozen=True, eq=False)
class RunResults:
    """Everything one run produces; either scenario may be absent.

    ``standalone`` holds one list of daily StandaloneResult per user and
    ``trading`` a MultiDayTrading.
    """

    users: tuple
    slot_count: int
    days: int
    standalone: Optional[list] = None
    trading: Optional[object] = None
    renewable_cap: Optional[np.ndarray] = None


def _fmt(v) -> str:
    return repr(float(v))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_schedule_csv(path, schedule) -> None:
    rows = [
        [t] + [_fmt(getattr(schedule, f)[t]) for f in ("grid", "renewable", "hvac", "charge", "discharge",
                                                       "battery_level", "indoor_temp")]
        for t in range(len(schedule.grid))
    ]
    _write_rows(path, SCHEDULE_COLUMNS, rows)


def load_schedule_csv(path):
    """Read a schedule CSV back; ``peak`` is recomputed as ``max(grid)``."""
    from .model import Schedule

    data = load_series_csv(path, SCHEDULE_COLUMNS[1:], _count_rows(path))
    g, r, h, c, d, b, tau = data.T
    return Schedule(grid=g, renewable=r, hvac=h, charge=c, discharge=d, battery_level=b, indoor_temp=tau,
                    peak=float(np.max(g, initial=0.0)))


def _count_rows(path) -> int:
    with open(path, newline="") as fh:
        return max(sum(1 for _ in fh) - 1, 0)


def cost_rows(results: RunResults) -> tuple:
    """Header and rows of the per-user cost table (reduction = (S1 - S2) / S1 in percent)."""
    ids = [u.user_id for u in results.users]
    s1 = s2 = None
    if results.standalone is not None:
        s1 = [float(sum(r.costs.total for r in days)) for days in results.standalone]
    if results.trading is not None:
        s2 = [c.total for c in results.trading.costs()]
    header = ["user"]
    if s1 is not None:
        header.append("s1_cost")
    if s2 is not None:
        header.append("s2_cost")
    if s1 is not None and s2 is not None:
        header.append("reduction_pct")
    rows = []
    for k, uid in enumerate(ids + ["total"]):
        a = sum(s1) if (s1 is not None and uid == "total") else (s1[k] if s1 is not None else None)
        b = sum(s2) if (s2 is not None and uid == "total") else (s2[k] if s2 is not None else None)
        row = [uid]
        if a is not None:
            row.append(_fmt(a))
        if b is not None:
            row.append(_fmt(b))
        if a is not None and b is not None:
            row.append(_fmt(100.0 * (a - b) / a) if a != 0 else "")
        rows.append(row)
    return header, rows


def write_results(results: RunResults, out_dir) -> list:
    """Persist schedules, trades, the cost table, the ADMM trace and plot-ready series.

    Returns the written paths, sorted.  Floats are written with ``repr`` so
    reading a file back reproduces every value bitwise.
    """
    out = Path(out_dir)
    (out / "schedules").mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(exist_ok=True)
    written = []
    ids = [u.user_id for u in results.users]
    ucols = [f"u{uid}" for uid in ids]
    H, days = results.slot_count, results.days

    scenarios = []
    if results.standalone is not None:
        from .model import Schedule

        s1 = [Schedule.concatenate(r.schedule for r in daily) for daily in results.standalone]
        daily = [[r.costs.total for r in d] for d in results.standalone]
        scenarios.append(("s1", s1, np.array(daily).T))
    if results.trading is not None:
        s2 = results.trading.schedules()
        daily = [[d.costs[u].total for d in results.trading.days] for u in range(len(ids))]
        scenarios.append(("s2", s2, np.array(daily).T))

    for tag, schedules, daily in scenarios:
        for uid, sched in zip(ids, schedules):
            p = out / "schedules" / f"{tag}_user{uid}.csv"
            write_schedule_csv(p, sched)
            written.append(p)
        for name, fieldname in (("renewable", "renewable"), ("battery", "battery_level"), ("grid", "grid"),
                                ("hvac", "hvac"), ("indoor_temp", "indoor_temp")):
            p = out / "plots" / f"{tag}_{name}.csv"
            write_series_csv(p, ucols, np.column_stack([getattr(s, fieldname) for s in schedules]))
            written.append(p)
        p = out / "plots" / f"{tag}_payments.csv"
        _write_rows(p, ["day"] + ucols, [[d + 1] + [_fmt(v) for v in row] for d, row in enumerate(daily)])
        written.append(p)

    if results.trading is not None:
        trades = results.trading.trades()
        N = len(ids)
        p = out / "trades.csv"
        _write_rows(p, ["u", "v", "t", "e"], [
            [ids[u], ids[v], t, _fmt(trades[u, v, t])]
            for u in range(N) for v in range(N) if u != v for t in range(trades.shape[2])
        ])
        written.append(p)
        p = out / "plots" / "s2_net_trade.csv"
        write_series_csv(p, ucols, trades.sum(axis=1).T)
        written.append(p)

        p = out / "trace.csv"
        multi = days > 1
        with open(p, "w") as fh:
            for d, res in enumerate(results.trading.days):
                write_trace_rows(fh, res.trace, day=d + 1 if multi else None, header=(d == 0))
        written.append(p)

    if results.renewable_cap is not None:
        p = out / "plots" / "renewable_available.csv"
        write_series_csv(p, ucols, results.renewable_cap)
        written.append(p)

    header, rows = cost_rows(results)
    p = out / "costs.csv"
    _write_rows(p, header, rows)
    written.append(p)

    meta = {"users": ids, "slot_count": H, "days": days,
            "scenarios": [tag for tag, _, _ in scenarios]}
    if results.trading is not None:
        meta["status"] = results.trading.status
        meta["iterations"] = [d.iterations for d in results.trading.days]
    p = out / "run.json"
    p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(p)
    return sorted(written)


def read_run(out_dir) -> tuple:
    """Metadata and cost table of a written run: ``(meta, header, rows)``."""
    out = Path(out_dir)
    meta = json.loads((out / "run.json").read_text())
    with open(out / "costs.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    return meta, rows[0], rows[1:]
