"""Command-line front end: ``p2phvac run|trace|validate|report``.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 ADMM iteration limit.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from . import dataio
from .formulation import InfeasibleScheduleError, SolverFailure, precheck
from .model import TimeHorizon
from .standalone import solve_community_standalone
from .trading import CONVERGED, run_trading_days

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_ITERATION_LIMIT = 0, 2, 3, 4


class _Fail(Exception):
    def __init__(self, code, stage, message):
        self.code = code
        super().__init__(f"{stage} failed: {message}")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="p2phvac", description="Community energy scheduling with P2P trading.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        p.add_argument("--config", type=Path, default=None,
                       help="community config (default: the bundled 10-home dataset)")
        p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. rho=5 or users.0.grid_cap=6")
        p.add_argument("--seed", type=int, default=None,
                       help="regenerate the synthetic series and profiles with this seed")
        if scenario:
            p.add_argument("--scenario", choices=dataio.SCENARIOS, default=None)

    common(sub.add_parser("run", help="solve the requested scenario(s) and write all result files"))
    common(sub.add_parser("trace", help="run trading and report ADMM convergence"), scenario=False)
    v = sub.add_parser("validate", help="load and check a config without solving")
    v.add_argument("--config", type=Path, default=None)
    v.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    r = sub.add_parser("report", help="print the summary table of a finished run")
    r.add_argument("--out", type=Path, default=Path("results"))
    return ap


def _load(args, scenario=None):
    path = args.config or dataio.bundled_config_path()
    overrides = [dataio.parse_override(s) for s in args.overrides]
    if scenario is not None:
        overrides.append(("run.scenario", scenario))
    seed = getattr(args, "seed", None)
    if seed is not None:
        base = dataio.load_config(path, load_series=False)
        season = _season(path)
        tariff = (base.tariff.energy_price, base.tariff.peak_price, float(base.tariff.p2p_price[0]))
        path = dataio.write_bundle(args.out / "input", seed=seed, n_users=len(base.users), days=base.days,
                                   season=season, tariff=tariff)
    return dataio.load_config(path, overrides=overrides)


def _season(path) -> str:
    import yaml

    data = yaml.safe_load(Path(path).read_text()) or {}
    return str((data.get("run") or {}).get("season", "summer"))


def _solve(cfg, out: Path):
    H = TimeHorizon(cfg.horizon.slot_count)
    if cfg.scenario == "standalone":
        for k, user in enumerate(cfg.users):
            for day in range(cfg.days):
                env = cfg.env.window(day * H.slot_count, (day + 1) * H.slot_count).for_user(k)
                problems = precheck(user, env, trading=False)
                if problems:
                    raise _Fail(EXIT_INVALID, "feasibility check",
                                str(InfeasibleScheduleError(user.user_id, problems)))

    standalone = trading = None
    try:
        if cfg.scenario in ("standalone", "both"):
            standalone = solve_community_standalone(cfg.users, cfg.env, cfg.tariff, H, cfg.days,
                                                    terminal_soc=cfg.terminal_soc, workers=cfg.admm.workers)
        if cfg.scenario in ("trading", "both"):
            trading = run_trading_days(cfg.users, cfg.env, cfg.tariff, H, cfg.days, cfg.admm, cfg.terminal_soc)
    except InfeasibleScheduleError as exc:
        raise _Fail(EXIT_INVALID, "feasibility check", str(exc)) from None
    except SolverFailure as exc:
        raise _Fail(EXIT_SOLVER, "solve", str(exc)) from None

    results = dataio.RunResults(cfg.users, H.slot_count, cfg.days, standalone, trading, cfg.env.renewable_cap)
    dataio.write_results(results, out)
    if trading is not None and trading.status != CONVERGED:
        print(f"warning: ADMM stopped without converging ({trading.status})", file=sys.stderr)
        return EXIT_ITERATION_LIMIT
    return EXIT_OK


def format_summary(out_dir) -> str:
    """Summary table rebuilt only from the files of a finished run."""
    meta, header, rows = dataio.read_run(out_dir)
    titles = {"user": "user", "s1_cost": "S1 cost", "s2_cost": "S2 cost", "reduction_pct": "reduction %"}
    lines = ["  ".join(f"{titles[h]:>12}" for h in header)]
    for row in rows:
        cells = []
        for h, cell in zip(header, row):
            if h == "user" or cell == "":
                cells.append(f"{cell:>12}")
            elif h == "reduction_pct":
                cells.append(f"{float(cell):>12.2f}")
            else:
                cells.append(f"{float(cell):>12.4f}")
        lines.append("  ".join(cells))
    if "iterations" in meta:
        its = ", ".join(str(i) for i in meta["iterations"])
        lines.append(f"ADMM status: {meta['status']}; iterations per day: {its}")
    return "\n".join(lines) + "\n"


def format_trace_summary(out_dir) -> str:
    with open(Path(out_dir) / "trace.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    meta, _, _ = dataio.read_run(out_dir)
    last = rows[-1]
    return (f"status {meta['status']}: {sum(meta['iterations'])} iterations over {meta['days']} day(s); "
            f"final primal residual {float(last['primal_residual']):.3e}, "
            f"final dual change {float(last['dual_change']):.3e}\n")


def cmd_run(args) -> int:
    cfg = _load(args, args.scenario)
    code = _solve(cfg, args.out)
    sys.stdout.write(format_summary(args.out))
    return code


def cmd_trace(args) -> int:
    cfg = _load(args, "trading")
    cfg = replace(cfg, admm=replace(cfg.admm, record_trace=True))
    code = _solve(cfg, args.out)
    sys.stdout.write(format_trace_summary(args.out))
    return code


def cmd_validate(args) -> int:
    checks = []
    path = args.config or dataio.bundled_config_path()
    try:
        cfg = dataio.load_config(path, overrides=[dataio.parse_override(s) for s in args.overrides])
        checks.append(("config and series files", None))
    except dataio.ConfigError as exc:
        checks.append(("config and series files", str(exc)))
        cfg = None
    if cfg is not None:
        H = cfg.horizon.slot_count
        for k, user in enumerate(cfg.users):
            problems = []
            for day in range(cfg.days):
                env = cfg.env.window(day * H, (day + 1) * H).for_user(k)
                problems += [f"day {day + 1}, {p}" for p in precheck(user, env, trading=False)]
            checks.append((f"user {user.user_id} standalone feasibility", "; ".join(problems) or None))
    failed = 0
    for name, err in checks:
        if err is None:
            print(f"PASS {name}")
        else:
            failed += 1
            print(f"FAIL {name}: {err}")
    return EXIT_INVALID if failed else EXIT_OK


def cmd_report(args) -> int:
    try:
        sys.stdout.write(format_summary(args.out))
    except FileNotFoundError as exc:
        raise _Fail(EXIT_INVALID, "report", str(exc)) from None
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"run": cmd_run, "trace": cmd_trace, "validate": cmd_validate, "report": cmd_report}[args.command]
    try:
        return handler(args)
    except dataio.ConfigError as exc:
        print(f"error: config validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
