"""The bundled ten-home community for one day, with and without trading.

Writes every result file under ``demo_out/`` and prints the cost table, the
same one ``p2phvac report --out demo_out`` shows.
"""

from pathlib import Path

from p2phvac import dataio
from p2phvac.cli import format_summary
from p2phvac.model import TimeHorizon
from p2phvac.standalone import solve_community_standalone
from p2phvac.trading import run_trading_days

cfg = dataio.load_config(dataio.bundled_config_path(), overrides=[("days", 1)])
hz = TimeHorizon(cfg.horizon.slot_count)

standalone = solve_community_standalone(cfg.users, cfg.env, cfg.tariff, hz, cfg.days)
trading = run_trading_days(cfg.users, cfg.env, cfg.tariff, hz, cfg.days, cfg.admm)

out = Path("demo_out")
results = dataio.RunResults(cfg.users, hz.slot_count, cfg.days, standalone, trading, cfg.env.renewable_cap)
for path in dataio.write_results(results, out):
    print("wrote", path)
print()
print(format_summary(out))

# who sold and who bought over the day
net = trading.trades().sum(axis=(1, 2))
for user, n in zip(cfg.users, net):
    side = "bought" if n > 0 else "sold"
    print(f"home {user.user_id:2d} {side} {abs(n):6.2f} kWh")
