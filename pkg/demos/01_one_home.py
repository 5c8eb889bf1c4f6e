"""A single home scheduling its battery and air conditioning for one day.

Run with ``python demos/01_one_home.py``.
"""

import numpy as np

from p2phvac.dataio import bundled_config_path, load_config
from p2phvac.model import TimeHorizon, validate_schedule
from p2phvac.standalone import solve_standalone

cfg = load_config(bundled_config_path())
H = cfg.horizon.slot_count
home = cfg.users[8]  # little solar, so the grid matters
env = cfg.env.window(0, H).for_user(8)
tariff = cfg.tariff.window(0, H)

res = solve_standalone(home, env, tariff, TimeHorizon(H))
s = res.schedule
print(f"home {home.user_id}: battery {home.battery.capacity} kWh, prefers {home.hvac.preferred_temp} C")
print(" hour  outdoor  indoor   hvac   grid  battery")
for t in range(H):
    row = np.array([env.outdoor_temp[t], s.indoor_temp[t], s.hvac[t], s.grid[t], s.battery_level[t]]).round(2) + 0.0
    print(f"{t:5d}  {row[0]:7.2f}  {row[1]:6.2f}  {row[2]:5.2f}  {row[3]:5.2f}  {row[4]:7.2f}")

c = res.costs
print(f"\ngrid {c.grid_cost:.3f} + battery {c.battery_cost:.3f} + discomfort {c.discomfort_cost:.3f}"
      f" = {c.total:.3f}")
# the peak charge is paid on the single largest grid draw of the day
print(f"peak draw {s.peak:.3f} kW at hour {int(np.argmax(s.grid))}")
print("constraint violations:", validate_schedule(s, home, env, TimeHorizon(H)) or "none")
