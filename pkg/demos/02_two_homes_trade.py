"""Two neighbours: one has solar it cannot use, the other has none.

On their own the first curtails and the second buys from the grid.  Once
they may trade, surplus flows next door at the peer price, and ADMM finds
the same split as solving both homes jointly.
"""

import numpy as np

from p2phvac.model import (BatteryParams, EnvironmentSeries, GridTariff, HvacParams, TimeHorizon,
                           UserProfile)
from p2phvac.standalone import solve_community_standalone
from p2phvac.trading import AdmmSettings, centralized_oracle, run_admm

H = 6
hz = TimeHorizon(H)
tariff = GridTariff.flat(0.25, 0.5, 0.12, H)


def home(uid):
    hv = HvacParams(3.0, -1.0, 0.05, 24.0, 15.0, 32.0, 4.0)
    return UserProfile(uid, 5.0, BatteryParams(0.0, 1.0, 1.0, 0.01), hv)


homes = [home(1), home(2)]
env = EnvironmentSeries(np.full(H, 28.0), np.column_stack([np.full(H, 4.0), np.zeros(H)]),
                        np.ones((H, 2)))

alone = solve_community_standalone(homes, env, tariff, hz)
s1 = [days[0].costs.total for days in alone]
print("standalone costs:", np.round(s1, 4))

res = run_admm(homes, env, tariff, hz, AdmmSettings(rho=1.0))
print(f"ADMM {res.status} after {res.iterations} iterations")
print("trading costs:   ", np.round([c.total for c in res.costs], 4))
print("home 1 sells per hour:", np.round(-res.trade_state.trades[0, 1], 3))

central = centralized_oracle(homes, env, tariff, hz)
print(f"joint optimum {central.total_cost:.6f}, ADMM {res.total_cost:.6f}")

# residuals shrink until both stopping thresholds hold
for k in (0, 4, 9, res.iterations - 1):
    if k < len(res.trace):
        print(f"  iter {k + 1:3d}  primal {res.trace.primal_residual[k]:.2e}  dual {res.trace.dual_change[k]:.2e}")
