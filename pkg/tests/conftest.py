import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from p2phvac.dataio import bundled_config_path, load_config  # noqa: E402
from p2phvac.model import TimeHorizon  # noqa: E402
from p2phvac.standalone import solve_community_standalone  # noqa: E402
from p2phvac.trading import centralized_oracle, run_admm  # noqa: E402


@pytest.fixture(scope="session")
def bundled():
    return load_config(bundled_config_path())


@pytest.fixture(scope="session")
def day1(bundled):
    """First day of the bundled community: env, tariff and horizon."""
    H = bundled.horizon.slot_count
    return bundled.env.window(0, H), bundled.tariff.window(0, H), TimeHorizon(H)


@pytest.fixture(scope="session")
def day1_standalone(bundled, day1):
    env, tar, hz = day1
    return [days[0] for days in solve_community_standalone(bundled.users, env, tar, hz)]


@pytest.fixture(scope="session")
def day1_admm(bundled, day1):
    env, tar, hz = day1
    start = time.perf_counter()
    res = run_admm(bundled.users, env, tar, hz, bundled.admm)
    return res, time.perf_counter() - start


@pytest.fixture(scope="session")
def day1_central(bundled, day1):
    env, tar, hz = day1
    return centralized_oracle(bundled.users, env, tar, hz)


def pytest_terminal_summary(terminalreporter):
    import verdicts

    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in verdicts.LINES:
            terminalreporter.write_line(line)
