import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from robust_hedge.hedge_net import forward, init_network
from robust_hedge.market_sim import BSSpec, HestonSpec, simulate_bs, simulate_heston
from robust_hedge.objective import CVaR, CostSpec, Entropic, EuropeanCall

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def calibrated_net(batch, seed=0, arch="NetSim"):
    """Fresh network whose running BN statistics come from one train-mode pass over ``batch``."""
    features = ("S", "v") if "v" in batch.tracks else ("S",)
    n_out = 2 if "Vswap" in batch.tracks else 1
    net = init_network(arch, features, n_out, batch.horizon_steps, seed)
    # momentum 0.9 needs a few passes before the running moments settle
    for _ in range(40):
        forward(net, batch, "train", update_running=True)
    net.params["omega"] = np.asarray(0.5)
    return net


@pytest.fixture(scope="session")
def bs_spec():
    return BSSpec()


@pytest.fixture(scope="session")
def heston_spec():
    return HestonSpec()


@pytest.fixture(scope="session")
def bs_batch(bs_spec):
    return simulate_bs(bs_spec, 64, 5)


@pytest.fixture(scope="session")
def heston_batch(heston_spec):
    return simulate_heston(heston_spec, 64, 5)


@pytest.fixture(scope="session")
def bs_net(bs_batch):
    return calibrated_net(bs_batch, seed=1)


@pytest.fixture(scope="session")
def heston_net(heston_batch):
    return calibrated_net(heston_batch, seed=2)


@pytest.fixture(scope="session")
def call():
    return EuropeanCall(100.0)


@pytest.fixture(scope="session")
def no_cost():
    return CostSpec(0.0)


@pytest.fixture(scope="session")
def entropic():
    return Entropic(1.0)


@pytest.fixture(scope="session")
def cvar():
    return CVaR(0.5)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(a - b)) / scale


INF = math.inf


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
