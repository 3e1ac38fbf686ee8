import numpy as np
import pytest

from ris_ofdm.channel import Geometry, assemble_effective, generate_channels
from ris_ofdm.coding import load_default_table, target_to_sinr
from ris_ofdm.config import ScenarioConfig


def desk_channel(K=2, M=2, N=8, J_prime=4, seed=0, J=512):
    """Geometry-based channel on the optimisation grid, noise normalised to one."""
    cfg = ScenarioConfig(K=K, M=M, N=N, J=J, J_prime=J_prime)
    return assemble_effective(generate_channels(Geometry(), cfg, seed), J_prime).normalized()


@pytest.fixture(scope="session")
def rho_tar():
    return target_to_sinr(load_default_table(), 1e-2)[1]


def random_phases(N, seed):
    return np.exp(2j * np.pi * np.random.default_rng(seed).random(N))


_CRITERIA = {}


@pytest.fixture
def criterion():
    """``report(n, ok, detail)`` prints one verdict line and keeps it for the run summary."""
    def report(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
