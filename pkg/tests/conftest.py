import numpy as np
import pytest

from cdisopt.diffusion import DwiSeries
from cdisopt.volume import Volume3D

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


def exponential_series(s0, adc, b_values):
    """Noise-free mono-exponential series from S0 and ADC arrays."""
    s0 = np.asarray(s0, dtype=float)
    adc = np.asarray(adc, dtype=float)
    return DwiSeries(tuple(b_values), tuple(Volume3D(s0 * np.exp(-b * adc)) for b in b_values))
