import pytest

from sivcharge.model import ChargeModelParams
from sivcharge.photonics import DetectorParams
from sivcharge.profiles import load_profile


@pytest.fixture(scope="session")
def params() -> ChargeModelParams:
    return load_profile("emitter_a")


@pytest.fixture(scope="session")
def detector() -> DetectorParams:
    return DetectorParams()


@pytest.fixture
def scaled_params() -> ChargeModelParams:
    """Slow optics (1 MHz decay) so full-mode jump simulation stays cheap."""
    return ChargeModelParams(gamma_rad=1e6, r_max=2e4, k_ion=400.0, green_exc=10.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
