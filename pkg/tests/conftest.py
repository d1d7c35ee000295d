import warnings
from pathlib import Path

import numpy as np
import pytest

from cabbage_pheno.stereo import CameraRig

warnings.filterwarnings("ignore", message="The TBB threading layer")

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def rig0():
    """Principal point at the origin so pixel and camera coordinates coincide."""
    return CameraRig(focal_px=1000.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def textured(shape, seed=0, sigma=1.5):
    """Smooth random texture in [0, 255]."""
    from scipy.ndimage import gaussian_filter

    g = gaussian_filter(np.random.default_rng(seed).normal(size=shape), sigma)
    g = (g - g.min()) / (g.max() - g.min())
    return 255.0 * g


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(passed, text)``; returns ``passed``.

    ``status`` replaces the PASS/FAIL tag for lines that are not a verdict.
    """

    def record(passed, text, status=None):
        line = f"[{status or ('PASS' if passed else 'FAIL')}] {text}"
        request.node.user_properties.append(("acceptance", line))
        print(line)
        return passed

    return record


def pytest_runtest_logreport(report):
    if report.when == "call":
        _ACCEPTANCE_LINES.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
