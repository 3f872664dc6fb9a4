import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from spiroembed.spiro import VolumeTimeSeries, make_flow_volume
from spiroembed.synth import CohortConfig, generate_cohort

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def exhale(n=600, fvc=4.0, tau=0.6, subject_id="s0"):
    """Exponential emptying sampled at 10 ms."""
    t = np.arange(n) * 0.01
    return VolumeTimeSeries(subject_id, fvc * (1.0 - np.exp(-t / tau)))


@pytest.fixture
def blow():
    return exhale()


@pytest.fixture
def curve():
    return make_flow_volume(exhale())


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(CohortConfig(n_subjects=400, seed=11))


def pytest_terminal_summary(terminalreporter):
    """Repeat the one-line verdicts recorded by the acceptance suite."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
