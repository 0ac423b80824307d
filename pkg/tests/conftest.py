from __future__ import annotations

import numpy as np
import pytest

from radcal.calib import RansacConfig
from radcal.synth import generate, preset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fisheye_scene():
    return generate(preset("fisheye", n_images=6, noise_sigma=0.0, rng_seed=7))


@pytest.fixture(scope="session")
def noisy_scene():
    return generate(preset("wide", n_images=6, noise_sigma=0.5, outlier_fraction=0.05, rng_seed=11))


@pytest.fixture(scope="session")
def quick_config():
    return RansacConfig(iterations=40)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def criterion():
    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[name] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[name])
