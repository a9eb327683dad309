import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# acceptance-criterion verdicts, echoed in the terminal summary
ACCEPTANCE: dict = {}


def record(n: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {n:2d}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    from trimodal import synthdata

    cfg = synthdata.SynthConfig(n_samples=64, n_voxel=32, feature_dim=16)
    return synthdata.generate(cfg, seed=0)
