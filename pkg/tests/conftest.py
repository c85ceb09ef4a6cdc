import numpy as np
import pytest

from radarodom.dataio import SynthConfig, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_seq():
    return synth_generate(SynthConfig(n_frames=12, points_per_frame=64, seed=7), "short")


def random_frame(rng, n=256):
    p = np.zeros((n, 5))
    p[:, 0] = rng.uniform(2, 40, n)
    p[:, 1] = rng.uniform(-15, 15, n)
    p[:, 2] = rng.uniform(-1, 2.5, n)
    p[:, 3] = rng.normal(5, 3, n)
    p[:, 4] = rng.normal(-3, 2, n)
    return p


# criterion number -> (passed, summary); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {msg}")
