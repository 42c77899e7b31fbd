import numpy as np
import pytest

from ahsd.signal_model import FadingConfig, ModelDims, build_diffuse_basis, draw_channel, draw_pilots_and_observe, sigma_for_snr

# acceptance results, filled by test_acceptance and echoed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"AC{k:<2d} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_instance(seed, N=33, L=4, m=2, snr=20.0, delta=None, G=1):
    r = np.random.default_rng(seed)
    ch = draw_channel(r, ModelDims(N, L, m, G), FadingConfig(0.05, 0.01, delta))
    sigma = sigma_for_snr(ch, snr)
    meas = draw_pilots_and_observe(r, ch, G, sigma)
    return ch, meas, build_diffuse_basis(N, L)


@pytest.fixture
def small_instance():
    return make_instance(7)
