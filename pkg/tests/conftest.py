import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from occmil.bagstore import SynthConfig, synth_generate
from occmil.mathkern import Prng
from occmil.model import init_params

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def small_synth():
    """40 bags, 32-dim, well separated; cheap enough to train in a second or two."""
    return synth_generate(SynthConfig(n_neg_bags=20, n_pos_bags=20, k_min=10, k_max=20, noise_fraction=0.05, seed=7))


@pytest.fixture
def tiny_params():
    return init_params(6, 4, 3, Prng(11))


def random_bag_features(seed: int, k: int, dim: int) -> np.ndarray:
    return Prng(seed).gauss(k * dim).reshape(k, dim)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
