import numpy as np
import pytest

from gpnr.checks import TINY_SAMPLER
from gpnr.model import ModelConfig, init_params
from gpnr.sampler import SamplerConfig
from gpnr.scenes import random_scene

# acceptance lines, filled by tests/test_acceptance.py
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    scene, spec = random_scene(np.random.default_rng(7), views=6, size=16)
    return scene, spec


@pytest.fixture(scope="session")
def small_sampler():
    return SamplerConfig(patch_size=3, k=3, m=6, n=4, freqs=3, embed_dim=8)


@pytest.fixture
def small_params(small_sampler):
    cfg = ModelConfig(width=16, blocks=1, heads=2, feature_hidden=8)
    return init_params(small_sampler, cfg, np.random.default_rng(3), dtype=np.float64, std=0.2)


@pytest.fixture
def tiny_sampler():
    return TINY_SAMPLER
