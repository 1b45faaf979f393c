import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from coffeelab.datagen import build_pretrain_corpus
from coffeelab.diffusion import PretrainConfig, pretrain
from coffeelab.harness import ExperimentConfig, load_assets

settings.register_profile("coffeelab", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("coffeelab")


@pytest.fixture(scope="session")
def runs_dir(request):
    """Persistent across sessions so the pretrained assets are built once."""
    return request.config.cache.mkdir("coffeelab_runs")


@pytest.fixture(scope="session")
def default_cfg(runs_dir):
    return ExperimentConfig.from_dict({"paths": {"work_dir": str(runs_dir)}})


@pytest.fixture(scope="session")
def assets(default_cfg):
    return load_assets(default_cfg)


@pytest.fixture(scope="session")
def small_corpus():
    return build_pretrain_corpus(320, seed=0)


@pytest.fixture(scope="session")
def tiny_model(small_corpus):
    """A briefly pretrained model: good enough for plumbing, not for quality."""
    res = pretrain(small_corpus, PretrainConfig(steps=200, batch_size=16, seed=0))
    return res


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
