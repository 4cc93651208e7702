import importlib.util
import logging
import os
import sys

import numpy as np
import pytest

try:
    import mlecs
except ImportError:
    # running from a checkout: src/ is the mlecs package
    _src = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                        os.pardir, 'src')
    _spec = importlib.util.spec_from_file_location(
        'mlecs', os.path.join(_src, '__init__.py'),
        submodule_search_locations=[_src])
    mlecs = importlib.util.module_from_spec(_spec)
    sys.modules['mlecs'] = mlecs
    _spec.loader.exec_module(mlecs)

from mlecs import config as config_mod
from mlecs import models
from mlecs.verification import selftest_config

UNIVERSE = ['vision', 'audio', 'text']


@pytest.fixture(autouse=True)
def mlecs_logger():
    # the CLI entry point installs handlers and stops propagation
    logger = logging.getLogger('mlecs')
    saved = (logger.level, logger.propagate, list(logger.handlers))
    yield logger
    for handler in list(logger.handlers):
        if handler not in saved[2]:
            logger.removeHandler(handler)
    logger.setLevel(saved[0])
    logger.propagate = saved[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return selftest_config()


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    path = tmp_path / 'tiny.yaml'
    path.write_text(config_mod.serialize_config(tiny_config))
    return str(path)


def build_model(rng, modalities=UNIVERSE, universe=UNIVERSE, raw=5, width=8,
                depth=2, soft_tokens=2, vocab=6, latent=4, rank=2):
    backbone = models.Backbone.build(width, depth, vocab, soft_tokens, rank,
                                     rng)
    return models.UnifiedModel.build(
        modalities, universe, dict((m, raw) for m in universe), 6, latent, 7,
        backbone, rng)


@pytest.fixture
def model_factory():
    return build_model
