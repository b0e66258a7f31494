import numpy as np
import pytest

from odtta.domain_pool import FeatureExtractor
from odtta.harness import calibrate_severity_grids
from odtta.network import ModelSpec
from odtta.stream import SCHEDULE_KINDS, CorruptionKind, TaskSpec
from odtta.trainer import fit_source_model


@pytest.fixture(scope='session')
def task():
    return TaskSpec.create(input_dim=32, class_count=10, noise_scale=0.35, seed=0)


@pytest.fixture(scope='session')
def source(task):
    """ Source model fitted once per session on the default task. """
    spec = ModelSpec.mlp(task.input_dim, [64, 64], task.class_count)
    return fit_source_model(task, spec, epochs=10, lr=0.1, batch_size=32, train_size=4000, seed=0)


@pytest.fixture(scope='session')
def grids(source, task):
    """ Severity grids of the schedule kinds and the detector calibration noise, fitted to the source model. """
    return calibrate_severity_grids(source, task, list(SCHEDULE_KINDS) + [CorruptionKind.GAUSSIAN_NOISE])


@pytest.fixture()
def network(source):
    return source.copy()


@pytest.fixture(scope='session')
def extractor(source):
    return FeatureExtractor(source, layer=2, batch_size=16)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: end-to-end stream runs over several schedules')
