"""Shared small-scale fixtures."""

import numpy as np
import pytest

from aeseg import synthdata
from aeseg.models import Topology, TrainConfig, train_classifier

SMALL_SPEC = synthdata.SceneSpec(image_size=(32, 32), n_classes=3, n_train=24, n_val=8,
                                 body_size=(12, 16), marker_size=4, low_contrast_classes=(2,),
                                 max_objects=2, seed=7)
SMALL_TOPO = Topology(n_classes=3, channels=(6, 8), strides=(2, 1), image_size=(32, 32))
SMALL_TRAIN = TrainConfig(epochs=20, batch_size=4, learning_rate=0.1, seed=3)


@pytest.fixture(scope="session")
def small_dataset():
    return synthdata.generate(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_arrays(small_dataset):
    return small_dataset.arrays("train")


@pytest.fixture(scope="session")
def small_classifier(small_arrays):
    x, y, _ = small_arrays
    model, _ = train_classifier(x, y, SMALL_TRAIN, SMALL_TOPO)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
