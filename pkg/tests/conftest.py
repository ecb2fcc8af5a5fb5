import time

import numpy as np
import pytest

from patchguard.aggregate import MaskingConfig
from patchguard.data import synthetic_dataset
from patchguard.experiment import shapes_for, train_pair
from patchguard.geometry import RFGeometry
from patchguard.model import TrainConfig

# acceptance lines collected by tests/test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


class Desk:
    """The desk-scale experiment: synthetic 32x32 data, r=9, s=4, 3%-area patch."""

    def __init__(self):
        self.train = synthetic_dataset(2000, seed=0)
        self.test = synthetic_dataset(200, seed=1)
        self.geom = RFGeometry.square(9, 4, 32)
        self.patch, self.malicious, self.mask = shapes_for(self.geom, 0.03)
        self.train_config = TrainConfig(
            learning_rate=0.02, epochs=10, batch_size=32, seed=0, hidden_units=32, adv_mask_shape=self.mask
        )
        self.masking = MaskingConfig(self.mask)
        t0 = time.perf_counter()
        self.plain, self.adv = train_pair(self.train, self.geom, self.train_config)
        self.train_seconds = time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk():
    return Desk()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
