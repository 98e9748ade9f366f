import os
from dataclasses import dataclass
import sys
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One desk-scale overfit run shared by the training tests and the acceptance suite:
# a single 64x64 translate triplet, 500 AdamW steps at lr 1e-4, batch 1, no augmentation.
OVERFIT = dict(seed=0, motion_kind="translate", size=64, encoder_channels=(8, 16, 32, 64), steps=500, lr=1e-4)


@dataclass
class OverfitRun:
    model: object
    history: list
    triplet: object
    seconds: float


@pytest.fixture(scope="session")
def overfit_run():
    from flowvfi.pipeline import ModelConfig
    from flowvfi.training import gen_synthetic, train_loop

    tri = gen_synthetic(OVERFIT["seed"], OVERFIT["motion_kind"], OVERFIT["size"])
    cfg = ModelConfig(encoder_channels=OVERFIT["encoder_channels"], seed=OVERFIT["seed"])
    t0 = time.perf_counter()
    model, hist = train_loop(cfg, [tri], OVERFIT["steps"], batch_size=1, lr=OVERFIT["lr"], augment_data=False,
                             seed=OVERFIT["seed"])
    return OverfitRun(model, hist, tri, time.perf_counter() - t0)


# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
