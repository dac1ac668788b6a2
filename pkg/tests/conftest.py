import os
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cgnnse import datagen
from cgnnse.evaluation import StudySetup
from cgnnse.gnn import Architecture
from cgnnse.grid import load_case
from cgnnse.train import TrainConfig, fit, init_model, split_indices

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DESK_PMUS = [4, 9, 13]
# tuned schedule used for every desk-scale model in the suite
DESK_TRAIN = TrainConfig(epochs=150, batch_size=32, learning_rate=3e-3, patience=25)

_CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")


@pytest.fixture
def criterion():
    """Record one criterion outcome for the summary, then assert it."""

    def record(n, ok, detail=""):
        _CRITERIA[n] = ("PASS" if ok else "FAIL", detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n} failed: {detail}"

    record.skip = lambda n, why: _CRITERIA.__setitem__(n, ("SKIP", why))
    return record


@pytest.fixture(scope="session")
def case14():
    return load_case("ieee14")


@pytest.fixture(scope="session")
def small_dataset(case14):
    """120 noisy 14-bus snapshots, enough for fast training and screening tests."""
    lm = datagen.fit_load_model(datagen.synthetic_load_history(case14, 400, seed=1))
    states = datagen.generate_snapshots(case14, lm, 120, seed=2)
    return datagen.build_dataset(case14, states, DESK_PMUS, datagen.NoiseModel.gaussian(0.01), 4)


@pytest.fixture(scope="session")
def small_model(case14, small_dataset):
    cfg = TrainConfig(epochs=15, batch_size=16, learning_rate=3e-3, patience=15)
    tr, _ = split_indices(len(small_dataset), cfg.validation_fraction, cfg.seed)
    model = init_model(small_dataset, case14, Architecture(hidden=16, heads=2), seed=0, train_idx=tr)
    model, _ = fit(model, small_dataset, cfg)
    return model


@dataclass
class Desk:
    grid: object
    states: object
    setup: StudySetup
    report: object


@pytest.fixture(scope="session")
def desk(case14):
    """Desk-scale 14-bus experiment: 2000 training and 500 held-out snapshots, 1 % TVE."""
    lm = datagen.fit_load_model(datagen.synthetic_load_history(case14, 2000, seed=1))
    states = datagen.generate_snapshots(case14, lm, 2500, seed=3)
    ds = datagen.build_dataset(case14, states, DESK_PMUS, datagen.NoiseModel.gaussian(0.01), 5)
    train, test = ds.subset(np.arange(2000)), ds.subset(np.arange(2000, 2500))
    tr, _ = split_indices(len(train), DESK_TRAIN.validation_fraction, DESK_TRAIN.seed)
    model = init_model(train, case14, Architecture(), seed=0, train_idx=tr)
    model, report = fit(model, train, DESK_TRAIN)
    setup = StudySetup(case14, train, test, Architecture(), DESK_TRAIN, model, seed=0, max_snapshots=500)
    return Desk(case14, states, setup, report)


def fullscale_enabled():
    return os.environ.get("CGNNSE_FULLSCALE", "") not in ("", "0")
