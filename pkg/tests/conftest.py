import numpy as np
import pytest

from ratpad import datasets
from ratpad.density import DensityConfig, fit_density


@pytest.fixture(scope="session")
def synth_pairs():
    cfg = datasets.SynthConfig(n_bf=24, n_per_species=6, frames=4, seed=3)
    return cfg, datasets.generate_arrays(cfg)


@pytest.fixture(scope="session")
def small_dataset(synth_pairs):
    cfg, pairs = synth_pairs
    return datasets.from_arrays(pairs, cfg)


@pytest.fixture(scope="session")
def density_fit(small_dataset):
    ds = small_dataset
    train = [ds.videos[i] for i in ds.ids(species=datasets.BF, split="train")]
    model = fit_density(train, DensityConfig(k=2, channels=8, epochs=25, seed=1))
    return ds, model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
