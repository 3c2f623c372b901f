"""Shared fixtures."""

import numpy as np
import pytest

from core import io
from core.multiversion import ingest
from core.schemas import GeneratorConfig, SolverConfig
from core.synth import emit_events, generate, truth_frame
from core.tensor_core import FactorSet, reconstruct


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cfg():
    """Noiseless in-model data: I=5, J=4, S=12, K=3, F=2."""
    return GeneratorConfig(I=5, J=4, S=12, K=3, F=2, seed=3, fractions=[0.6, 0.3, 0.1])


@pytest.fixture
def small_data(small_cfg):
    return generate(small_cfg)


@pytest.fixture
def small_ds(small_data, small_cfg):
    return ingest(small_data.events, small_cfg.K, small_data.horizon, n_locations=small_cfg.I, n_features=small_cfg.J)


@pytest.fixture
def quick_solver():
    return SolverConfig(rank=2, max_outer_iters=60, init_iters=20, seed=0)


@pytest.fixture
def planted():
    """Exact rank-2 update tensor (4 x 3 x 3 x 7) and its event log replayed to GD 7."""
    rng = np.random.default_rng(7)
    factors = FactorSet(*(rng.uniform(0.5, 1.5, size=(d, 2)) for d in (4, 3, 3, 7)))
    X = reconstruct(factors).values
    log, _ = emit_events(X, horizon=7, K=3)
    return factors, X, log


@pytest.fixture
def experiment_files(tmp_path, small_data):
    """events.csv and truth.csv (every GD) for the small dataset."""
    events = tmp_path / "events.csv"
    truth = tmp_path / "truth.csv"
    io.write_events(small_data.events, events)
    gds = np.arange(1, small_data.horizon + 1)
    io.write_frame(truth_frame(small_data.truth.totals, gds), truth)
    return events, truth
