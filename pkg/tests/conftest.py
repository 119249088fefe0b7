"""Shared fixtures: the heavy simulation bundles are built once per session."""

import numpy as np
import pytest

from apdsim.config import config_from_tables, load_scenario
from apdsim.device import DeviceParams, simulate_gate
from apdsim.optics import GateSeeds
from apdsim.runner import simulate_bundle
from apdsim.stochastics import PURPOSE_GATE, derive_stream, purpose_stream_id


def _with_tables(name, **updates):
    tables = load_scenario(name).tables()
    for dotted, value in updates.items():
        section, key = dotted.split(".")
        tables[section][key] = value
    return config_from_tables(tables)


@pytest.fixture(scope="session")
def fig2_bundle():
    """mu = 0.05, 2e5 gates: the single-photon statistics run."""
    return simulate_bundle(_with_tables("fig2_single_photon"), workers=4)


@pytest.fixture(scope="session")
def fig3_bundle():
    """mu = 2.14, 1e5 gates: the number-resolution run."""
    return simulate_bundle(_with_tables("fig3_number_resolution"), workers=4)


@pytest.fixture(scope="session")
def local_mode_bundle():
    """Contrast scenario: local-saturation mode, mu = 2.14."""
    cfg = _with_tables(
        "fig3_number_resolution",
        **{
            "device.saturation_mode": "local",
            "run.n_gates": 20_000,
            "run.master_seed": 414243,
        },
    )
    return simulate_bundle(cfg, workers=4)


@pytest.fixture(scope="session")
def noiseless_bundle():
    """mu = 2.14 without electrical noise, early window (seed-scaling checks)."""
    cfg = _with_tables(
        "fig3_number_resolution",
        **{
            "noise.sigma_electrical_ma": 0.0,
            "run.n_gates": 60_000,
            "run.master_seed": 515253,
            "run.record_window_ns": [-0.1, 0.45],
        },
    )
    return simulate_bundle(cfg, workers=4)


def mean_forced_trace(n_seeds, n_gates, params=None, window=(-0.1, 3.0), seed=909000):
    """Mean trace over gates forced to exactly ``n_seeds`` simultaneous seeds."""
    params = params or DeviceParams()
    model = load_scenario("fig1d_saturation").model
    acc = None
    for g in range(n_gates):
        positions = np.zeros((n_seeds, 2))
        positions[:, 0] = 0.8 * np.arange(n_seeds)  # spread within the spot
        seeds = GateSeeds(n_seeds, positions, np.zeros(n_seeds))
        rng = derive_stream(seed + n_seeds, purpose_stream_id(PURPOSE_GATE, g))
        trace = simulate_gate(seeds, params, model, rng, 0.01, window)
        acc = trace.samples_ma.astype(np.float64) if acc is None else acc + trace.samples_ma
    times = window[0] + 0.01 * np.arange(acc.shape[0])
    return times, acc / n_gates


@pytest.fixture(scope="session")
def forced_seed_traces():
    """Mean traces for 1 and 2 forced seeds through full saturation."""
    t, one = mean_forced_trace(1, 900)
    _, two = mean_forced_trace(2, 900)
    return t, one, two
