"""Gate-level simulation orchestration: per-gate streams, worker pools,
and bundle assembly.

Every gate owns counter-based streams derived from (master_seed, gate
index) for each random purpose, so the assembled bundle is bit-identical
for any worker count and any chunking of the gate range.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context

import numpy as np

from .acquisition import NoiseParams, Trace, TraceBundle, add_electrical_noise
from .config import SimConfig, config_from_tables
from .device import simulate_gate
from .optics import make_gate_seeds
from .stochastics import (
    PURPOSE_GATE,
    PURPOSE_JITTER,
    PURPOSE_NOISE,
    PURPOSE_PHOTONS,
    PURPOSE_POSITIONS,
    derive_stream,
    purpose_stream_id,
)

__all__ = ["simulate_gate_record", "simulate_bundle", "resimulate_from_manifest"]


def _n_samples(config: SimConfig) -> int:
    w0, w1 = config.record_window_ns
    return int(round((w1 - w0) / config.dt_ns)) + 1


def simulate_gate_record(config: SimConfig, gate: int):
    """Simulate one gate: returns (detected photons, noisy sample row)."""

    def stream(purpose):
        return derive_stream(config.master_seed, purpose_stream_id(purpose, gate))

    seeds = make_gate_seeds(
        config.source, stream(PURPOSE_PHOTONS), stream(PURPOSE_POSITIONS), stream(PURPOSE_JITTER)
    )
    if seeds.n_photons == 0:
        trace = Trace(
            config.record_window_ns[0],
            config.dt_ns,
            np.zeros(_n_samples(config), dtype=np.float32),
        )
    else:
        trace = simulate_gate(
            seeds,
            config.device,
            config.model,
            stream(PURPOSE_GATE),
            dt_ns=config.dt_ns,
            record_window=config.record_window_ns,
            seed_radius_um=config.source.spot_radius_um,
        )
    trace = add_electrical_noise(trace, config.noise, stream(PURPOSE_NOISE))
    return seeds.n_photons, trace.samples_ma


def _simulate_chunk(tables: dict, start: int, stop: int):
    config = config_from_tables(tables)
    n = stop - start
    rows = np.empty((n, _n_samples(config)), dtype=np.float32)
    truth = np.empty(n, dtype=np.int64)
    for i, gate in enumerate(range(start, stop)):
        truth[i], rows[i] = simulate_gate_record(config, gate)
    return start, truth, rows


def simulate_bundle(config: SimConfig, workers: int = 1) -> TraceBundle:
    """Run every gate and assemble the bundle in gate order.

    The result is byte-identical for any ``workers`` value.
    """
    n_gates = config.n_gates
    rows = np.empty((n_gates, _n_samples(config)), dtype=np.float32)
    truth = np.empty(n_gates, dtype=np.int64)
    tables = config.tables()
    if workers <= 1:
        _, truth[:], rows[:] = _simulate_chunk(tables, 0, n_gates)
    else:
        chunk = max(1, -(-n_gates // (workers * 4)))
        ranges = [
            (start, min(start + chunk, n_gates)) for start in range(0, n_gates, chunk)
        ]
        with ProcessPoolExecutor(
            max_workers=workers, mp_context=get_context("spawn")
        ) as pool:
            futures = [
                pool.submit(_simulate_chunk, tables, start, stop)
                for start, stop in ranges
            ]
            for fut in futures:
                start, chunk_truth, chunk_rows = fut.result()
                stop = start + chunk_truth.shape[0]
                truth[start:stop] = chunk_truth
                rows[start:stop] = chunk_rows
    manifest = {
        "schema_version": 1,
        "generator": "apdsim",
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "master_seed": config.master_seed,
        "config": tables,
        "photon_truth": truth.tolist(),
    }
    return TraceBundle(config.record_window_ns[0], config.dt_ns, rows, manifest)


def resimulate_from_manifest(manifest: dict, workers: int = 1) -> TraceBundle:
    """Reproduce a bundle's sample bytes from its manifest echo."""
    config = config_from_tables(manifest["config"])
    return simulate_bundle(config, workers=workers)
