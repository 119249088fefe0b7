"""Device model: waveform, feedback, area, and gate simulation."""

import numpy as np
import pytest

from apdsim.device import (
    DeviceParams,
    avalanche_area,
    carriers_to_current,
    effective_overvoltage,
    gate_waveform,
    ionization_prob,
    simulate_gate,
    union_filament_area,
)
from apdsim.optics import GateSeeds
from apdsim.stochastics import OffspringModel, derive_stream

MODEL = OffspringModel("dead_space", dead_steps=14, p_post=0.5243)


def seeds_at(n, t_ns=0.0, sep_um=0.8):
    positions = np.zeros((n, 2))
    positions[:, 0] = sep_um * np.arange(n)
    return GateSeeds(n, positions, np.full(n, t_ns))


def test_device_invariants():
    params = DeviceParams()
    assert params.excess_bias_v == pytest.approx(3.5)
    assert params.i_sat_ma == pytest.approx(25.0)
    with pytest.raises(ValueError):
        DeviceParams(v_dc=48.0)  # DC above breakdown
    with pytest.raises(ValueError):
        DeviceParams(v_pulse=1.0)  # gate never crosses breakdown
    with pytest.raises(ValueError):
        DeviceParams(i_sat_ma=20.0)  # inconsistent with excess bias / feedback


def test_gate_waveform_levels():
    params = DeviceParams()
    assert gate_waveform(-1.0, params) == pytest.approx(45.5)
    assert gate_waveform(3.0, params) == pytest.approx(51.1)
    assert gate_waveform(7.5, params) == pytest.approx(45.5)  # end exclusive
    assert gate_waveform(0.0, params) == pytest.approx(51.1)  # start inclusive


def test_effective_overvoltage():
    params = DeviceParams()
    assert effective_overvoltage(3.0, 0.0, params) == pytest.approx(3.5)
    assert effective_overvoltage(3.0, 25.0, params) == pytest.approx(0.0)
    assert effective_overvoltage(-1.0, 0.0, params) == 0.0  # below breakdown
    assert effective_overvoltage(3.0, 12.5, params) == pytest.approx(1.75)


def test_ionization_prob_scaling():
    model = OffspringModel("dead_space", p_ionize=0.4, dead_steps=3, p_post=0.5)
    assert ionization_prob(3.5, model) == model
    zero = ionization_prob(0.0, model)
    assert zero.p_ionize == 0.0 and zero.p_post == 0.0
    half = ionization_prob(1.75, model)
    assert half.p_post == pytest.approx(0.25)
    assert half.p_ionize == pytest.approx(0.2)


def test_avalanche_area():
    params = DeviceParams()
    assert avalanche_area(0.0, params, r0_um=0.95) == pytest.approx(np.pi * 0.95**2)
    assert avalanche_area(10.0, params) == pytest.approx(np.pi * 25.0**2)
    # reaches the device cap when r0 + v t = 25 um
    t_cap = (25.0 - 0.95) / 25.0
    assert avalanche_area(t_cap * 1.001, params) == pytest.approx(np.pi * 25.0**2, rel=1e-3)
    assert avalanche_area(t_cap * 0.98, params) < np.pi * 25.0**2
    # monotone
    areas = [avalanche_area(t, params) for t in np.linspace(0, 1.2, 40)]
    assert all(b >= a for a, b in zip(areas, areas[1:]))


def test_union_filament_area():
    params = DeviceParams()
    one = union_filament_area(np.array([[0.0, 0.0]]), np.array([2.0]), params)
    assert one == pytest.approx(np.pi * 4.0)
    # disjoint disks add; concentric disks do not
    two = union_filament_area(np.array([[0.0, 0.0], [10.0, 0.0]]), np.array([2.0, 2.0]), params)
    assert two == pytest.approx(2 * np.pi * 4.0)
    merged = union_filament_area(np.array([[0.0, 0.0], [0.0, 0.0]]), np.array([2.0, 2.0]), params)
    assert merged == pytest.approx(np.pi * 4.0)
    assert union_filament_area(np.array([[0.0, 0.0]]), np.array([80.0]), params) == pytest.approx(
        params.active_area_um2
    )


def test_carriers_to_current_linear():
    params = DeviceParams(current_per_carrier_ma=0.012)
    assert carriers_to_current(0, params) == 0.0
    assert carriers_to_current(1000, params) == pytest.approx(12.0)


def test_simulate_gate_zero_seeds_zero_trace():
    trace = simulate_gate(GateSeeds.empty(), DeviceParams(), MODEL, derive_stream(1, 1))
    assert not trace.samples_ma.any()


def test_simulate_gate_rejects_out_of_gate_seeds():
    with pytest.raises(ValueError):
        simulate_gate(seeds_at(1, t_ns=7.6), DeviceParams(), MODEL, derive_stream(1, 2))


def test_seed_injection_visible_at_arrival():
    params = DeviceParams()
    trace = simulate_gate(
        seeds_at(1, t_ns=0.2), params, MODEL, derive_stream(1, 3), 0.01, (-0.1, 0.5)
    )
    assert trace.samples_ma[trace.index_at(0.19)] == 0.0
    assert trace.samples_ma[trace.index_at(0.2)] == pytest.approx(
        params.current_per_carrier_ma
    )


def test_saturation_ceiling_all_seed_counts():
    params = DeviceParams()
    ceiling = params.i_sat_ma * 1.05
    for n in (1, 2, 5, 10):
        for g in range(10):
            trace = simulate_gate(
                seeds_at(n), params, MODEL, derive_stream(33, 100 * n + g), 0.01, (-0.1, 3.0)
            )
            assert trace.samples_ma.max() <= ceiling


def test_noiseless_current_monotone():
    trace = simulate_gate(seeds_at(2), DeviceParams(), MODEL, derive_stream(3, 4), 0.01, (-0.1, 2.0))
    diffs = np.diff(trace.samples_ma.astype(np.float64))
    assert (diffs >= -1e-6).all()


def test_pre_saturation_linearity():
    # mean n-seed current = n x mean 1-seed current while far below i_sat
    params = DeviceParams()
    means = {}
    for n in (1, 3):
        acc = 0.0
        for g in range(400):
            trace = simulate_gate(
                seeds_at(n), params, MODEL, derive_stream(17, 1000 * n + g), 0.01, (-0.1, 0.3)
            )
            acc += trace.samples_ma[trace.index_at(0.25)]
        means[n] = acc / 400
    assert means[3] / means[1] == pytest.approx(3.0, rel=0.05)


def test_saturation_erases_multiplicity(forced_seed_traces):
    # Binary-detector regime: 1- and 2-seed means collapse at late delays
    t, one, two = forced_seed_traces
    late = t >= 2.5
    gap = np.abs(two[late] - one[late]).max()
    assert gap < 0.02 * 25.0


def test_local_vs_global_modes_distinguishable():
    """Band-2/band-1 ratio at 600 ps separates the saturation modes."""
    global_params = DeviceParams()
    local_params = DeviceParams(saturation_mode="local")
    ratios = {}
    for name, params in (("global", global_params), ("local", local_params)):
        means = {}
        for n in (1, 2):
            acc = 0.0
            for g in range(350):
                trace = simulate_gate(
                    seeds_at(n), params, MODEL,
                    derive_stream(71, 2000 * n + g), 0.01, (-0.1, 0.65),
                )
                acc += trace.samples_ma[trace.index_at(0.6)]
            means[n] = acc / 350
        ratios[name] = means[2] / means[1]
    assert ratios["global"] > 1.7
    assert ratios["local"] < 1.3
    assert ratios["global"] - ratios["local"] > 0.4


def test_taper_disabled_gives_single_rate_growth():
    # with the taper off, growth between two early points and two later
    # points matches a single exponential (weak feedback regime)
    params = DeviceParams(ionization_taper_factor=1.0)
    acc = None
    for g in range(600):
        trace = simulate_gate(
            seeds_at(1), params, MODEL, derive_stream(91, g), 0.01, (-0.1, 0.52)
        )
        cur = trace.samples_ma.astype(np.float64)
        acc = cur if acc is None else acc + cur
    mean = acc / 600
    idx = lambda t: int(round((t + 0.1) / 0.01))
    early = np.log(mean[idx(0.34)] / mean[idx(0.20)]) / 0.14
    late = np.log(mean[idx(0.50)] / mean[idx(0.36)]) / 0.14
    assert late == pytest.approx(early, rel=0.12)
