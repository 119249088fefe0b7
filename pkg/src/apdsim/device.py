"""Gated-bias waveform, saturation feedback, and full avalanche traces.

Saturation is global: the avalanche current drops voltage across the
bias loop (sense resistor plus internal resistance), reducing the
overvoltage and with it the ionization probability, so every avalanche
in the device saturates toward the same 25 mA ceiling regardless of how
many seeds started it.

A contrast "local" saturation mode caps the current density per unit
filament area instead (the hypothesis the measurements rule out); it
exists only so tests can demonstrate that the two mechanisms are
distinguishable by the photon-number band ratio at late delays.

The measured mean current cannot follow a single exponential all the
way to saturation (growth is ~e^11/ns while the bands are below 1 mA
but the trace takes over a nanosecond to saturate), so the ionization
probability tapers by a fixed factor once the avalanche outgrows its
early core.  Set ``ionization_taper_factor = 1`` for a pure single-rate
process.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .acquisition import Trace
from .optics import GateSeeds
from .stochastics import (
    POPULATION_CAP,
    OffspringModel,
    PopulationOverflowError,
    PopulationState,
    RngStream,
)

__all__ = [
    "DeviceParams",
    "AvalancheState",
    "gate_waveform",
    "effective_overvoltage",
    "ionization_prob",
    "avalanche_area",
    "union_filament_area",
    "carriers_to_current",
    "simulate_gate",
]

REFERENCE_OVERVOLTAGE_V = 3.5


@dataclass(frozen=True)
class DeviceParams:
    """Bias, geometry and circuit parameters of the gated diode."""

    v_breakdown: float = 47.6
    v_dc: float = 45.5
    v_pulse: float = 5.6
    gate_width_ns: float = 7.5
    rep_rate_khz: float = 24.0
    r_series_ohm: float = 50.0
    r_feedback_total_ohm: float = 140.0
    i_sat_ma: float = 25.0
    active_diameter_um: float = 50.0
    v_lateral_um_per_ns: float = 25.0
    temperature_c: float = -50.0
    current_per_carrier_ma: float = 0.012360
    ionization_taper_onset_ns: float = 0.35
    ionization_taper_factor: float = 0.12
    ionization_taper_ramp_ns: float = 0.05
    saturation_mode: str = "global"

    def __post_init__(self):
        if not self.v_dc < self.v_breakdown:
            raise ValueError("DC bias must sit below breakdown")
        if not self.v_dc + self.v_pulse > self.v_breakdown:
            raise ValueError("gate pulse must lift the bias above breakdown")
        expected_sat = 1000.0 * self.excess_bias_v / self.r_feedback_total_ohm
        if abs(expected_sat - self.i_sat_ma) > 0.005 * expected_sat:
            raise ValueError(
                f"i_sat_ma={self.i_sat_ma} inconsistent with excess bias / feedback "
                f"resistance ({expected_sat:.3f} mA)"
            )
        if self.saturation_mode not in ("global", "local"):
            raise ValueError(f"unknown saturation mode {self.saturation_mode!r}")
        if not 0.0 < self.ionization_taper_factor <= 1.0:
            raise ValueError("ionization taper factor must be in (0, 1]")

    @property
    def excess_bias_v(self) -> float:
        return self.v_dc + self.v_pulse - self.v_breakdown

    @property
    def active_area_um2(self) -> float:
        return math.pi * (0.5 * self.active_diameter_um) ** 2

    @property
    def saturation_density_ma_per_um2(self) -> float:
        return self.i_sat_ma / self.active_area_um2


@dataclass
class AvalancheState:
    """Instantaneous snapshot of one developing avalanche."""

    population: PopulationState
    filament_radius_um: float
    trigger_time_ns: Optional[float]
    current_ma: float


def gate_waveform(t_ns, params: DeviceParams):
    """Bias voltage at time ``t_ns`` within one repetition period.

    Rectangular gate: v_dc outside, v_dc + v_pulse on [0, gate_width).
    """
    t = np.asarray(t_ns, dtype=float)
    v = params.v_dc + np.where((t >= 0.0) & (t < params.gate_width_ns), params.v_pulse, 0.0)
    return float(v) if v.ndim == 0 else v


def effective_overvoltage(t_ns: float, current_ma: float, params: DeviceParams) -> float:
    """Overvoltage left after the feedback drop, clamped at zero."""
    if current_ma < 0:
        raise ValueError("current must be >= 0")
    v = gate_waveform(t_ns, params) - params.v_breakdown
    v -= current_ma * params.r_feedback_total_ohm / 1000.0
    return max(0.0, v)


def ionization_prob(
    overvoltage_v: float,
    model: OffspringModel,
    reference_overvoltage_v: float = REFERENCE_OVERVOLTAGE_V,
) -> OffspringModel:
    """Scale the model's ionization probabilities linearly with overvoltage.

    Unit factor at the reference overvoltage; zero overvoltage stops
    all multiplication.
    """
    if overvoltage_v < 0:
        raise ValueError("overvoltage must be >= 0")
    return model.scaled(overvoltage_v / reference_overvoltage_v)


def avalanche_area(elapsed_ns: float, params: DeviceParams, r0_um: float = 0.95) -> float:
    """Filament area after lateral propagation, capped at the active area.

    The filament expands at constant velocity from the seeding spot
    radius; monotone nondecreasing in elapsed time.
    """
    if elapsed_ns < 0:
        raise ValueError("elapsed time must be >= 0")
    r = min(r0_um + params.v_lateral_um_per_ns * elapsed_ns, 0.5 * params.active_diameter_um)
    return math.pi * r * r


def _disk_intersection(r1: float, r2: float, d: float) -> float:
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        rm = min(r1, r2)
        return math.pi * rm * rm
    a1 = r1 * r1 * math.acos((d * d + r1 * r1 - r2 * r2) / (2 * d * r1))
    a2 = r2 * r2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2 * d * r2))
    a3 = 0.5 * math.sqrt(
        (-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)
    )
    return a1 + a2 - a3


def union_filament_area(
    centers_um: np.ndarray, radii_um: np.ndarray, params: DeviceParams
) -> float:
    """Union area of the per-seed filaments, capped at the active area.

    Exact for one or two filaments; for more, inclusion-exclusion is
    truncated at pairs and clipped to the feasible range.  Seeds sit
    within a micron-scale spot, so filaments merge almost immediately
    and the truncation error is negligible.
    """
    centers = np.asarray(centers_um, dtype=float).reshape(-1, 2)
    radii = np.asarray(radii_um, dtype=float)
    if centers.shape[0] == 0:
        return 0.0
    areas = math.pi * radii**2
    total = float(areas.sum())
    for i in range(len(radii)):
        for j in range(i + 1, len(radii)):
            d = float(np.hypot(*(centers[i] - centers[j])))
            total -= _disk_intersection(radii[i], radii[j], d)
    total = max(total, float(areas.max()))
    return min(total, params.active_area_um2)


def carriers_to_current(total: int, params: DeviceParams) -> float:
    """Circuit current carried by ``total`` carriers, in mA."""
    return total * params.current_per_carrier_ma


def _taper_factor(age_ns: float, params: DeviceParams) -> float:
    """Multiplication-efficiency multiplier vs avalanche age (smooth knee)."""
    f = params.ionization_taper_factor
    if f >= 1.0:
        return 1.0
    x = (age_ns - params.ionization_taper_onset_ns) / params.ionization_taper_ramp_ns
    if x <= 0.0:
        return 1.0
    if x >= 1.0:
        return f
    s = x * x * (3.0 - 2.0 * x)  # smoothstep
    return 1.0 - (1.0 - f) * s


def simulate_gate(
    seeds: GateSeeds,
    params: DeviceParams,
    model: OffspringModel,
    rng,
    dt_ns: float = 0.01,
    record_window: tuple = (-0.1, 3.0),
    seed_radius_um: float = 0.95,
    return_state: bool = False,
):
    """Simulate one gate and return the noiseless current trace.

    One seed carrier is injected per detected photon at its arrival
    time; the population is stepped with the ionization probability set
    by the instantaneous overvoltage (global feedback) and, in the
    contrast mode, the reported current is density-capped by the
    expanding filament area.
    """
    if dt_ns <= 0:
        raise ValueError("dt must be positive")
    t0, t1 = record_window
    if not t0 < t1:
        raise ValueError("record window must be increasing")
    if t1 > params.gate_width_ns or t0 < -1.0:
        raise ValueError("record window must lie within the gate")
    if seeds.n_photons and (
        seeds.arrival_times_ns.min() < 0.0
        or seeds.arrival_times_ns.max() >= params.gate_width_ns
    ):
        raise ValueError("seeds arriving outside the gate: configuration error")

    n_samples = int(round((t1 - t0) / dt_ns)) + 1
    out = np.zeros(n_samples, dtype=np.float32)
    n_young = model.dead_steps if model.kind == "dead_space" else 0

    if seeds.n_photons == 0:
        trace = Trace(t0, dt_ns, out)
        if return_state:
            state = AvalancheState(
                population=PopulationState(np.zeros(n_young + 1, dtype=np.int64)),
                filament_radius_um=0.0,
                trigger_time_ns=None,
                current_ma=0.0,
            )
            return trace, state
        return trace

    gen = rng.generator() if isinstance(rng, RngStream) else rng
    order = np.argsort(seeds.arrival_times_ns, kind="stable")
    arrivals = [float(a) for a in seeds.arrival_times_ns[order]]
    positions = seeds.positions_um[order]
    next_seed = 0
    n_seeds = len(arrivals)

    local = params.saturation_mode == "local"
    scale = params.current_per_carrier_ma
    r_half = 0.5 * params.active_diameter_um
    v_lat = params.v_lateral_um_per_ns
    excess = params.excess_bias_v
    r_fb_kohm = params.r_feedback_total_ohm / 1000.0
    gate_width = params.gate_width_ns
    binomial = gen.binomial

    # age cohorts: index 0 = age 0, last = age dead_steps - 1; plus mature count
    young = deque([0] * n_young)
    mature = 0
    total = 0
    p_base = model.spawn_probability()
    trigger_time = arrivals[0]
    current = 0.0
    state_radius = 0.0

    for k in range(n_samples):
        t = t0 + k * dt_ns
        while next_seed < n_seeds and arrivals[next_seed] <= t + 1e-12:
            mature += 1  # seed holes arrive ionization-ready
            total += 1
            next_seed += 1

        if total:
            pop_current = total * scale
            if local:
                radii = np.minimum(
                    seed_radius_um
                    + v_lat * np.maximum(0.0, t - np.asarray(arrivals[:next_seed])),
                    r_half,
                )
                cap = params.saturation_density_ma_per_um2 * union_filament_area(
                    positions[:next_seed], radii, params
                )
                current = min(pop_current, cap)
                state_radius = float(radii.max())
            else:
                current = pop_current
                state_radius = min(
                    seed_radius_um + v_lat * max(0.0, t - trigger_time), r_half
                )
            out[k] = current

        if k == n_samples - 1:
            break

        # advance the population over [t, t + dt)
        if total:
            births = 0
            if 0.0 <= t < gate_width and mature > 0:
                ov = excess - current * r_fb_kohm
                if ov > 0.0:
                    p_eff = p_base * (ov / REFERENCE_OVERVOLTAGE_V)
                    if not local:
                        p_eff *= _taper_factor(t - trigger_time, params)
                    if p_eff >= 1.0:
                        births = mature
                    elif p_eff > 0.0:
                        births = int(binomial(mature, p_eff))
            if total + births > POPULATION_CAP:
                raise PopulationOverflowError(
                    "population cap exceeded; saturation must limit growth"
                )
            if n_young:
                mature += young.pop()
                young.appendleft(births)
            else:
                mature += births
            total += births

    if return_state:
        counts = np.zeros(n_young + 1, dtype=np.int64)
        if n_young:
            counts[:n_young] = list(young)
        counts[-1] = mature
        state = AvalancheState(
            population=PopulationState(counts),
            filament_radius_um=state_radius,
            trigger_time_ns=trigger_time,
            current_ma=float(current),
        )
        return Trace(t0, dt_ns, out), state
    return Trace(t0, dt_ns, out)
