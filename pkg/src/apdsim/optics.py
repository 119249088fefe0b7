"""Photon statistics of the attenuated pulsed laser and spot geometry.

The source is parameterized directly by the mean number of *detected*
photons per gate (detector efficiency is out of scope), a Gaussian
focal spot, and a nominal arrival time within the gate.  Spot
"diameter" means the FWHM of the knife-edge derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr
from scipy.stats import ncx2

__all__ = [
    "FWHM_TO_SIGMA",
    "SourceParams",
    "GateSeeds",
    "sample_detected_photons",
    "sample_seed_positions",
    "make_gate_seeds",
    "knife_edge_response",
    "scan_photocurrent_image",
]

# FWHM = 2 sqrt(2 ln 2) sigma
FWHM_TO_SIGMA = 1.0 / 2.3548200450309493


@dataclass(frozen=True)
class SourceParams:
    """Attenuated pulsed-laser excitation focused to a Gaussian spot."""

    mu_detected: float = 0.05
    spot_diameter_fwhm_um: float = 1.9
    spot_center_um: tuple = (0.0, 0.0)
    arrival_time_ns: float = 0.0
    arrival_jitter_sigma_ps: float = 0.0

    def __post_init__(self):
        if self.mu_detected < 0:
            raise ValueError("mu_detected must be >= 0")
        if self.spot_diameter_fwhm_um <= 0:
            raise ValueError("spot diameter must be positive")
        if self.arrival_jitter_sigma_ps < 0:
            raise ValueError("arrival jitter must be >= 0")

    @property
    def spot_sigma_um(self) -> float:
        return self.spot_diameter_fwhm_um * FWHM_TO_SIGMA

    @property
    def spot_radius_um(self) -> float:
        """Nominal filament seed radius: half the FWHM diameter."""
        return 0.5 * self.spot_diameter_fwhm_um


@dataclass(frozen=True)
class GateSeeds:
    """Seed holes injected in one gate: one per detected photon."""

    n_photons: int
    positions_um: np.ndarray
    arrival_times_ns: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions_um, dtype=float).reshape(-1, 2)
        times = np.atleast_1d(np.asarray(self.arrival_times_ns, dtype=float))
        if positions.shape[0] != self.n_photons or times.shape[0] != self.n_photons:
            raise ValueError("positions/arrival lists must match n_photons")
        object.__setattr__(self, "positions_um", positions)
        object.__setattr__(self, "arrival_times_ns", times)

    @classmethod
    def empty(cls) -> "GateSeeds":
        return cls(0, np.empty((0, 2)), np.empty(0))


def _as_generator(rng) -> np.random.Generator:
    from .stochastics import RngStream

    return rng.generator() if isinstance(rng, RngStream) else rng


def sample_detected_photons(mu: float, rng) -> int:
    """Poisson draw of the detected photon number for one gate."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    if mu == 0:
        return 0
    return int(_as_generator(rng).poisson(mu))


def sample_seed_positions(n: int, source: SourceParams, rng) -> np.ndarray:
    """I.i.d. 2-D Gaussian positions over the focal spot, shape (n, 2)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    gen = _as_generator(rng)
    center = np.asarray(source.spot_center_um, dtype=float)
    return center + gen.normal(0.0, source.spot_sigma_um, size=(n, 2))


def make_gate_seeds(source: SourceParams, photon_rng, position_rng, jitter_rng=None) -> GateSeeds:
    """Sample one gate's seeds: photon count, positions, arrival times."""
    n = sample_detected_photons(source.mu_detected, photon_rng)
    positions = sample_seed_positions(n, source, position_rng)
    times = np.full(n, source.arrival_time_ns)
    if source.arrival_jitter_sigma_ps > 0 and n > 0:
        gen = _as_generator(jitter_rng if jitter_rng is not None else position_rng)
        times = times + gen.normal(0.0, source.arrival_jitter_sigma_ps * 1e-3, n)
    return GateSeeds(n, positions, times)


def knife_edge_response(scan_x_um, edge_x_um: float, source: SourceParams):
    """Normalized photocurrent while scanning the spot across a straight edge.

    Gaussian cumulative overlap Phi((scan_x - edge_x)/sigma); valid
    because the spot is far smaller than the device.
    """
    z = (np.asarray(scan_x_um, dtype=float) - edge_x_um) / source.spot_sigma_um
    out = ndtr(z)
    return float(out) if out.ndim == 0 else out


def scan_photocurrent_image(grid_um, active_diameter_um: float, source: SourceParams) -> np.ndarray:
    """Fraction of the Gaussian spot overlapping the active disk, per point.

    The overlap of an isotropic Gaussian centered at offset rho from a
    disk of radius R is a noncentral chi-square tail:
    P(|Z + mu|^2 <= R^2) with 2 degrees of freedom.
    """
    pts = np.asarray(grid_um, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("scan grid must be nonempty")
    sigma = source.spot_sigma_um
    radius = 0.5 * active_diameter_um
    rho2 = (pts**2).sum(axis=1) / sigma**2
    return ncx2.cdf((radius / sigma) ** 2, df=2, nc=rho2)
