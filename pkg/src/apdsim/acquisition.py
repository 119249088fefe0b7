"""Electrical-noise injection and the persistent trace-bundle format.

A trace bundle is a directory holding ``manifest.json`` (UTF-8,
schema-versioned: run configuration echo, master seed, per-gate photon
ground truth) and ``traces.bin`` with a fixed little-endian layout:

    magic 'APDT' | u32 version=1 | u32 gate count | u32 samples/trace |
    f64 dt [ns] | f64 t0 [ns] | gate_count x samples f32 currents [mA]

rows ordered by gate index.  Write-then-read is bit-exact for sample
data on any platform.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "Trace",
    "TraceBundle",
    "NoiseParams",
    "BundleFormatError",
    "BundleVersionError",
    "BundleTruncatedError",
    "BundleMismatchError",
    "add_electrical_noise",
    "write_bundle",
    "read_bundle",
]

MAGIC = b"APDT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIdd")

# Fig. 2(b): the 0-photon band half width of 0.05 mA is read as HWHM,
# so sigma = 0.05 / sqrt(2 ln 2).
DEFAULT_SIGMA_ELECTRICAL_MA = 0.05 / 1.1774


class BundleFormatError(ValueError):
    """traces.bin does not start with the expected magic bytes."""


class BundleVersionError(ValueError):
    """traces.bin carries an unsupported format version."""


class BundleTruncatedError(ValueError):
    """traces.bin payload is shorter than its header promises."""


class BundleMismatchError(ValueError):
    """manifest and traces.bin disagree on the record count."""


@dataclass(frozen=True)
class NoiseParams:
    """Additive electrical noise of the sensing chain."""

    sigma_electrical_ma: float = DEFAULT_SIGMA_ELECTRICAL_MA

    def __post_init__(self):
        if self.sigma_electrical_ma < 0:
            raise ValueError("noise sigma must be >= 0")


@dataclass(frozen=True)
class Trace:
    """Sampled avalanche current record: t0 + k*dt, values in mA."""

    t0_ns: float
    dt_ns: float
    samples_ma: np.ndarray

    def __post_init__(self):
        if self.dt_ns <= 0:
            raise ValueError("dt must be positive")
        samples = np.asarray(self.samples_ma, dtype=np.float32)
        if not np.all(np.isfinite(samples)):
            raise ValueError("trace samples must be finite")
        object.__setattr__(self, "samples_ma", samples)

    @property
    def times_ns(self) -> np.ndarray:
        return self.t0_ns + self.dt_ns * np.arange(self.samples_ma.shape[0])

    def index_at(self, t_ns: float) -> int:
        """Grid index of the sample nearest to ``t_ns``."""
        idx = round((t_ns - self.t0_ns) / self.dt_ns)
        if not 0 <= idx < self.samples_ma.shape[0]:
            raise IndexError(f"time {t_ns} ns outside the record window")
        return idx


@dataclass
class TraceBundle:
    """One trace per gate plus the manifest that reproduces them.

    ``samples_ma`` is (n_gates, n_samples) float32; all gates share the
    sampling grid.  ``manifest`` must carry ``photon_truth`` (one count
    per gate) and the full simulation configuration echo.
    """

    t0_ns: float
    dt_ns: float
    samples_ma: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples_ma = np.asarray(self.samples_ma, dtype=np.float32)
        if self.samples_ma.ndim != 2:
            raise ValueError("samples must be a (n_gates, n_samples) matrix")
        truth = self.manifest.get("photon_truth")
        if truth is not None and len(truth) != self.n_gates:
            raise BundleMismatchError(
                f"manifest lists {len(truth)} ground-truth counts "
                f"for {self.n_gates} gates"
            )

    @property
    def n_gates(self) -> int:
        return self.samples_ma.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples_ma.shape[1]

    @property
    def photon_truth(self) -> np.ndarray:
        return np.asarray(self.manifest["photon_truth"], dtype=np.int64)

    @property
    def times_ns(self) -> np.ndarray:
        return self.t0_ns + self.dt_ns * np.arange(self.n_samples)

    def index_at(self, t_ns: float) -> int:
        idx = round((t_ns - self.t0_ns) / self.dt_ns)
        if not 0 <= idx < self.n_samples:
            raise IndexError(f"time {t_ns} ns outside the record window")
        return idx

    def slice_at(self, t_ns: float) -> np.ndarray:
        """Per-gate currents at the grid sample nearest ``t_ns``."""
        return self.samples_ma[:, self.index_at(t_ns)].astype(np.float64)

    def trace(self, gate: int) -> Trace:
        return Trace(self.t0_ns, self.dt_ns, self.samples_ma[gate])


def add_electrical_noise(trace: Trace, noise: NoiseParams, rng) -> Trace:
    """Add i.i.d. zero-mean Gaussian noise to every sample."""
    from .stochastics import RngStream

    gen = rng.generator() if isinstance(rng, RngStream) else rng
    if noise.sigma_electrical_ma == 0.0:
        return trace
    draws = gen.normal(0.0, noise.sigma_electrical_ma, trace.samples_ma.shape)
    return replace(trace, samples_ma=trace.samples_ma + draws.astype(np.float32))


def write_bundle(bundle: TraceBundle, path) -> None:
    """Persist a bundle as manifest.json + traces.bin under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = dict(bundle.manifest)
    manifest.setdefault("schema_version", 1)
    manifest["n_gates"] = bundle.n_gates
    manifest["n_samples"] = bundle.n_samples
    manifest["t0_ns"] = bundle.t0_ns
    manifest["dt_ns"] = bundle.dt_ns
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"
    )
    header = _HEADER.pack(
        MAGIC, VERSION, bundle.n_gates, bundle.n_samples, bundle.dt_ns, bundle.t0_ns
    )
    payload = np.ascontiguousarray(bundle.samples_ma, dtype="<f4").tobytes()
    (root / "traces.bin").write_bytes(header + payload)


def read_bundle(path) -> TraceBundle:
    """Load a bundle, validating magic, version and record-count consistency."""
    root = Path(path)
    raw = (root / "traces.bin").read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise BundleFormatError(f"{root}/traces.bin: bad magic bytes")
    magic, version, n_gates, n_samples, dt_ns, t0_ns = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise BundleVersionError(f"unsupported trace format version {version}")
    expected = _HEADER.size + 4 * n_gates * n_samples
    if len(raw) < expected:
        raise BundleTruncatedError(
            f"payload holds {len(raw) - _HEADER.size} bytes, "
            f"header promises {expected - _HEADER.size}"
        )
    samples = np.frombuffer(
        raw, dtype="<f4", count=n_gates * n_samples, offset=_HEADER.size
    ).reshape(n_gates, n_samples)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("n_gates", n_gates) != n_gates:
        raise BundleMismatchError(
            f"manifest says {manifest['n_gates']} gates, traces.bin holds {n_gates}"
        )
    truth = manifest.get("photon_truth")
    if truth is not None and len(truth) != n_gates:
        raise BundleMismatchError(
            f"manifest lists {len(truth)} ground-truth counts for {n_gates} gates"
        )
    return TraceBundle(t0_ns, dt_ns, samples.copy(), manifest)
