"""Noise injection and the trace-bundle serialization format."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apdsim.acquisition import (
    BundleFormatError,
    BundleMismatchError,
    BundleTruncatedError,
    BundleVersionError,
    NoiseParams,
    Trace,
    TraceBundle,
    add_electrical_noise,
    read_bundle,
    write_bundle,
)
from apdsim.stochastics import derive_stream


def make_bundle(n_gates, n_samples, seed=0, t0=-0.1, dt=0.01):
    gen = derive_stream(seed, 1).generator()
    samples = gen.normal(0, 1, size=(n_gates, n_samples)).astype(np.float32)
    truth = gen.poisson(0.5, size=n_gates).tolist()
    return TraceBundle(t0, dt, samples, {"photon_truth": truth, "config": {"x": 1}})


def test_zero_sigma_is_identity():
    trace = Trace(0.0, 0.01, np.arange(10, dtype=np.float32))
    out = add_electrical_noise(trace, NoiseParams(0.0), derive_stream(1, 1))
    assert np.array_equal(out.samples_ma, trace.samples_ma)


def test_noise_sigma_and_half_width():
    trace = Trace(0.0, 0.01, np.zeros(100_000, dtype=np.float32))
    noise = NoiseParams()  # 0.05 mA HWHM read as sigma = 0.05 / 1.1774
    out = add_electrical_noise(trace, noise, derive_stream(1, 2))
    assert out.samples_ma.std() == pytest.approx(0.0425, rel=0.01)
    # half width at half maximum of the sample histogram
    hwhm = 1.1774 * out.samples_ma.std()
    assert hwhm == pytest.approx(0.05, rel=0.012)


def test_noise_is_additive_with_same_stream():
    base = Trace(0.0, 0.01, np.zeros(1000, dtype=np.float32))
    shifted = Trace(0.0, 0.01, np.full(1000, 2.5, dtype=np.float32))
    noise = NoiseParams()
    a = add_electrical_noise(base, noise, derive_stream(5, 3))
    b = add_electrical_noise(shifted, noise, derive_stream(5, 3))
    assert np.allclose(a.samples_ma + 2.5, b.samples_ma, atol=1e-6)


def test_round_trip_identity(tmp_path):
    bundle = make_bundle(100, 31)
    write_bundle(bundle, tmp_path / "b")
    back = read_bundle(tmp_path / "b")
    assert np.array_equal(back.samples_ma, bundle.samples_ma)
    assert back.t0_ns == bundle.t0_ns and back.dt_ns == bundle.dt_ns
    assert back.manifest["photon_truth"] == bundle.manifest["photon_truth"]
    assert back.manifest["config"] == {"x": 1}


def test_empty_bundle_round_trips(tmp_path):
    bundle = TraceBundle(0.0, 0.01, np.empty((0, 0), dtype=np.float32), {"photon_truth": []})
    write_bundle(bundle, tmp_path / "b")
    back = read_bundle(tmp_path / "b")
    assert back.n_gates == 0


@settings(max_examples=20, deadline=None)
@given(
    n_gates=st.integers(0, 40),
    n_samples=st.integers(1, 64),
    seed=st.integers(0, 2**32 - 1),
)
def test_round_trip_randomized(tmp_path_factory, n_gates, n_samples, seed):
    bundle = make_bundle(n_gates, n_samples, seed=seed)
    path = tmp_path_factory.mktemp("bundle")
    write_bundle(bundle, path)
    back = read_bundle(path)
    assert np.array_equal(back.samples_ma, bundle.samples_ma)


def test_golden_header_bytes(tmp_path):
    """Endianness and layout are pinned: byte-level golden check."""
    samples = np.array([[1.0, -2.0]], dtype=np.float32)
    bundle = TraceBundle(-0.1, 0.01, samples, {"photon_truth": [0]})
    write_bundle(bundle, tmp_path / "b")
    raw = (tmp_path / "b" / "traces.bin").read_bytes()
    assert raw[:4] == b"APDT"
    assert int.from_bytes(raw[4:8], "little") == 1  # version
    assert int.from_bytes(raw[8:12], "little") == 1  # gates
    assert int.from_bytes(raw[12:16], "little") == 2  # samples per trace
    assert np.frombuffer(raw[16:24], "<f8")[0] == pytest.approx(0.01)
    assert np.frombuffer(raw[24:32], "<f8")[0] == pytest.approx(-0.1)
    assert np.frombuffer(raw[32:], "<f4").tolist() == [1.0, -2.0]


def test_truncated_payload_detected(tmp_path):
    bundle = make_bundle(10, 8)
    write_bundle(bundle, tmp_path / "b")
    binpath = tmp_path / "b" / "traces.bin"
    raw = binpath.read_bytes()
    binpath.write_bytes(raw[: len(raw) - 8 * 4])  # drop one record
    with pytest.raises(BundleTruncatedError):
        read_bundle(tmp_path / "b")


def test_bad_magic_detected(tmp_path):
    bundle = make_bundle(2, 4)
    write_bundle(bundle, tmp_path / "b")
    binpath = tmp_path / "b" / "traces.bin"
    raw = bytearray(binpath.read_bytes())
    raw[:4] = b"NOPE"
    binpath.write_bytes(bytes(raw))
    with pytest.raises(BundleFormatError):
        read_bundle(tmp_path / "b")


def test_bad_version_detected(tmp_path):
    bundle = make_bundle(2, 4)
    write_bundle(bundle, tmp_path / "b")
    binpath = tmp_path / "b" / "traces.bin"
    raw = bytearray(binpath.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    binpath.write_bytes(bytes(raw))
    with pytest.raises(BundleVersionError):
        read_bundle(tmp_path / "b")


def test_manifest_count_mismatch_detected(tmp_path):
    bundle = make_bundle(4, 4)
    write_bundle(bundle, tmp_path / "b")
    manifest_path = tmp_path / "b" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["n_gates"] = 5
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(BundleMismatchError):
        read_bundle(tmp_path / "b")


def test_truth_length_mismatch_detected(tmp_path):
    bundle = make_bundle(4, 4)
    write_bundle(bundle, tmp_path / "b")
    manifest_path = tmp_path / "b" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["photon_truth"] = [0, 1]
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(BundleMismatchError):
        read_bundle(tmp_path / "b")


def test_trace_validation():
    with pytest.raises(ValueError):
        Trace(0.0, -0.01, np.zeros(4))
    with pytest.raises(ValueError):
        Trace(0.0, 0.01, np.array([np.inf]))
    trace = Trace(-0.1, 0.01, np.zeros(11))
    assert trace.index_at(0.0) == 10
    with pytest.raises(IndexError):
        trace.index_at(1.0)
