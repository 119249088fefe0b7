"""Optional SVG figures of the standard analyses (requires matplotlib)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .acquisition import TraceBundle
from .analysis import MixtureFit, NoiseFactorSeries, histogram2d

__all__ = [
    "trace_figure",
    "hist2d_figure",
    "slices_figure",
    "noise_factor_figure",
    "standard_figures",
]


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def trace_figure(bundle: TraceBundle, path, n_examples: int = 8):
    """Mean triggered trace plus a handful of raw examples."""
    plt = _plt()
    t = bundle.times_ns
    triggered = bundle.photon_truth > 0
    fig, ax = plt.subplots(figsize=(5, 3.2))
    idx = np.flatnonzero(triggered)[:n_examples]
    for i in idx:
        ax.plot(t, bundle.samples_ma[i], lw=0.5, alpha=0.4, color="tab:gray")
    if triggered.any():
        ax.plot(t, bundle.samples_ma[triggered].mean(axis=0), lw=1.8, color="tab:red",
                label="mean triggered")
        ax.legend(loc="lower right", frameon=False)
    ax.set_xlabel("time (ns)")
    ax.set_ylabel("current (mA)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def hist2d_figure(bundle: TraceBundle, path, t_step_ns: float = 0.01,
                  current_bins: int = 160):
    """Current distribution vs delay as a log-count map."""
    plt = _plt()
    times = bundle.times_ns
    edges = np.linspace(bundle.samples_ma.min(), bundle.samples_ma.max(), current_bins + 1)
    hists = histogram2d(bundle, times, edges)
    img = np.column_stack([h.counts for h in hists]).astype(float)
    fig, ax = plt.subplots(figsize=(5.4, 3.4))
    mesh = ax.pcolormesh(
        times, 0.5 * (edges[:-1] + edges[1:]), np.log10(img + 1.0), cmap="magma"
    )
    fig.colorbar(mesh, ax=ax, label="log10(counts + 1)")
    ax.set_xlabel("time delay (ns)")
    ax.set_ylabel("current (mA)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def slices_figure(bundle: TraceBundle, times_ns, path, current_bins: int = 120):
    """Per-delay current histograms, normalized per slice."""
    plt = _plt()
    edges = np.linspace(bundle.samples_ma.min(), bundle.samples_ma.max(), current_bins + 1)
    hists = histogram2d(bundle, times_ns, edges)
    n = len(hists)
    fig, axes = plt.subplots(n, 1, figsize=(4.6, 1.1 * n), sharex=True)
    axes = np.atleast_1d(axes)
    for ax, h in zip(axes, hists):
        ax.step(h.centers_ma, h.counts / h.n_gates, where="mid", lw=0.9)
        ax.set_ylabel(f"{h.t_ns * 1000:.0f} ps", fontsize=8)
        ax.set_yticks([])
    axes[-1].set_xlabel("current (mA)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def noise_factor_figure(series: NoiseFactorSeries, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4.6, 3.0))
    ok = series.defined()
    ax.errorbar(
        series.times_ns[ok] * 1000,
        series.values[ok],
        yerr=series.std_errors[ok],
        fmt="o-",
        ms=3,
        lw=0.9,
    )
    ax.set_xlabel("time delay (ps)")
    ax.set_ylabel("noise factor")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def standard_figures(bundle: TraceBundle, out_dir, fits=None) -> list:
    """Emit the default figure set for a bundle; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    made = [
        trace_figure(bundle, out / "trace.svg"),
        hist2d_figure(bundle, out / "hist2d.svg"),
    ]
    t_hi = float(bundle.times_ns[-1])
    slice_times = [t for t in (-0.01, 0.04, 0.14, 0.19, 0.24, 0.29, 0.34, 0.6) if t <= t_hi]
    made.append(slices_figure(bundle, slice_times, out / "slices.svg"))
    return made
