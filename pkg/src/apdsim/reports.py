"""CSV and JSON emission of analysis products.

CSV files carry one header line, comma separators and '.' decimals; the
JSON report mirrors the same numbers machine-readably.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .analysis import MixtureFit, NoiseFactorSeries, ResolutionReport, TimeSliceHistogram

__all__ = [
    "write_csv",
    "histograms_csv",
    "series_csv",
    "mixtures_csv",
    "resolution_dict",
    "series_dict",
    "write_json",
]


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return "nan"
    return format(float(value), ".9g")


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def histograms_csv(hists: list, path) -> None:
    """Long-format 2-D histogram: one row per (delay, current bin)."""
    rows = []
    for h in hists:
        for center, count in zip(h.centers_ma, h.counts):
            rows.append((h.t_ns, center, count))
    write_csv(path, ["t_ns", "current_ma", "count"], rows)


def series_csv(series: NoiseFactorSeries, path) -> None:
    rows = [
        (
            series.times_ns[i],
            series.values[i],
            series.std_errors[i],
            series.n_selected[i],
            series.band1_means[i],
            bool(series.omitted[i]),
        )
        for i in range(series.times_ns.size)
    ]
    write_csv(
        path,
        ["t_ns", "noise_factor", "std_error", "n_selected", "band1_mean_ma", "omitted"],
        rows,
    )


def mixtures_csv(fits: dict, path) -> None:
    """Fitted band parameters: one row per (delay, component)."""
    rows = []
    for t_ns, fit in sorted(fits.items()):
        for k, (w, m, s) in enumerate(fit.components):
            rows.append((t_ns, k, w, m, s, 2.3548200450309493 * s))
    write_csv(path, ["t_ns", "k", "weight", "mean_ma", "sigma_ma", "fwhm_ma"], rows)


def series_dict(series: NoiseFactorSeries) -> dict:
    return {
        "selection": series.selection,
        "times_ns": series.times_ns.tolist(),
        "values": _nan_to_none(series.values),
        "std_errors": _nan_to_none(series.std_errors),
        "n_selected": series.n_selected.tolist(),
        "band1_means_ma": _nan_to_none(series.band1_means),
        "omitted": series.omitted.tolist(),
    }


def resolution_dict(report: ResolutionReport) -> dict:
    return {
        "separations_ma": {str(k): v for k, v in report.separations_ma.items()},
        "fwhm_ma": {str(k): v for k, v in report.fwhm_ma.items()},
        "misclassification": {str(k): v for k, v in report.misclassification.items()},
        "flux_estimate": report.flux_estimate,
    }


def _nan_to_none(arr) -> list:
    return [None if not np.isfinite(v) else float(v) for v in arr]


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
