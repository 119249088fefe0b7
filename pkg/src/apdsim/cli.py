"""Experiment runner: simulate, analyze, calibrate and scan subcommands.

Exit codes: 0 success, 2 invalid configuration or targets (the message
names the field), 3 I/O failure, 4 corrupt bundle, 5 infeasible
calibration targets.  Analyses with insufficient statistics produce a
partial report with warnings and still exit 0.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib
from pathlib import Path

import numpy as np

from . import analysis, reports
from .acquisition import (
    BundleFormatError,
    BundleMismatchError,
    BundleTruncatedError,
    BundleVersionError,
    read_bundle,
    write_bundle,
)
from .config import (
    ConfigError,
    SimConfig,
    config_from_tables,
    load_config,
    load_scenario,
    save_config,
    scenario_names,
)
from .optics import scan_photocurrent_image
from .runner import simulate_bundle
from .stochastics import CalibrationError, CalibrationTargets, calibrate_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BUNDLE = 4
EXIT_CALIBRATION = 5

BUNDLE_ERRORS = (
    BundleFormatError,
    BundleVersionError,
    BundleTruncatedError,
    BundleMismatchError,
)


def _load_run_config(args) -> SimConfig:
    if getattr(args, "scenario", None):
        config = load_scenario(args.scenario)
    else:
        config = load_config(args.config)
    tables = config.tables()
    if getattr(args, "seed", None) is not None:
        tables["run"]["master_seed"] = args.seed
    if getattr(args, "out", None):
        tables["run"]["out"] = args.out
    return config_from_tables(tables)


def cmd_simulate(args) -> int:
    config = _load_run_config(args)
    started = time.perf_counter()
    bundle = simulate_bundle(config, workers=args.workers)
    out = Path(config.out)
    write_bundle(bundle, out)
    elapsed = time.perf_counter() - started
    triggered = float(np.mean(bundle.photon_truth > 0))
    print(f"gates: {bundle.n_gates}")
    print(f"trigger fraction: {triggered:.4f}")
    print(f"elapsed: {elapsed:.1f} s")
    print(f"bundle: {out}")
    return EXIT_OK


def _analysis_times(table: dict, bundle) -> list:
    if "times_ns" in table:
        return [float(t) for t in table["times_ns"]]
    start = float(table.get("t_start_ns", bundle.t0_ns))
    stop = float(table.get("t_stop_ns", bundle.times_ns[-1]))
    step = float(table.get("t_step_ns", 0.05))
    return list(np.arange(start, stop + 1e-9, step))


def _current_edges(table: dict, bundle) -> np.ndarray:
    lo = float(table.get("current_lo_ma", float(bundle.samples_ma.min())))
    hi = float(table.get("current_hi_ma", float(bundle.samples_ma.max())))
    n = int(table.get("current_bins", 160))
    return np.linspace(lo, hi, n + 1)


def cmd_analyze(args) -> int:
    try:
        bundle = read_bundle(args.bundle)
    except BUNDLE_ERRORS as err:
        print(f"corrupt bundle: {err}", file=sys.stderr)
        return EXIT_BUNDLE
    spec = {}
    if args.spec is not None:
        with open(args.spec, "rb") as fh:
            spec = tomllib.load(fh)
    out = Path(args.out or (Path(args.bundle) / "analysis"))
    out.mkdir(parents=True, exist_ok=True)

    report = {"bundle": str(args.bundle), "n_gates": bundle.n_gates, "warnings": []}
    manifest_echo = {k: v for k, v in bundle.manifest.items() if k != "photon_truth"}
    report["manifest"] = manifest_echo
    fits = {}

    if "hist2d" in spec or "slices" in spec:
        table = spec.get("hist2d", spec.get("slices"))
        times = _analysis_times(table, bundle)
        edges = _current_edges(table, bundle)
        hists = analysis.histogram2d(bundle, times, edges)
        reports.histograms_csv(hists, out / "hist2d.csv")
        report["hist2d"] = {"times_ns": times, "file": "hist2d.csv"}

    if "mixture" in spec:
        table = spec["mixture"]
        k_max = int(table.get("k_max", 4))
        for t in _analysis_times(table, bundle):
            try:
                fits[t] = analysis.fit_mixture(
                    bundle.slice_at(t), k_max=k_max, noise=None
                )
            except (analysis.FitConvergenceError, ValueError) as err:
                report["warnings"].append(f"mixture at {t} ns skipped: {err}")
        if fits:
            reports.mixtures_csv(fits, out / "mixture.csv")
            report["mixture"] = {
                "times_ns": sorted(fits),
                "file": "mixture.csv",
            }

    if "noise_factor" in spec:
        table = spec["noise_factor"]
        series = analysis.noise_factor_series(
            bundle,
            _analysis_times(table, bundle),
            selection=table.get("selection", "by_fit"),
            k_max=int(table.get("k_max", 4)),
        )
        reports.series_csv(series, out / "noise_factor.csv")
        report["noise_factor"] = reports.series_dict(series)
        report["noise_factor"]["file"] = "noise_factor.csv"
        for t, omitted in zip(series.times_ns, series.omitted):
            if omitted:
                report["warnings"].append(
                    f"noise factor at {t} ns omitted: insufficient 1-photon samples"
                )

    if "resolution" in spec:
        table = spec["resolution"]
        t = float(table.get("t_ns", 0.34))
        try:
            fit = fits.get(t) or analysis.fit_mixture(
                bundle.slice_at(t), k_max=int(table.get("k_max", 4))
            )
            rep = analysis.resolution_report(fit)
            payload = reports.resolution_dict(rep)
            if "photon_truth" in bundle.manifest:
                payload["accuracy_vs_truth"] = {
                    str(k): v
                    for k, v in analysis.classification_accuracy(bundle, t, fit).items()
                }
            report["resolution"] = payload
            reports.write_json(out / "resolution.json", payload)
        except (analysis.FitConvergenceError, ValueError) as err:
            report["warnings"].append(f"resolution at {t} ns skipped: {err}")

    if spec.get("figures", {}).get("enabled") or args.figures:
        from . import figures

        made = figures.standard_figures(bundle, out, fits=fits)
        report["figures"] = [str(p.name) for p in made]

    reports.write_json(out / "report.json", report)
    for warning in report["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"analysis written to {out}")
    return EXIT_OK


def _load_targets(path) -> tuple:
    with open(path, "rb") as fh:
        table = tomllib.load(fh)
    if "anchors" not in table or len(table["anchors"]) < 2:
        raise ConfigError("targets.anchors must list at least 2 growth anchors")
    anchors = tuple(
        (float(a["t_ns"]), float(a["current_ma"])) for a in table["anchors"]
    )
    if "plateau" not in table:
        raise ConfigError("targets.plateau is required")
    plateau = float(table["plateau"])
    if plateau < 1.0:
        raise ConfigError("targets.plateau must be >= 1 (noise factor)")
    tol = float(table.get("tol", 0.05))
    verify = table.get("verify", {})
    kwargs = {}
    if "band_fwhm_ma" in table:
        kwargs["band_fwhm_ma"] = float(table["band_fwhm_ma"])
    if "band_fwhm_tol" in table:
        kwargs["band_fwhm_tol"] = float(table["band_fwhm_tol"])
    return CalibrationTargets(anchors=anchors, plateau=plateau, **kwargs), tol, verify


def cmd_calibrate(args) -> int:
    config = load_config(args.config)
    targets, tol, verify = _load_targets(args.targets)
    try:
        result = calibrate_model(
            targets,
            config.device,
            tol=tol,
            dt_ns=config.dt_ns,
            noise_sigma_ma=config.noise.sigma_electrical_ma,
        )
    except CalibrationError as err:
        print(f"calibration infeasible: {err}", file=sys.stderr)
        return EXIT_CALIBRATION

    tables = config.tables()
    tables["model"] = dataclasses.asdict(result.model)
    tables["device"]["current_per_carrier_ma"] = result.current_per_carrier_ma
    polish = 1.0
    if verify.get("polish_scale", True):
        t_anchor, c_anchor = targets.anchors[-1]
        vt = dict(tables)
        vt["run"] = dict(tables["run"])
        vt["run"]["n_gates"] = int(verify.get("n_gates", 50_000))
        vt["run"]["record_window_ns"] = [-0.1, t_anchor + 0.12]
        vt["source"] = dict(tables["source"])
        vt["source"]["mu_detected"] = float(verify.get("mu_detected", 0.05))
        vbundle = simulate_bundle(config_from_tables(vt), workers=args.workers)
        series = analysis.noise_factor_series(vbundle, [t_anchor], selection="by_fit")
        if not series.omitted[0]:
            polish = c_anchor / series.band1_means[0]
            tables["device"]["current_per_carrier_ma"] = (
                result.current_per_carrier_ma * polish
            )

    calibrated = config_from_tables(tables)
    save_config(calibrated, args.out)
    print(f"model: dead_steps={result.model.dead_steps} p_post={result.model.p_post:.4f}")
    print(f"current_per_carrier_ma: {tables['device']['current_per_carrier_ma']:.6f}")
    print(f"growth_per_step: {result.growth_per_step:.5f}")
    print(f"predicted plateau: {result.predicted_plateau:.4f}")
    print(f"scale polish: {polish:.4f}")
    for t, r in result.residuals["anchors_rel"].items():
        print(f"anchor {t} ns residual: {r:+.4f}")
    print(f"plateau residual: {result.residuals['plateau_rel']:+.4f}")
    if "plateau_mc" in result.residuals:
        print(f"plateau (Monte Carlo check): {result.residuals['plateau_mc']:.4f}")
    print(f"calibrated config: {args.out}")
    return EXIT_OK


def cmd_scan(args) -> int:
    config = _load_run_config(args)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    scan = config.scan
    half, step = scan.image_half_span_um, scan.image_step_um
    axis = np.arange(-half, half + 1e-9, step)
    xx, yy = np.meshgrid(axis, axis)
    grid = np.column_stack([xx.ravel(), yy.ravel()])
    image = scan_photocurrent_image(grid, config.device.active_diameter_um, config.source)
    reports.write_csv(
        out / "image.csv",
        ["x_um", "y_um", "photocurrent"],
        zip(grid[:, 0], grid[:, 1], image),
    )

    edge_x = np.arange(scan.edge_x_start_um, scan.edge_x_stop_um + 1e-9, scan.edge_step_um)
    edge_pts = np.column_stack([edge_x, np.zeros_like(edge_x)])
    edge = scan_photocurrent_image(edge_pts, config.device.active_diameter_um, config.source)
    reports.write_csv(out / "edge_scan.csv", ["x_um", "photocurrent"], zip(edge_x, edge))

    payload = {"image": "image.csv", "edge_scan": "edge_scan.csv"}
    try:
        diameter = analysis.estimate_spot_diameter(edge_x, edge)
        payload["spot_diameter_fwhm_um"] = diameter
        print(f"estimated spot diameter: {diameter:.3f} um (FWHM)")
    except ValueError as err:
        payload["spot_diameter_error"] = str(err)
        print(f"spot diameter estimation failed: {err}", file=sys.stderr)
    reports.write_json(out / "scan.json", payload)
    print(f"scan written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apdsim",
        description="Gated avalanche photodiode simulator and analysis pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p, scenario=True):
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--config", help="TOML configuration file")
        if scenario:
            group.add_argument(
                "--scenario",
                choices=scenario_names(),
                help="canned figure-reproduction scenario",
            )
        p.add_argument("--out", help="output directory override")
        p.add_argument("--seed", type=int, help="master seed override")

    p_sim = sub.add_parser("simulate", help="run gates and write a trace bundle")
    add_config_args(p_sim)
    p_sim.add_argument("--workers", type=int, default=1, help="parallel workers")
    p_sim.set_defaults(func=cmd_simulate)

    p_an = sub.add_parser("analyze", help="analyze a trace bundle")
    p_an.add_argument("--bundle", required=True, help="bundle directory")
    p_an.add_argument("--spec", help="analysis spec (TOML); empty = manifest echo")
    p_an.add_argument("--out", help="output directory (default <bundle>/analysis)")
    p_an.add_argument("--figures", action="store_true", help="emit SVG figures")
    p_an.set_defaults(func=cmd_analyze)

    p_cal = sub.add_parser("calibrate", help="fit the offspring model to targets")
    p_cal.add_argument("--config", required=True, help="base configuration")
    p_cal.add_argument("--targets", required=True, help="calibration targets (TOML)")
    p_cal.add_argument("--out", required=True, help="calibrated config path")
    p_cal.add_argument("--workers", type=int, default=1)
    p_cal.set_defaults(func=cmd_calibrate)

    p_scan = sub.add_parser("scan", help="scanning-photocurrent image and edge scan")
    add_config_args(p_scan)
    p_scan.set_defaults(func=cmd_scan)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"invalid configuration: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"missing file: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"I/O failure: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
