"""Model calibration: anchor fitting, plateau selection, round trips."""

import numpy as np
import pytest

from apdsim.stochastics import (
    CalibrationError,
    CalibrationTargets,
    OffspringModel,
    analytic_limit_noise,
    calibrate_model,
    derive_stream,
    expected_population,
    sample_gains,
)


def test_paper_anchor_calibration():
    targets = CalibrationTargets(
        anchors=((0.20, 0.19), (0.34, 0.90)), plateau=1.07, band_fwhm_ma=0.42
    )
    result = calibrate_model(targets, tol=0.05)
    # per-nanosecond growth factor between the anchors is e^11.1
    growth_per_ns = result.growth_per_step**100
    assert growth_per_ns == pytest.approx(np.exp(np.log(0.9 / 0.19) / 0.14), rel=0.05)
    assert 1.02 <= result.predicted_plateau <= 1.12
    assert result.model.kind == "dead_space"
    # anchors reproduced exactly by the mean recursion
    for residual in result.residuals["anchors_rel"].values():
        assert abs(residual) < 1e-6


def test_plateau_one_degenerates_to_deterministic():
    targets = CalibrationTargets(anchors=((0.20, 0.19), (0.34, 0.90)), plateau=1.0)
    result = calibrate_model(targets, tol=0.2, plateau_draws=0)
    assert result.model.p_post > 0.75  # near-deterministic mature ionization
    assert result.predicted_plateau < 1.03


def test_bernoulli_round_trip():
    # forward-simulate a bernoulli model, then recover p from its own statistics
    p = 0.12
    model = OffspringModel("bernoulli", p_ionize=p)
    means = expected_population(model, 30)
    scale = 0.05
    targets = CalibrationTargets(
        anchors=((0.15, scale * means[15]), (0.30, scale * means[30])),
        plateau=analytic_limit_noise(p),
    )
    result = calibrate_model(targets, tol=0.05, kind="bernoulli")
    assert result.model.p_ionize == pytest.approx(p, rel=0.02)
    assert result.current_per_carrier_ma == pytest.approx(scale, rel=0.02)


def test_dead_space_forward_round_trip():
    # targets generated by a known dead_space model are recovered within tol
    model = OffspringModel("dead_space", dead_steps=8, p_post=0.2863)
    means = expected_population(model, 34)
    scale = 0.01
    from apdsim.stochastics import _malthusian_ratio, dead_space_limit_noise

    plateau = dead_space_limit_noise(model, _malthusian_ratio(model))
    targets = CalibrationTargets(
        anchors=((0.20, scale * means[20]), (0.34, scale * means[34])),
        plateau=plateau,
    )
    result = calibrate_model(targets, tol=0.05, plateau_draws=0)
    assert result.model.dead_steps == 8
    assert result.model.p_post == pytest.approx(0.2863, rel=0.02)
    assert result.current_per_carrier_ma == pytest.approx(scale, rel=0.02)


def test_calibrated_model_verifies_by_monte_carlo():
    targets = CalibrationTargets(anchors=((0.20, 0.19), (0.34, 0.90)), plateau=1.07)
    result = calibrate_model(targets, tol=0.05, plateau_draws=30_000)
    assert result.residuals["plateau_mc"] == pytest.approx(
        result.predicted_plateau, rel=0.02
    )


def test_infeasible_targets_raise():
    # decaying "growth" cannot be met by any multiplication model
    targets = CalibrationTargets(anchors=((0.10, 1.0), (0.30, 0.5)), plateau=1.05)
    with pytest.raises(CalibrationError):
        calibrate_model(targets, tol=0.05, plateau_draws=0)


def test_invalid_targets_rejected_before_search():
    with pytest.raises(ValueError):
        CalibrationTargets(anchors=((0.2, 0.19), (0.34, 0.9)), plateau=0.9)
    with pytest.raises(ValueError):
        CalibrationTargets(anchors=((0.2, 0.19),), plateau=1.07)
    with pytest.raises(ValueError):
        CalibrationTargets(anchors=((0.34, 0.9), (0.2, 0.19)), plateau=1.07)
