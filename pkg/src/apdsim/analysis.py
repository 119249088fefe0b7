"""Measurement pipeline: time-current histograms, photon-number band
fitting and classification, the time-dependent noise factor, resolution
metrics, and spot-size extraction from edge scans.

Band fitting uses least squares on the slice histogram (implementer's
choice; equivalent in spirit to maximum likelihood but weighting the
peak region, which is what an experimenter fitting Gaussians to a
histogram does).  Component 0 is pinned at zero mean with sigma no
smaller than the electrical noise; components k >= 1 keep strictly
increasing means by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import curve_fit, least_squares, minimize_scalar
from scipy.special import ndtr
from scipy.stats import poisson

from .acquisition import NoiseParams, TraceBundle
from .optics import FWHM_TO_SIGMA

__all__ = [
    "TimeSliceHistogram",
    "MixtureFit",
    "NoiseFactorSeries",
    "ResolutionReport",
    "FitConvergenceError",
    "histogram2d",
    "fit_mixture",
    "classify_photon_number",
    "classify_samples",
    "classification_accuracy",
    "noise_factor_series",
    "resolution_report",
    "estimate_spot_diameter",
]

SIGMA_TO_FWHM = 1.0 / FWHM_TO_SIGMA

# Low-flux discriminator: samples above this many noise sigmas count as
# "band >= 1" when seeding the fit (2-photon contamination at mu = 0.05
# has relative weight mu/2 = 2.5% and is not corrected).
TRIGGER_SIGMA_THRESHOLD = 5.0

# The 1-photon band counts as resolved from the electrical-noise band
# once its fitted mean clears this many noise sigmas; below that the
# prior-weighted posterior is meaningless and band assignment falls
# back to likelihood shape.
BAND_RESOLVED_SIGMA = 4.0


class FitConvergenceError(RuntimeError):
    """Mixture fit did not converge; the slice is not yet resolvable."""


@dataclass(frozen=True)
class TimeSliceHistogram:
    """Distribution of per-gate currents at one time delay."""

    t_ns: float
    edges_ma: np.ndarray
    counts: np.ndarray
    n_gates: int

    def __post_init__(self):
        edges = np.asarray(self.edges_ma, dtype=float)
        counts = np.asarray(self.counts, dtype=np.int64)
        if not np.all(np.diff(edges) > 0):
            raise ValueError("histogram edges must be strictly increasing")
        if counts.sum() != self.n_gates:
            raise ValueError("histogram counts must sum to the gate count")
        object.__setattr__(self, "edges_ma", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def centers_ma(self) -> np.ndarray:
        return 0.5 * (self.edges_ma[:-1] + self.edges_ma[1:])


def histogram2d(
    bundle: TraceBundle, times_ns: Sequence[float], current_edges_ma
) -> list:
    """Per-delay current histograms over all gates (exact partition).

    Each slice samples the record grid point nearest the requested
    delay; currents outside the edge range are counted into the first
    or last bin so every histogram conserves the gate count.
    """
    if bundle.n_gates == 0:
        raise ValueError("empty bundle")
    edges = np.asarray(current_edges_ma, dtype=float)
    lo = edges[0] + 1e-9 * (edges[1] - edges[0])
    hi = edges[-1] - 1e-9 * (edges[-1] - edges[-2])
    out = []
    for t in times_ns:
        values = np.clip(bundle.slice_at(t), lo, hi)
        counts, _ = np.histogram(values, bins=edges)
        out.append(TimeSliceHistogram(t, edges, counts, bundle.n_gates))
    return out


@dataclass(frozen=True)
class MixtureFit:
    """Gaussian mixture over photon-number bands k = 0..k_max.

    ``components[k]`` is (weight, mean mA, sigma mA); component 0 is the
    electrical-noise band pinned at zero mean.  ``goodness`` is the
    reduced chi-square of the weighted histogram residuals.
    """

    components: tuple
    goodness: float
    n_samples: int

    def __post_init__(self):
        means = [m for _, m, _ in self.components]
        if any(b <= a for a, b in zip(means, means[1:])):
            raise ValueError("component means must be strictly increasing in k")

    @property
    def k_max(self) -> int:
        return len(self.components) - 1

    def weights(self) -> np.ndarray:
        return np.array([w for w, _, _ in self.components])

    def means(self) -> np.ndarray:
        return np.array([m for _, m, _ in self.components])

    def sigmas(self) -> np.ndarray:
        return np.array([s for _, _, s in self.components])

    def log_posteriors(self, current_ma) -> np.ndarray:
        """Unnormalized log posterior per component, shape (n, k_max+1)."""
        x = np.atleast_1d(np.asarray(current_ma, dtype=float))[:, None]
        w = np.maximum(self.weights()[None, :], 1e-300)
        m = self.means()[None, :]
        s = self.sigmas()[None, :]
        return np.log(w) - np.log(s) - 0.5 * ((x - m) / s) ** 2


def _gaussian_mixture_density(x, weights, means, sigmas):
    x = np.asarray(x, dtype=float)[:, None]
    w = np.asarray(weights)[None, :]
    m = np.asarray(means)[None, :]
    s = np.asarray(sigmas)[None, :]
    return (w / (s * math.sqrt(2 * math.pi)) * np.exp(-0.5 * ((x - m) / s) ** 2)).sum(
        axis=1
    )


def _initial_band1_mean(samples: np.ndarray, sigma_e: float) -> float:
    """Histogram-peak estimate of the 1-photon band location."""
    threshold = TRIGGER_SIGMA_THRESHOLD * sigma_e
    tail = samples[samples > threshold]
    if tail.size < 10:
        return max(2.0 * sigma_e, float(np.percentile(samples, 99.5)))
    counts, edges = np.histogram(tail, bins=96)
    smooth = gaussian_filter1d(counts.astype(float), 2.0)
    centers = 0.5 * (edges[:-1] + edges[1:])
    # first local maximum at least a fifth the global peak: the 1-photon band
    peak = smooth.max()
    for i in range(1, len(smooth) - 1):
        if smooth[i] >= smooth[i - 1] and smooth[i] >= smooth[i + 1]:
            if smooth[i] >= 0.2 * peak:
                return float(centers[i])
    return float(centers[np.argmax(smooth)])


def fit_mixture(
    samples,
    k_max: int = 4,
    noise: NoiseParams | None = None,
    init_band1_mean: float | None = None,
    init_fit: "MixtureFit | None" = None,
    fixed_weights=None,
    max_nfev: int = 4000,
) -> MixtureFit:
    """Fit photon-number bands to one time slice by histogram least squares.

    ``init_fit`` warm-starts from a neighboring slice (its means are
    rescaled to this slice's band-1 estimate); ``init_band1_mean``
    overrides the automatic peak estimate.  ``fixed_weights`` pins the
    component weights (band populations do not depend on the delay, so
    weights fitted at a well-resolved slice can be imposed on slices
    where the bands overlap).
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size < 50:
        raise ValueError("need at least 50 samples to fit bands")
    if not 1 <= k_max <= 6:
        raise ValueError("k_max must be within [1, 6]")
    noise = noise or NoiseParams()
    sigma_e = noise.sigma_electrical_ma

    m1 = init_band1_mean
    if m1 is None and init_fit is not None:
        m1 = init_fit.means()[1]
    if m1 is None:
        m1 = _initial_band1_mean(samples, sigma_e)
    m1 = max(m1, 0.5 * sigma_e)

    lo, hi = samples.min(), samples.max()
    span = hi - lo
    n_bins = int(np.clip(span / (sigma_e / 3.0), 60, 220))
    counts, edges = np.histogram(samples, bins=n_bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    bin_w = edges[1] - edges[0]
    n_total = samples.size
    weights_err = np.sqrt(counts + 1.0)

    # parameter vector: weights (k_max+1), m1, gaps (k_max-1),
    # sigma_0 .. sigma_kmax
    frac_trig = float(np.mean(samples > TRIGGER_SIGMA_THRESHOLD * sigma_e))
    w0 = np.empty(k_max + 1)
    w0[0] = max(1.0 - frac_trig, 0.02)
    if init_fit is not None:
        prev_w = init_fit.weights()
        w0[1:] = np.maximum(prev_w[1:], 1e-4)
    else:
        w0[1:] = np.maximum(frac_trig * 0.5 ** np.arange(k_max), 1e-4)
    sig0 = np.empty(k_max + 1)
    sig0[0] = sigma_e
    if init_fit is not None:
        prev = init_fit.sigmas()[1:] * (m1 / max(init_fit.means()[1], 1e-9))
        sig0[1:] = np.clip(prev, sigma_e, None)
    else:
        sig0[1:] = np.sqrt(sigma_e**2 + (0.25 * m1) ** 2) * np.sqrt(
            np.arange(1, k_max + 1)
        )

    # means form a near-arithmetic ladder m_k ~ k * m1 (independent seeds
    # add linearly); gaps are fitted as ratios of m1 with limited play so
    # higher components cannot migrate into a lower band's shoulder.
    ratios0 = np.ones(max(k_max - 1, 0))
    if fixed_weights is not None:
        w0 = np.asarray(fixed_weights, dtype=float)
        if w0.shape != (k_max + 1,):
            raise ValueError("fixed_weights must have k_max + 1 entries")
        w_lo, w_hi = np.maximum(w0 - 1e-9, 0.0), w0 + 1e-9
    else:
        w_lo, w_hi = np.zeros(k_max + 1), np.full(k_max + 1, 1.1)
    p0 = np.concatenate([w0, [m1], ratios0, sig0])
    # every band rides on the electrical noise, so no width dips below it
    lower = np.concatenate(
        [
            w_lo,
            [0.4 * m1],
            np.full(max(k_max - 1, 0), 0.6),
            [sigma_e],
            np.full(k_max, sigma_e),
        ]
    )
    # band variances add with seed number, so widths grow at most ~sqrt(k)
    sigma_caps = np.sqrt(sigma_e**2 + np.arange(1, k_max + 1) * (0.45 * m1) ** 2)
    sigma_caps = np.maximum(sigma_caps, 4.0 * sigma_e)
    upper = np.concatenate(
        [
            w_hi,
            [max(2.5 * m1, 6.0 * sigma_e)],
            np.full(max(k_max - 1, 0), 1.4),
            [1.25 * sigma_e],
            sigma_caps,
        ]
    )
    p0 = np.clip(p0, lower, upper)

    def unpack(p):
        w = p[: k_max + 1]
        m1_cur = p[k_max + 1]
        means = np.concatenate([[0.0], [m1_cur]])
        if k_max > 1:
            gaps = m1_cur * p[k_max + 2 : 2 * k_max + 1]
            means = np.concatenate([means, m1_cur + np.cumsum(gaps)])
        sig = p[2 * k_max + 1 :]
        return w, means, sig

    def residuals(p):
        w, means, sig = unpack(p)
        model = n_total * bin_w * _gaussian_mixture_density(centers, w, means, sig)
        res = (counts - model) / weights_err
        # soft constraint keeping total weight near unity
        return np.concatenate([res, [(w.sum() - 1.0) * math.sqrt(n_bins)]])

    result = least_squares(
        residuals, p0, bounds=(lower, upper), max_nfev=max_nfev, method="trf"
    )
    if not result.success or not np.all(np.isfinite(result.x)):
        raise FitConvergenceError("mixture fit did not converge on this slice")
    w, means, sig = unpack(result.x)
    dof = max(n_bins - result.x.size, 1)
    goodness = float(np.sum(result.fun[:-1] ** 2) / dof)
    components = tuple(
        (float(w[k]), float(means[k]), float(sig[k])) for k in range(k_max + 1)
    )
    return MixtureFit(components, goodness, n_total)


def classify_samples(current_ma, fit: MixtureFit, weighted: bool = True) -> np.ndarray:
    """Posterior-argmax band index per sample; ties break to smaller k.

    ``weighted=False`` drops the component weights (pure likelihood
    shape), which is how bands are read off a histogram when one
    component's prior dwarfs the others.
    """
    logp = fit.log_posteriors(current_ma)
    if not weighted:
        logp = logp - np.log(np.maximum(fit.weights(), 1e-300))[None, :]
    return np.argmax(logp, axis=1)


def classify_photon_number(current_ma: float, fit: MixtureFit) -> int:
    """Band index of one current value under the fitted mixture."""
    return int(classify_samples([current_ma], fit)[0])


def band_peak_fit(
    samples, fit: MixtureFit, k: int, trim_sigmas: float = 2.0, n_iter: int = 3
) -> tuple:
    """Gaussian (mean, sigma, fwhm) fitted to one band's histogram peak.

    Selects the samples the mixture assigns to band ``k`` and fits a
    Gaussian to the peak region, iteratively trimming to
    ``trim_sigmas`` around the current center the way a peak width is
    read off a histogram; the heavy gain tail is deliberately excluded.
    """
    samples = np.asarray(samples, dtype=float)
    sel = samples[classify_samples(samples, fit) == k]
    if sel.size < 50:
        raise ValueError(f"band {k} has too few samples for a peak fit")
    mu, sigma = float(np.mean(sel)), float(np.std(sel))
    for _ in range(n_iter):
        core = sel[np.abs(sel - mu) <= trim_sigmas * sigma]
        if core.size < 30:
            break
        counts, edges = np.histogram(core, bins=max(20, int(np.sqrt(core.size))))
        centers = 0.5 * (edges[:-1] + edges[1:])

        def gauss(x, amp, m, s):
            return amp * np.exp(-0.5 * ((x - m) / s) ** 2)

        try:
            popt, _ = curve_fit(
                gauss, centers, counts, p0=[counts.max(), mu, sigma], maxfev=5000
            )
            mu, sigma = float(popt[1]), float(abs(popt[2]))
        except RuntimeError:
            mu, sigma = float(np.mean(core)), float(np.std(core))
    return mu, sigma, SIGMA_TO_FWHM * sigma


def classification_accuracy(
    bundle: TraceBundle, t_ns: float, fit: MixtureFit, classes=(0, 1, 2)
) -> dict:
    """Per-class accuracy of the fit's classifier against manifest truth.

    Ground-truth counts above the fit's k_max are scored against the
    top band (the fit cannot distinguish them by construction).
    """
    truth = np.minimum(bundle.photon_truth, fit.k_max)
    predicted = classify_samples(bundle.slice_at(t_ns), fit)
    out = {}
    for k in classes:
        mask = truth == k
        out[k] = float(np.mean(predicted[mask] == k)) if mask.any() else float("nan")
    return out


@dataclass
class NoiseFactorSeries:
    """Time-dependent second-moment ratio of the 1-photon band."""

    times_ns: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    n_selected: np.ndarray
    omitted: np.ndarray
    band1_means: np.ndarray
    selection: str
    likelihood_fallback: np.ndarray = None

    def defined(self) -> np.ndarray:
        return ~self.omitted


def _noise_factor(x: np.ndarray):
    mean = x.mean()
    return float(np.mean(x**2) / mean**2)


def _jackknife_noise_factor(x: np.ndarray):
    """Leave-one-out standard error of <I^2>/<I>^2 in closed form."""
    n = x.size
    s1 = x.sum()
    s2 = np.sum(x**2)
    loo = ((s2 - x**2) / (n - 1)) / ((s1 - x) / (n - 1)) ** 2
    return float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


def noise_factor_series(
    bundle: TraceBundle,
    times_ns: Sequence[float],
    selection: str = "by_fit",
    k_max: int = 4,
    noise: NoiseParams | None = None,
    min_samples: int = 100,
) -> NoiseFactorSeries:
    """Noise factor <I^2>/<I>^2 over gates assigned to the 1-photon band.

    ``selection='by_truth'`` uses the manifest ground truth (exactly one
    detected photon); ``'by_fit'`` fits the band mixture at each delay
    (sweeping from late to early so earlier, less-resolved slices are
    warm-started) and keeps gates the classifier assigns to band 1.
    Early slices where the untriggered band's prior swamps the posterior
    fall back to likelihood-shape assignment (flagged per point), which
    is how a band is read off the histogram before it fully separates.
    Slices with fewer than ``min_samples`` selected gates are omitted
    and flagged.  Standard errors are jackknife over gates.
    """
    if selection not in ("by_fit", "by_truth"):
        raise ValueError(f"unknown selection mode {selection!r}")
    times = np.asarray(list(times_ns), dtype=float)
    n = times.size
    values = np.full(n, np.nan)
    errors = np.full(n, np.nan)
    counts = np.zeros(n, dtype=np.int64)
    omitted = np.ones(n, dtype=bool)
    band_means = np.full(n, np.nan)
    fallback = np.zeros(n, dtype=bool)

    order = np.argsort(times)[::-1]  # late slices first: warm starts
    prev_fit: Optional[MixtureFit] = None
    resolved_weights = None
    for idx in order:
        slice_ma = bundle.slice_at(times[idx])
        if selection == "by_truth":
            sel = slice_ma[bundle.photon_truth == 1]
        else:
            try:
                fit = fit_mixture(slice_ma, k_max=k_max, noise=noise, init_fit=prev_fit)
                resolved = fit.means()[1] >= BAND_RESOLVED_SIGMA * fit.sigmas()[0]
                if not resolved and resolved_weights is not None:
                    # band populations are delay-independent: impose the
                    # weights from the resolved slices on overlapping ones
                    fit = fit_mixture(
                        slice_ma,
                        k_max=k_max,
                        noise=noise,
                        init_fit=prev_fit,
                        fixed_weights=resolved_weights,
                    )
            except (FitConvergenceError, ValueError):
                continue
            prev_fit = fit
            if resolved:
                resolved_weights = fit.weights()
                sel = slice_ma[classify_samples(slice_ma, fit) == 1]
            else:
                sel = slice_ma[classify_samples(slice_ma, fit, weighted=False) == 1]
                fallback[idx] = True
        if sel.size < min_samples:
            continue
        values[idx] = _noise_factor(sel)
        errors[idx] = _jackknife_noise_factor(sel)
        counts[idx] = sel.size
        band_means[idx] = sel.mean()
        omitted[idx] = False
    return NoiseFactorSeries(
        times, values, errors, counts, omitted, band_means, selection, fallback
    )


@dataclass(frozen=True)
class ResolutionReport:
    """Band separations, widths, overlap estimates and the flux estimate."""

    separations_ma: dict
    fwhm_ma: dict
    misclassification: dict
    flux_estimate: float


def _decision_boundary(fit: MixtureFit, k: int) -> float:
    """Current where the posterior flips between bands k and k+1."""
    w, m, s = fit.weights(), fit.means(), fit.sigmas()
    if m[k + 1] <= m[k]:
        return 0.5 * (m[k] + m[k + 1])
    if w[k] <= 0:
        return m[k]
    if w[k + 1] <= 0:
        return m[k + 1]

    def diff(x):
        lk = math.log(w[k]) - math.log(s[k]) - 0.5 * ((x - m[k]) / s[k]) ** 2
        lk1 = math.log(w[k + 1]) - math.log(s[k + 1]) - 0.5 * ((x - m[k + 1]) / s[k + 1]) ** 2
        return lk - lk1

    lo, hi = m[k], m[k + 1]
    if diff(lo) <= 0 or diff(hi) >= 0:
        return 0.5 * (lo + hi)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if diff(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def resolution_report(fit: MixtureFit, k_pairs=None) -> ResolutionReport:
    """Resolution metrics of a fitted band structure.

    Misclassification for the pair (k, k+1) is the overlap of the two
    fitted Gaussians at the posterior decision boundary: the average of
    the band-k upper tail and the band-(k+1) lower tail beyond it.
    """
    if fit.k_max < 1:
        raise ValueError("need at least 2 components")
    w, m, s = fit.weights(), fit.means(), fit.sigmas()
    pairs = k_pairs if k_pairs is not None else list(range(fit.k_max))
    separations = {k: float(m[k + 1] - m[k]) for k in pairs}
    fwhm = {k: float(SIGMA_TO_FWHM * s[k]) for k in range(fit.k_max + 1)}
    mis = {}
    for k in pairs:
        if m[k + 1] - m[k] < 1e-12 and abs(s[k + 1] - s[k]) < 1e-12:
            mis[k] = 0.5  # indistinguishable components
            continue
        b = _decision_boundary(fit, k)
        upper = 1.0 - ndtr((b - m[k]) / s[k])
        lower = ndtr((b - m[k + 1]) / s[k + 1])
        mis[k] = float(0.5 * (upper + lower))

    weights = np.maximum(w, 0.0)
    total = weights.sum()

    def flux_sse(mu):
        pmf = poisson.pmf(np.arange(fit.k_max + 1), mu)
        pmf[-1] = 1.0 - poisson.cdf(fit.k_max - 1, mu)  # top band absorbs the tail
        return float(np.sum((weights / total - pmf) ** 2))

    res = minimize_scalar(flux_sse, bounds=(1e-3, 20.0), method="bounded")
    return ResolutionReport(separations, fwhm, mis, float(res.x))


def estimate_spot_diameter(scan_x_um, photocurrent, noise_tolerance: float = 0.02) -> float:
    """Spot FWHM from a knife-edge scan: differentiate, fit a Gaussian.

    Raises ValueError when the scan is not monotone beyond the noise
    tolerance (relative to the response swing).  The achievable floor is
    twice the scan step; narrower features return values at or below
    that floor.
    """
    x = np.asarray(scan_x_um, dtype=float)
    y = np.asarray(photocurrent, dtype=float)
    if x.size < 20:
        raise ValueError("edge scan needs at least 20 points")
    order = np.argsort(x)
    x, y = x[order], y[order]
    swing = y.max() - y.min()
    if swing <= 0:
        raise ValueError("flat scan: no edge response to differentiate")
    backsteps = np.minimum(np.diff(y), 0.0)
    if -backsteps.sum() > noise_tolerance * swing:
        raise ValueError("edge scan is not monotone beyond noise tolerance")

    dy = np.gradient(y, x)
    peak = np.argmax(dy)
    step = float(np.median(np.diff(x)))

    def gauss(xx, amp, mu, sigma):
        return amp * np.exp(-0.5 * ((xx - mu) / sigma) ** 2)

    sigma0 = max(step, swing / max(dy[peak], 1e-12) * 0.4)
    try:
        popt, _ = curve_fit(
            gauss,
            x,
            dy,
            p0=[dy[peak], x[peak], sigma0],
            maxfev=10000,
        )
        sigma = abs(popt[2])
    except RuntimeError:
        # derivative too narrow to fit: report the resolution floor
        sigma = step * FWHM_TO_SIGMA
    return float(SIGMA_TO_FWHM * sigma)
