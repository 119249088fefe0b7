"""Branching-process engines for avalanche multiplication.

Carrier multiplication is modeled as a discrete-time branching process:
per time step, each eligible carrier spawns one new carrier with a model
probability.  Two offspring models are provided:

* ``bernoulli``  -- every carrier spawns with probability ``p_ionize``
  each step.  Analytically tractable (Galton-Watson with offspring
  1 + Bernoulli(p)), used as a validation oracle.
* ``dead_space`` -- a carrier younger than ``dead_steps`` steps never
  spawns; once mature it spawns with probability ``p_post`` each step.
  The age gate suppresses gain variance and is the default for
  reproducing the measured noise plateau.

All randomness flows through counter-based Philox streams keyed by
(master seed, stream id) so independent work units are reproducible on
any platform and for any worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "OffspringModel",
    "RngStream",
    "PopulationState",
    "GainSample",
    "PopulationOverflowError",
    "derive_stream",
    "purpose_stream_id",
    "step_population",
    "simulate_gain",
    "sample_gains",
    "excess_noise_factor",
    "analytic_limit_noise",
    "dead_space_limit_noise",
    "seed_scaling_check",
    "expected_population",
    "CalibrationTargets",
    "CalibrationResult",
    "CalibrationError",
    "calibrate_model",
]

_U64 = 1 << 64

# Carrier-count cap: one quarter of int64 range so a single step cannot
# overflow int64 arithmetic even if every carrier spawns.
POPULATION_CAP = (1 << 62) - 1

# Stream-id namespaces for the named sub-purposes of a simulation run.
# stream_id = (purpose << 48) | gate_index keeps gate streams disjoint
# from photon/noise streams without coordination between workers.
PURPOSE_GATE = 0
PURPOSE_PHOTONS = 1
PURPOSE_POSITIONS = 2
PURPOSE_NOISE = 3
PURPOSE_JITTER = 4


class PopulationOverflowError(OverflowError):
    """Carrier population exceeded the supported cap.

    Raised when multiplication is left running without current
    saturation; the caller must apply the device feedback first.
    """


@dataclass(frozen=True)
class OffspringModel:
    """Per-step offspring law for avalanche carriers.

    kind='bernoulli' uses ``p_ionize`` only; kind='dead_space' ignores
    ``p_ionize`` and uses (``dead_steps``, ``p_post``).
    """

    kind: str
    p_ionize: float = 0.0
    dead_steps: int = 0
    p_post: float = 0.0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "dead_space"):
            raise ValueError(f"unknown offspring model kind: {self.kind!r}")
        for name in ("p_ionize", "p_post"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        if self.dead_steps < 0:
            raise ValueError(f"dead_steps={self.dead_steps} is negative")

    @property
    def n_age_buckets(self) -> int:
        """Number of age buckets needed: dead_steps young + 1 mature."""
        return self.dead_steps + 1 if self.kind == "dead_space" else 1

    def spawn_probability(self) -> float:
        """Probability that a mature carrier spawns in one step."""
        return self.p_ionize if self.kind == "bernoulli" else self.p_post

    def scaled(self, factor: float) -> "OffspringModel":
        """Return the model with ionization probabilities scaled by ``factor``.

        Probabilities are clamped to [0, 1]; the age structure is untouched.
        """
        f = max(0.0, factor)
        return replace(
            self,
            p_ionize=min(1.0, self.p_ionize * f),
            p_post=min(1.0, self.p_post * f),
        )


@dataclass(frozen=True)
class RngStream:
    """Position in a counter-based random-number family.

    Identical (master_seed, stream_id, counter) yields bit-identical
    draws on every platform and for any number of workers.
    """

    master_seed: int
    stream_id: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        """Materialize a numpy Generator at this stream position."""
        bitgen = np.random.Philox(
            counter=[self.counter % _U64, 0, 0, 0],
            key=[self.master_seed % _U64, self.stream_id % _U64],
        )
        return np.random.Generator(bitgen)

    def with_counter(self, counter: int) -> "RngStream":
        return replace(self, counter=counter)


def derive_stream(master_seed: int, stream_id: int) -> RngStream:
    """Derive the stream for one work unit (gate index or named purpose).

    Pure function of its inputs; streams with distinct ids are
    statistically independent Philox counter sequences.
    """
    return RngStream(master_seed=master_seed, stream_id=stream_id)


def purpose_stream_id(purpose: int, index: int) -> int:
    """Compose a namespaced stream id from a purpose code and gate index."""
    if not 0 <= index < (1 << 48):
        raise ValueError("gate index outside the 48-bit namespace")
    return (purpose << 48) | index


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


@dataclass
class PopulationState:
    """Carrier counts bucketed by age in steps.

    ``counts[i]`` holds carriers of age ``i`` for ``i < dead_steps``;
    the final bucket absorbs all mature ages.  ``total`` always equals
    the bucket sum and never decreases (no recombination is modeled).
    """

    counts: np.ndarray

    @classmethod
    def seeded(cls, n_seeds: int, model: OffspringModel) -> "PopulationState":
        """Population of freshly injected seed carriers.

        Seed holes are accelerated before reaching the multiplication
        layer and arrive ionization-ready, so they enter the mature
        bucket; only spawned carriers start at age 0.
        """
        counts = np.zeros(model.n_age_buckets, dtype=np.int64)
        counts[-1] = n_seeds
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def step_population(
    state: PopulationState, model: OffspringModel, rng
) -> PopulationState:
    """Advance the population by one time step.

    Each eligible carrier independently spawns one new carrier with the
    model probability; all ages increment; newborns enter age 0.
    """
    gen = _as_generator(rng)
    counts = state.counts
    if counts.shape[0] != model.n_age_buckets:
        raise ValueError("population age buckets do not match the model")
    mature = int(counts[-1])
    p = model.spawn_probability()
    if p == 0.0 or mature == 0:
        births = 0
    elif p == 1.0:
        births = mature
    else:
        births = int(gen.binomial(mature, p))
    total = int(counts.sum())
    if total + births > POPULATION_CAP:
        raise PopulationOverflowError(
            f"population {total + births} exceeds cap {POPULATION_CAP}; "
            "apply current saturation before stepping further"
        )
    new = np.empty_like(counts)
    if counts.shape[0] == 1:
        new[0] = total + births
    else:
        new[-1] = counts[-1] + counts[-2]
        new[1:-1] = counts[:-2]
        new[0] = births
    return PopulationState(new)


@dataclass(frozen=True)
class GainSample:
    """Final carriers per seed after a fixed number of steps."""

    gain: float
    seeds: int


def simulate_gain(n_seeds: int, n_steps: int, model: OffspringModel, rng) -> GainSample:
    """Draw one avalanche gain: final carriers / seeds after ``n_steps``."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    gen = _as_generator(rng)
    state = PopulationState.seeded(n_seeds, model)
    for _ in range(n_steps):
        state = step_population(state, model, gen)
    return GainSample(gain=state.total / n_seeds, seeds=n_seeds)


def sample_gains(
    n_draws: int, n_seeds: int, n_steps: int, model: OffspringModel, rng
) -> np.ndarray:
    """Vectorized batch of independent gain draws from a single stream.

    Equivalent in distribution to ``n_draws`` calls to ``simulate_gain``;
    all draws consume the one stream passed in, so the batch as a whole
    is reproducible.
    """
    gen = _as_generator(rng)
    counts = np.zeros((n_draws, model.n_age_buckets), dtype=np.int64)
    counts[:, -1] = n_seeds  # seeds arrive ionization-ready
    p = model.spawn_probability()
    for _ in range(n_steps):
        mature = counts[:, -1]
        if p == 0.0:
            births = np.zeros_like(mature)
        elif p == 1.0:
            births = mature.copy()
        else:
            births = gen.binomial(mature, p)
        if counts.shape[1] == 1:
            counts[:, 0] += births
        else:
            counts[:, -1] += counts[:, -2]
            counts[:, 1:-1] = counts[:, :-2]
            counts[:, 0] = births
        if counts.sum(axis=1).max() > POPULATION_CAP:
            raise PopulationOverflowError("population exceeds cap")
    return counts.sum(axis=1) / n_seeds


def excess_noise_factor(samples) -> float:
    """Second-moment gain statistic <M^2> / <M>^2 over an ensemble.

    Accepts GainSample sequences or bare gain arrays.  Equals 1 for a
    deterministic ensemble; grows with multiplication noise.
    """
    if isinstance(samples, np.ndarray):
        gains = np.asarray(samples, dtype=float)
    else:
        gains = np.array(
            [s.gain if isinstance(s, GainSample) else float(s) for s in samples],
            dtype=float,
        )
    if gains.size < 2:
        raise ValueError("need at least 2 gain samples")
    mean = gains.mean()
    if mean == 0.0:
        raise ValueError("mean gain is zero; noise factor undefined")
    return float(np.mean(gains**2) / mean**2)


def analytic_limit_noise(p_ionize: float) -> float:
    """Large-gain noise-factor limit for the bernoulli model.

    For offspring 1 + Bernoulli(p) the limit is 1 + (1-p)/(1+p).
    Cross-checked against brute-force Monte Carlo in the test suite.
    """
    if not 0.0 < p_ionize <= 1.0:
        raise ValueError("p_ionize must be in (0, 1]: no multiplication at p=0")
    return 1.0 + (1.0 - p_ionize) / (1.0 + p_ionize)


def _geom_pgf(z: float, q: float) -> float:
    # E[z^G] for G ~ Geometric(q) on {1, 2, ...}.
    return q * z / (1.0 - (1.0 - q) * z)


def dead_space_limit_noise(model: OffspringModel, growth_per_step: float) -> float:
    """Asymptotic noise factor of a seed-initiated age-gated avalanche.

    Derived from the distributional fixed point of the normalized
    population limit W = sum_j lam^-T_j W_j, where T_j = d + G_1 + ... + G_j
    are the birth ages of one carrier's offspring (G geometric on
    {1, 2, ...}).  The seed itself arrives ionization-ready, so its
    offspring schedule omits the initial dead space; the returned value
    is the seed-rooted limit.  For dead_steps = 0 this reduces to the
    bernoulli closed form.  Verified against brute-force Monte Carlo in
    the test suite.

    ``growth_per_step`` is the Malthusian ratio lam; it must satisfy
    lam^d (lam - 1) = p for consistency with the model, which holds
    automatically for calibrated models.
    """
    lam = float(growth_per_step)
    if lam <= 1.0:
        raise ValueError("growth_per_step must exceed 1")
    q = model.spawn_probability()
    if not 0.0 < q <= 1.0:
        raise ValueError("spawn probability must be in (0, 1]")
    d = model.dead_steps if model.kind == "dead_space" else 0
    g2 = _geom_pgf(lam**-2, q)
    g1 = _geom_pgf(lam**-1, q)
    eb2_pair = g2 * (1.0 + g1) / ((1.0 - g2) * (1.0 - g1))  # E[B^2]
    eb2_diag = g2 / (1.0 - g2)  # E[sum lam^-2S_j]
    att = lam ** (-2 * d)
    f_young = att * (eb2_pair - eb2_diag) / (1.0 - att * eb2_diag)
    if d == 0:
        return f_young
    # seed-rooted correction: root offspring ages lack the d-step delay
    eb = g1 / (1.0 - g1)  # E[B] = lam^d by the Malthusian condition
    return (eb2_diag * f_young + eb2_pair - eb2_diag) / eb**2


def seed_scaling_check(f1: float, n: int) -> float:
    """Predicted n-seed noise factor from variance additivity.

    Independent seeds add variances, so F_n = 1 + (F_1 - 1)/n.
    """
    if f1 < 1.0:
        raise ValueError("F1 must be >= 1")
    if n < 1:
        raise ValueError("n must be >= 1")
    return 1.0 + (f1 - 1.0) / n


def expected_population(
    model: OffspringModel,
    n_steps: int,
    n_seeds: int = 1,
    spawn_scale: Sequence[float] | None = None,
) -> np.ndarray:
    """Exact expected total population after each step (deterministic).

    The mean of the branching process obeys a linear age-structure
    recursion, evaluated here without sampling.  ``spawn_scale`` may
    supply a per-step multiplier on the spawn probability (for
    mean-field feedback during calibration).

    Returns an array of length n_steps + 1 with entry s = E[N(s)].
    """
    buckets = np.zeros(model.n_age_buckets, dtype=float)
    buckets[-1] = n_seeds  # seeds arrive ionization-ready
    p = model.spawn_probability()
    out = np.empty(n_steps + 1)
    out[0] = n_seeds
    for s in range(n_steps):
        scale = 1.0 if spawn_scale is None else spawn_scale[s]
        births = buckets[-1] * min(1.0, p * scale)
        if buckets.shape[0] == 1:
            buckets[0] += births
        else:
            buckets[-1] += buckets[-2]
            buckets[1:-1] = buckets[:-2]
            buckets[0] = births
        out[s + 1] = buckets.sum()
    return out


@dataclass(frozen=True)
class CalibrationTargets:
    """Growth anchors (t_ns, mean 1-seed current in mA) plus plateau noise factor.

    ``band_fwhm_ma`` optionally constrains the 1-photon band width
    (FWHM, electrical noise included) at the last anchor; it selects
    among dead-space depths whose plateau already satisfies the
    tolerance.
    """

    anchors: tuple
    plateau: float
    band_fwhm_ma: float | None = None
    band_fwhm_tol: float = 0.20

    def __post_init__(self):
        if len(self.anchors) < 2:
            raise ValueError("need at least 2 growth anchors")
        ts = [a[0] for a in self.anchors]
        if sorted(ts) != ts or len(set(ts)) != len(ts):
            raise ValueError("anchor times must be strictly increasing")
        if any(c <= 0 for _, c in self.anchors):
            raise ValueError("anchor currents must be positive")
        if self.plateau < 1.0:
            raise ValueError("plateau noise factor must be >= 1")
        if self.band_fwhm_ma is not None and self.band_fwhm_ma <= 0:
            raise ValueError("band width target must be positive")


@dataclass(frozen=True)
class CalibrationResult:
    model: OffspringModel
    current_per_carrier_ma: float
    growth_per_step: float
    predicted_plateau: float
    residuals: dict


class CalibrationError(RuntimeError):
    """No model parameters satisfy the targets within the search bounds."""


def _fit_spawn_prob_to_anchor_ratio(
    dead_steps: int,
    target_ratio: float,
    s1: int,
    s2: int,
) -> float | None:
    """Bisect p_post so the exact mean recursion matches the anchor ratio.

    Returns None when no probability in (0, 1] reaches the ratio.
    """

    def ratio(q: float) -> float:
        model = OffspringModel("dead_space", dead_steps=dead_steps, p_post=q)
        means = expected_population(model, s2)
        return means[s2] / means[s1]

    lo, hi = 1e-6, 1.0
    if ratio(hi) < target_ratio:
        return None
    if ratio(lo) > target_ratio:
        return None
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if ratio(mid) < target_ratio:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate_model(
    targets: CalibrationTargets,
    device=None,
    tol: float = 0.05,
    dt_ns: float = 0.01,
    kind: str = "dead_space",
    plateau_draws: int = 40_000,
    noise_sigma_ma: float | None = None,
    rng: RngStream | None = None,
) -> CalibrationResult:
    """Fit an offspring model to growth anchors and a plateau noise factor.

    The mean current between anchors fixes the Malthusian growth rate;
    for the dead_space family the exact mean recursion then determines
    p_post for each candidate dead_steps, and the closed-form asymptotic
    noise factor selects dead_steps.  The carrier-to-current scale comes
    from the first anchor.  A Monte Carlo verification of the plateau is
    included in the residuals.

    Raises CalibrationError when no parameters meet ``tol`` (relative).
    """
    (t1, c1), (t2, c2) = targets.anchors[0], targets.anchors[-1]
    s1 = round(t1 / dt_ns)
    s2 = round(t2 / dt_ns)
    if s2 <= s1:
        raise ValueError("anchor times too close for the step size")
    growth = (c2 / c1) ** (1.0 / (s2 - s1))

    if kind == "bernoulli":
        p = growth - 1.0
        if not 0.0 < p <= 1.0:
            raise CalibrationError(f"bernoulli growth {growth:.4f}/step infeasible")
        model = OffspringModel("bernoulli", p_ionize=p)
        predicted = analytic_limit_noise(p)
        means = expected_population(model, s2)
        scale = c1 / means[s1]
        residuals = _calibration_residuals(
            model, scale, targets, dt_ns, predicted, plateau_draws, rng
        )
        _check_tol(residuals, tol)
        return CalibrationResult(model, scale, growth, predicted, residuals)

    if kind != "dead_space":
        raise ValueError(f"unknown model family: {kind!r}")

    target_f = targets.plateau
    candidates = []
    d = 0
    while True:
        q = _fit_spawn_prob_to_anchor_ratio(d, c2 / c1, s1, s2)
        if q is None:
            break  # deeper dead space cannot reach the anchor growth
        model = OffspringModel("dead_space", dead_steps=d, p_post=q)
        lam = _malthusian_ratio(model)
        f_pred = dead_space_limit_noise(model, lam)
        candidates.append((abs(f_pred - target_f), model, lam, f_pred))
        d += 1
        if d > 200:
            break
    if not candidates:
        raise CalibrationError("no dead_space model reaches the anchor growth")
    if targets.band_fwhm_ma is not None:
        sigma_e = noise_sigma_ma if noise_sigma_ma is not None else 0.0
        stream = rng if rng is not None else derive_stream(0xCA11B, 1)
        narrowed = []
        for miss, model, lam, f_pred in candidates:
            if abs(f_pred / target_f - 1.0) > tol:
                continue
            f_t = excess_noise_factor(sample_gains(30_000, 1, s2, model, stream))
            fwhm = 2.3548200450309493 * math.sqrt(
                (f_t - 1.0) * c2**2 + sigma_e**2
            )
            if abs(fwhm / targets.band_fwhm_ma - 1.0) <= targets.band_fwhm_tol:
                narrowed.append((miss, model, lam, f_pred))
        if not narrowed:
            raise CalibrationError(
                f"no dead_space model matches plateau {target_f} and band "
                f"width {targets.band_fwhm_ma} mA within tolerance"
            )
        candidates = narrowed
    _, model, lam, f_pred = min(candidates, key=lambda c: c[0])
    means = expected_population(model, s2)
    scale = c1 / means[s1]
    residuals = _calibration_residuals(
        model, scale, targets, dt_ns, f_pred, plateau_draws, rng
    )
    try:
        _check_tol(residuals, tol)
    except CalibrationError as err:
        raise CalibrationError(
            f"{err} (closest model: dead_steps={model.dead_steps}, "
            f"p_post={model.p_post:.4f}, plateau {f_pred:.4f})"
        ) from None
    return CalibrationResult(model, scale, growth, f_pred, residuals)


def _malthusian_ratio(model: OffspringModel) -> float:
    """Solve lam^d (lam - 1) = p for the per-step growth ratio."""
    q = model.spawn_probability()
    d = model.dead_steps if model.kind == "dead_space" else 0
    lo, hi = 1.0 + 1e-12, 2.0
    f = lambda lam: lam**d * (lam - 1.0) - q
    while f(hi) < 0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _calibration_residuals(
    model: OffspringModel,
    scale: float,
    targets: CalibrationTargets,
    dt_ns: float,
    predicted_plateau: float,
    plateau_draws: int,
    rng: RngStream | None,
) -> dict:
    n_steps = round(targets.anchors[-1][0] / dt_ns)
    means = expected_population(model, n_steps)
    anchor_res = {}
    for t, c in targets.anchors:
        s = round(t / dt_ns)
        anchor_res[t] = scale * means[s] / c - 1.0
    res = {
        "anchors_rel": anchor_res,
        "plateau_rel": predicted_plateau / targets.plateau - 1.0,
    }
    if plateau_draws:
        stream = rng if rng is not None else derive_stream(0xCA11B, 0)
        lam = _malthusian_ratio(model)
        # step out far enough that the mean gain exceeds 100
        s_big = max(n_steps, int(math.ceil(math.log(200.0) / math.log(lam))))
        gains = sample_gains(plateau_draws, 1, s_big, model, stream)
        res["plateau_mc"] = excess_noise_factor(gains)
        res["plateau_mc_rel"] = res["plateau_mc"] / targets.plateau - 1.0
    return res


def _check_tol(residuals: dict, tol: float) -> None:
    worst_anchor = max(abs(r) for r in residuals["anchors_rel"].values())
    if worst_anchor > tol:
        raise CalibrationError(f"anchor residual {worst_anchor:.3f} exceeds tol {tol}")
    if abs(residuals["plateau_rel"]) > tol:
        raise CalibrationError(
            f"plateau residual {residuals['plateau_rel']:.3f} exceeds tol {tol}"
        )
