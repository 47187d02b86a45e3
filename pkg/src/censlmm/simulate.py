"""Synthetic longitudinal datasets with left-censoring.

Generates data from the linear mixed model (subject-level Gaussian random
effects plus independent residuals) on a fixed measurement schedule, then
flags every response below the detection limit as censored, storing the limit
as the placeholder response.  A target censoring fraction can be converted
into a limit by bisection on the exact marginal normal probabilities.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ModelSpec, Observation, SubjectData, intercept_slope_model
from .errors import InvalidParameterError
from .likelihood import Theta


def default_truth():
    """Benchmark generating values for the intercept-slope template.

    Intercept 3, slope 0.5, random-effect covariance [[0.5, -0.1], [-0.1, 0.1]],
    residual variance 0.2 - the standard simulation-study configuration for
    this model.
    """
    g = np.array([[0.5, -0.1], [-0.1, 0.1]])
    return Theta.from_moments([3.0, 0.5], g, [math.sqrt(0.2)])


@dataclass(frozen=True)
class SimConfig:
    """Design of one simulated dataset.

    Exactly one of ``threshold`` (detection limit, scalar or one value per
    schedule time) and ``target_censoring`` (marginal censoring fraction used
    to calibrate the limit) must be given.
    """

    n_subjects: int
    n_per_subject: int
    truth: Theta
    times: np.ndarray | None = None
    threshold: float | np.ndarray | None = None
    target_censoring: float | None = None
    seed: int = 0
    model: ModelSpec = field(default_factory=intercept_slope_model)

    def __post_init__(self):
        if self.n_subjects < 1 or self.n_per_subject < 1:
            raise ValueError("need at least one subject and one measure per subject")
        if (self.threshold is None) == (self.target_censoring is None):
            raise ValueError("give exactly one of threshold and target_censoring")
        times = self.times
        if times is None:
            times = np.arange(self.n_per_subject, dtype=float)
        times = np.asarray(times, dtype=float)
        if times.shape != (self.n_per_subject,):
            raise ValueError("times must provide one value per within-subject measure")
        object.__setattr__(self, "times", times)
        self.truth.validate_for(self.model)


def _template_observation(spec, time, marker):
    return Observation(subject_id="_", time=float(time), response=0.0,
                       is_observed=True, threshold=math.nan, marker=marker)


def _schedule_moments(truth, times, spec):
    """Marginal mean and SD of each scheduled measurement (all markers)."""
    g = truth.g_matrix()
    mus, sds = [], []
    for marker in range(1, spec.n_strata + 1):
        for t in times:
            obs = _template_observation(spec, t, marker)
            x = np.asarray(spec.fixed_design(obs), dtype=float)
            z = np.asarray(spec.random_design(obs), dtype=float)
            mus.append(float(x @ truth.beta))
            var = float(z @ g @ z) + float(truth.sigma_e[marker - 1] ** 2)
            sds.append(math.sqrt(var))
    return np.array(mus), np.array(sds)


def calibrate_threshold(truth, times, target, model=None):
    """Detection limit whose schedule-averaged censoring probability hits ``target``.

    Solves mean_t Phi((c - mu_t) / sd_t) = target by bisection on the exact
    normal CDF; accurate to 1e-10 in the probability.
    """
    if not 0.0 < target < 1.0:
        raise ValueError("target censoring fraction must lie in (0, 1)")
    spec = model if model is not None else intercept_slope_model()
    times = np.asarray(times, dtype=float)
    mus, sds = _schedule_moments(truth, times, spec)
    if np.any(sds <= 0.0):
        raise InvalidParameterError("degenerate marginal variance; cannot calibrate")
    from scipy.special import ndtr

    def frac(c):
        return float(np.mean(ndtr((c - mus) / sds)))

    lo = float(np.min(mus - 10.0 * sds))
    hi = float(np.max(mus + 10.0 * sds))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if frac(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13 * max(1.0, abs(hi)):
            break
    return 0.5 * (lo + hi)


def simulate(config, return_latent=False):
    """Draw one dataset; fully deterministic given the seed.

    Censored rows store the detection limit as their response placeholder.
    With ``return_latent`` the uncensored responses are also returned (test
    side channel, never part of the written output).
    """
    spec = config.model
    truth = config.truth
    rng = np.random.default_rng(config.seed)

    g = truth.g_matrix()
    vals, vecs = np.linalg.eigh(g)
    if np.any(vals < -1e-10 * max(1.0, float(np.max(np.abs(vals))))):
        raise InvalidParameterError("random-effects covariance is not positive semi-definite")
    keep = vals > 1e-14
    factor = vecs[:, keep] * np.sqrt(np.clip(vals[keep], 0.0, None))
    r = factor.shape[1]

    if config.threshold is not None:
        thr = np.broadcast_to(np.asarray(config.threshold, dtype=float),
                              (config.n_per_subject,)).astype(float)
    else:
        c = calibrate_threshold(truth, config.times, config.target_censoring, model=spec)
        thr = np.full(config.n_per_subject, c)

    subjects = []
    latents = []
    for i in range(config.n_subjects):
        sid = str(i + 1)
        gamma = factor @ rng.standard_normal(r) if r else np.zeros(spec.q)
        observations = []
        for marker in range(1, spec.n_strata + 1):
            sde = float(truth.sigma_e[marker - 1])
            for j, t in enumerate(config.times):
                template = _template_observation(spec, t, marker)
                x = np.asarray(spec.fixed_design(template), dtype=float)
                z = np.asarray(spec.random_design(template), dtype=float)
                latent = float(x @ truth.beta + z @ gamma + sde * rng.standard_normal())
                latents.append(latent)
                censored = latent < thr[j]
                observations.append(
                    Observation(
                        subject_id=sid,
                        time=float(t),
                        response=float(thr[j]) if censored else latent,
                        is_observed=not censored,
                        threshold=float(thr[j]),
                        marker=marker,
                    )
                )
        subjects.append(SubjectData(subject_id=sid, observations=tuple(observations)))

    dataset = Dataset(subjects=tuple(subjects))
    if return_latent:
        return dataset, np.array(latents)
    return dataset
