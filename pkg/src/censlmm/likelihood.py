"""Model moments and the censoring-aware log-likelihood formulations.

Two mutually verifying evaluation paths are provided for the same model:

* marginal: per subject, the joint normal density of the observed measures
  times the conditional probability that the censored ones fall below their
  detection limits (a multivariate normal rectangle probability);
* hierarchical: per subject, the product over measurements of a normal
  density (observed) or cumulative (censored) conditional on the random
  effects, integrated over the random-effect distribution with adaptive
  Gauss-Hermite quadrature.

A third, deliberately biased baseline replaces censored responses by their
detection limit and evaluates the ordinary mixed-model likelihood.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import log_ndtr

from .data import CovarianceForm, build_designs, partition_subject
from .errors import (
    CensLmmError,
    DimensionError,
    EvaluationError,
    InvalidParameterError,
    ModeSearchError,
    NotPositiveDefiniteError,
)
from .gaussian import MAX_DIM, MvnProblem, mvn_rect_prob
from .quadrature import agq_log_integral

_LOG_2PI = math.log(2.0 * math.pi)

# quasi-random sample sizes per censored-block dimension used while fitting;
# fixed counts keep the objective smooth in the parameters
FIT_POINTS = {2: 512, 3: 1024, 4: 2048}
FIT_POINTS_DEFAULT = 4096

# tensor-grid budget: largest quadrature order per integration dimension
_AGQ_ORDER_CAP = {1: 64, 2: 64, 3: 40, 4: 20}


def max_agq_order(q):
    """Largest usable Gauss-Hermite order for a q-dimensional tensor grid."""
    return _AGQ_ORDER_CAP.get(q, 20)


class Method(Enum):
    MARGINAL = "marginal"
    AGQ = "agq"
    NAIVE = "naive"


@dataclass(frozen=True)
class Theta:
    """Full parameter vector: fixed effects, covariance factor, residual SDs.

    The random-effects covariance is carried either as a lower-triangular
    Cholesky factor (G = L L^T, any q) or, for q = 2, as two variances plus a
    correlation in (-1, 1).  ``sigma_e`` holds one residual SD per stratum.
    """

    beta: np.ndarray
    sigma_e: np.ndarray
    form: CovarianceForm
    chol: np.ndarray | None = None
    variances: np.ndarray | None = None
    rho: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "sigma_e", np.atleast_1d(np.asarray(self.sigma_e, dtype=float)))
        if self.form is CovarianceForm.CHOLESKY:
            if self.chol is None:
                raise InvalidParameterError("Cholesky form requires the factor L")
            L = np.atleast_2d(np.asarray(self.chol, dtype=float))
            if np.any(np.triu(L, 1) != 0.0):
                raise InvalidParameterError("L must be lower triangular")
            if np.any(np.diag(L) < 0.0):
                raise InvalidParameterError("L must have a nonnegative diagonal")
            object.__setattr__(self, "chol", L)
        else:
            if self.variances is None or self.rho is None:
                raise InvalidParameterError("correlation form requires two variances and rho")
            v = np.atleast_1d(np.asarray(self.variances, dtype=float))
            if v.shape != (2,) or np.any(v < 0.0):
                raise InvalidParameterError("correlation form needs two nonnegative variances")
            if not -1.0 < self.rho < 1.0:
                raise InvalidParameterError("the correlation must lie strictly inside (-1, 1)")
            object.__setattr__(self, "variances", v)
        if np.any(self.sigma_e < 0.0) or not np.all(np.isfinite(self.sigma_e)):
            raise InvalidParameterError("residual SDs must be finite and nonnegative")

    @classmethod
    def from_cholesky(cls, beta, chol, sigma_e):
        return cls(beta=beta, sigma_e=sigma_e, form=CovarianceForm.CHOLESKY, chol=chol)

    @classmethod
    def from_correlation(cls, beta, var1, var2, rho, sigma_e):
        return cls(beta=beta, sigma_e=sigma_e, form=CovarianceForm.CORRELATION,
                   variances=np.array([var1, var2]), rho=float(rho))

    @classmethod
    def from_moments(cls, beta, g, sigma_e, form=CovarianceForm.CHOLESKY):
        """Build a Theta from a covariance matrix G (must be PSD)."""
        g = np.atleast_2d(np.asarray(g, dtype=float))
        if form is CovarianceForm.CORRELATION:
            if g.shape != (2, 2):
                raise InvalidParameterError("correlation form requires a 2x2 covariance")
            v1, v2 = g[0, 0], g[1, 1]
            denom = math.sqrt(v1 * v2)
            rho = g[0, 1] / denom if denom > 0 else 0.0
            return cls.from_correlation(beta, v1, v2, rho, sigma_e)
        try:
            chol = np.linalg.cholesky(g)
        except np.linalg.LinAlgError:
            # PSD fallback: eigenvalue-clipped symmetric square root, re-triangularized
            vals, vecs = np.linalg.eigh(g)
            vals = np.clip(vals, 0.0, None)
            root = vecs * np.sqrt(vals)
            r = np.linalg.qr(root.T, mode="r")
            chol = r.T * np.sign(np.diag(r))[None, :]
            chol = np.tril(chol)
        return cls.from_cholesky(beta, chol, sigma_e)

    @property
    def p(self):
        return self.beta.shape[0]

    @property
    def q(self):
        if self.form is CovarianceForm.CHOLESKY:
            return self.chol.shape[0]
        return 2

    def g_matrix(self):
        """The random-effects covariance G."""
        if self.form is CovarianceForm.CHOLESKY:
            return self.chol @ self.chol.T
        v1, v2 = self.variances
        cov = self.rho * math.sqrt(v1 * v2)
        return np.array([[v1, cov], [cov, v2]])

    def validate_for(self, spec):
        if self.p != spec.p:
            raise DimensionError(f"{self.p} fixed effects, model expects {spec.p}")
        if self.q != spec.q:
            raise DimensionError(f"{self.q} random effects, model expects {spec.q}")
        if self.sigma_e.shape[0] != spec.n_strata:
            raise DimensionError(
                f"{self.sigma_e.shape[0]} residual SDs, model expects {spec.n_strata}"
            )
        if (self.form is CovarianceForm.CORRELATION) != (spec.cov_form is CovarianceForm.CORRELATION):
            raise InvalidParameterError("parameter and model covariance forms disagree")


# ---------------------------------------------------------------------------
# Constrained <-> unconstrained mapping
# ---------------------------------------------------------------------------


def n_free_params(spec):
    if spec.cov_form is CovarianceForm.CORRELATION:
        return spec.p + 3 + spec.n_strata
    return spec.p + spec.q * (spec.q + 1) // 2 + spec.n_strata


def theta_to_vector(theta):
    """Map a valid Theta to the unconstrained optimization vector.

    Cholesky entries and residual SDs are passed through as raw values (the
    inverse map reflects negatives back); the correlation is atanh-mapped.
    """
    if theta.form is CovarianceForm.CHOLESKY:
        tri = theta.chol[np.tril_indices(theta.q)]
        return np.concatenate([theta.beta, tri, theta.sigma_e])
    sd = np.sqrt(theta.variances)
    z = math.atanh(theta.rho)
    return np.concatenate([theta.beta, sd, [z], theta.sigma_e])


def theta_from_vector(vec, spec):
    """Inverse of :func:`theta_to_vector`; reflection maps signs away."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape[0] != n_free_params(spec):
        raise DimensionError(f"vector has {vec.shape[0]} entries, expected {n_free_params(spec)}")
    beta = vec[: spec.p]
    if spec.cov_form is CovarianceForm.CORRELATION:
        sd1, sd2, z = vec[spec.p : spec.p + 3]
        sigma_e = np.abs(vec[spec.p + 3 :])
        return Theta.from_correlation(beta, sd1 * sd1, sd2 * sd2, math.tanh(z), sigma_e)
    k = spec.q * (spec.q + 1) // 2
    chol = np.zeros((spec.q, spec.q))
    chol[np.tril_indices(spec.q)] = vec[spec.p : spec.p + k]
    diag = np.abs(np.diag(chol))
    np.fill_diagonal(chol, diag)
    sigma_e = np.abs(vec[spec.p + k :])
    return Theta.from_cholesky(beta, chol, sigma_e)


def natural_names(spec):
    """Names of the natural-scale parameters, reporting order."""
    names = list(spec.fixed_names)
    rn = spec.random_names
    for i in range(spec.q):
        for j in range(i + 1):
            if i == j:
                names.append(f"var_{rn[i]}")
            else:
                names.append(f"cov_{rn[j]}_{rn[i]}")
    for s in range(spec.n_strata):
        suffix = f"_{s + 1}" if spec.n_strata > 1 else ""
        names.append(f"sd_residual{suffix}")
    for s in range(spec.n_strata):
        suffix = f"_{s + 1}" if spec.n_strata > 1 else ""
        names.append(f"var_residual{suffix}")
    return tuple(names)


def natural_values(theta):
    """Natural-scale values matching :func:`natural_names`.

    Covariance entries are reported as variances/covariances; the residual
    scale is reported both as SD and as variance.
    """
    g = theta.g_matrix()
    tri = g[np.tril_indices(g.shape[0])]
    return np.concatenate([theta.beta, tri, theta.sigma_e, theta.sigma_e ** 2])


def natural_from_vector(vec, spec):
    return natural_values(theta_from_vector(vec, spec))


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------


def marginal_moments(subject, spec, theta):
    """Marginal mean X beta and covariance Z G Z^T + R of one subject."""
    theta.validate_for(spec)
    x, z = build_designs(subject, spec)
    mu = x @ theta.beta
    strata = np.array([o.marker - 1 for o in subject.observations])
    if np.any(strata >= spec.n_strata):
        raise DimensionError("marker index exceeds the number of residual strata")
    resid_var = theta.sigma_e[strata] ** 2
    v = z @ theta.g_matrix() @ z.T + np.diag(resid_var)
    return mu, v


def conditional_moments(mu, v, obs_idx, cens_idx, y_obs):
    """Gaussian conditional moments of the censored block given the observed one."""
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    obs_idx = np.asarray(obs_idx, dtype=int)
    cens_idx = np.asarray(cens_idx, dtype=int)
    y_obs = np.asarray(y_obs, dtype=float)
    if obs_idx.size == 0:
        raise ValueError("conditioning requires at least one observed measure")
    v_oo = v[np.ix_(obs_idx, obs_idx)]
    v_co = v[np.ix_(cens_idx, obs_idx)]
    v_cc = v[np.ix_(cens_idx, cens_idx)]
    try:
        solve = cho_factor(v_oo, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("observed-block covariance is singular") from exc
    gain = cho_solve(solve, v_co.T).T
    mu_c = mu[cens_idx] + gain @ (y_obs - mu[obs_idx])
    v_c = v_cc - gain @ v_co.T
    v_c = 0.5 * (v_c + v_c.T)
    return mu_c, v_c


@dataclass(frozen=True)
class LogLikOptions:
    """Evaluation settings shared by the likelihood paths."""

    method: Method = Method.MARGINAL
    mvn_tol: float = 1e-6
    gh_order: int = 10
    qtol: float = 1e-6
    adapt_gh_order: bool = True
    seed: int = 0
    threads: int = 1
    mvn_fixed_points: bool = False

    def __post_init__(self):
        if self.mvn_tol <= 0 or self.gh_order < 1:
            raise ValueError("tolerances must be positive and gh_order at least 1")


def _logpdf_from_chol(resid, chol_fac):
    z = cho_solve(chol_fac, resid)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol_fac[0]))))
    return -0.5 * float(resid @ z) - 0.5 * logdet - 0.5 * resid.shape[0] * _LOG_2PI


class LikelihoodEvaluator:
    """Precomputes per-subject designs and evaluates any of the three paths.

    Designs depend only on the data and model, so one evaluator can serve
    every objective evaluation of a fit.  Per-subject contributions are
    independent; with ``threads > 1`` they are mapped over a thread pool and
    reduced in dataset order, so totals do not depend on the thread count.
    """

    def __init__(self, dataset, spec, options=LogLikOptions()):
        self.spec = spec
        self.options = options
        self.subjects = []
        for subject in dataset.subjects:
            x, z = build_designs(subject, spec)
            obs_idx, cens_idx = partition_subject(subject)
            strata = np.array([o.marker - 1 for o in subject.observations], dtype=int)
            if np.any(strata >= spec.n_strata):
                raise DimensionError(
                    f"subject {subject.subject_id}: marker exceeds residual strata"
                )
            y = np.array([o.response for o in subject.observations])
            thresholds = np.array([subject.observations[i].threshold for i in cens_idx])
            self.subjects.append(
                dict(
                    sid=subject.subject_id,
                    x=x,
                    z=z,
                    y=y,
                    obs=np.array(obs_idx, dtype=int),
                    cens=np.array(cens_idx, dtype=int),
                    thresholds=thresholds,
                    strata=strata,
                )
            )

    # -- shared helpers -----------------------------------------------------

    def _check(self, theta):
        theta.validate_for(self.spec)
        if np.any(theta.sigma_e <= 0.0):
            raise InvalidParameterError("residual SD must be strictly positive")

    def _sum(self, contribution, theta):
        subjects = self.subjects
        if self.options.threads > 1:
            with ThreadPoolExecutor(max_workers=self.options.threads) as pool:
                parts = list(pool.map(lambda s: contribution(s, theta), subjects))
        else:
            parts = [contribution(s, theta) for s in subjects]
        return float(np.sum(parts))

    def _moments(self, rec, theta):
        mu = rec["x"] @ theta.beta
        resid_var = theta.sigma_e[rec["strata"]] ** 2
        v = rec["z"] @ theta.g_matrix() @ rec["z"].T + np.diag(resid_var)
        return mu, v

    def _rect_log_prob(self, mean, cov, upper, sid):
        m = mean.shape[0]
        if m > MAX_DIM:
            raise EvaluationError(
                f"subject {sid}: {m} censored measures exceed the supported {MAX_DIM}",
                subject_id=sid,
            )
        fixed = None
        if self.options.mvn_fixed_points and m >= 2:
            fixed = FIT_POINTS.get(m, FIT_POINTS_DEFAULT)
        problem = MvnProblem(
            mean=mean,
            cov=cov,
            upper=upper,
            tol=self.options.mvn_tol,
            rel_tol=self.options.mvn_tol,
            fixed_points=fixed,
        )
        return mvn_rect_prob(problem, seed=self.options.seed).log_value

    # -- marginal path ------------------------------------------------------

    def _marginal_subject(self, rec, theta):
        mu, v = self._moments(rec, theta)
        obs, cens = rec["obs"], rec["cens"]
        total = 0.0
        try:
            if obs.size:
                v_oo = v[np.ix_(obs, obs)]
                fac = cho_factor(v_oo, lower=True)
                total += _logpdf_from_chol(rec["y"][obs] - mu[obs], fac)
            if cens.size:
                if obs.size:
                    mu_c, v_c = conditional_moments(mu, v, obs, cens, rec["y"][obs])
                else:
                    mu_c, v_c = mu[cens], v[np.ix_(cens, cens)]
                total += self._rect_log_prob(mu_c, v_c, rec["thresholds"], rec["sid"])
        except (np.linalg.LinAlgError, NotPositiveDefiniteError, DimensionError) as exc:
            raise EvaluationError(
                f"subject {rec['sid']}: {exc}", subject_id=rec["sid"]
            ) from exc
        return total

    def marginal(self, theta):
        self._check(theta)
        return self._sum(self._marginal_subject, theta)

    # -- hierarchical path --------------------------------------------------

    @staticmethod
    def _reduced_factor(g):
        """Map u = A v with v ~ N(0, I_r) spanning the (possibly deficient) G."""
        vals, vecs = np.linalg.eigh(g)
        scale = float(vals.max()) if vals.size else 0.0
        keep = vals > max(1e-12, 1e-12 * scale)
        return vecs[:, keep] * np.sqrt(vals[keep])

    def _agq_subject(self, rec, theta, order):
        g = theta.g_matrix()
        a = self._reduced_factor(g)
        r = a.shape[1]
        obs, cens = rec["obs"], rec["cens"]
        sde = theta.sigma_e[rec["strata"]]
        mu = rec["x"] @ theta.beta
        y_star = rec["y"].copy()
        if cens.size:
            y_star[cens] = rec["thresholds"]

        resid_obs = (rec["y"][obs] - mu[obs]) / sde[obs]
        obs_const = -0.5 * float(resid_obs.size) * _LOG_2PI - float(np.sum(np.log(sde[obs])))

        if r == 0:
            total = obs_const - 0.5 * float(resid_obs @ resid_obs)
            if cens.size:
                total += float(np.sum(log_ndtr((rec["thresholds"] - mu[cens]) / sde[cens])))
            return total

        m_all = rec["z"] @ a
        m_obs, m_cens = m_all[obs], m_all[cens]
        d_obs = rec["y"][obs] - mu[obs]
        d_cens = rec["thresholds"] - mu[cens] if cens.size else np.empty(0)
        s_obs, s_cens = sde[obs], sde[cens]
        prior_const = -0.5 * r * _LOG_2PI

        def logint(v):
            v = np.atleast_2d(v)
            lin_obs = v @ m_obs.T
            res = (d_obs[None, :] - lin_obs) / s_obs[None, :]
            out = obs_const - 0.5 * np.sum(res * res, axis=1)
            if cens.size:
                zc = (d_cens[None, :] - v @ m_cens.T) / s_cens[None, :]
                out = out + np.sum(log_ndtr(zc), axis=1)
            out = out + prior_const - 0.5 * np.sum(v * v, axis=1)
            return out

        # empirical-Bayes start: G Z^T V^{-1} (y* - mu), whitened
        v_marg = rec["z"] @ g @ rec["z"].T + np.diag(sde ** 2)
        u0 = g @ rec["z"].T @ np.linalg.solve(v_marg, y_star - mu)
        v0, *_ = np.linalg.lstsq(a, u0, rcond=None)

        try:
            return agq_log_integral(logint, r, order, v0)
        except (ModeSearchError, CensLmmError) as exc:
            raise EvaluationError(
                f"subject {rec['sid']}: {exc}", subject_id=rec["sid"]
            ) from exc

    def _agq_total(self, theta, order):
        return self._sum(lambda rec, th: self._agq_subject(rec, th, order), theta)

    def agq(self, theta, order=None):
        """Hierarchical-path total; ``order`` pins the quadrature order.

        Without an explicit order, the order starts at the configured default
        and doubles (up to a per-dimension cap) until the total changes by
        less than ``qtol``, and the most accurate evaluation is returned.
        """
        self._check(theta)
        if order is not None:
            return self._agq_total(theta, order)
        opts = self.options
        if not opts.adapt_gh_order or opts.qtol <= 0.0:
            return self._agq_total(theta, opts.gh_order)
        cap = max_agq_order(self.spec.q)
        k = min(opts.gh_order, cap)
        total = self._agq_total(theta, k)
        while 2 * k <= cap:
            k = 2 * k
            doubled = self._agq_total(theta, k)
            if abs(doubled - total) < opts.qtol:
                return doubled
            total = doubled
        if k < cap:
            total = self._agq_total(theta, cap)
        return total

    # -- threshold-imputation baseline ---------------------------------------

    def _naive_subject(self, rec, theta):
        mu, v = self._moments(rec, theta)
        y_star = rec["y"].copy()
        if rec["cens"].size:
            y_star[rec["cens"]] = rec["thresholds"]
        try:
            fac = cho_factor(v, lower=True)
        except np.linalg.LinAlgError as exc:
            raise EvaluationError(
                f"subject {rec['sid']}: marginal covariance not positive definite",
                subject_id=rec["sid"],
            ) from exc
        return _logpdf_from_chol(y_star - mu, fac)

    def naive(self, theta):
        self._check(theta)
        return self._sum(self._naive_subject, theta)


def loglik_marginal(dataset, spec, theta, options=LogLikOptions()):
    """Total log-likelihood via the observed-measures formulation."""
    return LikelihoodEvaluator(dataset, spec, options).marginal(theta)


def loglik_agq(dataset, spec, theta, options=LogLikOptions()):
    """Total log-likelihood via random-effects integration (fixed order)."""
    return LikelihoodEvaluator(dataset, spec, options).agq(theta)


def loglik_naive(dataset, spec, theta, options=LogLikOptions()):
    """Threshold-imputation baseline: censored responses treated as observed."""
    return LikelihoodEvaluator(dataset, spec, options).naive(theta)
