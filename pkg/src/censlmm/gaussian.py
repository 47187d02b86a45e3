"""Normal-distribution primitives: densities, CDFs and rectangle probabilities.

The rectangle probability Pr(Y <= upper) for Y ~ N(mean, cov) over a
lower-infinite box is computed with the Genz approach: a variable-reordered
Cholesky factorization transforms the integral to the unit cube, which is then
evaluated with randomized (scrambled Sobol) quasi-Monte Carlo.  Independent
scramblings give an error estimate; the number of points is doubled until the
requested tolerance is met or the evaluation budget runs out.  Point sets are
derived from the configured seed and the problem dimension only, so repeated
calls are reproducible and the estimate varies smoothly with the problem's
moments.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr, ndtr, ndtri
from scipy.stats import qmc

from .errors import DimensionError, NotPositiveDefiniteError

MAX_DIM = 10
VARIANCE_FLOOR = 1e-12

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_N_SCRAMBLES = 10
_TINY_P = 1e-300
_CACHE_POINT_LIMIT = 2 ** 13


def std_normal_pdf(x):
    """Standard normal density phi(x) = exp(-x^2/2)/sqrt(2*pi)."""
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x - _LOG_SQRT_2PI)
    return float(out) if out.ndim == 0 else out


def log_std_normal_pdf(x):
    """log phi(x), safe for large |x|."""
    x = np.asarray(x, dtype=float)
    out = -0.5 * x * x - _LOG_SQRT_2PI
    return float(out) if out.ndim == 0 else out


def std_normal_cdf(x):
    """Standard normal CDF Phi(x); accepts +-inf."""
    out = ndtr(np.asarray(x, dtype=float))
    return float(out) if out.ndim == 0 else out


def log_std_normal_cdf(x):
    """log Phi(x) without underflow in the left tail."""
    out = log_ndtr(np.asarray(x, dtype=float))
    return float(out) if out.ndim == 0 else out


def std_normal_icdf(p):
    """Inverse standard normal CDF."""
    out = ndtri(np.asarray(p, dtype=float))
    return float(out) if out.ndim == 0 else out


def mvn_logpdf(y, mean, cov):
    """Log density of N(mean, cov) at y via Cholesky factorization."""
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = y.shape[0]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"covariance of dimension {n} is not positive definite") from exc
    z = solve_triangular(chol, y - mean, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (z @ z) - 0.5 * logdet - n * _LOG_SQRT_2PI)


@dataclass(frozen=True)
class MvnProblem:
    """A lower-infinite rectangle probability problem.

    Pr(Y_1 <= upper_1, ..., Y_m <= upper_m) for Y ~ N(mean, cov); all lower
    limits are -inf.  ``tol`` is the requested absolute error and ``rel_tol``
    an additional relative target (both must be met before sampling stops,
    budget permitting).  When ``fixed_points`` is set, exactly that many
    quasi-random points per scramble are used with no adaptive escalation;
    likelihood evaluation relies on this to keep the objective a smooth
    function of the model parameters.
    """

    mean: np.ndarray
    cov: np.ndarray
    upper: np.ndarray
    tol: float = 1e-6
    rel_tol: float = 1e-6
    max_evals: int = 1_000_000
    fixed_points: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=float)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, dtype=float)))

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass(frozen=True)
class ProbResult:
    """Estimated probability with error estimate and cost accounting."""

    value: float
    err_est: float
    evals: int
    log_value: float
    budget_exhausted: bool = False


def _validate(problem):
    m = problem.dim
    if m < 1:
        raise DimensionError("empty problem")
    if m > MAX_DIM:
        raise DimensionError(f"dimension {m} exceeds the supported maximum of {MAX_DIM}")
    if problem.cov.shape != (m, m) or problem.upper.shape != (m,):
        raise DimensionError("mean, cov and upper dimensions do not match")
    if problem.tol <= 0.0:
        raise ValueError("tol must be positive")
    if not np.allclose(problem.cov, problem.cov.T, rtol=1e-8, atol=1e-12):
        raise NotPositiveDefiniteError("covariance is not symmetric")
    variances = np.diag(problem.cov)
    if np.any(variances < VARIANCE_FLOOR):
        raise NotPositiveDefiniteError(
            f"a variance fell below the floor {VARIANCE_FLOOR:g}; refusing to regularize"
        )


def _ordered_cholesky(cov, b):
    """Cholesky factor of a permuted covariance, most restrictive variable first.

    At each elimination step the remaining variable with the smallest
    conditional probability is pivoted in (Genz's ordering), using the
    truncated-normal expectation of the already-factored coordinates as a
    proxy for the integration variables.
    Returns the lower-triangular factor and the permuted limits.
    """
    m = b.shape[0]
    a = cov.copy()
    b = b.copy()
    chol = np.zeros((m, m))
    y = np.zeros(m)
    for k in range(m):
        best, best_p = k, np.inf
        for i in range(k, m):
            var_i = a[i, i] - chol[i, :k] @ chol[i, :k]
            if var_i <= 0.0:
                continue
            s = math.sqrt(var_i)
            p = ndtr((b[i] - chol[i, :k] @ y[:k]) / s)
            if p < best_p:
                best, best_p = i, p
        if best != k:
            a[[k, best], :] = a[[best, k], :]
            a[:, [k, best]] = a[:, [best, k]]
            chol[[k, best], :k] = chol[[best, k], :k]
            b[[k, best]] = b[[best, k]]
        var_k = a[k, k] - chol[k, :k] @ chol[k, :k]
        if var_k <= 0.0:
            raise NotPositiveDefiniteError("covariance is not positive definite")
        ckk = math.sqrt(var_k)
        chol[k, k] = ckk
        for i in range(k + 1, m):
            chol[i, k] = (a[i, k] - chol[i, :k] @ chol[k, :k]) / ckk
        alpha = (b[k] - chol[k, :k] @ y[:k]) / ckk
        p = max(ndtr(alpha), _TINY_P)
        y[k] = -std_normal_pdf(alpha) / p
    return chol, b


def _make_points(seed, dim, n_points, n_scrambles):
    out = np.empty((n_scrambles, n_points, dim))
    for s in range(n_scrambles):
        rng = np.random.default_rng([seed, dim, n_points, s])
        engine = qmc.Sobol(d=dim, scramble=True, seed=rng)
        out[s] = engine.random_base2(int(math.log2(n_points)))
    return out


@lru_cache(maxsize=16)
def _cached_points(seed, dim, n_points, n_scrambles):
    return _make_points(seed, dim, n_points, n_scrambles)


def _point_sets(seed, dim, n_points, n_scrambles):
    """Scrambled Sobol points, cached for the sizes the fit path hits."""
    if n_points <= _CACHE_POINT_LIMIT:
        return _cached_points(seed, dim, n_points, n_scrambles)
    return _make_points(seed, dim, n_points, n_scrambles)


def _transformed_means(chol, b, points):
    """Per-scramble means of the Genz-transformed integrand.

    Each uniform coordinate drives the chain y_i = Phi^{-1}(w_i * e_i) with
    e_i the conditional probability of the i-th (reordered) coordinate.  All
    scrambles are evaluated in one flattened pass.
    """
    m = b.shape[0]
    n_scrambles, n_points, _ = points.shape
    w = points.reshape(n_scrambles * n_points, m - 1)
    e1 = ndtr(b[0] / chol[0, 0])
    f = np.full(w.shape[0], e1)
    e_cur = f.copy()
    ys = np.empty((w.shape[0], m - 1))
    for i in range(1, m):
        ys[:, i - 1] = ndtri(np.clip(w[:, i - 1] * e_cur, _TINY_P, 1.0))
        e_cur = ndtr((b[i] - ys[:, :i] @ chol[i, :i]) / chol[i, i])
        f *= e_cur
    return f.reshape(n_scrambles, n_points).mean(axis=1)


def _summarize(means):
    value = float(means.mean())
    err = 3.0 * float(means.std(ddof=1)) / math.sqrt(means.shape[0])
    return value, err


def mvn_rect_prob(problem, seed=0):
    """Pr(Y <= upper) for Y ~ N(mean, cov) with all lower limits at -inf.

    Dimension 1 delegates to the scalar CDF exactly.  Higher dimensions use
    the transformed quasi-Monte Carlo rule; the returned ``err_est`` is three
    standard errors over the independent scramblings.  If the evaluation
    budget is exhausted before the tolerance is met, the best estimate is
    returned with ``budget_exhausted`` set.
    """
    _validate(problem)
    m = problem.dim
    b = problem.upper - problem.mean
    if m == 1:
        s = math.sqrt(problem.cov[0, 0])
        z = b[0] / s
        return ProbResult(
            value=float(ndtr(z)),
            err_est=1e-15,
            evals=1,
            log_value=float(log_ndtr(z)),
        )

    chol, b_perm = _ordered_cholesky(problem.cov, b)

    if problem.fixed_points is not None:
        n_points = int(problem.fixed_points)
        points = _point_sets(seed, m - 1, n_points, _N_SCRAMBLES)
        value, err = _summarize(_transformed_means(chol, b_perm, points))
        log_value = math.log(value) if value > 0.0 else -math.inf
        return ProbResult(value=value, err_est=err, evals=_N_SCRAMBLES * n_points,
                          log_value=log_value)

    n_points = 256 if m <= 3 else 512
    evals = 0
    value = err = np.nan
    while True:
        points = _point_sets(seed, m - 1, n_points, _N_SCRAMBLES)
        value, err = _summarize(_transformed_means(chol, b_perm, points))
        evals += _N_SCRAMBLES * n_points
        if err <= problem.tol and err <= problem.rel_tol * max(value, _TINY_P):
            break
        if evals + 2 * _N_SCRAMBLES * n_points > problem.max_evals:
            log_value = math.log(value) if value > 0.0 else -math.inf
            return ProbResult(value=value, err_est=err, evals=evals,
                              log_value=log_value, budget_exhausted=True)
        n_points *= 2

    log_value = math.log(value) if value > 0.0 else -math.inf
    return ProbResult(value=value, err_est=err, evals=evals, log_value=log_value)
