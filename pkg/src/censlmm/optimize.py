"""Likelihood maximization and standard errors.

Two ascent drivers share a stopping rule (relative function change below
``f_tol`` and gradient norm below ``g_tol``): a Marquardt iteration that
inflates the diagonal of the finite-difference Hessian, and a BFGS
quasi-Newton iteration with backtracking line search.  ``fit_model`` wires
them to the likelihood paths, starting from the threshold-imputation fit as
in the reference analysis workflow, and derives natural-scale standard
errors from the inverse observed information by the delta method.
"""

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import CensLmmError, GradientError, OptimizationStall
from .likelihood import (
    LikelihoodEvaluator,
    LogLikOptions,
    Method,
    Theta,
    max_agq_order,
    natural_from_vector,
    natural_names,
    theta_from_vector,
    theta_to_vector,
)
from .quadrature import choose_order

_EPS = np.finfo(float).eps


class Algorithm(Enum):
    MARQUARDT = "marquardt"
    QUASI_NEWTON = "bfgs"


class FdMode(Enum):
    FORWARD = "forward"
    CENTRAL = "central"


@dataclass(frozen=True)
class OptConfig:
    """Optimizer settings; ``start`` overrides the default warm start."""

    algorithm: Algorithm = Algorithm.QUASI_NEWTON
    max_iter: int = 200
    f_tol: float = 1e-8
    g_tol: float = 1e-5
    fd_mode: FdMode = FdMode.CENTRAL
    fd_step: float | None = None
    start: object = None
    compute_se: bool = True

    def __post_init__(self):
        if self.max_iter < 1 or self.f_tol <= 0 or self.g_tol <= 0:
            raise ValueError("max_iter must be >= 1 and tolerances positive")


@dataclass
class Trace:
    """Iteration log of one maximization."""

    f_values: list = field(default_factory=list)
    gradient_norms: list = field(default_factory=list)
    n_evals: int = 0
    converged: bool = False
    stop_reason: str = ""

    @property
    def iterations(self):
        return len(self.f_values)


def _fd_steps(x, cfg):
    rel = cfg.fd_step
    if rel is None:
        rel = 6e-6 if cfg.fd_mode is FdMode.CENTRAL else 1e-7
    return rel * np.maximum(1.0, np.abs(x))


def fd_gradient(f, x, cfg=OptConfig()):
    """Forward or central finite-difference gradient of ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    h = _fd_steps(x, cfg)
    grad = np.empty(x.shape[0])
    if cfg.fd_mode is FdMode.FORWARD:
        f0 = f(x)
        if not np.isfinite(f0):
            raise GradientError("objective not finite at the evaluation point")
        for k in range(x.shape[0]):
            xp = x.copy()
            xp[k] += h[k]
            fp = f(xp)
            if not np.isfinite(fp):
                raise GradientError(f"objective not finite at probe of coordinate {k}", coordinate=k)
            grad[k] = (fp - f0) / h[k]
    else:
        for k in range(x.shape[0]):
            xp, xm = x.copy(), x.copy()
            xp[k] += h[k]
            xm[k] -= h[k]
            fp, fm = f(xp), f(xm)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientError(f"objective not finite at probe of coordinate {k}", coordinate=k)
            grad[k] = (fp - fm) / (2.0 * h[k])
    return grad


def fd_hessian(f, x, rel_step=1e-3):
    """Central finite-difference Hessian from function values only."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    h = rel_step * np.maximum(1.0, np.abs(x))
    f0 = f(x)
    hess = np.empty((n, n))
    fp = np.empty(n)
    fm = np.empty(n)
    for i in range(n):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        fp[i], fm[i] = f(xp), f(xm)
        hess[i, i] = (fp[i] - 2.0 * f0 + fm[i]) / h[i] ** 2
    for i in range(n):
        for j in range(i + 1, n):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[[i, j]] += h[[i, j]]
            xmm[[i, j]] -= h[[i, j]]
            xpm[i] += h[i]
            xpm[j] -= h[j]
            xmp[i] -= h[i]
            xmp[j] += h[j]
            hess[i, j] = hess[j, i] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * h[i] * h[j])
    if not np.all(np.isfinite(hess)):
        raise GradientError("Hessian probe hit a non-finite objective value")
    return hess


def _rel_change(f_new, f_old):
    return abs(f_new - f_old) / max(1.0, abs(f_new), abs(f_old))


def marquardt_maximize(f, cfg=OptConfig()):
    """Maximize ``f`` by damped Newton steps on the finite-difference Hessian.

    The damping factor multiplies the (magnitude-clamped) Hessian diagonal;
    it shrinks tenfold after an accepted step and grows tenfold after a
    rejected one.  Raises OptimizationStall when the damping overflows with
    no improving step.
    """
    x = np.asarray(cfg.start, dtype=float).copy()
    trace = Trace()
    f0 = f(x)
    trace.n_evals += 1
    if not np.isfinite(f0):
        raise OptimizationStall("objective not finite at the start", best_x=x, best_f=f0, trace=trace)

    lam = 1e-3
    rel = math.inf
    for _ in range(cfg.max_iter):
        grad = fd_gradient(f, x, cfg)
        trace.n_evals += 2 * x.shape[0] if cfg.fd_mode is FdMode.CENTRAL else x.shape[0] + 1
        gnorm = float(np.linalg.norm(grad))
        trace.f_values.append(f0)
        trace.gradient_norms.append(gnorm)
        if gnorm <= cfg.g_tol and rel <= cfg.f_tol:
            trace.converged = True
            trace.stop_reason = "function change and gradient norm below tolerance"
            return x, trace

        hess_neg = -fd_hessian(lambda z: f(z), x)
        trace.n_evals += 2 * x.shape[0] ** 2 + 1
        damp = np.maximum(np.abs(np.diag(hess_neg)), 1e-8)

        accepted = False
        while lam <= 1e12:
            try:
                step = np.linalg.solve(hess_neg + lam * np.diag(damp), grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = x + step
            f_new = f(cand)
            trace.n_evals += 1
            if np.isfinite(f_new) and f_new > f0:
                rel = _rel_change(f_new, f0)
                x, f0 = cand, f_new
                lam = max(lam * 0.1, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            raise OptimizationStall(
                "damping overflow without an improving step",
                best_x=x, best_f=f0, trace=trace,
            )

    trace.stop_reason = "iteration limit reached"
    return x, trace


def quasi_newton_maximize(f, cfg=OptConfig()):
    """Maximize ``f`` by BFGS with a backtracking (sufficient-increase) search.

    The inverse Hessian approximation is updated only when the curvature
    condition holds; the search direction falls back to the gradient when the
    approximation loses ascent.  Raises OptimizationStall when 50 halvings
    find no acceptable step.
    """
    x = np.asarray(cfg.start, dtype=float).copy()
    n = x.shape[0]
    trace = Trace()
    f0 = f(x)
    trace.n_evals += 1
    if not np.isfinite(f0):
        raise OptimizationStall("objective not finite at the start", best_x=x, best_f=f0, trace=trace)
    grad = fd_gradient(f, x, cfg)
    trace.n_evals += 2 * n if cfg.fd_mode is FdMode.CENTRAL else n + 1

    b_inv = np.eye(n)
    rel = math.inf
    for _ in range(cfg.max_iter):
        gnorm = float(np.linalg.norm(grad))
        trace.f_values.append(f0)
        trace.gradient_norms.append(gnorm)
        if gnorm <= cfg.g_tol and rel <= cfg.f_tol:
            trace.converged = True
            trace.stop_reason = "function change and gradient norm below tolerance"
            return x, trace

        direction = b_inv @ grad
        slope = float(grad @ direction)
        if slope <= 0.0 or not np.all(np.isfinite(direction)):
            b_inv = np.eye(n)
            direction = grad
            slope = float(grad @ grad)

        t = 1.0
        f_new = -math.inf
        cand = x
        for _ in range(50):
            cand = x + t * direction
            f_new = f(cand)
            trace.n_evals += 1
            if np.isfinite(f_new) and f_new >= f0 + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            raise OptimizationStall(
                f"line search failed after 50 halvings (gradient norm {gnorm:.3e})",
                best_x=x, best_f=f0, trace=trace,
            )

        grad_new = fd_gradient(f, cand, cfg)
        trace.n_evals += 2 * n if cfg.fd_mode is FdMode.CENTRAL else n + 1
        s = cand - x
        y = grad - grad_new  # gradient change of the negated objective
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            rho = 1.0 / sy
            sy_outer = np.outer(s, y)
            b_inv = (np.eye(n) - rho * sy_outer) @ b_inv @ (np.eye(n) - rho * sy_outer.T)
            b_inv += rho * np.outer(s, s)
        rel = _rel_change(f_new, f0)
        x, f0, grad = cand, f_new, grad_new

    trace.stop_reason = "iteration limit reached"
    return x, trace


_MAXIMIZERS = {
    Algorithm.MARQUARDT: marquardt_maximize,
    Algorithm.QUASI_NEWTON: quasi_newton_maximize,
}


@dataclass(frozen=True)
class FitResult:
    """Estimates, SEs and diagnostics of one maximum-likelihood fit."""

    theta_hat: Theta
    param_names: tuple
    estimates: np.ndarray
    se: np.ndarray | None
    loglik: float
    converged: bool
    iterations: int
    gradient_norm: float
    hessian_ok: bool
    method: Method
    gh_order_used: int | None = None
    trace: Trace | None = None

    def as_dict(self):
        out = {"method": self.method.value, "loglik": self.loglik,
               "converged": self.converged, "iterations": self.iterations,
               "gradient_norm": self.gradient_norm, "hessian_ok": self.hessian_ok}
        if self.gh_order_used is not None:
            out["gh_order"] = self.gh_order_used
        for i, name in enumerate(self.param_names):
            out[f"est.{name}"] = float(self.estimates[i])
            if self.se is not None:
                out[f"se.{name}"] = float(self.se[i])
        return out


def moment_start(dataset, spec):
    """Crude starting values: pooled least squares plus an even variance split."""
    rows, ys = [], []
    for subject in dataset.subjects:
        for obs in subject.observations:
            rows.append(spec.fixed_design(obs))
            ys.append(obs.response if obs.is_observed else obs.threshold)
    x = np.array(rows, dtype=float)
    y = np.array(ys, dtype=float)
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    dof = max(1, y.shape[0] - spec.p)
    s2 = float(np.sum((y - x @ beta) ** 2)) / dof
    s2 = max(s2, 1e-4)
    sigma_e = np.full(spec.n_strata, math.sqrt(s2 / 2.0))
    from .data import CovarianceForm

    if spec.cov_form is CovarianceForm.CORRELATION:
        return Theta.from_correlation(beta, s2 / 2.0, s2 / 2.0, 0.0, sigma_e)
    chol = math.sqrt(s2 / 2.0) * np.eye(spec.q)
    return Theta.from_cholesky(beta, chol, sigma_e)


def _wrap_objective(evaluate):
    def objective(x):
        try:
            return evaluate(x)
        except CensLmmError:
            return -math.inf
    return objective


def _maximize(objective, x0, cfg):
    runner = _MAXIMIZERS[cfg.algorithm]
    run_cfg = replace(cfg, start=np.asarray(x0, dtype=float))
    try:
        x_hat, trace = runner(objective, run_cfg)
    except OptimizationStall as stall:
        return np.asarray(stall.best_x, dtype=float), stall.trace, False
    return x_hat, trace, trace.converged


def fit_model(dataset, spec, llopt=LogLikOptions(), cfg=OptConfig()):
    """Maximum-likelihood fit of the selected formulation.

    Unless ``cfg.start`` provides a Theta, the threshold-imputation fit is
    run first and its optimum seeds the censoring-aware optimization.  The
    likelihood is optimized over the unconstrained parameterization; the
    quasi-random rectangle rule runs with fixed point counts so the objective
    is smooth.  Standard errors are delta-method images of the inverse
    observed information (central finite differences at the optimum).
    """
    ev = LikelihoodEvaluator(dataset, spec, replace(llopt, mvn_fixed_points=True))

    evaluators = {
        Method.MARGINAL: ev.marginal,
        Method.AGQ: ev.agq,
        Method.NAIVE: ev.naive,
    }

    if cfg.start is not None:
        start_theta = cfg.start
    elif llopt.method is Method.NAIVE:
        start_theta = moment_start(dataset, spec)
    else:
        x0 = theta_to_vector(moment_start(dataset, spec))
        naive_obj = _wrap_objective(lambda x: ev.naive(theta_from_vector(x, spec)))
        x_naive, _, _ = _maximize(naive_obj, x0, replace(cfg, start=None))
        start_theta = theta_from_vector(x_naive, spec)

    gh_order = None
    if llopt.method is Method.AGQ:
        gh_order = llopt.gh_order
        if llopt.adapt_gh_order and llopt.qtol > 0:
            cap = max(llopt.gh_order, max_agq_order(spec.q))
            gh_order = choose_order(
                lambda k: ev.agq(start_theta, order=k),
                start_order=llopt.gh_order,
                qtol=llopt.qtol,
                max_order=cap,
            )
        target = lambda th, k=gh_order: ev.agq(th, order=k)
    else:
        target = evaluators[llopt.method]

    objective = _wrap_objective(lambda x: target(theta_from_vector(x, spec)))
    x_start = theta_to_vector(start_theta)
    if not np.isfinite(objective(x_start)):
        raise OptimizationStall("objective not finite at the starting parameters",
                                best_x=x_start, best_f=-math.inf)

    x_hat, trace, converged = _maximize(objective, x_start, cfg)
    loglik = objective(x_hat)
    theta_hat = theta_from_vector(x_hat, spec)

    names = natural_names(spec)
    estimates = natural_from_vector(x_hat, spec)
    se = None
    hessian_ok = False
    if cfg.compute_se:
        try:
            info = -fd_hessian(objective, x_hat)
            chol = np.linalg.cholesky(info)
            inv_chol = np.linalg.inv(chol)
            cov_u = inv_chol.T @ inv_chol
            cov_u = 0.5 * (cov_u + cov_u.T)
            jac = _natural_jacobian(x_hat, spec)
            cov_nat = jac @ cov_u @ jac.T
            diag = np.diag(cov_nat)
            if np.all(diag >= 0.0):
                se = np.sqrt(diag)
                hessian_ok = True
        except (np.linalg.LinAlgError, GradientError):
            se = None
            hessian_ok = False

    grad_norm = trace.gradient_norms[-1] if trace and trace.gradient_norms else math.nan
    return FitResult(
        theta_hat=theta_hat,
        param_names=names,
        estimates=estimates,
        se=se,
        loglik=loglik,
        converged=converged,
        iterations=trace.iterations if trace else 0,
        gradient_norm=grad_norm,
        hessian_ok=hessian_ok,
        method=llopt.method,
        gh_order_used=gh_order,
        trace=trace,
    )


def _natural_jacobian(x, spec, rel_step=1e-6):
    """Central-difference Jacobian of the natural-scale map at ``x``."""
    x = np.asarray(x, dtype=float)
    h = rel_step * np.maximum(1.0, np.abs(x))
    cols = []
    for k in range(x.shape[0]):
        xp, xm = x.copy(), x.copy()
        xp[k] += h[k]
        xm[k] -= h[k]
        cols.append((natural_from_vector(xp, spec) - natural_from_vector(xm, spec)) / (2.0 * h[k]))
    return np.stack(cols, axis=1)
