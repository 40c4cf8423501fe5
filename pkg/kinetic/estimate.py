"""
Contrast minimization over the parameter box.

The optimizer runs on the contrast divided by its number of summands, in
coordinates where the drift parameters are multiplied by sqrt(Delta). Both
blocks of the Hessian are then of order one.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from kinetic import constants
from kinetic.contrast import evaluate, prepare
from kinetic.exceptions import ArgumentError, KineticError, OptimizationError, RankError
from kinetic.rng import derive_seed


logger = logging.getLogger('kinetic.estimate')


@dataclass(frozen=True)
class OptimizerConfig:
    n_starts: int = 5
    gtol: float = 1e-8
    max_evals: int = 2000
    seed: int = 0
    threads: Optional[int] = None
    tie_tol: float = 1e-12
    polish_steps: int = 3

    def __post_init__(self):
        if self.n_starts < 1:
            raise ArgumentError(f'n_starts must be >= 1, got {self.n_starts}.')
        if self.max_evals < 1:
            raise ArgumentError(f'max_evals must be >= 1, got {self.max_evals}.')
        if self.polish_steps < 0:
            raise ArgumentError(f'polish_steps must be >= 0, got {self.polish_steps}.')


@dataclass(frozen=True)
class PlugInReport:
    sigma1: np.ndarray
    sigma2: np.ndarray
    mu_variance: np.ndarray
    sigma_variance: np.ndarray
    sigma_variance_factor: float
    invertible: bool


@dataclass
class EstimateReport:
    theta_hat: np.ndarray
    mode: str
    contrast_at_opt: float
    n_evals: int
    converged: bool
    on_boundary: bool
    p1: int
    plug_in: Optional[PlugInReport] = None
    normalized_errors: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)

    @property
    def mu_hat(self):
        return self.theta_hat[:self.p1]

    @property
    def sigma_hat(self):
        return self.theta_hat[self.p1:]

    @property
    def sigma_blocks(self):
        if self.plug_in is None:
            return None
        return self.plug_in.sigma1, self.plug_in.sigma2

    def to_record(self):
        """Flat key -> value mapping; arrays are spread over indexed keys."""
        record = {
            'mode': self.mode,
            'contrast_at_opt': self.contrast_at_opt,
            'n_evals': self.n_evals,
            'converged': self.converged,
            'on_boundary': self.on_boundary,
        }
        for k, value in enumerate(self.mu_hat):
            record[f'mu_hat_{k + 1}'] = float(value)
        for k, value in enumerate(self.sigma_hat):
            record[f'sigma_hat_{k + 1}'] = float(value)
        if self.normalized_errors is not None:
            for k, value in enumerate(self.normalized_errors[:self.p1]):
                record[f'err_mu_{k + 1}'] = float(value)
            for k, value in enumerate(self.normalized_errors[self.p1:]):
                record[f'err_sigma_{k + 1}'] = float(value)
        if self.plug_in is not None:
            record['invertible'] = self.plug_in.invertible
            for k, value in enumerate(np.diag(self.plug_in.mu_variance)):
                record[f'avar_mu_{k + 1}'] = float(value)
            for k, value in enumerate(np.diag(self.plug_in.sigma_variance)):
                record[f'avar_sigma_{k + 1}'] = float(value)
        return record

    def to_csv_row(self):
        return {key: int(value) if isinstance(value, bool) else value for key, value in self.to_record().items()}


class _ScaledContrast:
    """The contrast per summand, in scaled coordinates v = theta / scales."""

    def __init__(self, model, data):
        self.model = model
        self.data = data
        self.count = data.per_term_count
        self.scales = np.concatenate((np.full(model.p1, 1.0 / math.sqrt(data.delta)), np.ones(model.p2)))
        self.box = model.param_box
        self.lower = self.box.lower / self.scales
        self.upper = self.box.upper / self.scales
        self.n_evals = 0

    def theta(self, v):
        return np.clip(np.asarray(v, dtype=float) * self.scales, self.box.lower, self.box.upper)

    def __call__(self, v):
        self.n_evals += 1
        result = evaluate(self.model, self.theta(v), self.data)
        return result.value / self.count, result.grad * self.scales / self.count

    def value(self, v):
        self.n_evals += 1
        return evaluate(self.model, self.theta(v), self.data, with_grad=False).value / self.count

    def free(self, v, grad):
        """Coordinates not held at a bound by the sign of the gradient."""
        span = self.upper - self.lower
        at_lower = v <= self.lower + 1e-12 * span
        at_upper = v >= self.upper - 1e-12 * span
        return ~((at_lower & (grad > 0)) | (at_upper & (grad < 0)))

    def projected_gradient(self, v, grad):
        grad = np.asarray(grad, dtype=float)
        return float(np.max(np.abs(np.where(self.free(v, grad), grad, 0.0))))

    def hessian(self, v, grad, step=1e-6):
        """Differences of the analytic gradient, central inside the box and one-sided at its edges."""
        columns = []
        for k in range(len(v)):
            h = step * (1.0 + abs(v[k]))
            up, down = v.copy(), v.copy()
            up[k] += h
            down[k] -= h
            if up[k] <= self.upper[k] and down[k] >= self.lower[k]:
                columns.append((self(up)[1] - self(down)[1]) / (2 * h))
            elif up[k] <= self.upper[k]:
                columns.append((self(up)[1] - grad) / h)
            else:
                columns.append((grad - self(down)[1]) / h)
        hessian = np.column_stack(columns)
        return 0.5 * (hessian + hessian.T)


def _starts(box, cfg):
    rng = np.random.default_rng(derive_seed(cfg.seed, constants.STREAM.START))
    starts = [box.center]
    if cfg.n_starts > 1:
        starts.extend(box.sample(rng, cfg.n_starts - 1))
    return starts


def _stationary(objective, v, value, grad, cfg):
    return objective.projected_gradient(v, grad) < cfg.gtol * (1 + abs(value))


def _newton_polish(objective, v, value, grad, cfg):
    """
    Up to cfg.polish_steps Newton steps on the free coordinates. A step is
    kept only when it lowers the projected gradient without raising the
    contrast beyond rounding.
    """
    v = np.asarray(v, dtype=float)
    for _ in range(cfg.polish_steps):
        if _stationary(objective, v, value, grad, cfg):
            break
        free = objective.free(v, grad)
        try:
            hessian = objective.hessian(v, grad)[np.ix_(free, free)]
            trial = v.copy()
            trial[free] += np.linalg.solve(hessian, -grad[free])
            trial = np.clip(trial, objective.lower, objective.upper)
            trial_value, trial_grad = objective(trial)
        except (KineticError, np.linalg.LinAlgError):
            break
        if not np.isfinite(trial_value) or trial_value > value + 1e-12 * (1 + abs(value)):
            break
        if objective.projected_gradient(trial, trial_grad) >= objective.projected_gradient(v, grad):
            break
        v, value, grad = trial, trial_value, trial_grad
    return v, value, grad


def _run_start(model, data, theta_start, cfg):
    objective = _ScaledContrast(model, data)
    v0 = np.asarray(theta_start, dtype=float) / objective.scales
    bounds = list(zip(objective.lower, objective.upper))
    result = minimize(
        objective, v0, jac=True, method='L-BFGS-B', bounds=bounds,
        options=dict(maxfun=cfg.max_evals, maxiter=cfg.max_evals, ftol=1e-14, gtol=cfg.gtol),
    )
    # convergence is read from the projected gradient, never from result.success
    v_best, value, grad = _newton_polish(objective, result.x, *objective(result.x), cfg)
    converged = _stationary(objective, v_best, value, grad, cfg)
    used = 'L-BFGS-B'

    if not converged:
        logger.debug('L-BFGS-B stalled (%s), falling back to Nelder-Mead', result.message)
        fallback = minimize(
            objective.value, v_best, method='Nelder-Mead', bounds=bounds,
            options=dict(maxfev=cfg.max_evals, xatol=1e-10, fatol=1e-14),
        )
        if np.isfinite(fallback.fun) and fallback.fun < value:
            v_best, value, grad = _newton_polish(objective, fallback.x, *objective(fallback.x), cfg)
            converged = _stationary(objective, v_best, value, grad, cfg)
            used = 'Nelder-Mead'

    theta = objective.theta(v_best)
    return dict(theta=theta, value=value * objective.count, n_evals=objective.n_evals, converged=converged,
                method=used)


def _select(candidates, tie_tol):
    best = min(c['value'] for c in candidates)
    tied = [c for c in candidates if c['value'] - best <= tie_tol * (1 + abs(best))]
    return min(tied, key=lambda c: (float(np.linalg.norm(c['theta'])), tuple(c['theta'])))


def fit(model, obs, mode, opt_cfg=None, theta0=None, with_plug_in=True):
    """
    Minimizes the contrast of `mode` over the parameter box.

    Starts from the box center and n_starts - 1 uniform draws; each start runs
    L-BFGS-B with the analytic gradient and falls back to bounded Nelder-Mead
    when it does not converge. Among the terminal points the smallest contrast
    wins, ties going to the smallest norm, then lexicographic order.

    :param model [ModelSpec]: coefficient family.
    :param obs [ObservationSet]: data; partial mode reads positions only.
    :param mode [str]: constants.MODE value.
    :param opt_cfg [OptimizerConfig]: starts and tolerances.
    :param theta0 [Sequence[float]]: true parameter, when known, for normalized errors.
    """
    opt_cfg = opt_cfg or OptimizerConfig()
    min_intervals = 4 if mode == constants.MODE.PARTIAL else 1
    data = prepare(obs, mode, min_partial_intervals=min_intervals)
    starts = _starts(model.param_box, opt_cfg)

    def run(theta_start):
        try:
            return _run_start(model, data, theta_start, opt_cfg)
        except (KineticError, FloatingPointError, ValueError) as exc:
            logger.debug('start %s failed: %s', list(theta_start), exc)
            return dict(theta=np.asarray(theta_start), value=math.nan, error=str(exc), n_evals=0,
                        converged=False, method=None)

    if opt_cfg.threads and opt_cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=opt_cfg.threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(start) for start in starts]

    trace = [dict(start=list(map(float, s)), **{k: v for k, v in r.items() if k != 'theta'},
                  terminal=list(map(float, r['theta']))) for s, r in zip(starts, results)]
    candidates = [r for r in results if math.isfinite(r['value'])]
    if not candidates:
        raise OptimizationError('Every optimizer start failed.', trace=trace)

    best = _select(candidates, opt_cfg.tie_tol)
    theta_hat = best['theta']
    box = model.param_box
    report = EstimateReport(
        theta_hat=theta_hat,
        mode=mode,
        contrast_at_opt=best['value'],
        n_evals=sum(r['n_evals'] for r in results),
        converged=best['converged'],
        on_boundary=box.on_boundary(theta_hat),
        p1=model.p1,
        trace=trace,
    )
    if with_plug_in:
        report.plug_in = plug_in_sigma(model, data, theta_hat, mode)
    if theta0 is not None:
        report.normalized_errors = normalized_errors(theta_hat, theta0, model.p1, data.n_particles, data.delta)
    logger.debug('fit %s mode=%s theta_hat=%s value=%.6g converged=%s', model.name, mode, theta_hat,
                 report.contrast_at_opt, report.converged)
    return report


def normalized_errors(theta_hat, theta0, p1, n_particles, delta):
    """(sqrt(N) (mu_hat - mu0), sqrt(N / Delta) (sigma_hat - sigma0))."""
    diff = np.asarray(theta_hat, dtype=float) - np.asarray(theta0, dtype=float)
    scale = np.concatenate((np.full(p1, math.sqrt(n_particles)), np.full(len(diff) - p1, math.sqrt(n_particles / delta))))
    return diff * scale


def closed_form_linear(model, obs, mode):
    """
    Exact contrast minimizer for a drift linear in mu (b = sum mu_k d_mu_k b)
    and a constant diffusion a = sigma_1.

    mu_hat solves the normal equations sum phi phi^T mu = sum phi D / Delta
    with phi = d_mu b; sigma_hat^2 = factor sum r^2 / (count Delta) with the
    residuals r = D - Delta phi^T mu_hat.
    """
    if not (model.linear_drift and model.constant_diffusion) or model.p2 != 1:
        raise ArgumentError(f'{model.name} is not a linear-drift, constant-diffusion model.')
    min_intervals = 4 if mode == constants.MODE.PARTIAL else 1
    data = prepare(obs, mode, min_partial_intervals=min_intervals)
    mu_probe = model.param_box.center[:model.p1]

    gram = np.zeros((model.p1, model.p1))
    rhs = np.zeros(model.p1)
    phis = []
    for e, (y, x, pi) in enumerate(data.columns):
        phi = model.drift_grad(mu_probe, y, x, pi)
        phis.append(phi)
        gram += phi @ phi.T
        rhs += phi @ data.increments[:, e]
    if np.linalg.cond(gram) > 1e12:
        raise RankError('The normal matrix of the drift regression is singular.', cond=float(np.linalg.cond(gram)))
    mu_hat = np.linalg.solve(gram, rhs) / data.delta

    squares = [np.sum((data.increments[:, e] - data.delta * (mu_hat @ phi)) ** 2) for e, phi in enumerate(phis)]
    c_hat = data.factor * math.fsum(squares) / (data.per_term_count * data.delta)
    return np.concatenate((mu_hat, [math.sqrt(c_hat)]))


def plug_in_sigma(model, obs, theta_hat, mode):
    """
    Sigma1 = (Delta/N) nu(2 d_mu b d_mu b^T / c) and Sigma2 = (Delta/N) nu(d_sigma c d_sigma c^T / c^2)
    at theta_hat, with the asymptotic variances 2 Sigma1^{-1} for mu and
    2 Sigma2^{-1} (complete) or 9/4 Sigma2^{-1} (partial) for sigma.
    """
    data = prepare(obs, mode)
    mu, sigma = model.split(np.asarray(theta_hat, dtype=float))
    sigma1 = np.zeros((model.p1, model.p1))
    sigma2 = np.zeros((model.p2, model.p2))
    for y, x, pi in data.columns:
        a = model.diffusion(sigma, y, x, pi)
        c = a * a
        db = model.drift_grad(mu, y, x, pi)
        dc = 2.0 * a * model.diffusion_grad(sigma, y, x, pi)
        sigma1 += 2.0 * (db / c) @ db.T
        sigma2 += (dc / (c * c)) @ dc.T
    scale = data.delta / data.n_particles
    sigma1 = 0.5 * scale * (sigma1 + sigma1.T)
    sigma2 = 0.5 * scale * (sigma2 + sigma2.T)

    factor = constants.SIGMA_VARIANCE_FACTOR[mode]
    try:
        invertible = max(np.linalg.cond(sigma1), np.linalg.cond(sigma2)) < 1e12
        mu_variance = 2.0 * np.linalg.inv(sigma1)
        sigma_variance = factor * np.linalg.inv(sigma2)
    except np.linalg.LinAlgError:
        invertible = False
    if not invertible:
        logger.info('plug-in blocks are not invertible at theta=%s', theta_hat)
        mu_variance = np.full_like(sigma1, np.nan)
        sigma_variance = np.full_like(sigma2, np.nan)
    return PlugInReport(sigma1=sigma1, sigma2=sigma2, mu_variance=mu_variance, sigma_variance=sigma_variance,
                        sigma_variance_factor=factor, invertible=bool(invertible))


def _normalization_diag(model, data):
    return np.concatenate((np.full(model.p1, 1.0 / math.sqrt(data.n_particles)),
                           np.full(model.p2, math.sqrt(data.delta / data.n_particles))))


def normalized_score(model, theta, obs, mode):
    """M grad L(theta) with M = diag(1/sqrt(N) for mu, sqrt(Delta/N) for sigma)."""
    data = prepare(obs, mode)
    return _normalization_diag(model, data) * evaluate(model, theta, data).grad


def normalized_hessian(model, theta, obs, mode, step=1e-5):
    """
    M H(theta) M with H the Hessian of the contrast, taken by central
    differences of the analytic gradient. In the complete case its limit at
    theta0 is diag(Sigma1, Sigma2).
    """
    data = prepare(obs, mode)
    theta = np.asarray(theta, dtype=float)
    p = len(theta)
    hessian = np.empty((p, p))
    for k in range(p):
        h = step * (1.0 + abs(theta[k]))
        shift = np.zeros(p)
        shift[k] = h
        if not (model.param_box.contains(theta + shift) and model.param_box.contains(theta - shift)):
            raise ArgumentError(f'theta is within {h:g} of the box boundary in component {k}.')
        hessian[:, k] = (evaluate(model, theta + shift, data).grad - evaluate(model, theta - shift, data).grad) / (2 * h)
    diag = _normalization_diag(model, data)
    hessian = diag[:, None] * hessian * diag[None, :]
    return 0.5 * (hessian + hessian.T)
