"""
Contrast functions and the nu / I / Q functionals.

Complete observations use the states (Z_j, Pi_j) for j = 0, ..., n - 1 and the
increments X_{j+1} - X_j. Partial observations use j = 1, ..., n - 2 with the
increments X~_{j+1} - X~_j and coefficients evaluated one step back, at
(Z~_{j-1}, Pi~_{j-1}).

Every functional returns a raw sum; normalizations are applied by the caller
through `normalize` and a NORMALIZATION tag.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.integrate import trapezoid

from kinetic import constants
from kinetic.exceptions import ArgumentError, ParameterOutOfBox
from kinetic.model import check_floor
from kinetic.observe import ObservationSet, surrogate
from kinetic.rng import derive_seed
from kinetic.simulate import SimConfig, iterate_ips


logger = logging.getLogger('kinetic.contrast')


@dataclass(frozen=True)
class ContrastValue:
    value: float
    grad: np.ndarray
    per_term_count: int


@dataclass(frozen=True)
class FunctionalReport:
    nu: float
    i_fun: float
    q_fun: float
    normalization: str


@dataclass(frozen=True)
class ContrastData:
    """
    The evaluation columns of one contrast: `columns[e]` is the (y, x, pi)
    at which coefficients of summand e are evaluated and `increments[:, e]`
    the matching velocity increment.
    """
    mode: str
    delta: float
    factor: float
    columns: tuple
    increments: np.ndarray

    @property
    def n_particles(self):
        return self.increments.shape[0]

    @property
    def n_columns(self):
        return self.increments.shape[1]

    @property
    def per_term_count(self):
        return self.increments.size


def _complete_data(obs):
    if not obs.is_complete:
        raise ArgumentError('Complete-mode functionals need complete observations.')
    if obs.n_intervals < 1:
        raise ArgumentError('At least one observation interval is needed.')
    columns = tuple((obs.y[:, j], obs.x[:, j], obs.measure(j)) for j in range(obs.n_intervals))
    return ContrastData(
        mode=constants.MODE.COMPLETE,
        delta=obs.delta,
        factor=1.0,
        columns=columns,
        increments=obs.x[:, 1:] - obs.x[:, :-1],
    )


def _partial_data(obs, min_intervals):
    if obs.n_intervals < min_intervals:
        raise ArgumentError(f'Partial mode needs n >= {min_intervals} intervals, got {obs.n_intervals}.')
    sur = surrogate(obs)
    shifted = range(obs.n_intervals - 2)
    columns = tuple((sur.y[:, e], sur.x_tilde[:, e], sur.measures[e]) for e in shifted)
    return ContrastData(
        mode=constants.MODE.PARTIAL,
        delta=obs.delta,
        factor=constants.PARTIAL_CONTRAST_FACTOR,
        columns=columns,
        increments=sur.x_tilde[:, 2:] - sur.x_tilde[:, 1:-1],
    )


def prepare(obs, mode, min_partial_intervals=3):
    """
    Evaluation columns for `mode`. Partial mode reads positions only, so a
    complete ObservationSet is accepted there as well.
    """
    if isinstance(obs, ContrastData):
        if obs.mode != mode:
            raise ArgumentError(f"Prepared data is in mode '{obs.mode}', not '{mode}'.")
        return obs
    if not isinstance(obs, ObservationSet):
        raise ArgumentError(f'Expected an ObservationSet, got {type(obs).__name__}.')
    if mode == constants.MODE.COMPLETE:
        return _complete_data(obs)
    if mode == constants.MODE.PARTIAL:
        return _partial_data(obs, min_partial_intervals)
    raise ArgumentError(f"Unknown observation mode '{mode}'.")


def _split_theta(model, theta):
    theta = np.asarray(theta, dtype=float)
    if not model.param_box.contains(theta):
        raise ParameterOutOfBox(f'theta={list(theta)} lies outside the parameter box of {model.name}.')
    return model.split(theta)


def evaluate(model, theta, data, with_grad=True):
    """
    Value and analytic gradient of the contrast described by `data`:

        sum factor (D - Delta b)^2 / (Delta c) + log c,   c = a^2

    d/dmu = -2 factor r d_mu b / c and d/dsigma = (-factor r^2 / (Delta c^2) + 1/c) d_sigma c
    with r = D - Delta b and d_sigma c = 2 a d_sigma a.
    """
    mu, sigma = _split_theta(model, theta)
    delta, factor = data.delta, data.factor
    values = []
    grad_mu = []
    grad_sigma = []
    for e, (y, x, pi) in enumerate(data.columns):
        b = model.drift(mu, y, x, pi)
        a = check_floor(model, model.diffusion(sigma, y, x, pi))
        c = a * a
        r = data.increments[:, e] - delta * b
        values.append(np.sum(factor * r * r / (delta * c) + np.log(c)))
        if with_grad:
            dc = 2.0 * a * model.diffusion_grad(sigma, y, x, pi)
            grad_mu.append(np.sum(-2.0 * factor * model.drift_grad(mu, y, x, pi) * (r / c), axis=1))
            grad_sigma.append(np.sum((-factor * r * r / (delta * c * c) + 1.0 / c) * dc, axis=1))

    value = math.fsum(values)
    grad = None
    if with_grad:
        grad = np.array([math.fsum(g) for g in np.column_stack((np.array(grad_mu), np.array(grad_sigma))).T])
    return ContrastValue(value=value, grad=grad, per_term_count=data.per_term_count)


def contrast_complete(model, theta, obs, with_grad=True):
    return evaluate(model, theta, prepare(obs, constants.MODE.COMPLETE), with_grad)


def contrast_partial(model, theta, obs, with_grad=True):
    """Partial-observation contrast; needs n >= 4 and reads positions only."""
    return evaluate(model, theta, prepare(obs, constants.MODE.PARTIAL, min_partial_intervals=4), with_grad)


def contrast(model, theta, obs, mode, with_grad=True):
    if mode == constants.MODE.PARTIAL:
        return contrast_partial(model, theta, obs, with_grad)
    return contrast_complete(model, theta, obs, with_grad)


# Functionals.

def _values(f, y, x, pi):
    return np.broadcast_to(np.asarray(f(y, x, pi), dtype=float), np.shape(y))


def functional_nu(f, obs, mode):
    """sum over the mode's index range of f(Z_j, Pi_j) (complete) or f(Z~_{j-1}, Pi~_{j-1}) (partial)."""
    data = prepare(obs, mode)
    return math.fsum(float(np.sum(_values(f, *column))) for column in data.columns)


def functional_I(f, obs, mode, model, mu0):
    """sum f(.) (D - Delta b_{mu0}(.)) with D the mode's velocity increment."""
    data = prepare(obs, mode)
    mu0 = np.asarray(mu0, dtype=float)
    parts = []
    for e, (y, x, pi) in enumerate(data.columns):
        residual = data.increments[:, e] - data.delta * model.drift(mu0, y, x, pi)
        parts.append(float(np.sum(_values(f, y, x, pi) * residual)))
    return math.fsum(parts)


def functional_Q(f, obs, mode):
    """sum f(.) D^2 with D the mode's velocity increment."""
    data = prepare(obs, mode)
    return math.fsum(
        float(np.sum(_values(f, *column) * data.increments[:, e] ** 2)) for e, column in enumerate(data.columns))


def functional_Q_centered(f, obs, mode, model, sigma0):
    """
    (Q(f) - kappa Delta nu(f a^2_{sigma0})) / sqrt(N Delta), kappa = 1 for
    complete and 2/3 for partial observations. The limiting variance is
    2 Pi(f^2 a^4) (complete) or Pi(f^2 a^4) (partial).
    """
    data = prepare(obs, mode)
    sigma0 = np.asarray(sigma0, dtype=float)
    kappa = 1.0 if mode == constants.MODE.COMPLETE else constants.PARTIAL_QV_FACTOR

    def fa2(y, x, pi):
        return _values(f, y, x, pi) * model.diffusion(sigma0, y, x, pi) ** 2

    q = functional_Q(f, data, mode)
    nu = functional_nu(fa2, data, mode)
    return (q - kappa * data.delta * nu) / math.sqrt(data.n_particles * data.delta)


def normalization_factor(tag, n_particles, delta):
    factors = {
        constants.NORMALIZATION.RAW: 1.0,
        constants.NORMALIZATION.DELTA_OVER_N: delta / n_particles,
        constants.NORMALIZATION.ONE_OVER_N: 1.0 / n_particles,
        constants.NORMALIZATION.ONE_OVER_SQRT_N: 1.0 / math.sqrt(n_particles),
        constants.NORMALIZATION.ONE_OVER_SQRT_N_DELTA: 1.0 / math.sqrt(n_particles * delta),
    }
    try:
        return factors[tag]
    except KeyError:
        raise ArgumentError(f"Unknown normalization '{tag}'. Valid values are: {list(factors)}")


def normalize(value, tag, n_particles, delta):
    return value * normalization_factor(tag, n_particles, delta)


def functional_report(f, obs, mode, model, mu0, normalization=constants.NORMALIZATION.RAW):
    """nu, I and Q of f on the same data, all scaled by one normalization."""
    data = prepare(obs, mode)
    factor = normalization_factor(normalization, data.n_particles, data.delta)
    report = FunctionalReport(
        nu=factor * functional_nu(f, data, mode),
        i_fun=factor * functional_I(f, data, mode, model, mu0),
        q_fun=factor * functional_Q(f, data, mode),
        normalization=normalization,
    )
    assert all(map(math.isfinite, (report.nu, report.i_fun, report.q_fun))), "Functional values must be finite"
    return report


# Limit oracle.

@dataclass(frozen=True)
class OracleConfig:
    horizon: float = 1.0
    obs_steps: int = 100
    n_particles: int = 5000
    fine_factor: int = 40
    n_seeds: int = 5
    seed: int = 0
    threads: Any = None

    def seeds(self):
        return [derive_seed(self.seed, constants.STREAM.REFERENCE_INIT, k) for k in range(self.n_seeds)]


@dataclass(frozen=True)
class OracleEstimate:
    value: Any
    stderr: Any
    per_seed: np.ndarray

    @property
    def relative_stderr(self):
        return np.abs(self.stderr) / np.maximum(np.abs(self.value), np.finfo(float).tiny)


def _particle_values(f, y, x, pi):
    values = np.asarray(f(y, x, pi), dtype=float)
    return np.broadcast_to(values, np.shape(y)) if values.ndim == 0 else values


def pi_bar_oracle(f, model, theta0, oracle_cfg=None):
    """
    Brute-force estimate of int_0^T int f(z, Pibar_t) Pibar_t(dz) dt.

    A large system is simulated per seed; f(y, x, pi) is averaged over the
    particles (its last axis) at every fine step and integrated in time by
    the trapezoid rule. f may return extra leading axes, e.g. a matrix per
    particle. Returns the mean over seeds and its standard error.
    """
    oracle_cfg = oracle_cfg or OracleConfig()
    estimates = []
    for seed in oracle_cfg.seeds():
        cfg = SimConfig(
            n_particles=oracle_cfg.n_particles,
            horizon=oracle_cfg.horizon,
            obs_steps=oracle_cfg.obs_steps,
            fine_factor=oracle_cfg.fine_factor,
            seed=seed,
        )
        means = [np.mean(_particle_values(f, y, x, pi), axis=-1)
                 for _, y, x, pi in iterate_ips(model, theta0, cfg, threads=oracle_cfg.threads)]
        estimates.append(trapezoid(np.array(means), dx=cfg.fine_step, axis=0))
        logger.info('oracle seed %d done', seed, extra=dict(context=dict(model=model.name)))

    estimates = np.array(estimates)
    value = estimates.mean(axis=0)
    if len(estimates) > 1:
        stderr = estimates.std(axis=0, ddof=1) / math.sqrt(len(estimates))
    else:
        stderr = np.full_like(value, np.nan)
    return OracleEstimate(value=value, stderr=stderr, per_seed=estimates)


@dataclass(frozen=True)
class IdentifiabilityReport:
    drift_gap: float
    diffusion_contrast: float
    drift_stderr: float
    diffusion_stderr: float

    @property
    def contrast_limit(self):
        """Limit in probability of (Delta / N) times the contrast at theta."""
        return self.diffusion_contrast


def identifiability(model, theta, theta0, oracle_cfg=None):
    """
    I(theta) = Pibar(((b_mu - b_mu0) / a_sigma)^2) and
    J(sigma) = Pibar(a^2_sigma0 / a^2_sigma + log a^2_sigma), both under the
    law at theta0. I vanishes at mu0 and J is smallest at sigma0.
    """
    mu, sigma = _split_theta(model, theta)
    mu0, sigma0 = _split_theta(model, theta0)

    def integrand(y, x, pi):
        a = model.diffusion(sigma, y, x, pi)
        c, c0 = a * a, model.diffusion(sigma0, y, x, pi) ** 2
        gap = (model.drift(mu, y, x, pi) - model.drift(mu0, y, x, pi)) / a
        return np.stack((gap * gap, c0 / c + np.log(c)))

    estimate = pi_bar_oracle(integrand, model, theta0, oracle_cfg)
    return IdentifiabilityReport(
        drift_gap=float(estimate.value[0]),
        diffusion_contrast=float(estimate.value[1]),
        drift_stderr=float(estimate.stderr[0]),
        diffusion_stderr=float(estimate.stderr[1]),
    )


def contrast_limit(model, theta, theta0, oracle_cfg=None):
    return identifiability(model, theta, theta0, oracle_cfg).contrast_limit
