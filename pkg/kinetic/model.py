"""
Parameterized coefficient families for the kinetic particle system

    dY = X dt,    dX = b_mu(Z, Pi) dt + a_sigma(Z, Pi) dB.

Coefficients are vectorized: `drift(mu, y, x, pi)` evaluates b_mu at the
points (y[k], x[k]) against the empirical measure `pi` and returns an array
shaped like `y`. Gradients return arrays of shape (p, *y.shape).
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from kinetic import constants
from kinetic.exceptions import ArgumentError, ImproperlyConfigured, ModelError, ParameterOutOfBox
from kinetic.measure import EmpiricalMeasure, w2


logger = logging.getLogger('kinetic.model')


@dataclass(frozen=True)
class ParamBox:
    mu_lo: tuple
    mu_hi: tuple
    sigma_lo: tuple
    sigma_hi: tuple

    def __post_init__(self):
        for name in ('mu_lo', 'mu_hi', 'sigma_lo', 'sigma_hi'):
            value = tuple(float(v) for v in np.atleast_1d(getattr(self, name)))
            if not all(np.isfinite(value)):
                raise ImproperlyConfigured(f"Parameter box bound '{name}' must be finite.")
            object.__setattr__(self, name, value)
        if len(self.mu_lo) != len(self.mu_hi) or len(self.sigma_lo) != len(self.sigma_hi):
            raise ImproperlyConfigured('Parameter box bounds have mismatched lengths.')
        if not all(lo < hi for lo, hi in zip(self.lower, self.upper)):
            raise ImproperlyConfigured('Parameter box needs lo < hi componentwise.')

    @property
    def p1(self):
        return len(self.mu_lo)

    @property
    def p2(self):
        return len(self.sigma_lo)

    @property
    def lower(self):
        return np.array(self.mu_lo + self.sigma_lo)

    @property
    def upper(self):
        return np.array(self.mu_hi + self.sigma_hi)

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def bounds(self):
        return list(zip(self.lower, self.upper))

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.p1 + self.p2,):
            raise ArgumentError(f'theta must have {self.p1 + self.p2} components, got shape {theta.shape}.')
        return theta[:self.p1], theta[self.p1:]

    def contains_mu(self, mu, tol=0.0):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        return mu.shape == (self.p1,) and bool(
            np.all(mu >= np.array(self.mu_lo) - tol) and np.all(mu <= np.array(self.mu_hi) + tol))

    def contains_sigma(self, sigma, tol=0.0):
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        return sigma.shape == (self.p2,) and bool(
            np.all(sigma >= np.array(self.sigma_lo) - tol) and np.all(sigma <= np.array(self.sigma_hi) + tol))

    def contains(self, theta, tol=0.0):
        mu, sigma = self.split(theta)
        return self.contains_mu(mu, tol) and self.contains_sigma(sigma, tol)

    def on_boundary(self, theta, rtol=1e-6):
        theta = np.asarray(theta, dtype=float)
        scale = rtol * (self.upper - self.lower)
        return bool(np.any(theta <= self.lower + scale) or np.any(theta >= self.upper - scale))

    def sample(self, rng, size=None):
        return rng.uniform(self.lower, self.upper, size=size if size is None else (size, self.p1 + self.p2))

    @classmethod
    def around(cls, mu0, sigma0, half_width=5.0, sigma_floor=0.05, sigma_floors=None):
        """
        Box of +/- half_width around the true parameters, with diffusion
        parameters clipped from below (sigma_floors per component if given).
        """
        mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
        sigma0 = np.atleast_1d(np.asarray(sigma0, dtype=float))
        floors = np.full(sigma0.shape, sigma_floor) if sigma_floors is None else np.asarray(sigma_floors, float)
        return cls(
            mu_lo=tuple(mu0 - half_width),
            mu_hi=tuple(mu0 + half_width),
            sigma_lo=tuple(np.maximum(sigma0 - half_width, floors)),
            sigma_hi=tuple(sigma0 + half_width),
        )


@dataclass(frozen=True)
class ModelSpec:
    name: str
    drift: Callable
    diffusion: Callable
    drift_grad: Callable
    diffusion_grad: Callable
    param_box: ParamBox
    a_min: float = constants.A_MIN
    lipschitz_probe_budget: int = 64
    linear_drift: bool = False
    constant_diffusion: bool = False
    drift_lipschitz_bound: Optional[Callable] = None
    diffusion_lipschitz_bound: Optional[Callable] = None
    default_theta: Optional[tuple] = field(default=None, compare=False)

    @property
    def p1(self):
        return self.param_box.p1

    @property
    def p2(self):
        return self.param_box.p2

    def split(self, theta):
        return self.param_box.split(theta)


def _as_measure(pi):
    if pi is None:
        raise ArgumentError('An empirical measure is required.')
    if isinstance(pi, EmpiricalMeasure):
        return pi
    return EmpiricalMeasure(pi)


def _point(z):
    z = np.asarray(z, dtype=float).ravel()
    if z.shape != (2,):
        raise ArgumentError(f'A state is a pair (y, x), got shape {z.shape}.')
    return z[:1], z[1:]


def eval_drift(model, mu, z, pi):
    """
    b_mu(z, pi) at a single state.

    :param model [ModelSpec]: coefficient family.
    :param mu [Sequence[float]]: drift parameter, inside the box.
    :param z [Sequence[float]]: state (y, x).
    :param pi [EmpiricalMeasure]: nonempty measure.
    """
    if not model.param_box.contains_mu(mu):
        raise ParameterOutOfBox(f'mu={list(np.atleast_1d(mu))} lies outside the drift box.')
    pi = _as_measure(pi)
    y, x = _point(z)
    return float(model.drift(np.asarray(mu, dtype=float), y, x, pi)[0])


def eval_diffusion(model, sigma, z, pi):
    if not model.param_box.contains_sigma(sigma):
        raise ParameterOutOfBox(f'sigma={list(np.atleast_1d(sigma))} lies outside the diffusion box.')
    pi = _as_measure(pi)
    y, x = _point(z)
    value = float(model.diffusion(np.asarray(sigma, dtype=float), y, x, pi)[0])
    if not value >= model.a_min:
        raise ModelError(
            f'Diffusion value {value} is below a_min={model.a_min} for model {model.name}.',
            value=value,
        )
    return value


def check_floor(model, values):
    """Raises ModelError when any diffusion value falls below model.a_min."""
    values = np.asarray(values)
    low = float(np.min(values))
    if not low >= model.a_min:
        raise ModelError(f'Diffusion value {low} is below a_min={model.a_min} for model {model.name}.', value=low)
    return values


class ProductKernel:
    """
    K(z, zbar) = psi(y) psi(ybar). Its average over a measure factorizes, so
    kernel_average costs O(N + M) instead of O(N M).
    """

    def __init__(self, psi):
        self.psi = psi

    def __call__(self, y, x, ybar, xbar):
        return self.psi(y) * self.psi(ybar)


def kernel_average(kernel, y, x, pi):
    """
    (1/M) sum_j K((y, x), (ybar_j, xbar_j)) for each query point, with
    kernel(y, x, ybar, xbar) broadcasting over its arguments.
    """
    pi = _as_measure(pi)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if isinstance(kernel, ProductKernel):
        return kernel.psi(y) * kernel.psi(pi.y).mean()
    values = kernel(y[..., None], x[..., None], pi.y, pi.x)
    return values.mean(axis=-1)


@dataclass(frozen=True)
class AssumptionReport:
    drift_ratio: float
    diffusion_ratio: float
    min_diffusion: float
    drift_bound: float
    diffusion_bound: float
    a_min: float
    n_probes: int

    @property
    def drift_ok(self):
        return self.drift_ratio <= self.drift_bound

    @property
    def diffusion_ok(self):
        return self.diffusion_ratio <= self.diffusion_bound

    @property
    def floor_ok(self):
        return self.min_diffusion >= self.a_min

    @property
    def passed(self):
        return self.drift_ok and self.diffusion_ok and self.floor_ok


def _probe_pair(rng, size):
    scale = rng.uniform(0.2, 3.0)
    z = rng.normal(0.0, scale, size=2)
    points = rng.normal(0.0, scale, size=(size, 2))
    return z, EmpiricalMeasure(points)


def check_assumptions(model, seed, n_probes=None, theta=None, measure_size=4,
                      drift_threshold=1e3, diffusion_threshold=1e3):
    """
    Lipschitz and lower-bound probes at a fixed theta.

    Draws pairs (z, pi), (zbar, pibar) with equal-size measures, records the
    largest ratio |f(z, pi) - f(zbar, pibar)| / (|z - zbar| + W2(pi, pibar))
    for drift and diffusion, and the smallest diffusion value seen. Analytic
    Lipschitz bounds of the model, when present, replace the thresholds
    (plus 1e-9 slack). Identifiability is not probed.
    """
    n_probes = model.lipschitz_probe_budget if n_probes is None else n_probes
    if n_probes < 2:
        raise ArgumentError(f'check_assumptions needs at least 2 probes, got {n_probes}.')
    theta = model.param_box.center if theta is None else np.asarray(theta, dtype=float)
    mu, sigma = model.split(theta)
    rng = np.random.default_rng(seed)

    drift_ratio = diffusion_ratio = 0.0
    min_diffusion = np.inf
    for _ in range(n_probes):
        z, pi = _probe_pair(rng, measure_size)
        zbar, pibar = _probe_pair(rng, measure_size)
        gap = float(np.hypot(*(z - zbar))) + w2(pi, pibar)
        if gap <= 0.0:
            continue
        b = model.drift(mu, z[:1], z[1:], pi)[0]
        bbar = model.drift(mu, zbar[:1], zbar[1:], pibar)[0]
        a = model.diffusion(sigma, z[:1], z[1:], pi)[0]
        abar = model.diffusion(sigma, zbar[:1], zbar[1:], pibar)[0]
        drift_ratio = max(drift_ratio, abs(b - bbar) / gap)
        diffusion_ratio = max(diffusion_ratio, abs(a - abar) / gap)
        min_diffusion = min(min_diffusion, a, abar)

    drift_bound = drift_threshold
    if model.drift_lipschitz_bound is not None:
        drift_bound = model.drift_lipschitz_bound(mu) + 1e-9
    diffusion_bound = diffusion_threshold
    if model.diffusion_lipschitz_bound is not None:
        diffusion_bound = model.diffusion_lipschitz_bound(sigma) + 1e-9

    report = AssumptionReport(
        drift_ratio=float(drift_ratio),
        diffusion_ratio=float(diffusion_ratio),
        min_diffusion=float(min_diffusion),
        drift_bound=float(drift_bound),
        diffusion_bound=float(diffusion_bound),
        a_min=model.a_min,
        n_probes=n_probes,
    )
    logger.debug('assumption probes for %s: %s', model.name, report)
    return report


# Built-in models.

def _mean_field_drift(mu, y, x, pi):
    return -mu[0] * x - mu[1] * (y - pi.y.mean())


def _mean_field_drift_grad(mu, y, x, pi):
    return np.stack((-x, -(y - pi.y.mean())))


def _constant_diffusion(sigma, y, x, pi):
    return np.full(np.shape(y), float(sigma[0]))


def _constant_diffusion_grad(sigma, y, x, pi):
    return np.ones((1,) + np.shape(y))


def mean_field_langevin(mu0=(1.0, 0.5), sigma0=(0.5,), param_box=None, a_min=constants.A_MIN):
    """b = -mu1 x - mu2 (y - mean position of pi), a = sigma1."""
    param_box = param_box or ParamBox.around(mu0, sigma0)
    return ModelSpec(
        name=constants.MODEL.MEAN_FIELD_LANGEVIN,
        drift=_mean_field_drift,
        diffusion=_constant_diffusion,
        drift_grad=_mean_field_drift_grad,
        diffusion_grad=_constant_diffusion_grad,
        param_box=param_box,
        a_min=a_min,
        linear_drift=True,
        constant_diffusion=True,
        drift_lipschitz_bound=lambda mu: abs(mu[0]) + 2.0 * abs(mu[1]),
        diffusion_lipschitz_bound=lambda sigma: 0.0,
        default_theta=tuple(mu0) + tuple(sigma0),
    )


def saturated_cubic(y):
    """y**3 for |y| <= 10, continued linearly with matching slope beyond."""
    y = np.asarray(y, dtype=float)
    edge = constants.CUBIC_SATURATION
    clipped = np.clip(y, -edge, edge)
    return clipped ** 3 + 3.0 * edge ** 2 * (y - clipped)


def bump(u):
    return u / (1.0 + u * u)


def _kramers_drift(mu, y, x, pi):
    return -mu[0] * x - mu[1] * y - mu[2] * saturated_cubic(y) + mu[3] * (pi.y.mean() - y)


def _kramers_drift_grad(mu, y, x, pi):
    return np.stack((-x, -y, -saturated_cubic(y), pi.y.mean() - y))


class _KernelDiffusion:
    """a = sigma1 + sigma2 tanh^2(psi(y) * mean psi(ybar)), K(z, zbar) = psi(y) psi(ybar)."""

    def __init__(self, psi):
        self.kernel = ProductKernel(psi)

    def kernel_term(self, y, x, pi):
        return np.tanh(kernel_average(self.kernel, y, x, pi)) ** 2

    def __call__(self, sigma, y, x, pi):
        return sigma[0] + sigma[1] * self.kernel_term(y, x, pi)

    def grad(self, sigma, y, x, pi):
        return np.stack((np.ones(np.shape(y)), self.kernel_term(y, x, pi)))


def kramers_kernel(mu0=(1.0, 1.0, 0.1, 0.5), sigma0=(0.5, 0.25), param_box=None, psi=bump,
                   a_min=constants.A_MIN):
    """
    Kramers oscillator with mean attraction and a measure-dependent diffusion:

        b = -mu1 x - mu2 y - mu3 s(y) + mu4 (m_Y(pi) - y)
        a = sigma1 + sigma2 tanh^2(int K d pi),  K(z, zbar) = psi(y) psi(ybar)

    with s the saturated cubic. sigma1 >= 0.05 and sigma2 >= 0 keep a >= 0.05.
    """
    param_box = param_box or ParamBox.around(mu0, sigma0, sigma_floors=(0.05, 0.0))
    if param_box.sigma_lo[0] < 0.05 or param_box.sigma_lo[1] < 0.0:
        raise ImproperlyConfigured('KramersKernel needs sigma1 >= 0.05 and sigma2 >= 0 on the whole box.')
    diffusion = _KernelDiffusion(psi)
    return ModelSpec(
        name=constants.MODEL.KRAMERS_KERNEL,
        drift=_kramers_drift,
        diffusion=diffusion,
        drift_grad=_kramers_drift_grad,
        diffusion_grad=diffusion.grad,
        param_box=param_box,
        a_min=a_min,
        linear_drift=True,
        default_theta=tuple(mu0) + tuple(sigma0),
    )


BUILTIN_MODELS = {
    constants.MODEL.MEAN_FIELD_LANGEVIN: mean_field_langevin,
    constants.MODEL.KRAMERS_KERNEL: kramers_kernel,
}


def build_model(tag, theta0=None, half_width=5.0):
    """
    Built-in model by tag. theta0 (mu followed by sigma) recentres the default box.
    """
    try:
        factory = BUILTIN_MODELS[tag]
    except KeyError:
        raise ImproperlyConfigured(f"Unknown model '{tag}'. Valid values are: {list(BUILTIN_MODELS)}")
    if theta0 is None:
        return factory()
    reference = factory()
    theta0 = np.asarray(theta0, dtype=float)
    mu0, sigma0 = reference.split(theta0)
    if tag == constants.MODEL.KRAMERS_KERNEL:
        box = ParamBox.around(mu0, sigma0, half_width, sigma_floors=(0.05, 0.0))
    else:
        box = ParamBox.around(mu0, sigma0, half_width)
    logger.debug("built %s at theta0=%s", tag, theta0)
    return factory(mu0=tuple(mu0), sigma0=tuple(sigma0), param_box=box)


def theta_zero(model):
    if model.default_theta is None:
        raise ImproperlyConfigured(f'Model {model.name} has no default true parameter.')
    return np.array(model.default_theta, dtype=float)
