"""
Euler-Maruyama simulation of the kinetic particle system on a fine grid.

The fine step is delta = Delta / m where Delta = T / n is the observation
step, so observations taken every m fine steps carry the law of the SDE up to
O(delta) rather than the Euler law at step Delta.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from kinetic import constants
from kinetic.exceptions import ArgumentError, ImproperlyConfigured, ParameterOutOfBox, SimulationDiverged
from kinetic.measure import EmpiricalMeasure
from kinetic.model import check_floor
from kinetic.observe import ObservationSet
from kinetic.rng import NormalStream, derive_seed, initial_normals


logger = logging.getLogger('kinetic.simulate')


@dataclass(frozen=True)
class SimConfig:
    n_particles: int
    horizon: float
    obs_steps: int
    fine_factor: int = 20
    seed: int = 0
    init: str = constants.INITIAL_LAW.STANDARD_NORMAL

    def __post_init__(self):
        if self.n_particles < 1:
            raise ImproperlyConfigured(f'n_particles must be >= 1, got {self.n_particles}.')
        if self.obs_steps < 3:
            raise ImproperlyConfigured(f'obs_steps must be >= 3, got {self.obs_steps}.')
        if not self.horizon > 0:
            raise ImproperlyConfigured(f'horizon must be > 0, got {self.horizon}.')
        if self.fine_factor < 1:
            raise ImproperlyConfigured(f'fine_factor must be >= 1, got {self.fine_factor}.')
        if self.init not in constants.INITIAL_LAW:
            raise ImproperlyConfigured(f"Unknown initial law '{self.init}'.")

    @property
    def delta(self):
        return self.horizon / self.obs_steps

    @property
    def fine_step(self):
        return self.delta / self.fine_factor

    @property
    def n_fine(self):
        return self.obs_steps * self.fine_factor


@dataclass
class TrajectoryGrid:
    times: np.ndarray
    y: np.ndarray
    x: np.ndarray
    dB: Optional[np.ndarray]
    theta0: np.ndarray
    cfg: SimConfig

    @property
    def n_particles(self):
        return self.y.shape[0]

    @property
    def n_fine(self):
        return self.y.shape[1] - 1


@dataclass
class CoupledPair:
    ips: TrajectoryGrid
    mv_copies: TrajectoryGrid
    reference_flow: list

    def gap(self):
        """sup over the fine grid of (1/N) sum_i |Z^i - Zbar^i|^2."""
        sq = (self.ips.y - self.mv_copies.y) ** 2 + (self.ips.x - self.mv_copies.x) ** 2
        return float(sq.mean(axis=0).max())


def _check_theta(model, theta0):
    theta0 = np.asarray(theta0, dtype=float)
    if not model.param_box.contains(theta0):
        raise ParameterOutOfBox(f'theta0={list(theta0)} lies outside the parameter box of {model.name}.')
    return theta0


def _initial_state(cfg, stream, n_particles, seed):
    z0 = initial_normals(seed, stream, n_particles)
    return z0[:, 0].copy(), z0[:, 1].copy()


def _guard(y, x, step):
    bad = ~(np.isfinite(y) & np.isfinite(x)) | (np.abs(y) > constants.DIVERGENCE_BOUND) | \
        (np.abs(x) > constants.DIVERGENCE_BOUND)
    if bad.any():
        particle = int(np.flatnonzero(bad)[0])
        raise SimulationDiverged(
            f'State left the bound {constants.DIVERGENCE_BOUND:g} at particle {particle}, fine step {step}.',
            particle=particle,
            step=step,
        )


def euler_update(model, mu, sigma, y, x, pi, dB, dt):
    """One Euler-Maruyama step; coefficients are evaluated against `pi`."""
    b = model.drift(mu, y, x, pi)
    a = check_floor(model, model.diffusion(sigma, y, x, pi))
    return y + x * dt, x + b * dt + a * dB


def _integrate(model, theta0, cfg, y0, x0, increments):
    mu, sigma = model.split(theta0)
    dt = cfg.fine_step
    n_fine = cfg.n_fine
    n = len(y0)
    y = np.empty((n, n_fine + 1))
    x = np.empty((n, n_fine + 1))
    y[:, 0], x[:, 0] = y0, x0
    _guard(y[:, 0], x[:, 0], 0)
    for k in range(n_fine):
        pi = EmpiricalMeasure.from_coordinates(y[:, k], x[:, k])
        y[:, k + 1], x[:, k + 1] = euler_update(model, mu, sigma, y[:, k], x[:, k], pi, increments[:, k], dt)
        _guard(y[:, k + 1], x[:, k + 1], k + 1)
    return y, x


def fine_times(cfg):
    return np.arange(cfg.n_fine + 1) * cfg.fine_step


def brownian_increments(cfg, n_particles, seed, stream=constants.STREAM.NOISE, threads=None):
    scale = math.sqrt(cfg.fine_step)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return scale * NormalStream(seed, stream, n_particles, cfg.n_fine, pool=pool).all_steps()
    return scale * NormalStream(seed, stream, n_particles, cfg.n_fine).all_steps()


def simulate_ips(model, theta0, cfg, initial_state=None, threads=None):
    """
    Simulates the N-particle system at theta0 on the fine grid of `cfg`.

    :param model [ModelSpec]: coefficient family.
    :param theta0 [Sequence[float]]: true parameter (mu then sigma), inside the box.
    :param cfg [SimConfig]: grid, particle count and seed.
    :param initial_state [Tuple[ndarray, ndarray]]: optional (y0, x0) replacing the initial law.
    :param threads [int]: worker threads used to draw the noise blocks.
    """
    theta0 = _check_theta(model, theta0)
    if initial_state is None:
        y0, x0 = _initial_state(cfg, constants.STREAM.INIT, cfg.n_particles, cfg.seed)
    else:
        y0, x0 = (np.broadcast_to(np.asarray(v, dtype=float), (cfg.n_particles,)).copy() for v in initial_state)
    dB = brownian_increments(cfg, cfg.n_particles, cfg.seed, threads=threads)
    y, x = _integrate(model, theta0, cfg, y0, x0, dB)
    logger.debug('simulated %s: N=%d n=%d m=%d seed=%d', model.name, cfg.n_particles, cfg.obs_steps,
                 cfg.fine_factor, cfg.seed)
    return TrajectoryGrid(times=fine_times(cfg), y=y, x=x, dB=dB, theta0=theta0, cfg=cfg)


def iterate_ips(model, theta0, cfg, threads=None):
    """
    Yields (k, y, x, pi) at every fine step k = 0, ..., n*m without retaining
    the path. Draws the same noise as simulate_ips for the same configuration.
    """
    theta0 = _check_theta(model, theta0)
    mu, sigma = model.split(theta0)
    dt = cfg.fine_step
    scale = math.sqrt(dt)
    y, x = _initial_state(cfg, constants.STREAM.INIT, cfg.n_particles, cfg.seed)
    _guard(y, x, 0)
    with ThreadPoolExecutor(max_workers=threads or 1) as pool:
        noise = NormalStream(cfg.seed, constants.STREAM.NOISE, cfg.n_particles, cfg.n_fine,
                             pool=pool if threads and threads > 1 else None)
        for k in range(cfg.n_fine + 1):
            pi = EmpiricalMeasure.from_coordinates(y, x)
            yield k, y, x, pi
            if k == cfg.n_fine:
                break
            y, x = euler_update(model, mu, sigma, y, x, pi, scale * noise.step(k), dt)
            _guard(y, x, k + 1)


def simulate_observations(model, theta0, cfg, threads=None):
    """simulate_ips followed by subsample, keeping only the observed columns."""
    y = np.empty((cfg.n_particles, cfg.obs_steps + 1))
    x = np.empty((cfg.n_particles, cfg.obs_steps + 1))
    for k, y_k, x_k, _ in iterate_ips(model, theta0, cfg, threads=threads):
        j, offset = divmod(k, cfg.fine_factor)
        if offset == 0:
            y[:, j], x[:, j] = y_k, x_k
    return ObservationSet(
        delta=cfg.delta,
        times=fine_times(cfg)[::cfg.fine_factor].copy(),
        y=y,
        x=x,
        mode=constants.MODE.COMPLETE,
    )


def replay_ips(model, grid):
    """Re-runs the scheme from the grid's initial state and retained increments."""
    if grid.dB is None:
        raise ArgumentError('The grid does not retain its Brownian increments.')
    y, x = _integrate(model, grid.theta0, grid.cfg, grid.y[:, 0], grid.x[:, 0], grid.dB)
    return TrajectoryGrid(times=fine_times(grid.cfg), y=y, x=x, dB=grid.dB, theta0=grid.theta0, cfg=grid.cfg)


def simulate_single(drift, diffusion, y0, x0, dB, dt):
    """
    One particle without interaction, driven by the given increments.

    drift(y, x) and diffusion(y, x) take and return floats.
    """
    dB = np.asarray(dB, dtype=float)
    y = np.empty(len(dB) + 1)
    x = np.empty(len(dB) + 1)
    y[0], x[0] = y0, x0
    for k, increment in enumerate(dB):
        y[k + 1] = y[k] + x[k] * dt
        x[k + 1] = x[k] + drift(y[k], x[k]) * dt + diffusion(y[k], x[k]) * increment
    return y, x


def default_reference_particles(n_particles):
    return max(n_particles, min(20 * n_particles, 5000))


def simulate_coupled(model, theta0, cfg, ref_particles=None, ref_seed=None, threads=None):
    """
    The N-particle system together with N McKean-Vlasov proxies.

    The law of the McKean-Vlasov equation is approximated by a reference system
    of `ref_particles` particles driven by independent noise. Proxy i starts
    from the initial state of particle i, uses the same increments and has its
    coefficients evaluated against the reference measure.
    """
    theta0 = _check_theta(model, theta0)
    ref_particles = default_reference_particles(cfg.n_particles) if ref_particles is None else ref_particles
    if ref_particles < cfg.n_particles:
        raise ArgumentError(f'ref_particles={ref_particles} must be >= n_particles={cfg.n_particles}.')
    ref_seed = derive_seed(cfg.seed, constants.STREAM.REFERENCE_NOISE) if ref_seed is None else ref_seed
    if ref_seed == cfg.seed:
        raise ImproperlyConfigured('The reference system needs noise independent of the particle system: '
                                   'pass a reference seed different from the simulation seed.')

    ips = simulate_ips(model, theta0, cfg, threads=threads)
    mu, sigma = model.split(theta0)
    dt = cfg.fine_step

    ref_y, ref_x = _initial_state(cfg, constants.STREAM.REFERENCE_INIT, ref_particles, ref_seed)
    ref_dB = brownian_increments(cfg, ref_particles, ref_seed, stream=constants.STREAM.REFERENCE_NOISE,
                                 threads=threads)

    y = np.empty_like(ips.y)
    x = np.empty_like(ips.x)
    y[:, 0], x[:, 0] = ips.y[:, 0], ips.x[:, 0]
    reference_flow = []
    for k in range(cfg.n_fine):
        ref_pi = EmpiricalMeasure.from_coordinates(ref_y, ref_x)
        if k % cfg.fine_factor == 0:
            reference_flow.append(ref_pi)
        y[:, k + 1], x[:, k + 1] = euler_update(model, mu, sigma, y[:, k], x[:, k], ref_pi, ips.dB[:, k], dt)
        ref_y, ref_x = euler_update(model, mu, sigma, ref_y, ref_x, ref_pi, ref_dB[:, k], dt)
        _guard(y[:, k + 1], x[:, k + 1], k + 1)
        _guard(ref_y, ref_x, k + 1)
    reference_flow.append(EmpiricalMeasure.from_coordinates(ref_y, ref_x))

    mv_copies = TrajectoryGrid(times=ips.times, y=y, x=x, dB=ips.dB, theta0=theta0, cfg=cfg)
    logger.debug('coupled simulation %s: N=%d reference=%d', model.name, cfg.n_particles, ref_particles)
    return CoupledPair(ips=ips, mv_copies=mv_copies, reference_flow=reference_flow)


def subsample(grid, cfg):
    """Complete observations at t_j = j Delta, taken every m fine steps."""
    expected = (cfg.n_particles, cfg.n_fine + 1)
    if grid.y.shape != expected or grid.x.shape != expected:
        raise ArgumentError(f'Grid shape {grid.y.shape} does not match the configuration {expected}.')
    index = np.arange(0, cfg.n_fine + 1, cfg.fine_factor)
    return ObservationSet(
        delta=cfg.delta,
        times=grid.times[index].copy(),
        y=grid.y[:, index].copy(),
        x=grid.x[:, index].copy(),
        mode=constants.MODE.COMPLETE,
    )
