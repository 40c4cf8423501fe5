"""
Observation datasets and the surrogate velocity.

Under partial observation only positions are recorded. The velocity is
replaced by the forward difference X~_j = (Y_{j+1} - Y_j) / Delta, which is
defined for j = 0, ..., n - 1.
"""
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from kinetic import constants
from kinetic.exceptions import ArgumentError
from kinetic.measure import EmpiricalMeasure, w2


@dataclass(frozen=True)
class ObservationSet:
    delta: float
    times: np.ndarray
    y: np.ndarray
    x: Optional[np.ndarray]
    mode: str = constants.MODE.COMPLETE

    def __post_init__(self):
        if self.mode not in constants.MODE:
            raise ArgumentError(f"Unknown observation mode '{self.mode}'.")
        if not self.delta > 0:
            raise ArgumentError(f'delta must be > 0, got {self.delta}.')
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        times = np.asarray(self.times, dtype=float)
        if times.shape != (y.shape[1],):
            raise ArgumentError(f'times has shape {times.shape}, expected ({y.shape[1]},).')
        object.__setattr__(self, 'y', y)
        object.__setattr__(self, 'times', times)
        if self.mode == constants.MODE.COMPLETE:
            if self.x is None:
                raise ArgumentError('Complete observations need velocities.')
            x = np.atleast_2d(np.asarray(self.x, dtype=float))
            if x.shape != y.shape:
                raise ArgumentError(f'x has shape {x.shape}, y has shape {y.shape}.')
            object.__setattr__(self, 'x', x)
        elif self.x is not None:
            raise ArgumentError('Partial observations carry no velocities.')

    @property
    def n_particles(self):
        return self.y.shape[0]

    @property
    def n_intervals(self):
        return self.y.shape[1] - 1

    @property
    def is_complete(self):
        return self.mode == constants.MODE.COMPLETE

    def measure(self, j):
        """Pi^N at observation j (complete data only)."""
        if not self.is_complete:
            raise ArgumentError('Partial observations have no empirical measure of the true states.')
        return EmpiricalMeasure.from_coordinates(self.y[:, j], self.x[:, j])

    def permuted(self, order):
        """Same data with particles relabelled by `order`."""
        order = np.asarray(order)
        return replace(self, y=self.y[order], x=None if self.x is None else self.x[order])


@dataclass(frozen=True)
class SurrogateSet:
    delta: float
    y: np.ndarray
    x_tilde: np.ndarray
    measures: tuple

    @property
    def n_columns(self):
        return self.x_tilde.shape[1]


@dataclass(frozen=True)
class GaussianWeights:
    xi: np.ndarray
    xi_tilde: np.ndarray
    u: np.ndarray


def make_partial(obs):
    if not obs.is_complete:
        return obs
    return ObservationSet(delta=obs.delta, times=obs.times, y=obs.y, x=None, mode=constants.MODE.PARTIAL)


def surrogate(obs):
    """
    Forward-difference velocities and the measures built from (Y_j, X~_j),
    for j = 0, ..., n - 1. Velocities in `obs`, if any, are not read.
    """
    if obs.n_intervals < 2:
        raise ArgumentError(f'The surrogate needs n >= 2 intervals, got {obs.n_intervals}.')
    x_tilde = (obs.y[:, 1:] - obs.y[:, :-1]) / obs.delta
    y = obs.y[:, :-1]
    measures = tuple(EmpiricalMeasure.from_coordinates(y[:, j], x_tilde[:, j]) for j in range(x_tilde.shape[1]))
    return SurrogateSet(delta=obs.delta, y=y, x_tilde=x_tilde, measures=measures)


def _midpoint_weights(m, delta):
    # Weight of the l-th fine increment, taken at the step midpoint.
    fine = delta / m
    s = (np.arange(m) + 0.5) * fine
    scale = delta ** 1.5
    return (delta - s) / scale, s / scale


def gaussian_weights(grid, cfg):
    """
    xi_j = Delta^{-3/2} int ((j+1)Delta - s) dB_s and xi~_j = Delta^{-3/2} int (s - j Delta) dB_s
    over each observation interval, discretized on the retained fine increments.
    U_j = xi~_j + xi_{j+1}.
    """
    if grid.dB is None:
        raise ArgumentError('The grid does not retain its Brownian increments.')
    if cfg.fine_factor < 2:
        raise ArgumentError('Gaussian weights need fine_factor >= 2.')
    n_particles, n_fine = grid.dB.shape
    if n_fine != cfg.n_fine:
        raise ArgumentError(f'Grid has {n_fine} increments, the configuration {cfg.n_fine}.')
    dB = grid.dB.reshape(n_particles, cfg.obs_steps, cfg.fine_factor)
    w_xi, w_tilde = _midpoint_weights(cfg.fine_factor, cfg.delta)
    xi = dB @ w_xi
    xi_tilde = dB @ w_tilde
    return GaussianWeights(xi=xi, xi_tilde=xi_tilde, u=xi_tilde[:, :-1] + xi[:, 1:])


def surrogate_error(obs):
    """RMS of X~_j - X_j over all particles and j = 0, ..., n - 1."""
    if not obs.is_complete:
        raise ArgumentError('The surrogate error needs the true velocities.')
    diff = surrogate(obs).x_tilde - obs.x[:, :-1]
    return math.sqrt(float(np.mean(diff ** 2)))


def surrogate_w2(obs):
    """RMS over j of W2(Pi~_j, Pi_j)."""
    if not obs.is_complete:
        raise ArgumentError('The surrogate distance needs the true velocities.')
    sur = surrogate(obs)
    distances = np.array([w2(sur.measures[j], obs.measure(j)) for j in range(sur.n_columns)])
    return math.sqrt(float(np.mean(distances ** 2)))
