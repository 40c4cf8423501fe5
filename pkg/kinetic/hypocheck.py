"""
Numerical check of the Hormander rank condition for the 2N-dimensional system.

States are flattened as z = (y_1, x_1, y_2, x_2, ..., y_N, x_N). The noise
field of particle k is A_k(z) = a^(k)(z) e_{x_k}, the Stratonovich drift is

    A_0(z) = B(z) - 1/2 sum_l a^(l)(z) d_{x_l} a^(l)(z) e_{x_l},

and the rank is read from the singular values of the 2N columns
{A_k(z), [A_0, A_k](z)}. Coefficients are called raw, without the diffusion
floor, so degenerate noise is reported rather than rejected.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from kinetic import constants
from kinetic.exceptions import ArgumentError, NumericError, ParameterOutOfBox
from kinetic.measure import EmpiricalMeasure
from kinetic.rng import derive_seed


logger = logging.getLogger('kinetic.hypocheck')


def integrated_position(y, x):
    return x


@dataclass(frozen=True)
class RankReport:
    singular_values: np.ndarray
    numeric_rank: int
    full_rank: bool
    probe_state: np.ndarray

    def to_row(self, probe):
        row = {'probe': probe, 'rank': self.numeric_rank, 'full_rank': int(self.full_rank)}
        row.update({f's{k + 1}': float(s) for k, s in enumerate(self.singular_values)})
        return row


@dataclass(frozen=True)
class VectorFieldSystem:
    dim: int
    drift_field: Callable
    noise_columns: List[Callable]
    stratonovich_drift: Callable
    correction: Callable

    @property
    def n_particles(self):
        return self.dim // 2


def _unflatten(z, n_particles):
    z = np.asarray(z, dtype=float)
    if z.shape != (2 * n_particles,):
        raise ArgumentError(f'State must have {2 * n_particles} coordinates, got shape {z.shape}.')
    return z[0::2], z[1::2]


def build_fields(model, theta, n_particles, position_drift=integrated_position, fd_step=1e-6):
    """
    The fields B, A_k and A_0 of `model` at theta for n_particles particles.

    :param position_drift [Callable]: b_1(y, x) of the position equation; the
        integrated form dY = X dt by default.
    :param fd_step [float]: relative step of the central differences d_{x_l} a^(l).
    """
    if n_particles < 1:
        raise ArgumentError(f'n_particles must be >= 1, got {n_particles}.')
    theta = np.asarray(theta, dtype=float)
    if not model.param_box.contains(theta):
        raise ParameterOutOfBox(f'theta={list(theta)} lies outside the parameter box of {model.name}.')
    mu, sigma = model.split(theta)
    dim = 2 * n_particles

    def diffusion(y, x):
        return np.asarray(model.diffusion(sigma, y, x, EmpiricalMeasure.from_coordinates(y, x)), dtype=float)

    def drift_field(z):
        y, x = _unflatten(z, n_particles)
        out = np.empty(dim)
        out[0::2] = position_drift(y, x)
        out[1::2] = model.drift(mu, y, x, EmpiricalMeasure.from_coordinates(y, x))
        return out

    def noise_column(k):
        def field(z):
            y, x = _unflatten(z, n_particles)
            out = np.zeros(dim)
            out[2 * k + 1] = diffusion(y, x)[k]
            return out
        return field

    def correction(z):
        """-1/2 a^(l) d_{x_l} a^(l) on every x coordinate."""
        y, x = _unflatten(z, n_particles)
        a = diffusion(y, x)
        out = np.zeros(dim)
        for l in range(n_particles):
            h = fd_step * (1.0 + abs(x[l]))
            up, down = x.copy(), x.copy()
            up[l] += h
            down[l] -= h
            slope = (diffusion(y, up)[l] - diffusion(y, down)[l]) / (2 * h)
            out[2 * l + 1] = -0.5 * a[l] * slope
        return out

    def stratonovich_drift(z):
        return drift_field(z) + correction(z)

    return VectorFieldSystem(
        dim=dim,
        drift_field=drift_field,
        noise_columns=[noise_column(k) for k in range(n_particles)],
        stratonovich_drift=stratonovich_drift,
        correction=correction,
    )


def jvp(field, z, v, fd_step=1e-5):
    """J_field(z) v by central differences, step fd_step (1 + |z|) / |v|."""
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return np.zeros_like(z)
    h = fd_step * (1.0 + np.linalg.norm(z)) / norm
    return (field(z + h * v) - field(z - h * v)) / (2 * h)


def bracket(f, g, z, fd_step=1e-5):
    """[f, g](z) = J_g(z) f(z) - J_f(z) g(z)."""
    result = jvp(g, z, f(z), fd_step) - jvp(f, z, g(z), fd_step)
    if not np.all(np.isfinite(result)):
        raise NumericError('Non-finite Lie bracket.', state=list(np.asarray(z)))
    return result


def lie_bracket(system, k, z, fd_step=1e-5):
    """[A_0, A_k](z) for particle k, 1 <= k <= N."""
    if not 1 <= k <= system.n_particles:
        raise ArgumentError(f'Particle index {k} outside [1, {system.n_particles}].')
    return bracket(system.stratonovich_drift, system.noise_columns[k - 1], z, fd_step)


def spanning_columns(system, z, fd_step=1e-5):
    columns = []
    for k in range(1, system.n_particles + 1):
        columns.append(system.noise_columns[k - 1](z))
        columns.append(lie_bracket(system, k, z, fd_step))
    return np.column_stack(columns)


def numeric_rank(singular_values, rtol):
    largest = singular_values[0] if len(singular_values) else 0.0
    if largest <= 0.0:
        return 0
    return int(np.sum(singular_values > rtol * largest))


def probe_states(n_particles, n_probes=10, seed=0, n_stress=2, stress_scale=10.0):
    """Standard normal states plus a few large-magnitude stress points."""
    rng = np.random.default_rng(derive_seed(seed, constants.STREAM.PROBE))
    states = list(rng.standard_normal((n_probes, 2 * n_particles)))
    states.extend(stress_scale * rng.standard_normal((n_stress, 2 * n_particles)))
    return states


def rank_check(model, theta, n_particles, probes=None, rtol=1e-8, fd_step=1e-5, position_drift=integrated_position,
               threads=None):
    """
    Singular values and numeric rank of {A_k, [A_0, A_k]} at every probe state.
    A degenerate rank is a report outcome, not an error.
    """
    system = build_fields(model, theta, n_particles, position_drift=position_drift)
    probes = probe_states(n_particles) if probes is None else [np.asarray(z, dtype=float) for z in probes]
    for z in probes:
        if not np.all(np.isfinite(z)):
            raise ArgumentError('Probe states must be finite.')

    def check(z):
        singular_values = np.linalg.svd(spanning_columns(system, z, fd_step), compute_uv=False)
        rank = numeric_rank(singular_values, rtol)
        return RankReport(singular_values=singular_values, numeric_rank=rank, full_rank=rank == system.dim,
                          probe_state=z)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(check, probes))
    else:
        reports = [check(z) for z in probes]
    logger.info('rank check %s N=%d: ranks %s', model.name, n_particles, [r.numeric_rank for r in reports])
    return reports
