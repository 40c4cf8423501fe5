"""
Empirical measures on the plane.

A point is z = (y, x): position first, velocity second. Every point of an
EmpiricalMeasure carries weight 1/N.
"""
import itertools

import numpy as np
from scipy.optimize import linear_sum_assignment

from kinetic.exceptions import ArgumentError


class EmpiricalMeasure:

    __slots__ = ('points',)

    def __init__(self, points):
        points = np.array(points, dtype=float, copy=True)
        if points.ndim == 1 and points.size == 2:
            points = points.reshape(1, 2)
        if points.ndim != 2 or points.shape[1] != 2:
            raise ArgumentError(f'Points must have shape (N, 2), got {points.shape}.')
        if points.shape[0] == 0:
            raise ArgumentError('An empirical measure needs at least one point.')
        if not np.all(np.isfinite(points)):
            raise ArgumentError('Empirical measure points must be finite.')
        points.flags.writeable = False
        self.points = points

    @classmethod
    def from_coordinates(cls, y, x):
        return cls(np.column_stack((np.ravel(y), np.ravel(x))))

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def y(self):
        return self.points[:, 0]

    @property
    def x(self):
        return self.points[:, 1]

    def __len__(self):
        return self.size

    def __repr__(self):
        return f'EmpiricalMeasure(size={self.size})'


def _ensure_measure(pi):
    if isinstance(pi, EmpiricalMeasure):
        return pi
    return EmpiricalMeasure(pi)


def squared_cost(a, b):
    diff = a.points[:, None, :] - b.points[None, :, :]
    return np.einsum('ijk,ijk->ij', diff, diff)


def w2(a, b):
    """
    Exact Wasserstein-2 distance between two empirical measures of equal size.

    Solved as a linear assignment problem on the squared Euclidean costs.
    """
    a, b = _ensure_measure(a), _ensure_measure(b)
    if a.size != b.size:
        raise ArgumentError(
            f'w2 needs measures of equal size, got {a.size} and {b.size}.',
            sizes=(a.size, b.size),
        )
    cost = squared_cost(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].sum() / a.size))


def w2_bruteforce(a, b):
    """Minimum over all N! couplings; only meant for small N (tests)."""
    a, b = _ensure_measure(a), _ensure_measure(b)
    if a.size != b.size:
        raise ArgumentError('w2 needs measures of equal size.')
    cost = squared_cost(a, b)
    rows = np.arange(a.size)
    best = min(cost[rows, list(perm)].sum() for perm in itertools.permutations(range(a.size)))
    return float(np.sqrt(best / a.size))


def moment(pi, p):
    """W_p^p(pi, delta_0) = (1/N) sum |z_i|^p."""
    if p < 1:
        raise ArgumentError(f'Moment order must be >= 1, got {p}.')
    pi = _ensure_measure(pi)
    norms = np.hypot(pi.y, pi.x)
    return float(np.mean(norms ** p))


def mean_position(pi):
    return float(np.mean(_ensure_measure(pi).y))
