import math
from datetime import datetime

import numpy as np
import pytz
from scipy import stats

from kinetic.constants import MANIFEST_DATETIME_FORMAT


class BatchIterator:
    """
    Iterates over the results of a job list, running it batch by batch.

    :param runner [Callable]: called as runner(start=..., size=...) and returning the ordered
        results of jobs start, ..., start + size - 1.
    :param batch_size [int]: jobs per batch.
    :param limit [int]: total number of jobs.
    """

    def __init__(self, runner, batch_size=16, limit=None):
        self.runner = runner
        self.batch_size = max(1, batch_size)
        self.limit = limit
        self.done_count = 0

        if self.limit is not None and self.limit < self.batch_size:
            self.batch_size = max(1, self.limit)
        self._finished = self.limit == 0

    def _run_batch(self):
        size = self.batch_size
        if self.limit is not None:
            size = min(size, self.limit - self.done_count)

        result = self.runner(start=self.done_count, size=size)
        self.done_count += len(result)

        if len(result) < size or self.done_count == self.limit:
            self._finished = True

        return result

    def __iter__(self):
        while not self._finished:
            yield from self._run_batch()


def from_epoch_to_datetime(timestamp, timezone=pytz.UTC):
    return datetime.fromtimestamp(timestamp, tz=timezone)


def utc_stamp(timestamp):
    return from_epoch_to_datetime(timestamp).strftime(MANIFEST_DATETIME_FORMAT)


def compensated_sum(values):
    return math.fsum(np.asarray(values, dtype=float).ravel())


def compensated_mean(values):
    values = np.asarray(values, dtype=float).ravel()
    return compensated_sum(values) / len(values)


def compensated_cov(samples):
    """
    Covariance of the rows of `samples` (shape R x p) using compensated sums,
    so the result does not depend on row order beyond rounding of the inputs.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, p = samples.shape
    means = np.array([compensated_mean(samples[:, k]) for k in range(p)])
    centered = samples - means
    cov = np.empty((p, p))
    for k in range(p):
        for l in range(k, p):
            cov[k, l] = cov[l, k] = compensated_sum(centered[:, k] * centered[:, l]) / (n - 1)
    return means, cov


def loglog_slope(x, y):
    """
    Least-squares slope of log(y) against log(x).

    Returns (slope, r_squared); both NaN when fewer than two usable points remain.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    if keep.sum() < 2:
        return float('nan'), float('nan')
    fit = stats.linregress(np.log(x[keep]), np.log(y[keep]))
    return float(fit.slope), float(fit.rvalue ** 2)
