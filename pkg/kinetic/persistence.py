"""
File formats: trajectory dumps, observation CSV, report records and tables.

CSV floats are written with 17 significant digits so they read back
bit-for-bit.
"""
import struct

import numpy as np
import pandas as pd

from kinetic import constants
from kinetic.exceptions import ArgumentError
from kinetic.observe import ObservationSet
from kinetic.simulate import SimConfig, TrajectoryGrid


TRAJECTORY_MAGIC = b'KIPS'
TRAJECTORY_VERSION = 1

# magic, version, N, n, m, T, seed, number of parameters, has increments
_HEADER = struct.Struct('<4sIqqqdQqB')


def dump_trajectory(grid, path):
    """
    Little-endian binary dump: header (N, n, m, T, seed, theta0 length),
    theta0, then the columns times, y, x and, when retained, dB, each as
    row-major 64-bit floats.
    """
    cfg = grid.cfg
    if not 0 <= int(cfg.seed) < 1 << 64:
        raise ArgumentError(f'Seed {cfg.seed} does not fit the unsigned 64-bit header field.', seed=cfg.seed)
    theta0 = np.asarray(grid.theta0, dtype='<f8')
    has_dB = grid.dB is not None
    with open(path, 'wb') as fp:
        fp.write(_HEADER.pack(TRAJECTORY_MAGIC, TRAJECTORY_VERSION, cfg.n_particles, cfg.obs_steps,
                              cfg.fine_factor, float(cfg.horizon), int(cfg.seed), len(theta0), int(has_dB)))
        fp.write(theta0.tobytes())
        for column in (grid.times, grid.y, grid.x) + ((grid.dB,) if has_dB else ()):
            fp.write(np.ascontiguousarray(column, dtype='<f8').tobytes())


def load_trajectory(path):
    with open(path, 'rb') as fp:
        raw = fp.read()
    if len(raw) < _HEADER.size:
        raise ArgumentError(f'{path} is too short to be a trajectory dump.')
    magic, version, n_particles, obs_steps, fine_factor, horizon, seed, p, has_dB = _HEADER.unpack_from(raw)
    if magic != TRAJECTORY_MAGIC or version != TRAJECTORY_VERSION:
        raise ArgumentError(f'{path} is not a version {TRAJECTORY_VERSION} trajectory dump.')

    cfg = SimConfig(n_particles=n_particles, horizon=horizon, obs_steps=obs_steps, fine_factor=fine_factor, seed=seed)
    sizes = [p, cfg.n_fine + 1, n_particles * (cfg.n_fine + 1), n_particles * (cfg.n_fine + 1)]
    if has_dB:
        sizes.append(n_particles * cfg.n_fine)
    body = np.frombuffer(raw, dtype='<f8', offset=_HEADER.size)
    if body.size != sum(sizes):
        raise ArgumentError(f'{path} holds {body.size} values, expected {sum(sizes)}.')
    parts = np.split(body.astype(float), np.cumsum(sizes)[:-1])
    return TrajectoryGrid(
        times=parts[1],
        y=parts[2].reshape(n_particles, -1),
        x=parts[3].reshape(n_particles, -1),
        dB=parts[4].reshape(n_particles, -1) if has_dB else None,
        theta0=parts[0],
        cfg=cfg,
    )


def _long_frame(times, y, x=None):
    n_particles, n_times = y.shape
    frame = pd.DataFrame({
        't': np.repeat(times, n_particles),
        'particle': np.tile(np.arange(n_particles), n_times),
        'y': y.T.ravel(),
    })
    if x is not None:
        frame['x'] = x.T.ravel()
    return frame


def write_table(frame, path):
    frame = frame if isinstance(frame, pd.DataFrame) else pd.DataFrame(frame)
    frame.to_csv(path, index=False, float_format=constants.FLOAT_FORMAT)


def trajectory_to_csv(grid, path):
    write_table(_long_frame(grid.times, grid.y, grid.x), path)


def observations_to_csv(obs, path):
    """Header t,particle,y[,x]; one row per (time, particle), time-major."""
    write_table(_long_frame(obs.times, obs.y, obs.x), path)


def observations_from_csv(path, delta=None):
    """
    Reads back an observation CSV. The mode follows the presence of the x
    column; delta defaults to the mean spacing of the times.
    """
    frame = pd.read_csv(path, float_precision='round_trip')
    missing = {'t', 'particle', 'y'} - set(frame.columns)
    if missing:
        raise ArgumentError(f'{path} lacks the columns {sorted(missing)}.')
    frame = frame.sort_values(['t', 'particle'], kind='mergesort')
    times = np.unique(frame['t'].to_numpy())
    n_particles = frame['particle'].nunique()
    if len(frame) != n_particles * len(times):
        raise ArgumentError(f'{path} is not a full (time, particle) grid.')
    y = frame['y'].to_numpy().reshape(len(times), n_particles).T.copy()
    x = None
    mode = constants.MODE.PARTIAL
    if 'x' in frame.columns:
        x = frame['x'].to_numpy().reshape(len(times), n_particles).T.copy()
        mode = constants.MODE.COMPLETE
    if delta is None:
        delta = (times[-1] - times[0]) / (len(times) - 1)
    return ObservationSet(delta=float(delta), times=times, y=y, x=x, mode=mode)


def _format_value(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_record(record, path):
    """Flat key=value text record, one pair per line, keys in insertion order."""
    with open(path, 'w') as fp:
        for key, value in record.items():
            fp.write(f'{key}={_format_value(value)}\n')


def read_record(path):
    record = {}
    with open(path) as fp:
        for line in fp:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition('=')
            record[key] = _parse_value(value)
    return record


def _parse_value(value):
    if value in ('True', 'False'):
        return value == 'True'
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def rank_reports_to_csv(reports, path):
    write_table([report.to_row(k) for k, report in enumerate(reports)], path)
