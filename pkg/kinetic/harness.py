"""
Monte Carlo experiments: replication runs, normal-limit diagnostics and
log-log scaling studies.

Every replicate is regenerated from (seed, cell, replicate) alone, so rows do
not depend on thread count or scheduling. Finished replicates are appended to
a JSON-lines journal; the replication CSV is rewritten in (cell, mode,
replicate) order after every batch.
"""
import itertools
import json
import logging
import math
import os
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy import stats

import kinetic
from kinetic import constants
from kinetic.base import TaskDispatcher
from kinetic.contrast import OracleConfig, pi_bar_oracle
from kinetic.estimate import OptimizerConfig, fit
from kinetic.exceptions import ArgumentError, ImproperlyConfigured, InsufficientData, KineticError
from kinetic.helpers import BatchIterator, compensated_cov, compensated_mean, loglog_slope, utc_stamp
from kinetic.hypocheck import probe_states, rank_check
from kinetic.model import build_model, theta_zero
from kinetic.observe import make_partial, surrogate_error
from kinetic.persistence import (
    dump_trajectory,
    observations_to_csv,
    rank_reports_to_csv,
    trajectory_to_csv,
    write_record,
    write_table,
)
from kinetic.rng import derive_seed
from kinetic.simulate import SimConfig, simulate_coupled, simulate_ips, simulate_observations, subsample


logger = logging.getLogger('kinetic.harness')


@dataclass(frozen=True)
class Cell:
    index: int
    n_particles: int
    obs_steps: int
    fine_factor: int
    horizon: float

    @property
    def delta(self):
        return self.horizon / self.obs_steps

    @property
    def n_delta(self):
        return self.n_particles * self.delta

    @property
    def n_delta_flagged(self):
        return self.n_delta >= constants.N_DELTA_FLAG

    def sim_config(self, seed):
        return SimConfig(n_particles=self.n_particles, horizon=self.horizon, obs_steps=self.obs_steps,
                         fine_factor=self.fine_factor, seed=seed)


@dataclass(frozen=True)
class ExperimentConfig:
    model_tag: str = constants.MODEL.MEAN_FIELD_LANGEVIN
    theta0: Optional[tuple] = None
    half_width: float = 5.0
    n_particles: tuple = (125, 250, 500, 1000)
    obs_steps: tuple = (200,)
    fine_factors: tuple = (20,)
    horizon: float = 1.0
    replications: int = 100
    modes: tuple = (constants.MODE.COMPLETE, constants.MODE.PARTIAL)
    seed: int = 0
    output_dir: str = 'results'
    threads: int = 1
    timing: bool = False
    batch_size: int = 16
    ref_particles: Optional[int] = None
    min_clt_rows: int = 100
    histogram_bins: int = 30
    oracle_cfg: OracleConfig = field(default_factory=OracleConfig)
    opt_cfg: OptimizerConfig = field(default_factory=OptimizerConfig)
    hypo_particles: int = 3
    hypo_probes: int = 10
    hypo_rtol: float = 1e-8
    hypo_fd_step: float = 1e-5
    surrogate_obs_steps: tuple = (50, 100, 200, 400)
    surrogate_particles: int = 200
    poc_particles: tuple = (10, 50, 250)
    poc_seeds: int = 20
    poc_obs_steps: int = 20
    poc_fine_factor: int = 10

    def __post_init__(self):
        if self.model_tag not in constants.MODEL:
            raise ImproperlyConfigured(f"Unknown model '{self.model_tag}'. Valid values are: {list(constants.MODEL)}")
        if not self.modes or any(mode not in constants.MODE for mode in self.modes):
            raise ImproperlyConfigured(f'modes must be a nonempty subset of {list(constants.MODE)}, got {self.modes}.')
        if self.replications < 1:
            raise ImproperlyConfigured(f'replications must be >= 1, got {self.replications}.')
        if not (self.n_particles and self.obs_steps and self.fine_factors):
            raise ImproperlyConfigured('Every grid axis needs at least one value.')
        for cell in self.cells():
            # Raises ImproperlyConfigured on an invalid grid point.
            cell.sim_config(self.seed)

    @classmethod
    def from_settings(cls, settings):
        unknown = settings.unknown_options()
        if unknown:
            raise ImproperlyConfigured(f'Unknown configuration options: {unknown}')
        try:
            return cls(
                model_tag=settings.MODEL,
                theta0=None if settings.THETA0 is None else tuple(settings.THETA0),
                half_width=settings.HALF_WIDTH,
                n_particles=tuple(settings.N_PARTICLES),
                obs_steps=tuple(settings.OBS_STEPS),
                fine_factors=tuple(settings.FINE_FACTOR),
                horizon=settings.HORIZON,
                replications=settings.REPLICATIONS,
                modes=tuple(settings.MODES),
                seed=settings.SEED,
                output_dir=settings.OUTPUT_DIR,
                threads=settings.THREADS,
                timing=settings.TIMING,
                batch_size=settings.BATCH_SIZE,
                ref_particles=settings.REF_PARTICLES,
                min_clt_rows=settings.MIN_CLT_ROWS,
                histogram_bins=settings.HISTOGRAM_BINS,
                oracle_cfg=OracleConfig(
                    horizon=settings.HORIZON,
                    obs_steps=settings.ORACLE_OBS_STEPS,
                    n_particles=settings.ORACLE_PARTICLES,
                    fine_factor=settings.ORACLE_FINE_FACTOR,
                    n_seeds=settings.ORACLE_SEEDS,
                    seed=settings.SEED,
                    threads=settings.THREADS,
                ),
                opt_cfg=OptimizerConfig(
                    n_starts=settings.N_STARTS,
                    gtol=settings.GTOL,
                    max_evals=settings.MAX_EVALS,
                    seed=settings.SEED,
                ),
                hypo_particles=settings.HYPO_PARTICLES,
                hypo_probes=settings.HYPO_PROBES,
                hypo_rtol=settings.HYPO_RTOL,
                hypo_fd_step=settings.HYPO_FD_STEP,
                surrogate_obs_steps=tuple(settings.SURROGATE_OBS_STEPS),
                surrogate_particles=settings.SURROGATE_PARTICLES,
                poc_particles=tuple(settings.POC_PARTICLES),
                poc_seeds=settings.POC_SEEDS,
                poc_obs_steps=settings.POC_OBS_STEPS,
                poc_fine_factor=settings.POC_FINE_FACTOR,
            )
        except (ValueError, KeyError, KineticError) as exc:
            raise ImproperlyConfigured(f'Invalid configuration: {exc}')

    def model(self):
        return build_model(self.model_tag, self.theta0, self.half_width)

    def theta_true(self):
        if self.theta0 is not None:
            return np.asarray(self.theta0, dtype=float)
        return theta_zero(self.model())

    def cells(self):
        grid = itertools.product(self.n_particles, self.obs_steps, self.fine_factors)
        return [Cell(index=k, n_particles=n_particles, obs_steps=obs_steps, fine_factor=fine_factor,
                     horizon=self.horizon)
                for k, (n_particles, obs_steps, fine_factor) in enumerate(grid)]


@dataclass
class ReplicationRow:
    cell: Cell
    replicate: int
    seed: int
    mode: str
    theta_hat: np.ndarray
    errors: np.ndarray
    avar: np.ndarray
    p1: int
    contrast: float = math.nan
    n_evals: int = 0
    converged: bool = False
    on_boundary: bool = False
    error: str = ''
    wall_time: float = math.nan

    def to_dict(self):
        row = {
            'cell': self.cell.index,
            'replicate': self.replicate,
            'seed': self.seed,
            'mode': self.mode,
            'n_particles': self.cell.n_particles,
            'obs_steps': self.cell.obs_steps,
            'fine_factor': self.cell.fine_factor,
            'delta': self.cell.delta,
            'n_delta': self.cell.n_delta,
            'n_delta_flag': int(self.cell.n_delta_flagged),
            'converged': int(self.converged),
            'on_boundary': int(self.on_boundary),
        }
        for prefix, values in (('mu_hat', self.theta_hat[:self.p1]), ('sigma_hat', self.theta_hat[self.p1:]),
                               ('err_mu', self.errors[:self.p1]), ('err_sigma', self.errors[self.p1:]),
                               ('avar_mu', self.avar[:self.p1]), ('avar_sigma', self.avar[self.p1:])):
            for k, value in enumerate(values):
                row[f'{prefix}_{k + 1}'] = float(value)
        row.update(contrast=float(self.contrast), n_evals=int(self.n_evals), error=self.error,
                   wall_time=float(self.wall_time))
        return row


def _failed_row(cell, replicate, seed, mode, p, p1, exc):
    nan = np.full(p, np.nan)
    return ReplicationRow(cell=cell, replicate=replicate, seed=seed, mode=mode, theta_hat=nan, errors=nan,
                          avar=nan, p1=p1, error=f'{type(exc).__name__}: {exc}')


def run_replicate(cfg, model, theta0, cell, replicate):
    """
    Simulates one dataset of `cell` and fits it in every requested mode.
    Failures are recorded in the rows, not raised.
    """
    seed = derive_seed(cfg.seed, cell.index, replicate)
    p, p1 = len(theta0), model.p1
    start = time.perf_counter()
    rows = []
    try:
        obs = simulate_observations(model, theta0, cell.sim_config(seed))
    except KineticError as exc:
        logger.info('replicate %d of cell %d failed to simulate: %s', replicate, cell.index, exc)
        obs = None
        rows = [_failed_row(cell, replicate, seed, mode, p, p1, exc) for mode in cfg.modes]

    if obs is not None:
        for mode in cfg.modes:
            data = obs if mode == constants.MODE.COMPLETE else make_partial(obs)
            try:
                report = fit(model, data, mode, cfg.opt_cfg, theta0=theta0)
            except KineticError as exc:
                logger.info('replicate %d of cell %d failed to fit in mode %s: %s', replicate, cell.index, mode, exc)
                rows.append(_failed_row(cell, replicate, seed, mode, p, p1, exc))
                continue
            avar = np.full(p, np.nan)
            if report.plug_in is not None:
                avar = np.concatenate((np.diag(report.plug_in.mu_variance), np.diag(report.plug_in.sigma_variance)))
            rows.append(ReplicationRow(
                cell=cell, replicate=replicate, seed=seed, mode=mode, theta_hat=report.theta_hat,
                errors=report.normalized_errors, avar=avar, p1=p1, contrast=report.contrast_at_opt,
                n_evals=report.n_evals, converged=report.converged, on_boundary=report.on_boundary,
            ))

    wall_time = time.perf_counter() - start
    for row in rows:
        row.wall_time = wall_time
    logger.debug('replicate %d of cell %d done in %.3fs', replicate, cell.index, wall_time)
    return [row.to_dict() for row in rows], wall_time


class Journal:
    """Append-only JSON-lines record of finished replicates."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def load(self):
        done = {}
        if not self.path.exists():
            return done
        text = self.path.read_text()
        for line in text.splitlines():
            try:
                entry = json.loads(line)
                done[(entry['cell'], entry['replicate'])] = entry['rows']
            except (ValueError, KeyError, TypeError):
                logger.debug('skipping unreadable journal entry in %s', self.path)
        if text and not text.endswith('\n'):
            # a run was cut mid-write; new entries start on a fresh line
            with open(self.path, 'a') as fp:
                fp.write('\n')
        return done

    def append(self, cell, replicate, rows, wall_time):
        entry = json.dumps(dict(cell=cell, replicate=replicate, wall_time=wall_time, rows=rows))
        with self._lock:
            with open(self.path, 'a') as fp:
                fp.write(entry + '\n')
                fp.flush()
                os.fsync(fp.fileno())


def _ordered_frame(results, cfg):
    mode_order = {mode: k for k, mode in enumerate(cfg.modes)}
    rows = [row for rows in results.values() for row in rows]
    rows.sort(key=lambda row: (row['cell'], mode_order[row['mode']], row['replicate']))
    frame = pd.DataFrame(rows)
    if not cfg.timing and 'wall_time' in frame.columns:
        frame = frame.drop(columns=['wall_time'])
    return frame


def run_replications(cfg, journal_path=None, csv_path=None):
    """
    One row per (cell, mode, replicate). Replicates already in the journal
    are not rerun.

    :param cfg [ExperimentConfig]: experiment.
    :param journal_path [str]: JSON-lines journal used for resuming.
    :param csv_path [str]: replication CSV, rewritten after every batch.
    """
    model = cfg.model()
    theta0 = cfg.theta_true()
    jobs = [(cell, replicate) for cell in cfg.cells() for replicate in range(cfg.replications)]
    journal = Journal(journal_path) if journal_path else None
    results = journal.load() if journal else {}
    pending = [(cell, replicate) for cell, replicate in jobs if (cell.index, replicate) not in results]
    logger.info('%d replicates to run, %d resumed from the journal', len(pending), len(jobs) - len(pending))

    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads and cfg.threads > 1 else None

    def job(item):
        cell, replicate = item
        rows, wall_time = run_replicate(cfg, model, theta0, cell, replicate)
        if journal:
            journal.append(cell.index, replicate, rows, wall_time)
        return (cell.index, replicate), rows

    def runner(start, size):
        batch = pending[start:start + size]
        finished = list(pool.map(job, batch)) if pool else [job(item) for item in batch]
        results.update(finished)
        if csv_path:
            write_table(_ordered_frame(results, cfg), csv_path)
        return finished

    try:
        for _ in BatchIterator(runner, batch_size=cfg.batch_size, limit=len(pending)):
            pass
    finally:
        if pool:
            pool.shutdown()

    frame = _ordered_frame(results, cfg)
    if csv_path:
        write_table(frame, csv_path)
    return frame


# Normal-limit diagnostics.

@dataclass(frozen=True)
class OracleVariances:
    mu: np.ndarray
    sigma: np.ndarray
    mu_stderr: np.ndarray
    sigma_stderr: np.ndarray

    def sigma_variance(self, mode):
        return constants.SIGMA_VARIANCE_FACTOR[mode] * np.linalg.inv(self.sigma)

    def mu_variance(self):
        return np.linalg.inv(self.mu)

    def diagonal(self, mode):
        """Asymptotic variances of the normalized errors, mu block then sigma block."""
        return np.concatenate((np.diag(self.mu_variance()), np.diag(self.sigma_variance(mode))))


def oracle_variances(model, theta0, oracle_cfg=None):
    """
    Pibar(d_mu b d_mu b^T / c) and Pibar(d_sigma c d_sigma c^T / c^2) at theta0.
    Their inverses give the mu variance and, scaled by 2 or 9/4, the sigma variance.
    """
    mu0, sigma0 = model.split(np.asarray(theta0, dtype=float))
    p1, p2 = model.p1, model.p2

    def integrand(y, x, pi):
        a = model.diffusion(sigma0, y, x, pi)
        c = a * a
        db = model.drift_grad(mu0, y, x, pi)
        dc = 2.0 * a * model.diffusion_grad(sigma0, y, x, pi)
        mu_block = (db[:, None, :] * db[None, :, :] / c).reshape(p1 * p1, -1)
        sigma_block = (dc[:, None, :] * dc[None, :, :] / (c * c)).reshape(p2 * p2, -1)
        return np.concatenate((mu_block, sigma_block))

    estimate = pi_bar_oracle(integrand, model, theta0, oracle_cfg)
    split = p1 * p1
    return OracleVariances(
        mu=estimate.value[:split].reshape(p1, p1),
        sigma=estimate.value[split:].reshape(p2, p2),
        mu_stderr=estimate.stderr[:split].reshape(p1, p1),
        sigma_stderr=estimate.stderr[split:].reshape(p2, p2),
    )


@dataclass(frozen=True)
class CltCell:
    cell: int
    mode: str
    n_rows: int
    labels: tuple
    mean: np.ndarray
    cov: np.ndarray
    plug_in_variance: np.ndarray
    oracle_variance: Optional[np.ndarray]
    ad_statistic: np.ndarray
    ad_critical: np.ndarray

    @property
    def variance(self):
        return np.diag(self.cov)

    @property
    def plug_in_ratio(self):
        return self.variance / self.plug_in_variance

    @property
    def oracle_ratio(self):
        if self.oracle_variance is None:
            return np.full(len(self.labels), np.nan)
        return self.variance / self.oracle_variance

    @property
    def normal(self):
        return self.ad_statistic < self.ad_critical


@dataclass
class CltSummary:
    cells: list
    sigma_ratios: dict
    histograms: pd.DataFrame
    qq: pd.DataFrame

    def to_frame(self):
        records = []
        for entry in self.cells:
            for k, label in enumerate(entry.labels):
                records.append({
                    'cell': entry.cell,
                    'mode': entry.mode,
                    'component': label,
                    'n_rows': entry.n_rows,
                    'mean': entry.mean[k],
                    'variance': entry.variance[k],
                    'plug_in_variance': entry.plug_in_variance[k],
                    'oracle_variance': np.nan if entry.oracle_variance is None else entry.oracle_variance[k],
                    'plug_in_ratio': entry.plug_in_ratio[k],
                    'oracle_ratio': entry.oracle_ratio[k],
                    'ad_statistic': entry.ad_statistic[k],
                    'ad_critical_1pct': entry.ad_critical[k],
                    'normal': int(entry.normal[k]),
                })
        return pd.DataFrame(records)


def anderson_normal(sample, level=constants.ANDERSON_LEVEL):
    """Anderson-Darling statistic against the normal family and its critical value at `level` percent."""
    result = stats.anderson(np.asarray(sample, dtype=float), dist='norm')
    levels = list(result.significance_level)
    return float(result.statistic), float(result.critical_values[levels.index(level)])


def _plot_data(sample, bins, keys):
    sample = np.sort(np.asarray(sample, dtype=float))
    counts, edges = np.histogram(sample, bins=bins)
    density = counts / (len(sample) * np.diff(edges))
    histogram = pd.DataFrame(dict(keys, bin_left=edges[:-1], bin_right=edges[1:], count=counts, density=density))
    std = math.sqrt(compensated_mean((sample - compensated_mean(sample)) ** 2) * len(sample) / (len(sample) - 1))
    theoretical = stats.norm.ppf((np.arange(len(sample)) + 0.5) / len(sample))
    qq = pd.DataFrame(dict(keys, theoretical=theoretical, sample=(sample - compensated_mean(sample)) / std))
    return histogram, qq


def clt_summary(rows, oracle=None, min_rows=100, bins=30, out_dir=None):
    """
    Moments and normality of the normalized errors per (cell, mode).

    :param rows [DataFrame]: replication rows.
    :param oracle [OracleVariances]: limit values, optional.
    :param min_rows [int]: converged rows needed in every (cell, mode).
    :param out_dir [str]: when given, writes clt_summary.csv, clt_histogram.csv and clt_qq.csv.
    """
    labels = tuple(column for column in rows.columns if column.startswith('err_'))
    avar_labels = tuple('avar_' + label[len('err_'):] for label in labels)
    if not labels:
        raise ArgumentError('Rows carry no normalized errors.')

    cells, histograms, qqs = [], [], []
    variances = {}
    for (cell, mode), group in rows.groupby(['cell', 'mode'], sort=True):
        group = group[(group['converged'] == 1) & np.isfinite(group[list(labels)]).all(axis=1)]
        if len(group) < min_rows:
            raise InsufficientData(f'Cell {cell} mode {mode} has {len(group)} converged rows, {min_rows} needed.',
                                   cell=int(cell), mode=mode, rows=len(group))
        samples = group[list(labels)].to_numpy()
        mean, cov = compensated_cov(samples)
        ad = [anderson_normal(samples[:, k]) for k in range(len(labels))]
        plug_in = np.array([compensated_mean(group[label].to_numpy()) for label in avar_labels])
        entry = CltCell(
            cell=int(cell), mode=mode, n_rows=len(group), labels=labels, mean=mean, cov=cov,
            plug_in_variance=plug_in,
            oracle_variance=None if oracle is None else oracle.diagonal(mode),
            ad_statistic=np.array([s for s, _ in ad]), ad_critical=np.array([c for _, c in ad]),
        )
        assert np.allclose(cov, cov.T), "Covariance must be symmetric"
        cells.append(entry)
        variances[(int(cell), mode)] = entry.variance
        for k, label in enumerate(labels):
            histogram, qq = _plot_data(samples[:, k], bins, dict(cell=int(cell), mode=mode, component=label))
            histograms.append(histogram)
            qqs.append(qq)

    sigma_index = [k for k, label in enumerate(labels) if label.startswith('err_sigma')]
    sigma_ratios = {}
    for (cell, mode), variance in variances.items():
        complete = variances.get((cell, constants.MODE.COMPLETE))
        if mode == constants.MODE.PARTIAL and complete is not None:
            sigma_ratios[cell] = variance[sigma_index] / complete[sigma_index]

    summary = CltSummary(cells=cells, sigma_ratios=sigma_ratios, histograms=pd.concat(histograms, ignore_index=True),
                         qq=pd.concat(qqs, ignore_index=True))
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_table(summary.to_frame(), out_dir / 'clt_summary.csv')
        write_table(summary.histograms, out_dir / 'clt_histogram.csv')
        write_table(summary.qq, out_dir / 'clt_qq.csv')
    return summary


# Scaling studies.

def _study_rows(study, x, y):
    slope, r2 = loglog_slope(x, y)
    y = np.asarray(y, dtype=float)
    decreasing = bool(np.all(np.diff(y) < 0))
    degenerate = not math.isfinite(slope)
    if degenerate:
        logger.info('degenerate log-log fit for %s', study)
    return [dict(study=study, x=float(xi), y=float(yi), slope=slope, r2=r2, decreasing=int(decreasing),
                 degenerate=int(degenerate)) for xi, yi in zip(x, y)]


def poc_gaps(cfg, model, theta0):
    """Coupled mean-square gap averaged over poc_seeds seeds, per N in poc_particles."""
    gaps = []
    for n_particles in cfg.poc_particles:
        values = []
        for s in range(cfg.poc_seeds):
            sim_cfg = SimConfig(n_particles=n_particles, horizon=cfg.horizon, obs_steps=cfg.poc_obs_steps,
                                fine_factor=cfg.poc_fine_factor, seed=derive_seed(cfg.seed, n_particles, s))
            pair = simulate_coupled(model, theta0, sim_cfg, ref_particles=cfg.ref_particles, threads=cfg.threads)
            values.append(pair.gap())
        gaps.append(compensated_mean(values))
    return gaps


def surrogate_errors(cfg, model, theta0):
    """RMS of X~ - X per observation step count in surrogate_obs_steps."""
    errors = []
    for obs_steps in cfg.surrogate_obs_steps:
        sim_cfg = SimConfig(n_particles=cfg.surrogate_particles, horizon=cfg.horizon, obs_steps=obs_steps,
                            fine_factor=cfg.fine_factors[0], seed=derive_seed(cfg.seed, obs_steps))
        errors.append(surrogate_error(simulate_observations(model, theta0, sim_cfg, threads=cfg.threads)))
    return errors


def scaling_study(cfg, rows=None, out_path=None):
    """
    Log-log slopes of RMSE(mu_hat) vs N, RMSE(sigma_hat) vs N / Delta,
    RMS(X~ - X) vs Delta and the coupled gap vs N.

    Estimator errors come from complete-mode rows of the first (n, m) grid
    point; `rows` is computed with run_replications when not given.
    """
    for name in ('n_particles', 'surrogate_obs_steps', 'poc_particles'):
        if len(getattr(cfg, name)) < 3:
            raise ArgumentError(f'A scaling study needs at least 3 values of {name}.')
    model = cfg.model()
    theta0 = cfg.theta_true()
    p1 = model.p1
    if rows is None:
        rows = run_replications(cfg)

    complete = rows[(rows['mode'] == constants.MODE.COMPLETE) & (rows['obs_steps'] == cfg.obs_steps[0])
                    & (rows['fine_factor'] == cfg.fine_factors[0]) & (rows['converged'] == 1)]
    mu_cols = [f'mu_hat_{k + 1}' for k in range(p1)]
    sigma_cols = [f'sigma_hat_{k + 1}' for k in range(model.p2)]
    n_values, n_over_delta, rmse_mu, rmse_sigma = [], [], [], []
    for n_particles, group in complete.groupby('n_particles', sort=True):
        mu_sq = ((group[mu_cols].to_numpy() - theta0[:p1]) ** 2).sum(axis=1)
        sigma_sq = ((group[sigma_cols].to_numpy() - theta0[p1:]) ** 2).sum(axis=1)
        n_values.append(n_particles)
        n_over_delta.append(n_particles / group['delta'].iloc[0])
        rmse_mu.append(math.sqrt(compensated_mean(mu_sq)))
        rmse_sigma.append(math.sqrt(compensated_mean(sigma_sq)))

    deltas = [cfg.horizon / obs_steps for obs_steps in cfg.surrogate_obs_steps]
    records = []
    records += _study_rows('rmse_mu_vs_N', n_values, rmse_mu)
    records += _study_rows('rmse_sigma_vs_N_over_delta', n_over_delta, rmse_sigma)
    records += _study_rows('surrogate_rms_vs_delta', deltas, surrogate_errors(cfg, model, theta0))
    records += _study_rows('poc_gap_vs_N', list(cfg.poc_particles), poc_gaps(cfg, model, theta0))
    table = pd.DataFrame(records)
    if out_path:
        write_table(table, out_path)
    return table


# Provenance.

def git_revision(path=None):
    try:
        completed = subprocess.run(['git', 'rev-parse', 'HEAD'], cwd=path or os.path.dirname(__file__),
                                   capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return None
    if completed.returncode != 0:
        return None
    return completed.stdout.strip() or None


def write_manifest(out_dir, config_text, command=None, elapsed=None):
    manifest = {
        'command': command,
        'elapsed': elapsed,
        'version': kinetic.__version__,
        'git_revision': git_revision(),
        'created': utc_stamp(time.time()),
        'config': config_text,
    }
    path = Path(out_dir) / constants.MANIFEST_FILE
    with open(path, 'w') as fp:
        json.dump(manifest, fp, indent=2)
    return path


class ExperimentRunner(TaskDispatcher):
    """
    The command-line tasks. Each one writes its outputs under cfg.output_dir
    and returns what it computed.

    :param cfg [ExperimentConfig]: experiment configuration.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.out = Path(cfg.output_dir)

    def _path(self, name):
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def _first_dataset(self):
        cell = self.cfg.cells()[0]
        return cell, cell.sim_config(derive_seed(self.cfg.seed, cell.index, 0))

    def simulate(self):
        cell, sim_cfg = self._first_dataset()
        return self._dispatcher('simulate', self._simulate, target=self.cfg.model_tag, sim_cfg=sim_cfg)

    def _simulate(self, sim_cfg):
        grid = simulate_ips(self.cfg.model(), self.cfg.theta_true(), sim_cfg, threads=self.cfg.threads)
        dump_trajectory(grid, self._path('trajectory.bin'))
        observations_to_csv(subsample(grid, sim_cfg), self._path('observations.csv'))
        if grid.y.size <= 1_000_000:
            trajectory_to_csv(grid, self._path('trajectory.csv'))
        return grid

    def fit(self):
        cell, sim_cfg = self._first_dataset()
        return self._dispatcher('fit', self._fit, target=self.cfg.model_tag, sim_cfg=sim_cfg)

    def _fit(self, sim_cfg):
        model = self.cfg.model()
        theta0 = self.cfg.theta_true()
        obs = simulate_observations(model, theta0, sim_cfg, threads=self.cfg.threads)
        reports = {}
        for mode in self.cfg.modes:
            data = obs if mode == constants.MODE.COMPLETE else make_partial(obs)
            reports[mode] = fit(model, data, mode, self.cfg.opt_cfg, theta0=theta0)
            write_record(reports[mode].to_record(), self._path(f'fit_{mode}.txt'))
        write_table([reports[mode].to_csv_row() for mode in self.cfg.modes], self._path('fit.csv'))
        return reports

    def replicate(self):
        return self._dispatcher(
            'replicate', run_replications, target=str(self.out), cfg=self.cfg,
            journal_path=self._path(constants.JOURNAL_FILE), csv_path=self._path(constants.REPLICATIONS_CSV),
        )

    def oracle(self):
        return self._dispatcher('oracle', self._oracle, target=self.cfg.model_tag)

    def _oracle(self):
        model = self.cfg.model()
        variances = oracle_variances(model, self.cfg.theta_true(), self.cfg.oracle_cfg)
        records = []
        for mode in self.cfg.modes:
            for k, value in enumerate(variances.diagonal(mode)):
                block, index = ('mu', k + 1) if k < model.p1 else ('sigma', k - model.p1 + 1)
                records.append(dict(mode=mode, component=f'{block}_{index}', variance=value))
        write_table(records, self._path('oracle.csv'))
        return variances

    def clt(self):
        rows = self.replicate()
        oracle = self.oracle()
        return self._dispatcher('clt', clt_summary, target=str(self.out), rows=rows, oracle=oracle,
                                min_rows=self.cfg.min_clt_rows, bins=self.cfg.histogram_bins,
                                out_dir=self._path(''))

    def scaling(self):
        rows = self.replicate()
        return self._dispatcher('scaling', scaling_study, target=str(self.out), cfg=self.cfg, rows=rows,
                                out_path=self._path('scaling.csv'))

    def hypo_check(self):
        return self._dispatcher('hypo-check', self._hypo_check, target=self.cfg.model_tag)

    def _hypo_check(self):
        probes = probe_states(self.cfg.hypo_particles, n_probes=self.cfg.hypo_probes, seed=self.cfg.seed)
        reports = rank_check(self.cfg.model(), self.cfg.theta_true(), self.cfg.hypo_particles, probes=probes,
                             rtol=self.cfg.hypo_rtol, fd_step=self.cfg.hypo_fd_step, threads=self.cfg.threads)
        rank_reports_to_csv(reports, self._path('rank.csv'))
        return reports
