import json
import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

import kinetic
from kinetic import constants
from kinetic.contrast import OracleConfig
from kinetic.estimate import OptimizerConfig
from kinetic.exceptions import (
    ArgumentError,
    ImproperlyConfigured,
    InsufficientData,
    OptimizationError,
    SimulationDiverged,
)
from kinetic.harness import (
    Cell,
    ExperimentConfig,
    ExperimentRunner,
    Journal,
    OracleVariances,
    clt_summary,
    oracle_variances,
    run_replications,
    scaling_study,
    write_manifest,
)
from kinetic.helpers import loglog_slope
from kinetic.settings import ExperimentSettings


C, P = constants.MODE.COMPLETE, constants.MODE.PARTIAL

TINY_ORACLE = OracleConfig(obs_steps=5, n_particles=20, fine_factor=2, n_seeds=2, seed=1)


def tiny_config(tmp_path, **kwargs):
    options = dict(
        n_particles=(10,), obs_steps=(10,), fine_factors=(2,), replications=2, seed=5,
        output_dir=str(tmp_path / 'out'), opt_cfg=OptimizerConfig(n_starts=1, seed=5), oracle_cfg=TINY_ORACLE,
        hypo_particles=2, hypo_probes=2,
    )
    options.update(kwargs)
    return ExperimentConfig(**options)


def test_one_row_per_cell_mode_and_replicate(tmp_path):
    frame = run_replications(tiny_config(tmp_path))
    assert len(frame) == 4
    assert list(zip(frame['mode'], frame['replicate'])) == [(C, 0), (C, 1), (P, 0), (P, 1)]
    assert 'wall_time' not in frame.columns
    assert {'mu_hat_1', 'mu_hat_2', 'sigma_hat_1', 'err_mu_1', 'err_sigma_1', 'avar_sigma_1', 'n_delta_flag'} <= \
        set(frame.columns)
    # both modes fit the same dataset
    assert frame.groupby('replicate')['seed'].nunique().eq(1).all()


def test_rerun_is_byte_identical(tmp_path):
    cfg = tiny_config(tmp_path)
    run_replications(cfg, csv_path=tmp_path / 'first.csv')
    run_replications(cfg, csv_path=tmp_path / 'second.csv')
    assert (tmp_path / 'first.csv').read_bytes() == (tmp_path / 'second.csv').read_bytes()


def test_thread_count_does_not_change_rows(tmp_path):
    run_replications(tiny_config(tmp_path, threads=1, batch_size=3), csv_path=tmp_path / 'serial.csv')
    run_replications(tiny_config(tmp_path, threads=2, batch_size=3), csv_path=tmp_path / 'threaded.csv')
    assert (tmp_path / 'serial.csv').read_bytes() == (tmp_path / 'threaded.csv').read_bytes()


def test_timing_column_is_optional(tmp_path):
    frame = run_replications(tiny_config(tmp_path, timing=True, replications=1))
    assert (frame['wall_time'] > 0).all()


def test_resume_from_a_cut_journal(tmp_path):
    cfg = tiny_config(tmp_path)
    journal = tmp_path / 'journal.jsonl'
    run_replications(cfg, journal_path=journal, csv_path=tmp_path / 'fresh.csv')
    lines = journal.read_text().splitlines()
    assert len(lines) == 2
    journal.write_text(lines[0] + '\n' + lines[1][:20])

    run_replications(cfg, journal_path=journal, csv_path=tmp_path / 'resumed.csv')
    assert (tmp_path / 'fresh.csv').read_bytes() == (tmp_path / 'resumed.csv').read_bytes()
    assert len(Journal(journal).load()) == 2


def test_finished_journal_is_not_rerun(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path)
    journal = tmp_path / 'journal.jsonl'
    first = run_replications(cfg, journal_path=journal)

    def fail(*args, **kwargs):
        raise AssertionError('replicate rerun')

    monkeypatch.setattr('kinetic.harness.run_replicate', fail)
    pd.testing.assert_frame_equal(run_replications(cfg, journal_path=journal), first)


def test_failures_are_recorded_in_the_rows(tmp_path, monkeypatch):
    def fail(*args, **kwargs):
        raise OptimizationError('no start converged', trace=[])

    monkeypatch.setattr('kinetic.harness.fit', fail)
    frame = run_replications(tiny_config(tmp_path, replications=1))
    assert len(frame) == 2
    assert frame['error'].str.startswith('OptimizationError').all()
    assert frame['mu_hat_1'].isna().all()
    assert (frame['converged'] == 0).all()


def test_configuration_validation(tmp_path):
    with pytest.raises(ImproperlyConfigured):
        tiny_config(tmp_path, modes=('C', 'X'))
    with pytest.raises(ImproperlyConfigured):
        tiny_config(tmp_path, model_tag='Harmonic')
    with pytest.raises(ImproperlyConfigured):
        tiny_config(tmp_path, obs_steps=(2,))
    with pytest.raises(ImproperlyConfigured):
        tiny_config(tmp_path, replications=0)


def test_configuration_from_settings(tmp_path):
    path = tmp_path / 'experiment.ini'
    path.write_text('[grid]\nn_particles = 10, 20\nobs_steps = 8\n[run]\nmodes = P\nseed = 3\n')
    cfg = ExperimentConfig.from_settings(ExperimentSettings(path))
    assert [cell.n_particles for cell in cfg.cells()] == [10, 20]
    assert cfg.modes == (P,)
    assert cfg.opt_cfg.seed == cfg.oracle_cfg.seed == 3

    path.write_text('[grid]\nn_particle = 10\n')
    with pytest.raises(ImproperlyConfigured):
        ExperimentConfig.from_settings(ExperimentSettings(path))
    path.write_text('[grid]\nn_particles = ten\n')
    with pytest.raises(ImproperlyConfigured):
        ExperimentConfig.from_settings(ExperimentSettings(path))


def test_n_delta_flag():
    assert Cell(index=0, n_particles=100, obs_steps=50, fine_factor=1, horizon=1.0).n_delta_flagged
    cell = Cell(index=0, n_particles=10, obs_steps=50, fine_factor=1, horizon=1.0)
    assert cell.n_delta == pytest.approx(0.2)
    assert not cell.n_delta_flagged


def _normal_rows(n_rows, sigma_scale=1.5, shuffle_seed=None):
    quantiles = stats.norm.ppf((np.arange(n_rows) + 0.5) / n_rows)
    frames = []
    for mode, scale in ((C, 1.0), (P, sigma_scale)):
        frames.append(pd.DataFrame({
            'cell': 0,
            'mode': mode,
            'replicate': np.arange(n_rows),
            'converged': 1,
            'err_mu_1': 2.0 * quantiles,
            'err_sigma_1': scale * quantiles[::-1],
            'avar_mu_1': 4.0,
            'avar_sigma_1': scale ** 2,
        }))
    rows = pd.concat(frames, ignore_index=True)
    if shuffle_seed is not None:
        rows = rows.sample(frac=1.0, random_state=shuffle_seed).reset_index(drop=True)
    return rows


def test_clt_summary_of_normal_rows(tmp_path):
    summary = clt_summary(_normal_rows(200), min_rows=100, bins=10, out_dir=tmp_path)
    assert len(summary.cells) == 2
    complete = summary.cells[0]
    assert complete.mode == C
    np.testing.assert_allclose(complete.mean, [0.0, 0.0], atol=1e-12)
    assert complete.variance[0] == pytest.approx(4.0, rel=0.05)
    np.testing.assert_allclose(complete.plug_in_ratio, complete.variance / [4.0, 1.0], rtol=1e-12)
    assert complete.normal.all()
    assert summary.sigma_ratios[0][0] == pytest.approx(2.25, rel=1e-12)
    for name in ('clt_summary.csv', 'clt_histogram.csv', 'clt_qq.csv'):
        assert (tmp_path / name).exists()
    assert len(summary.histograms) == 2 * 2 * 10
    assert len(summary.qq) == 2 * 2 * 200


def test_clt_summary_against_the_oracle():
    oracle = OracleVariances(mu=np.array([[0.25]]), sigma=np.array([[2.0]]), mu_stderr=np.zeros((1, 1)),
                             sigma_stderr=np.zeros((1, 1)))
    summary = clt_summary(_normal_rows(200), oracle=oracle)
    np.testing.assert_allclose(summary.cells[0].oracle_variance, [4.0, 1.0])
    np.testing.assert_allclose(summary.cells[1].oracle_variance, [4.0, 9.0 / 8.0])
    assert summary.to_frame()['oracle_ratio'].notna().all()


def test_clt_summary_ignores_row_order():
    first = clt_summary(_normal_rows(150))
    second = clt_summary(_normal_rows(150, shuffle_seed=7))
    for a, b in zip(first.cells, second.cells):
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.cov, b.cov)


def test_clt_summary_needs_enough_converged_rows():
    rows = _normal_rows(120)
    rows.loc[rows.index[:30], 'converged'] = 0
    with pytest.raises(InsufficientData):
        clt_summary(rows, min_rows=100)
    with pytest.raises(ArgumentError):
        clt_summary(rows.drop(columns=['err_mu_1', 'err_sigma_1']))


def test_scaling_study_needs_three_values(tmp_path):
    with pytest.raises(ArgumentError):
        scaling_study(tiny_config(tmp_path, n_particles=(10, 20, 40), poc_particles=(10, 50)))


def scaling_config(tmp_path, **kwargs):
    options = dict(surrogate_obs_steps=(10, 20, 40), surrogate_particles=20, poc_particles=(5, 10, 20), poc_seeds=2,
                   poc_obs_steps=5, poc_fine_factor=2, ref_particles=100)
    options.update(kwargs)
    return tiny_config(tmp_path, **options)


def test_scaling_study_fits_and_writes_every_study(tmp_path):
    cfg = scaling_config(tmp_path, n_particles=(10, 20, 40), replications=3)
    path = tmp_path / 'scaling.csv'
    table = scaling_study(cfg, out_path=path)

    assert list(table['study'].unique()) == ['rmse_mu_vs_N', 'rmse_sigma_vs_N_over_delta', 'surrogate_rms_vs_delta',
                                             'poc_gap_vs_N']
    assert len(table) == 12
    for study, group in table.groupby('study', sort=False):
        slope, r_squared = loglog_slope(group['x'].to_numpy(), group['y'].to_numpy())
        np.testing.assert_allclose(group['slope'], slope, rtol=1e-12)
        np.testing.assert_allclose(group['r2'], r_squared, rtol=1e-12)
        assert (group['y'] > 0).all()

    by_study = dict(tuple(table.groupby('study')))
    assert list(by_study['rmse_mu_vs_N']['x']) == [10.0, 20.0, 40.0]
    assert list(by_study['rmse_sigma_vs_N_over_delta']['x']) == pytest.approx([100.0, 200.0, 400.0])
    surrogate = by_study['surrogate_rms_vs_delta']
    assert list(surrogate['x']) == pytest.approx([0.1, 0.05, 0.025])
    # X~ - X is of order sqrt(Delta)
    assert 0.3 <= surrogate['slope'].iloc[0] <= 0.8
    assert surrogate['decreasing'].iloc[0] == 1
    assert list(by_study['poc_gap_vs_N']['x']) == [5.0, 10.0, 20.0]

    written = pd.read_csv(path, float_precision='round_trip')
    pd.testing.assert_frame_equal(written, table)


def test_scaling_study_recovers_exact_power_laws(tmp_path):
    cfg = scaling_config(tmp_path, n_particles=(10, 40, 160))
    theta0 = cfg.theta_true()
    records = []
    for n_particles in (10, 40, 160):
        for replicate in range(2):
            # partial rows and unconverged rows carry large errors and must be ignored
            for mode, scale, converged in ((C, 1.0, 1), (P, 50.0, 1), (C, 1e3, 0)):
                records.append(dict(
                    mode=mode, replicate=replicate, n_particles=n_particles, obs_steps=10, fine_factor=2, delta=0.1,
                    converged=converged,
                    mu_hat_1=theta0[0] + scale / math.sqrt(n_particles),
                    mu_hat_2=theta0[1] - scale / math.sqrt(n_particles),
                    sigma_hat_1=theta0[2] + scale * math.sqrt(0.1 / n_particles),
                ))
    table = scaling_study(cfg, rows=pd.DataFrame(records))

    mu = table[table['study'] == 'rmse_mu_vs_N']
    np.testing.assert_allclose(mu['y'], np.sqrt(2.0 / np.array([10.0, 40.0, 160.0])), rtol=1e-12)
    sigma = table[table['study'] == 'rmse_sigma_vs_N_over_delta']
    np.testing.assert_allclose(sigma['x'], [100.0, 400.0, 1600.0])
    for study in (mu, sigma):
        assert study['slope'].iloc[0] == pytest.approx(-0.5, rel=1e-9)
        assert study['r2'].iloc[0] == pytest.approx(1.0, rel=1e-9)
        assert (study['decreasing'] == 1).all() and (study['degenerate'] == 0).all()


def test_oracle_variances_of_mean_field_langevin(mfl, mfl_theta):
    variances = oracle_variances(mfl, mfl_theta, TINY_ORACLE)
    sigma = mfl_theta[-1]
    # d_sigma c = 2 sigma and c = sigma^2: the integrand is 4 / sigma^2 at every state
    np.testing.assert_allclose(variances.sigma, [[4.0 / sigma ** 2]], rtol=1e-10)
    np.testing.assert_allclose(variances.diagonal(C)[-1], 2.0 * sigma ** 2 / 4.0, rtol=1e-10)
    np.testing.assert_allclose(variances.diagonal(P)[-1], 2.25 * sigma ** 2 / 4.0, rtol=1e-10)
    np.testing.assert_allclose(variances.mu, variances.mu.T)
    assert np.all(np.linalg.eigvalsh(variances.mu) > 0)


def test_exit_codes():
    assert ExperimentRunner.exit_code(ImproperlyConfigured('bad')) == constants.EXIT_CODE.CONFIG_ERROR
    assert ExperimentRunner.exit_code(ArgumentError('bad')) == constants.EXIT_CODE.CONFIG_ERROR
    assert ExperimentRunner.exit_code(SimulationDiverged(particle=1, step=2)) == constants.EXIT_CODE.NUMERIC_FAILURE
    assert ExperimentRunner.exit_code(InsufficientData()) == constants.EXIT_CODE.NUMERIC_FAILURE
    assert ExperimentRunner.exit_code(ValueError('unexpected')) == constants.EXIT_CODE.UNEXPECTED


def test_task_hooks(tmp_path):
    runner = ExperimentRunner(tiny_config(tmp_path))
    seen = []
    runner.after_task_hook(
        lambda context, result: seen.append((context['command'], context['elapsed'] >= 0, len(result))))
    reports = runner.hypo_check()
    assert seen == [('hypo-check', True, 4)]
    assert all(report.full_rank for report in reports)
    assert (tmp_path / 'out' / 'rank.csv').exists()


def test_simulate_and_fit_tasks(tmp_path):
    runner = ExperimentRunner(tiny_config(tmp_path))
    runner.simulate()
    out = tmp_path / 'out'
    for name in ('trajectory.bin', 'observations.csv', 'trajectory.csv'):
        assert (out / name).exists()
    reports = runner.fit()
    assert set(reports) == {C, P}
    assert (out / 'fit_C.txt').exists() and (out / 'fit_P.txt').exists()
    assert len(pd.read_csv(out / 'fit.csv')) == 2


def test_manifest(tmp_path):
    path = write_manifest(tmp_path, '[run]\nseed = 1\n', command='fit', elapsed=1.5)
    manifest = json.loads(path.read_text())
    assert manifest['command'] == 'fit'
    assert manifest['elapsed'] == 1.5
    assert manifest['version'] == kinetic.__version__
    assert manifest['config'] == '[run]\nseed = 1\n'
    assert manifest['created'].endswith('Z')
    assert 'git_revision' in manifest


@pytest.fixture(scope='module')
def consistency_rows():
    cfg = ExperimentConfig(n_particles=(125, 250, 500, 1000), obs_steps=(200,), fine_factors=(20,), replications=100,
                           seed=2024, threads=4, opt_cfg=OptimizerConfig(n_starts=2, seed=2024))
    rows = run_replications(cfg)
    return cfg.model(), cfg.theta_true(), rows[rows['converged'] == 1]


def _hat_columns(model):
    return [f'mu_hat_{k + 1}' for k in range(model.p1)] + [f'sigma_hat_{k + 1}' for k in range(model.p2)]


@pytest.mark.slow
@pytest.mark.parametrize('mode', [C, P])
def test_rmse_decreases_with_the_number_of_particles(consistency_rows, mode):
    model, theta0, rows = consistency_rows
    columns = _hat_columns(model)
    n_values, squared = [], []
    for n_particles, group in rows[rows['mode'] == mode].groupby('n_particles', sort=True):
        assert len(group) >= 95
        n_values.append(n_particles)
        squared.append(((group[columns].to_numpy() - theta0) ** 2).mean(axis=0))
    assert n_values == [125, 250, 500, 1000]
    rmse = np.sqrt(np.array(squared))
    for k, column in enumerate(columns):
        assert np.all(np.diff(rmse[:, k]) < 0), (column, rmse[:, k])
    drift_rmse = np.sqrt(np.sum(rmse[:, :model.p1] ** 2, axis=1))
    slope, _ = loglog_slope(n_values, drift_rmse)
    assert -0.65 <= slope <= -0.35


@pytest.mark.slow
@pytest.mark.parametrize('mode', [C, P])
def test_drift_variance_falls_like_one_over_n(consistency_rows, mode):
    model, _, rows = consistency_rows
    columns = _hat_columns(model)[:model.p1]
    groups = rows[rows['mode'] == mode].groupby('n_particles', sort=True)
    n_values = [n_particles for n_particles, _ in groups]
    variances = [group[columns].var(ddof=1).sum() for _, group in groups]
    slope, _ = loglog_slope(n_values, variances)
    assert -1.25 <= slope <= -0.75


@pytest.mark.slow
def test_normalized_errors_match_the_oracle_variances():
    cfg = ExperimentConfig(n_particles=(400,), obs_steps=(400,), fine_factors=(20,), replications=2000, seed=2025,
                           threads=8, opt_cfg=OptimizerConfig(n_starts=2, seed=2025))
    model, theta0 = cfg.model(), cfg.theta_true()
    rows = run_replications(cfg)
    oracle = oracle_variances(model, theta0, OracleConfig(seed=12))
    summary = clt_summary(rows, oracle=oracle, min_rows=1900)

    cells = {cell.mode: cell for cell in summary.cells}
    complete, partial = cells[C], cells[P]
    p1 = model.p1
    np.testing.assert_allclose(complete.oracle_ratio[:p1], 1.0, atol=0.15)
    np.testing.assert_allclose(complete.oracle_ratio[p1:], 1.0, atol=0.20)
    np.testing.assert_allclose(partial.oracle_ratio, 1.0, atol=0.20)
    np.testing.assert_allclose(summary.sigma_ratios[complete.cell], 9.0 / 8.0, rtol=0.20)
    assert complete.normal[:p1].all()
    assert partial.normal[:p1].all()
