import numpy as np
import pytest
from scipy.optimize import OptimizeResult, minimize

from kinetic import constants
from kinetic.contrast import contrast
from kinetic.estimate import (
    EstimateReport,
    OptimizerConfig,
    _select,
    closed_form_linear,
    fit,
    normalized_errors,
    normalized_hessian,
    normalized_score,
    plug_in_sigma,
)
from kinetic.exceptions import ArgumentError, OptimizationError, RankError
from kinetic.model import ParamBox, mean_field_langevin
from kinetic.observe import ObservationSet, make_partial
from kinetic.rng import derive_seed
from kinetic.simulate import SimConfig, simulate_observations


C, P = constants.MODE.COMPLETE, constants.MODE.PARTIAL

FAST = OptimizerConfig(n_starts=2, seed=3)


@pytest.fixture
def mfl_obs(mfl, mfl_theta):
    cfg = SimConfig(n_particles=100, horizon=1.0, obs_steps=50, fine_factor=5, seed=17)
    return simulate_observations(mfl, mfl_theta, cfg)


@pytest.mark.parametrize('mode', [C, P])
def test_fit_agrees_with_the_closed_form(mfl, mfl_theta, mfl_obs, mode):
    data = mfl_obs if mode == C else make_partial(mfl_obs)
    exact = closed_form_linear(mfl, data, mode)
    report = fit(mfl, data, mode, FAST, theta0=mfl_theta)
    assert report.converged
    assert not report.on_boundary
    np.testing.assert_allclose(report.theta_hat, exact, atol=1e-6)
    assert report.contrast_at_opt == pytest.approx(contrast(mfl, report.theta_hat, data, mode).value, rel=1e-12)


@pytest.fixture
def early_stop(monkeypatch):
    """L-BFGS-B reports success from a point a little off its optimum; Nelder-Mead makes no progress."""

    def stopped(fun, x0, method=None, **kwargs):
        if method == 'Nelder-Mead':
            return OptimizeResult(x=np.asarray(x0), fun=np.inf, success=False, message='no progress')
        result = minimize(fun, x0, method=method, **kwargs)
        result.x = result.x * (1.0 + 1e-3)
        result.success = True
        return result

    monkeypatch.setattr('kinetic.estimate.minimize', stopped)


def test_success_flag_alone_is_not_convergence(mfl, mfl_obs, early_stop):
    report = fit(mfl, mfl_obs, C, OptimizerConfig(n_starts=1, polish_steps=0))
    assert not report.converged
    assert report.trace[0]['converged'] is False


@pytest.mark.parametrize('mode', [C, P])
def test_newton_polish_reaches_the_closed_form_after_an_early_stop(mfl, mfl_obs, early_stop, mode):
    data = mfl_obs if mode == C else make_partial(mfl_obs)
    report = fit(mfl, data, mode, OptimizerConfig(n_starts=1))
    assert report.converged
    np.testing.assert_allclose(report.theta_hat, closed_form_linear(mfl, data, mode), atol=1e-6)


def test_closed_form_diffusion_of_a_constant_drift(constant_model):
    model = constant_model()
    cfg = SimConfig(n_particles=40, horizon=1.0, obs_steps=30, fine_factor=2, seed=6)
    obs = simulate_observations(model, [0.4, 0.9], cfg)
    increments = np.diff(obs.x, axis=1)
    mu_hat = increments.mean() / obs.delta

    complete = closed_form_linear(model, obs, C)
    assert complete[0] == pytest.approx(mu_hat, rel=1e-12)
    residuals = increments - obs.delta * mu_hat
    assert complete[1] ** 2 == pytest.approx(np.sum(residuals ** 2) / (increments.size * obs.delta), rel=1e-10)

    x_tilde = np.diff(obs.y, axis=1) / obs.delta
    partial_increments = x_tilde[:, 2:] - x_tilde[:, 1:-1]
    partial = closed_form_linear(model, make_partial(obs), P)
    mu_partial = partial_increments.mean() / obs.delta
    residuals = partial_increments - obs.delta * mu_partial
    expected = 1.5 * np.sum(residuals ** 2) / (partial_increments.size * obs.delta)
    assert partial[1] ** 2 == pytest.approx(expected, rel=1e-10)


def test_partial_and_complete_diffusion_estimates_agree_on_fine_data(mfl):
    theta0 = np.array([1.0, 0.5, 0.5])
    cfg = SimConfig(n_particles=200, horizon=1.0, obs_steps=400, fine_factor=5, seed=9)
    obs = simulate_observations(mfl, theta0, cfg)
    complete = closed_form_linear(mfl, obs, C)
    partial = closed_form_linear(mfl, make_partial(obs), P)
    assert partial[-1] ** 2 / complete[-1] ** 2 == pytest.approx(1.0, abs=0.05)


def test_noiseless_drift_is_recovered():
    box = ParamBox((-4.0, -4.5), (6.0, 5.5), (1e-7,), (1.0,))
    model = mean_field_langevin(sigma0=(1e-6,), param_box=box, a_min=1e-9)
    theta0 = np.array([1.0, 0.5, 1e-6])
    cfg = SimConfig(n_particles=50, horizon=1.0, obs_steps=100, fine_factor=1, seed=2)
    obs = simulate_observations(model, theta0, cfg)
    np.testing.assert_allclose(closed_form_linear(model, obs, C)[:2], theta0[:2], atol=1e-3)


def test_closed_form_detects_a_singular_regression(mfl):
    times = np.arange(6) * 0.1
    obs = ObservationSet(delta=0.1, times=times, y=np.zeros((4, 6)), x=np.zeros((4, 6)))
    with pytest.raises(RankError):
        closed_form_linear(mfl, obs, C)


def test_closed_form_needs_a_linear_constant_model(kramers, mfl_obs):
    with pytest.raises(ArgumentError):
        closed_form_linear(kramers, mfl_obs, C)


def test_closed_form_is_invariant_under_relabelling(mfl, mfl_obs):
    order = np.random.default_rng(4).permutation(mfl_obs.n_particles)
    np.testing.assert_allclose(closed_form_linear(mfl, mfl_obs.permuted(order), C),
                               closed_form_linear(mfl, mfl_obs, C), rtol=1e-12)


def test_fit_is_invariant_under_relabelling(mfl, mfl_obs):
    order = np.random.default_rng(5).permutation(mfl_obs.n_particles)
    first = fit(mfl, mfl_obs, C, FAST)
    second = fit(mfl, mfl_obs.permuted(order), C, FAST)
    np.testing.assert_allclose(first.theta_hat, second.theta_hat, atol=2e-6)


def test_fit_of_the_kramers_model(kramers, kramers_theta):
    cfg = SimConfig(n_particles=60, horizon=1.0, obs_steps=40, fine_factor=5, seed=8)
    obs = simulate_observations(kramers, kramers_theta, cfg)
    report = fit(kramers, obs, C, FAST, theta0=kramers_theta)
    assert kramers.param_box.contains(report.theta_hat)
    assert len(report.trace) == FAST.n_starts
    assert report.n_evals >= len(report.trace)
    assert report.normalized_errors.shape == (6,)
    # sigma is estimated at rate sqrt(N / Delta), far better than mu
    assert abs(report.sigma_hat[0] - kramers_theta[4]) < 0.1


def test_estimate_on_the_boundary_is_flagged(mfl):
    wide = mean_field_langevin()
    theta0 = np.array([2.0, 0.5, 0.5])
    cfg = SimConfig(n_particles=50, horizon=1.0, obs_steps=40, fine_factor=2, seed=3)
    obs = simulate_observations(wide, theta0, cfg)
    narrow = mean_field_langevin(param_box=ParamBox((-1.0, -1.0), (0.5, 2.0), (0.1,), (1.0,)))
    report = fit(narrow, obs, C, FAST)
    assert report.on_boundary
    assert report.mu_hat[0] == pytest.approx(0.5)
    assert narrow.param_box.contains(report.theta_hat)


def test_truth_on_the_boundary_does_not_crash():
    box = ParamBox((1.0, -4.5), (6.0, 5.5), (0.05,), (5.5,))
    model = mean_field_langevin(param_box=box)
    theta0 = np.array([1.0, 0.5, 0.5])
    cfg = SimConfig(n_particles=50, horizon=1.0, obs_steps=40, fine_factor=2, seed=4)
    obs = simulate_observations(model, theta0, cfg)
    report = fit(model, obs, C, FAST, theta0=theta0)
    assert box.contains(report.theta_hat)
    assert report.on_boundary == box.on_boundary(report.theta_hat)


def test_every_start_failing_raises_with_a_trace(mfl_obs):
    model = mean_field_langevin(a_min=10.0)
    with pytest.raises(OptimizationError) as info:
        fit(model, mfl_obs, C, FAST)
    assert len(info.value.trace) == FAST.n_starts
    assert all('error' in entry for entry in info.value.trace)


def test_fit_is_reproducible_with_threads(mfl, mfl_obs):
    serial = fit(mfl, mfl_obs, C, OptimizerConfig(n_starts=3, seed=1))
    threaded = fit(mfl, mfl_obs, C, OptimizerConfig(n_starts=3, seed=1, threads=3))
    np.testing.assert_array_equal(serial.theta_hat, threaded.theta_hat)


def test_ties_go_to_the_smallest_norm_then_lexicographic():
    candidates = [
        dict(theta=np.array([1.0, 2.0]), value=1.0),
        dict(theta=np.array([0.5, 0.5]), value=1.0 + 1e-15),
        dict(theta=np.array([-0.5, 0.5]), value=1.0),
        dict(theta=np.array([0.0, 0.0]), value=2.0),
    ]
    assert list(_select(candidates, 1e-12)['theta']) == [-0.5, 0.5]


def test_optimizer_config_validation():
    with pytest.raises(ArgumentError):
        OptimizerConfig(n_starts=0)
    with pytest.raises(ArgumentError):
        OptimizerConfig(max_evals=0)
    with pytest.raises(ArgumentError):
        OptimizerConfig(polish_steps=-1)


def test_normalized_errors():
    errors = normalized_errors([1.5, 2.0, 0.6], [1.0, 2.0, 0.5], p1=2, n_particles=100, delta=0.01)
    np.testing.assert_allclose(errors, [5.0, 0.0, 10.0])


def test_plug_in_blocks_for_a_constant_diffusion(mfl, mfl_theta, mfl_obs):
    sigma = mfl_theta[-1]
    complete = plug_in_sigma(mfl, mfl_obs, mfl_theta, C)
    partial = plug_in_sigma(mfl, mfl_obs, mfl_theta, P)
    # d_sigma c = 2 sigma and there are n summands of weight Delta / N per particle
    horizon = mfl_obs.delta * mfl_obs.n_intervals
    assert complete.sigma2[0, 0] == pytest.approx(4.0 / sigma ** 2 * horizon, rel=1e-12)
    assert complete.invertible
    assert complete.sigma_variance_factor == 2.0
    assert partial.sigma_variance_factor == 9.0 / 4.0
    assert partial.sigma_variance[0, 0] / partial.sigma2[0, 0] ** -1 == pytest.approx(9.0 / 4.0)
    np.testing.assert_allclose(complete.mu_variance, 2.0 * np.linalg.inv(complete.sigma1))


def test_report_records(mfl, mfl_theta, mfl_obs):
    report = fit(mfl, mfl_obs, C, FAST, theta0=mfl_theta)
    assert isinstance(report, EstimateReport)
    record = report.to_record()
    assert record['mode'] == C
    for key in ('mu_hat_1', 'mu_hat_2', 'sigma_hat_1', 'err_mu_1', 'err_sigma_1', 'avar_mu_2', 'avar_sigma_1'):
        assert key in record
    row = report.to_csv_row()
    assert row['converged'] in (0, 1)
    assert report.sigma_blocks[0].shape == (2, 2)


def test_normalized_hessian_drift_block_is_the_plug_in(mfl, mfl_theta, mfl_obs):
    hessian = normalized_hessian(mfl, mfl_theta, mfl_obs, C)
    blocks = plug_in_sigma(mfl, mfl_obs, mfl_theta, C)
    np.testing.assert_allclose(hessian[:2, :2], blocks.sigma1, rtol=1e-6)
    np.testing.assert_allclose(hessian, hessian.T)
    assert hessian[2, 2] > 0


def test_normalized_score_vanishes_at_the_estimate(mfl, mfl_obs):
    theta_hat = closed_form_linear(mfl, mfl_obs, C)
    score = normalized_score(mfl, theta_hat, mfl_obs, C)
    np.testing.assert_allclose(score, 0.0, atol=1e-8)


def test_normalized_hessian_refuses_the_box_edge(mfl, mfl_obs):
    theta = np.array(mfl.param_box.lower, dtype=float)
    theta[1:] = [0.5, 0.5]
    with pytest.raises(ArgumentError):
        normalized_hessian(mfl, theta, mfl_obs, C)


@pytest.mark.slow
def test_estimates_concentrate_around_the_truth(mfl, mfl_theta):
    hits = {C: 0, P: 0}
    seeds = 50
    for s in range(seeds):
        cfg = SimConfig(n_particles=500, horizon=1.0, obs_steps=200, fine_factor=10, seed=derive_seed(61, s))
        obs = simulate_observations(mfl, mfl_theta, cfg)
        for mode in (C, P):
            data = obs if mode == C else make_partial(obs)
            report = fit(mfl, data, mode, FAST, theta0=mfl_theta)
            hits[mode] += int(np.linalg.norm(report.theta_hat - mfl_theta) < 0.2)
    assert hits[C] >= 0.9 * seeds
    assert hits[P] >= 0.9 * seeds



@pytest.mark.slow
@pytest.mark.parametrize('mode', [C, P])
def test_fit_agrees_with_the_closed_form_across_datasets(mfl, mfl_theta, mode):
    one_start = OptimizerConfig(n_starts=1, seed=3)
    for s in range(50):
        cfg = SimConfig(n_particles=60, horizon=1.0, obs_steps=40, fine_factor=2, seed=derive_seed(83, s))
        obs = simulate_observations(mfl, mfl_theta, cfg)
        data = obs if mode == C else make_partial(obs)
        report = fit(mfl, data, mode, one_start)
        assert report.converged, s
        np.testing.assert_allclose(report.theta_hat, closed_form_linear(mfl, data, mode), atol=1e-6)
