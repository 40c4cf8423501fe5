import numpy as np
import pytest

from kinetic import constants
from kinetic.exceptions import ArgumentError, ParameterOutOfBox
from kinetic.hypocheck import (
    bracket,
    build_fields,
    lie_bracket,
    numeric_rank,
    probe_states,
    rank_check,
)
from kinetic.model import ModelSpec, ParamBox
from kinetic.rng import derive_seed


def _probe(n_particles, seed=0):
    return np.random.default_rng(seed).standard_normal(2 * n_particles)


def test_mean_field_langevin_has_full_rank(mfl, mfl_theta):
    reports = rank_check(mfl, mfl_theta, n_particles=3)
    assert len(reports) == 12
    for report in reports:
        assert report.numeric_rank == 6
        assert report.full_rank
        assert report.singular_values.shape == (6,)


def test_bracket_of_mean_field_langevin(mfl, mfl_theta):
    mu1, sigma = mfl_theta[0], mfl_theta[-1]
    system = build_fields(mfl, mfl_theta, 3)
    z = _probe(3)
    for k in range(1, 4):
        expected = np.zeros(6)
        expected[2 * (k - 1)] = -sigma
        expected[2 * (k - 1) + 1] = sigma * mu1
        np.testing.assert_allclose(lie_bracket(system, k, z), expected, atol=1e-8)


def test_vanishing_noise_has_rank_zero(constant_model):
    model = constant_model(sigma_lo=0.0, a_min=0.0)
    reports = rank_check(model, [0.3, 0.0], n_particles=2, probes=[_probe(2)])
    assert reports[0].numeric_rank == 0
    assert not reports[0].full_rank


def test_position_drift_without_velocity_loses_rank(mfl, mfl_theta):
    reports = rank_check(mfl, mfl_theta, n_particles=3, probes=[_probe(3, seed) for seed in range(3)],
                         position_drift=lambda y, x: -y)
    assert [r.numeric_rank for r in reports] == [3, 3, 3]


def test_constant_diffusion_has_no_stratonovich_correction(mfl, mfl_theta):
    system = build_fields(mfl, mfl_theta, 4)
    z = _probe(4)
    np.testing.assert_array_equal(system.stratonovich_drift(z), system.drift_field(z))
    np.testing.assert_array_equal(system.correction(z), np.zeros(8))


def _velocity_kernel_diffusion(sigma, y, x, pi):
    return sigma[0] + sigma[1] * np.tanh(np.asarray(x) * pi.x.mean()) ** 2


def test_correction_of_a_velocity_dependent_diffusion(mfl):
    model = ModelSpec(
        name='VelocityKernel',
        drift=mfl.drift,
        diffusion=_velocity_kernel_diffusion,
        drift_grad=mfl.drift_grad,
        diffusion_grad=None,
        param_box=ParamBox((-5.0, -5.0), (5.0, 5.0), (0.05, 0.0), (5.0, 5.0)),
    )
    sigma1, sigma2 = 0.5, 0.8
    system = build_fields(model, [1.0, 0.5, sigma1, sigma2], 3)
    z = _probe(3, seed=4)
    x = z[1::2]
    m = x.mean()
    u = x * m
    a = sigma1 + sigma2 * np.tanh(u) ** 2
    slope = sigma2 * 2.0 * np.tanh(u) / np.cosh(u) ** 2 * (m + x / 3)
    expected = np.zeros(6)
    expected[1::2] = -0.5 * a * slope
    np.testing.assert_allclose(system.correction(z), expected, rtol=1e-6, atol=1e-12)


def test_bracket_is_antisymmetric(kramers, kramers_theta):
    system = build_fields(kramers, kramers_theta, 2)
    z = _probe(2, seed=5)
    f, g = system.stratonovich_drift, system.noise_columns[1]
    np.testing.assert_array_equal(bracket(f, g, z), -bracket(g, f, z))


def test_bracket_of_constant_fields_vanishes():
    f = lambda z: np.array([1.0, -2.0, 0.5])
    g = lambda z: np.array([0.0, 3.0, 1.0])
    np.testing.assert_array_equal(bracket(f, g, np.ones(3)), np.zeros(3))


def test_rank_does_not_depend_on_the_noise_level(mfl):
    probes = probe_states(2, n_probes=3, seed=1)
    low = rank_check(mfl, [1.0, 0.5, 0.1], 2, probes=probes)
    high = rank_check(mfl, [1.0, 0.5, 4.0], 2, probes=probes)
    assert [r.numeric_rank for r in low] == [r.numeric_rank for r in high] == [4] * 5


def test_kramers_model_is_hypoelliptic(kramers, kramers_theta):
    reports = rank_check(kramers, kramers_theta, 2, probes=probe_states(2, n_probes=4, n_stress=1))
    assert all(r.full_rank for r in reports)


def test_threads_give_identical_reports(kramers, kramers_theta):
    probes = probe_states(2, n_probes=4)
    serial = rank_check(kramers, kramers_theta, 2, probes=probes)
    threaded = rank_check(kramers, kramers_theta, 2, probes=probes, threads=3)
    for first, second in zip(serial, threaded):
        np.testing.assert_array_equal(first.singular_values, second.singular_values)


def test_particle_index_is_checked(mfl, mfl_theta):
    system = build_fields(mfl, mfl_theta, 2)
    for k in (0, 3):
        with pytest.raises(ArgumentError):
            lie_bracket(system, k, _probe(2))


def test_invalid_inputs(mfl, mfl_theta):
    with pytest.raises(ArgumentError):
        rank_check(mfl, mfl_theta, 2, probes=[np.array([0.0, np.nan, 1.0, 1.0])])
    with pytest.raises(ArgumentError):
        build_fields(mfl, mfl_theta, 0)
    with pytest.raises(ParameterOutOfBox):
        build_fields(mfl, [100.0, 0.5, 0.5], 2)
    system = build_fields(mfl, mfl_theta, 2)
    with pytest.raises(ArgumentError):
        system.drift_field(np.zeros(3))


def test_numeric_rank_and_rows():
    assert numeric_rank(np.array([1.0, 1e-3, 1e-10]), 1e-8) == 2
    assert numeric_rank(np.zeros(3), 1e-8) == 0
    states = probe_states(3, n_probes=5, n_stress=2)
    assert len(states) == 7
    assert all(state.shape == (6,) for state in states)


def test_report_row(mfl, mfl_theta):
    report = rank_check(mfl, mfl_theta, 1, probes=[np.array([0.2, -0.4])])[0]
    row = report.to_row(0)
    assert row['rank'] == 2
    assert row['full_rank'] == 1
    assert set(row) == {'probe', 'rank', 'full_rank', 's1', 's2'}


def test_probe_states_come_from_their_own_stream():
    states = probe_states(2, n_probes=3, seed=7, n_stress=0)
    expected = np.random.default_rng(derive_seed(7, constants.STREAM.PROBE)).standard_normal((3, 4))
    np.testing.assert_array_equal(np.array(states), expected)
    other = probe_states(2, n_probes=3, seed=8, n_stress=0)
    assert not np.allclose(np.array(states), np.array(other))
