import numpy as np
import pytest

from kinetic import constants
from kinetic.model import ModelSpec, ParamBox, kramers_kernel, mean_field_langevin, theta_zero
from kinetic.observe import ObservationSet
from kinetic.simulate import SimConfig


def _constant_drift(mu, y, x, pi):
    return np.full(np.shape(y), float(mu[0]))


def _constant_drift_grad(mu, y, x, pi):
    return np.ones((1,) + np.shape(y))


def _constant_diffusion(sigma, y, x, pi):
    return np.full(np.shape(y), float(sigma[0]))


def _constant_diffusion_grad(sigma, y, x, pi):
    return np.ones((1,) + np.shape(y))


def make_constant_model(mu_lo=-5.0, mu_hi=5.0, sigma_lo=0.05, sigma_hi=5.0, a_min=constants.A_MIN):
    """b = mu_1 and a = sigma_1: no dependence on the state or the measure."""
    return ModelSpec(
        name='Constant',
        drift=_constant_drift,
        diffusion=_constant_diffusion,
        drift_grad=_constant_drift_grad,
        diffusion_grad=_constant_diffusion_grad,
        param_box=ParamBox((mu_lo,), (mu_hi,), (sigma_lo,), (sigma_hi,)),
        a_min=a_min,
        linear_drift=True,
        constant_diffusion=True,
    )


@pytest.fixture
def constant_model():
    return make_constant_model


@pytest.fixture
def mfl():
    return mean_field_langevin()


@pytest.fixture
def mfl_theta(mfl):
    return theta_zero(mfl)


@pytest.fixture
def kramers():
    return kramers_kernel()


@pytest.fixture
def kramers_theta(kramers):
    return theta_zero(kramers)


@pytest.fixture
def small_cfg():
    return SimConfig(n_particles=20, horizon=1.0, obs_steps=20, fine_factor=4, seed=11)


@pytest.fixture
def random_obs():
    """Complete observations with N=6 particles over n=8 intervals."""
    def factory(n_particles=6, obs_steps=8, delta=0.1, seed=3):
        rng = np.random.default_rng(seed)
        times = np.arange(obs_steps + 1) * delta
        y = np.cumsum(rng.normal(size=(n_particles, obs_steps + 1)), axis=1) * 0.1
        x = rng.normal(size=(n_particles, obs_steps + 1))
        return ObservationSet(delta=delta, times=times, y=y, x=x, mode=constants.MODE.COMPLETE)
    return factory
