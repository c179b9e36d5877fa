import numpy as np
import pytest

from mfinverse.mesh import Mesh, ObservationGrid
from mfinverse.observations import (
    DegenerateSignalError,
    ObservationSet,
    gen_observations,
    make_ground_truth,
    noise_variance,
)
from mfinverse.prior import make_prior


def test_noise_variance_formula():
    Y = np.array([[3.0, 4.0], [0.0, 0.0]])
    # mean square entry = 25 / 4
    assert noise_variance(Y, 50.0) == pytest.approx(25.0 / 4.0 / 50.0)


def test_noise_variance_infinite_snr():
    assert noise_variance(np.ones((4, 2)), np.inf) == 0.0


def test_noise_variance_degenerate():
    with pytest.raises(DegenerateSignalError):
        noise_variance(np.zeros((4, 2)), 50.0)


def test_observations_snr_scaling():
    rng = np.random.default_rng(0)
    grid = ObservationGrid.uniform(40, 40)
    Y = rng.standard_normal((grid.n_points, 2))
    obs = gen_observations(Y, 50.0, 3, grid)
    noise = obs.Y_obs - Y
    ratio = np.mean(Y**2) / np.var(noise)
    assert 40.0 < ratio < 62.0  # statistical check at this sample size


def test_infinite_snr_is_exact_copy():
    grid = ObservationGrid.uniform(3, 3)
    Y = np.random.default_rng(1).standard_normal((grid.n_points, 2))
    obs = gen_observations(Y, np.inf, 0, grid)
    np.testing.assert_array_equal(obs.Y_obs, Y)
    assert obs.sigma2 == 0.0


def test_determinism():
    grid = ObservationGrid.uniform(4, 4)
    Y = np.random.default_rng(2).standard_normal((grid.n_points, 2))
    a = gen_observations(Y, 10.0, 7, grid)
    b = gen_observations(Y, 10.0, 7, grid)
    np.testing.assert_array_equal(a.Y_obs, b.Y_obs)


def test_ground_truth_reproducible():
    prior = make_prior(Mesh(6, 6), mu0=1.0, eps_reg=1e-2)
    x1 = make_ground_truth(prior, 50.0, seed=9)
    x2 = make_ground_truth(prior, 50.0, seed=9)
    np.testing.assert_array_equal(x1, x2)
    assert x1.shape == (prior.dim,)


def test_save_load_roundtrip(tmp_path):
    grid = ObservationGrid.uniform(5, 4)
    Y = np.random.default_rng(3).standard_normal((grid.n_points, 2))
    obs = gen_observations(Y, 25.0, 11, grid)
    path = tmp_path / "obs.csv"
    obs.save(path)
    loaded = ObservationSet.load(path)
    np.testing.assert_allclose(loaded.Y_obs, obs.Y_obs, rtol=1e-15)
    assert loaded.snr == obs.snr
    assert loaded.sigma2 == obs.sigma2
    assert loaded.grid.rows == 5 and loaded.grid.cols == 4


def test_save_load_infinite_snr(tmp_path):
    grid = ObservationGrid.uniform(3, 3)
    Y = np.ones((grid.n_points, 2))
    obs = gen_observations(Y, np.inf, 0, grid)
    obs.save(tmp_path / "obs.csv")
    loaded = ObservationSet.load(tmp_path / "obs.csv")
    assert np.isinf(loaded.snr)
