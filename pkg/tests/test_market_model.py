import math

import numpy as np
import pytest

from market_model import (
    convexity_violations,
    legendre_gap,
    lq_model,
    oscillating_volatility,
    sample_initial,
    simulate_supply,
    supply_model,
    time_grid,
)
from rng_streams import rng_stream


def test_oscillating_volatility_window():
    t = np.array([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0])
    sigma = oscillating_volatility(np.zeros_like(t), t)
    assert sigma[3] == pytest.approx(0.5)
    np.testing.assert_allclose(sigma[[0, 1, 2, 4, 5, 6]], 0.0, atol=1e-15)
    assert np.all(sigma >= 0.0)


def test_lq_costs(default_model):
    assert default_model.lagrangian(0.0, 0.0) == pytest.approx(0.5)
    assert default_model.terminal_cost(0.0) == pytest.approx(0.5 / math.e)
    assert default_model.lagrangian_v(0.3, -1.5) == pytest.approx(-1.5)
    assert default_model.hamiltonian_p(0.3, 2.0) == pytest.approx(2.0)
    assert default_model.hamiltonian_x(2.0, 0.0) == pytest.approx(-1.0)
    assert default_model.terminal_cost_x(2.0) == pytest.approx(1.0 / math.e)
    assert default_model.optimal_control(0.0, 0.7) == pytest.approx(-0.7)


def test_hamiltonian_is_legendre_transform(default_model):
    v_grid = np.linspace(-6.0, 6.0, 24001)
    gap = legendre_gap(default_model, [-1.0, 0.0, 1.5], [-2.0, 0.0, 3.0], v_grid)
    assert gap < 1e-6
    assert convexity_violations(default_model, [-1.0, 2.0], v_grid) == 0


def test_lq_model_rejects_bad_parameters():
    with pytest.raises(ValueError):
        lq_model(lambda_x=-1.0)
    with pytest.raises(ValueError):
        lq_model(horizon=0.0)
    with pytest.raises(ValueError):
        supply_model("poisson")


def test_time_grid(default_model):
    t, dt = time_grid(default_model, 40)
    assert dt == pytest.approx(0.025)
    assert len(t) == 41 and t[-1] == 1.0
    with pytest.raises(ValueError):
        time_grid(default_model, 0)


def test_zero_supply_stays_at_initial_value(zero_supply_model):
    path = simulate_supply(zero_supply_model, 40, np.random.default_rng(0))
    np.testing.assert_array_equal(path.q, np.zeros(41))


def test_deterministic_supply_follows_euler(deterministic_model):
    path = simulate_supply(deterministic_model, 40, np.random.default_rng(3))
    q = 0.0
    for k in range(40):
        q = q + 0.025 * (3.0 * math.sin(3.0 * math.pi * path.t[k]) - q)
        assert path.q[k + 1] == pytest.approx(q, abs=1e-14)


def test_supply_is_noise_free_before_quarter(default_model):
    a = simulate_supply(default_model, 40, rng_stream(1, "supply", 0))
    b = simulate_supply(default_model, 40, rng_stream(2, "supply", 0))
    # sigma(t_k) = 0 for t_k <= 0.25, i.e. k <= 10, so q[0..11] carries no noise.
    np.testing.assert_array_equal(a.q[:12], b.q[:12])
    assert not np.array_equal(a.q, b.q)


def test_supply_monte_carlo_mean_matches_euler_mean(default_model):
    K, dt = 40, 0.025
    paths = np.vstack([simulate_supply(default_model, K, rng_stream(5, "supply", i)).q for i in range(3000)])
    mean = np.zeros(K + 1)
    for k in range(K):
        mean[k + 1] = mean[k] + dt * (3.0 * math.sin(3.0 * math.pi * k * dt) - mean[k])
    stderr = paths.std(axis=0) / math.sqrt(len(paths))
    assert np.all(np.abs(paths.mean(axis=0) - mean) <= 5.0 * stderr + 1e-12)


def test_supply_path_is_reproducible(default_model):
    a = simulate_supply(default_model, 40, rng_stream(9, "supply", 3))
    b = simulate_supply(default_model, 40, rng_stream(9, "supply", 3))
    np.testing.assert_array_equal(a.q, b.q)
    np.testing.assert_array_equal(a.dW, b.dW)


def test_initial_population_moments(default_model):
    x0 = sample_initial(default_model, 20000, np.random.default_rng(0))
    assert x0.mean() == pytest.approx(-0.25, abs=0.01)
    assert x0.std() == pytest.approx(0.2, abs=0.01)
    with pytest.raises(ValueError):
        sample_initial(default_model, 0, np.random.default_rng(0))


def test_rng_streams_are_independent_and_validated():
    a = rng_stream(0, "population").normal(size=4)
    b = rng_stream(0, "supply").normal(size=4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, rng_stream(0, "population").normal(size=4))
    with pytest.raises(ValueError):
        rng_stream(0, "weather")
    with pytest.raises(ValueError):
        rng_stream(-1, "init")


def test_zero_spread_population_sits_at_the_mean():
    model = lq_model(initial_std=0.0)
    x0 = sample_initial(model, 5, np.random.default_rng(0))
    np.testing.assert_array_equal(x0, np.full(5, model.initial_mean))
    assert model.initial_mean == -0.25


def test_lq_hamiltonian_separates_in_p(default_model):
    xs = np.linspace(-2.0, 2.0, 9)
    for p in (-1.5, 0.0, 0.4, 3.0):
        shift = default_model.hamiltonian(xs, p) - default_model.hamiltonian(xs, 0.0)
        np.testing.assert_allclose(shift, 0.5 * p * p, rtol=0, atol=1e-12)


def test_given_increments_drive_the_supply(default_model):
    fine = simulate_supply(default_model, 80, rng_stream(4, "supply", 0))
    coarse = simulate_supply(default_model, 40, dW=fine.dW.reshape(40, 2).sum(axis=1))
    np.testing.assert_array_equal(coarse.dW, fine.dW.reshape(40, 2).sum(axis=1))
    again = simulate_supply(default_model, 80, dW=fine.dW)
    np.testing.assert_array_equal(again.q, fine.q)
    with pytest.raises(ValueError):
        simulate_supply(default_model, 40, dW=fine.dW)
    with pytest.raises(ValueError):
        simulate_supply(default_model, 40)
