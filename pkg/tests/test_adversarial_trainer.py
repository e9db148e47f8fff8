import numpy as np
import pytest

from adversarial_trainer import (
    AdamState,
    ConfigError,
    TrainConfig,
    TrainingDivergedError,
    ascent_descent_step,
    clip_gradients,
    evaluation_set,
    global_norm,
    loss_and_gradients,
    train,
)
from market_model import sample_initial, simulate_supply
from rng_streams import rng_stream
from rnn_policy import CONTROL_DIMS, RnnParams, control_params, price_params


def scalar_params(value: float) -> RnnParams:
    return RnnParams("control", 3, CONTROL_DIMS, {"theta": np.array([[value]])})


def tiny_config(**overrides) -> TrainConfig:
    fields = dict(iterations=2, epoch_size=2, steps=5, n_train=3, n_test=3, mc_samples=2, seed=3)
    fields.update(overrides)
    return TrainConfig(**fields)


@pytest.mark.parametrize(
    "overrides",
    [
        {"iterations": 10, "epoch_size": 3},
        {"iterations": -1},
        {"n_train": 0},
        {"lr_v": 1.0},
        {"beta2": -0.1},
        {"clip_norm": 0.0},
        {"seed": -5},
    ],
)
def test_invalid_train_config(overrides):
    with pytest.raises(ConfigError):
        tiny_config(**overrides)


def test_default_schedule():
    config = TrainConfig()
    assert config.epochs == 20
    assert (config.n_train, config.n_test, config.mc_samples, config.steps) == (30, 30, 60, 40)


def test_zero_gradient_leaves_parameters():
    params = scalar_params(0.4)
    state = AdamState.fresh(params, lr=1e-3)
    updated = ascent_descent_step(params, {"theta": np.zeros((1, 1))}, "descent", state)
    assert updated.weights["theta"][0, 0] == 0.4


def test_first_adam_step_has_learning_rate_size():
    params = scalar_params(0.0)
    for direction, sign in (("descent", -1.0), ("ascent", 1.0)):
        state = AdamState.fresh(params, lr=1e-3)
        updated = ascent_descent_step(params, {"theta": np.array([[5.0]])}, direction, state)
        assert updated.weights["theta"][0, 0] == pytest.approx(sign * 1e-3, rel=1e-6)


def test_ascent_maximizes_concave_function():
    params = scalar_params(1.0)
    state = AdamState.fresh(params, lr=0.01)
    for _ in range(3000):
        theta = params.weights["theta"]
        params = ascent_descent_step(params, {"theta": -2.0 * theta}, "ascent", state)
    assert abs(params.weights["theta"][0, 0]) < 0.05


def test_step_validates_direction_and_state():
    params = scalar_params(1.0)
    with pytest.raises(ValueError):
        ascent_descent_step(params, {"theta": np.ones((1, 1))}, "sideways", AdamState.fresh(params, lr=0.1))
    with pytest.raises(ValueError):
        ascent_descent_step(params, {"theta": np.ones((1, 1))}, "descent", AdamState(lr=0.1))


def test_clipping_rescales_to_max_norm():
    grads = {"a": np.full((2, 2), 3.0), "b": np.full((1, 1), 4.0)}
    clipped, norm, active = clip_gradients(grads, 1.0)
    assert active and norm == pytest.approx(np.sqrt(40.0))
    assert global_norm(clipped) == pytest.approx(1.0)
    same, _, active = clip_gradients(grads, 100.0)
    assert not active and same is grads


def test_zero_learning_rates_freeze_parameters(default_model):
    params_v, params_pi, history = train(default_model, tiny_config(iterations=4, lr_v=0.0, lr_pi=0.0))
    init_rng = rng_stream(3, "init")
    initial_v, initial_pi = control_params(init_rng), price_params(init_rng)
    for name in initial_v.names():
        np.testing.assert_array_equal(params_v.weights[name], initial_v.weights[name])
    for name in initial_pi.names():
        np.testing.assert_array_equal(params_pi.weights[name], initial_pi.weights[name])
    assert len(history.steps) == 4


def test_training_is_deterministic(default_model):
    _, _, first = train(default_model, tiny_config(iterations=4))
    _, _, second = train(default_model, tiny_config(iterations=4))
    assert first.steps == second.steps
    assert first.epochs == second.epochs
    assert len(first.reports) == len(first.epochs) == 2


def test_price_gradient_is_taken_after_control_update(default_model):
    seen = []

    def hook(iteration, stage, params_v, params_pi, grads):
        seen.append((iteration, stage, params_v.copy(), params_pi.copy(), {k: g.copy() for k, g in grads.items()}))

    config = tiny_config(clip_norm=None)
    train(default_model, config, hook=hook)
    assert [(i, stage) for i, stage, *_ in seen] == [(0, "control"), (0, "price"), (1, "control"), (1, "price")]
    for i in range(2):
        _, _, v_before, pi_before, _ = seen[2 * i]
        _, _, v_after, pi_during, grads_pi = seen[2 * i + 1]
        assert not np.array_equal(v_after.weights["W5"], v_before.weights["W5"])
        np.testing.assert_array_equal(pi_during.weights["W5"], pi_before.weights["W5"])
        x0 = sample_initial(default_model, config.n_train, rng_stream(config.seed, "population", i))
        supply = simulate_supply(default_model, config.steps, rng_stream(config.seed, "supply", i))
        _, expected = loss_and_gradients(default_model, v_after, pi_before, x0, supply, "price")
        for name, g in expected.items():
            np.testing.assert_array_equal(grads_pi[name], g)
    # The second iteration starts from the price parameters after the first ascent step.
    assert not np.array_equal(seen[2][3].weights["W5"], seen[1][3].weights["W5"])


def test_descent_only_loss_decreases(default_model):
    config = TrainConfig(
        iterations=50, epoch_size=50, steps=40, n_train=30, n_test=5, mc_samples=2,
        lr_v=1e-4, lr_pi=0.0, seed=1, freeze_samples=True,
    )
    _, _, history = train(default_model, config)
    losses = [record["loss"] for record in history.steps]
    violations = sum(b > a for a, b in zip(losses, losses[1:]))
    assert violations <= 5


def test_non_finite_state_aborts(default_model):
    init_rng = rng_stream(0, "init")
    params_v, params_pi = control_params(init_rng), price_params(init_rng)
    weights = dict(params_v.weights)
    weights["b5"] = np.full((1, 1), np.nan)
    with pytest.raises(TrainingDivergedError) as info:
        train(default_model, tiny_config(), init=(params_v.with_weights(weights), params_pi))
    assert info.value.iteration == 0 and info.value.quantity == "loss"


def test_epoch_callback_and_evaluation_set(default_model):
    calls = []
    train(default_model, tiny_config(iterations=4), on_epoch=lambda e, v, p, log: calls.append((e, len(log.reports))))
    assert calls == [(1, 1), (2, 2)]
    x0, supplies = evaluation_set(default_model, 3, 1, 3, 2, 5)
    again, _ = evaluation_set(default_model, 3, 1, 3, 2, 5)
    np.testing.assert_array_equal(x0, again)
    assert len(supplies) == 2 and supplies[0].steps == 5
