"""
Adversarial training of the control and price networks.

Each iteration draws a fresh population and one supply path, takes a descent
step on the control network, re-rolls the trajectories under the updated
controls, and takes an ascent step on the price network. Every epoch the
a posteriori residuals are measured on a fresh evaluation set of J paths.
"""

from __future__ import annotations

import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from diffgraph import Tape
from market_model import MarketModel, SupplyPath, sample_initial, simulate_supply
from particle_system import ParticleBatch, adversarial_loss, simulate_batch
from posterior_estimator import PosteriorReport, posterior_report
from rng_streams import rng_stream
from rnn_policy import BoundNetwork, RnnParams, control_params, price_params
from timer_utils import emit_log, format_elapsed

DIRECTIONS = ("descent", "ascent")


class ConfigError(ValueError):
    """A configuration field is missing, unknown or out of range."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, quantity: str, value: float) -> None:
        super().__init__(f"training diverged at iteration {iteration}: {quantity} = {value}")
        self.iteration = iteration
        self.quantity = quantity
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10000
    epoch_size: int = 500
    steps: int = 40
    n_train: int = 30
    n_test: int = 30
    mc_samples: int = 60
    lr_v: float = 1e-3
    lr_pi: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    clip_norm: float | None = 10.0
    workers: int = 1
    seed: int = 0
    # Reuse the first population and supply path every iteration (smoke tests).
    freeze_samples: bool = False

    def __post_init__(self) -> None:
        for name in ("epoch_size", "steps", "n_train", "n_test", "mc_samples", "workers"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"training.{name} must be an integer >= 1, got {value!r}")
        if not isinstance(self.iterations, int) or self.iterations < 0:
            raise ConfigError(f"training.iterations must be an integer >= 0, got {self.iterations!r}")
        if self.iterations % self.epoch_size:
            raise ConfigError(
                f"training.iterations ({self.iterations}) must be a multiple of training.epoch_size ({self.epoch_size})"
            )
        for name in ("lr_v", "lr_pi", "beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"training.{name} must lie in [0, 1), got {value!r}")
        if self.eps_adam <= 0:
            raise ConfigError(f"training.eps_adam must be positive, got {self.eps_adam!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"training.clip_norm must be positive or null, got {self.clip_norm!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed!r}")

    @property
    def epochs(self) -> int:
        return self.iterations // self.epoch_size


@dataclass
class AdamState:
    """Bias-corrected first/second moment estimates for one network."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    s: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def fresh(cls, params: RnnParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
        zeros = {name: np.zeros_like(w) for name, w in params.weights.items()}
        return cls(lr, beta1, beta2, eps, m=zeros, s={k: v.copy() for k, v in zeros.items()})


def ascent_descent_step(
    params: RnnParams,
    grads: dict[str, np.ndarray],
    direction: str,
    state: AdamState,
) -> RnnParams:
    """One Adam update; descent subtracts the step, ascent adds it. Mutates `state`."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    for name, w in params.weights.items():
        if state.m.get(name) is None or state.m[name].shape != w.shape:
            raise ValueError(f"optimizer state for {name} does not match parameter shape {w.shape}")
    sign = -1.0 if direction == "descent" else 1.0
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    updated = {}
    for name, w in params.weights.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.s[name] = state.beta2 * state.s[name] + (1.0 - state.beta2) * (g * g)
        step = state.lr * (state.m[name] / bc1) / (np.sqrt(state.s[name] / bc2) + state.eps)
        updated[name] = w + sign * step
    return params.with_weights(updated)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float, bool]:
    """Rescale to global norm max_norm when above it; returns (grads, norm before clipping, clipped)."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return grads, norm, False
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm, True


def loss_and_gradients(
    model: MarketModel,
    params_v: RnnParams,
    params_pi: RnnParams,
    x0: np.ndarray,
    supply: SupplyPath,
    trainable: str,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradient for one network; the other is recorded as constants and skipped by backward."""
    if trainable not in ("control", "price"):
        raise ValueError(f"trainable must be 'control' or 'price', got {trainable!r}")
    tape = Tape()
    net_v = BoundNetwork(params_v, tape, trainable=trainable == "control")
    net_pi = BoundNetwork(params_pi, tape, trainable=trainable == "price")
    loss = adversarial_loss(model, tape, net_v, net_pi, x0, supply)
    return float(loss.value[0, 0]), tape.backward(loss)


def _check_finite(iteration: int, loss: float, grads: dict[str, np.ndarray], network: str) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergedError(iteration, "loss", loss)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = g[~np.isfinite(g)].flat[0]
            raise TrainingDivergedError(iteration, f"{network} gradient {name}", float(bad))


def evaluation_set(
    model: MarketModel,
    seed: int,
    epoch: int,
    agents: int,
    samples: int,
    steps: int,
) -> tuple[np.ndarray, list[SupplyPath]]:
    """Fresh evaluation population and J supply paths for one epoch (sub-streams of 'eval')."""
    x0 = sample_initial(model, agents, rng_stream(seed, "eval", epoch, 0))
    supplies = [simulate_supply(model, steps, rng_stream(seed, "eval", epoch, 1, j)) for j in range(samples)]
    return x0, supplies


def evaluate(
    model: MarketModel,
    params_v: RnnParams,
    params_pi: RnnParams,
    x0: np.ndarray,
    supplies: list[SupplyPath],
    workers: int = 1,
) -> tuple[PosteriorReport, ParticleBatch]:
    batch = simulate_batch(model, params_v, params_pi, x0, supplies, workers=workers)
    return posterior_report(model, batch), batch


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    reports: list[PosteriorReport] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    clip_events: list[dict] = field(default_factory=list)


StepHook = Callable[[int, str, RnnParams, RnnParams, dict[str, np.ndarray]], None]
EpochCallback = Callable[[int, RnnParams, RnnParams, TrainLog], None]


def train(
    model: MarketModel,
    config: TrainConfig,
    log: Callable[[str], None] | None = None,
    on_epoch: EpochCallback | None = None,
    hook: StepHook | None = None,
    init: tuple[RnnParams, RnnParams] | None = None,
) -> tuple[RnnParams, RnnParams, TrainLog]:
    """
    Run config.iterations descent/ascent iterations.

    hook(iteration, stage, params_v, params_pi, grads) sees every gradient right before
    it is applied, with stage 'control' or 'price'. on_epoch runs after each epoch's
    evaluation (checkpointing, metrics files).
    """
    if init is None:
        init_rng = rng_stream(config.seed, "init")
        params_v, params_pi = control_params(init_rng), price_params(init_rng)
    else:
        params_v, params_pi = init[0].copy(), init[1].copy()
    opt_v = AdamState.fresh(params_v, config.lr_v, config.beta1, config.beta2, config.eps_adam)
    opt_pi = AdamState.fresh(params_pi, config.lr_pi, config.beta1, config.beta2, config.eps_adam)
    history = TrainLog()
    epoch_start = time.perf_counter()

    for i in range(config.iterations):
        draw = 0 if config.freeze_samples else i
        x0 = sample_initial(model, config.n_train, rng_stream(config.seed, "population", draw))
        supply = simulate_supply(model, config.steps, rng_stream(config.seed, "supply", draw))

        loss, grads_v = loss_and_gradients(model, params_v, params_pi, x0, supply, "control")
        _check_finite(i, loss, grads_v, "control")
        grads_v, norm_v, clipped = clip_gradients(grads_v, config.clip_norm)
        if clipped:
            history.clip_events.append({"step": i + 1, "network": "control", "norm": norm_v})
            emit_log(log, f"  step {i + 1}: clipped control gradient (norm {norm_v:.3e})")
        if hook:
            hook(i, "control", params_v, params_pi, grads_v)
        params_v = ascent_descent_step(params_v, grads_v, "descent", opt_v)

        # Re-rolled under the updated controls, old price parameters.
        loss_after, grads_pi = loss_and_gradients(model, params_v, params_pi, x0, supply, "price")
        _check_finite(i, loss_after, grads_pi, "price")
        grads_pi, norm_pi, clipped = clip_gradients(grads_pi, config.clip_norm)
        if clipped:
            history.clip_events.append({"step": i + 1, "network": "price", "norm": norm_pi})
            emit_log(log, f"  step {i + 1}: clipped price gradient (norm {norm_pi:.3e})")
        if hook:
            hook(i, "price", params_v, params_pi, grads_pi)
        params_pi = ascent_descent_step(params_pi, grads_pi, "ascent", opt_pi)

        history.steps.append({"step": i + 1, "loss": loss, "grad_norm_v": norm_v, "grad_norm_pi": norm_pi})

        if (i + 1) % config.epoch_size == 0:
            epoch = (i + 1) // config.epoch_size
            x_eval, supplies = evaluation_set(
                model, config.seed, epoch, config.n_test, config.mc_samples, config.steps
            )
            report, _ = evaluate(model, params_v, params_pi, x_eval, supplies, workers=config.workers)
            elapsed = time.perf_counter() - epoch_start
            history.reports.append(report)
            history.seconds.append(elapsed)
            history.epochs.append({"epoch": epoch, "mse_eb": report.mse_eb, "mse_eh": report.mse_eh})
            emit_log(
                log,
                f"Epoch {epoch}/{config.epochs}: MSE(eB)={report.mse_eb:.4e} MSE(eH)={report.mse_eh:.4e} "
                f"loss={loss:.4f} ({format_elapsed(elapsed)})",
            )
            if on_epoch:
                on_epoch(epoch, params_v, params_pi, history)
            epoch_start = time.perf_counter()

    return params_v, params_pi, history
