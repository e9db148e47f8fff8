"""Core run workflows: train, evaluate checkpoints, dump the LQ oracle, audit gradients. Used by the CLI and tests."""

from __future__ import annotations

from collections.abc import Callable
from pathlib import Path

import numpy as np

from adversarial_trainer import ConfigError, TrainLog, evaluate, evaluation_set, train
from app_paths import resolve_output_dir
from artifacts import (
    checkpoint_paths,
    load_checkpoint,
    save_checkpoint,
    write_atomic,
    write_csv,
    write_json,
    write_jsonl,
)
from diffgraph import grad_check
from lq_benchmark import (
    COEFF_COLUMNS,
    ORACLE_COLUMNS,
    PRICE_COLUMNS,
    coefficient_rows,
    ode_steps,
    oracle_price_path,
    oracle_rows,
    price_error_summary,
    price_rows,
    require_lq,
    solve_affine_coefficients,
)
from market_model import MarketModel, sample_initial, simulate_supply
from particle_system import TRAJECTORY_COLUMNS, adversarial_loss, agent_costs, trajectory_rows
from posterior_estimator import POSTERIOR_COLUMNS, certificate, posterior_rows
from rng_streams import rng_stream
from rnn_policy import (
    CONTROL_DIMS,
    CONTROL_INPUTS,
    PRICE_DIMS,
    PRICE_INPUTS,
    BoundNetwork,
    CheckpointError,
    RnnParams,
    control_params,
    price_params,
)
from run_config import build_model, dump_config, train_config
from timer_utils import emit_log, format_elapsed, timed

# Evaluation draws use epoch index 0 of the 'eval' stream; training epochs start at 1.
EVAL_EPOCH = 0

# Entries checked by finite differences per parameter array in grad-check; None checks every entry.
GRAD_CHECK_SAMPLES = 8


def output_dir(cfg: dict) -> Path:
    out = resolve_output_dir(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def metric_records(history: TrainLog, epoch_size: int, with_timing: bool = False) -> list[dict]:
    """Step records interleaved with one epoch record after each epoch's steps."""
    records: list[dict] = []
    for index, epoch in enumerate(history.epochs):
        records.extend(history.steps[index * epoch_size:(index + 1) * epoch_size])
        record = dict(epoch)
        if with_timing:
            record["seconds"] = history.seconds[index]
        records.append(record)
    records.extend(history.steps[len(history.epochs) * epoch_size:])
    return records


def cmd_train(cfg: dict, log: Callable[[str], None] | None = None) -> Path:
    """Train from cfg; writes checkpoints per epoch plus final, metrics.jsonl, timing.jsonl, posterior.csv."""
    model = build_model(cfg)
    tc = train_config(cfg)
    out = output_dir(cfg)
    write_atomic(out / "config.effective.yaml", dump_config(cfg))
    with_timing = bool(cfg["output"]["timing_in_metrics"])
    emit_log(log, f"Training {tc.epochs} epoch(s) x {tc.epoch_size} steps (K={tc.steps}, N={tc.n_train}, J={tc.mc_samples})")

    def on_epoch(epoch: int, params_v: RnnParams, params_pi: RnnParams, history: TrainLog) -> None:
        for path, params in zip(checkpoint_paths(out, f"epoch_{epoch}"), (params_v, params_pi)):
            save_checkpoint(path, params)
        write_jsonl(out / "metrics.jsonl", metric_records(history, tc.epoch_size, with_timing))
        write_jsonl(out / "timing.jsonl", [{"epoch": e["epoch"], "seconds": s} for e, s in zip(history.epochs, history.seconds)])
        write_csv(out / "posterior.csv", POSTERIOR_COLUMNS, posterior_rows(
            [(e["epoch"], r) for e, r in zip(history.epochs, history.reports)]
        ))

    if tc.iterations == 0:
        init_rng = rng_stream(tc.seed, "init")
        initial = (control_params(init_rng), price_params(init_rng))
        for path, params in zip(checkpoint_paths(out, "epoch_0"), initial):
            save_checkpoint(path, params)
        write_jsonl(out / "metrics.jsonl", [])
        emit_log(log, f"No iterations requested; initial checkpoints written to {out / 'checkpoints'}")
        return out

    timings: dict[str, float] = {}
    with timed(log, "Training", timings):
        params_v, params_pi, history = train(model, tc, log=log, on_epoch=on_epoch)
    for path, params in zip(checkpoint_paths(out, "final"), (params_v, params_pi)):
        save_checkpoint(path, params)
    emit_log(log, f"Done! {len(history.epochs)} epoch checkpoint pair(s) + final saved to {out / 'checkpoints'} "
                  f"in {format_elapsed(timings['Training'])}")
    return out


def load_networks(paths: list[str | Path]) -> tuple[RnnParams, RnnParams]:
    """Pick the control and price networks out of the given checkpoints (by tag) and check their layout."""
    found: dict[str, RnnParams] = {}
    for path in paths:
        params = load_checkpoint(path)
        if params.tag in found:
            raise CheckpointError(f"more than one {params.tag} checkpoint given ({path})")
        found[params.tag] = params
    missing = {"control", "price"} - set(found)
    if missing:
        raise CheckpointError(f"missing {' and '.join(sorted(missing))} checkpoint(s); pass one _v and one _pi file")
    expected = {"control": (CONTROL_DIMS, CONTROL_INPUTS), "price": (PRICE_DIMS, PRICE_INPUTS)}
    for tag, (dims, inputs) in expected.items():
        params = found[tag]
        if params.dims != dims or params.input_dim != inputs:
            raise CheckpointError(
                f"{tag} checkpoint has layers {params.dims} / {params.input_dim} inputs, "
                f"the run expects {dims} / {inputs}"
            )
    return found["control"], found["price"]


def oracle_coefficients(model: MarketModel, cfg: dict):
    K = cfg["discretization"]["steps"]
    oracle = cfg["oracle"]
    return solve_affine_coefficients(model, ode_steps(K, oracle["ode_refinement"], oracle["min_ode_steps"]))


def cmd_evaluate(
    cfg: dict,
    checkpoints: list[str | Path],
    j_eval: int | None = None,
    log: Callable[[str], None] | None = None,
) -> dict:
    """
    Posterior report on a fresh evaluation set, per-sample RNN vs oracle price CSVs,
    trajectories and a relative L2 price error summary (overall and on [0, 0.25]).
    """
    model = build_model(cfg)
    params_v, params_pi = load_networks(checkpoints)
    tc = train_config(cfg)
    samples = tc.mc_samples if j_eval is None else int(j_eval)
    if samples < 1:
        raise ConfigError(f"--j-eval must be >= 1, got {samples}")
    out = output_dir(cfg)
    x0, supplies = evaluation_set(model, tc.seed, EVAL_EPOCH, tc.n_test, samples, tc.steps)

    with timed(log, f"Evaluating on {samples} supply path(s)"):
        report, batch = evaluate(model, params_v, params_pi, x0, supplies, workers=tc.workers)

    coeffs = oracle_coefficients(model, cfg)
    factor = cfg["oracle"]["consistency_factor"]
    oracle_prices = np.vstack([oracle_price_path(coeffs, s, model, factor).price for s in supplies])
    for j in range(samples):
        write_csv(out / f"prices_sample_{j}.csv", PRICE_COLUMNS, price_rows(batch.t, batch.q[j], batch.price[j], oracle_prices[j]))
    write_csv(out / "posterior.csv", POSTERIOR_COLUMNS, posterior_rows([(EVAL_EPOCH, report)]))
    write_csv(out / "trajectories.csv", TRAJECTORY_COLUMNS, trajectory_rows(batch, run_id=out.name))

    summary = {
        **report.as_record(),
        **price_error_summary(batch.price, oracle_prices, batch.t),
        "certificate": certificate(report),
        "saddle_value": float(agent_costs(model, batch).mean()),
    }
    write_json(out / "evaluation.json", summary)
    emit_log(log, f"  MSE(eB)={report.mse_eb:.4e} MSE(eH)={report.mse_eh:.4e} "
                  f"rel. L2 price error={summary['rel_l2_price_error']:.3e} "
                  f"(on [0, 0.25]: {summary['rel_l2_price_error_window']:.3e})")
    return summary


def cmd_oracle(cfg: dict, samples: int | None = None, log: Callable[[str], None] | None = None) -> Path:
    """Coefficient table on the simulation grid plus one oracle CSV per supply path."""
    model = build_model(cfg)
    require_lq(model)
    tc = train_config(cfg)
    samples = tc.mc_samples if samples is None else int(samples)
    if samples < 1:
        raise ConfigError(f"number of oracle paths must be >= 1, got {samples}")
    out = output_dir(cfg)
    coeffs = oracle_coefficients(model, cfg)
    _, supplies = evaluation_set(model, tc.seed, EVAL_EPOCH, 1, samples, tc.steps)
    write_csv(out / "oracle_coeffs.csv", COEFF_COLUMNS, coefficient_rows(coeffs.resample(supplies[0].t)))
    override = cfg["oracle"]["w0_override"]
    worst = 0.0
    for j, supply in enumerate(supplies):
        path = oracle_price_path(coeffs, supply, model, cfg["oracle"]["consistency_factor"], w0_override=override)
        worst = max(worst, path.max_gap)
        write_csv(out / f"oracle_sample_{j}.csv", ORACLE_COLUMNS, oracle_rows(path))
    emit_log(log, f"Oracle: w0={coeffs.w0:.6f}, {samples} path(s) written to {out}, "
                  f"max representation gap {worst:.3e}")
    return out


def cmd_grad_check(
    cfg: dict,
    agents: int = 2,
    steps: int = 5,
    samples_per_param: int | None = GRAD_CHECK_SAMPLES,
    log: Callable[[str], None] | None = None,
) -> float:
    """
    Finite-difference audit of the full adversarial loss w.r.t. both networks.
    samples_per_param random entries per array (all ~4.1k entries when None).
    """
    if samples_per_param is not None and samples_per_param < 1:
        raise ConfigError(f"--samples-per-param must be >= 1, got {samples_per_param}")
    model = build_model(cfg)
    seed = cfg["seed"]
    x0 = sample_initial(model, agents, rng_stream(seed, "population", 0))
    supply = simulate_supply(model, steps, rng_stream(seed, "supply", 0))
    init_rng = rng_stream(seed, "init")
    params_v, params_pi = control_params(init_rng), price_params(init_rng)
    flat = {f"v.{k}": w for k, w in params_v.weights.items()}
    flat.update({f"pi.{k}": w for k, w in params_pi.weights.items()})

    def build(tape, nodes):
        net_v = BoundNetwork.wrap(params_v, tape, nodes, prefix="v.")
        net_pi = BoundNetwork.wrap(params_pi, tape, nodes, prefix="pi.")
        return adversarial_loss(model, tape, net_v, net_pi, x0, supply)

    with timed(log, f"Gradient check (N={agents}, K={steps})"):
        error = grad_check(build, flat, h=1e-6, samples_per_param=samples_per_param, seed=seed)
    emit_log(log, f"  max relative error {error:.3e}")
    return error
