"""
Particle approximation: N agents moved by the control network's output with
explicit Euler, the adversarial (saddle) loss, and adjoint reconstruction
P = -L_v(X, v) - price.
"""

from __future__ import annotations

from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from diffgraph import Node, Tape
from market_model import MarketModel, SupplyPath
from rnn_policy import BoundNetwork, RnnParams, euler_advance, unroll_control, unroll_price

TRAJECTORY_COLUMNS = ("run_id", "sample_j", "agent_n", "k", "t", "X", "v", "P", "price", "Q")


@dataclass(frozen=True)
class ParticleBatch:
    """
    X, v, P: (J, N, K+1); price, q: (J, K+1). v[..., K] is the network's terminal
    output, consumed only by the adjoint and the balance residual.
    """

    X: np.ndarray
    v: np.ndarray
    price: np.ndarray
    q: np.ndarray
    t: np.ndarray
    dt: float
    x0: np.ndarray
    P: np.ndarray | None = None

    @property
    def samples(self) -> int:
        return self.X.shape[0]

    @property
    def agents(self) -> int:
        return self.X.shape[1]

    @property
    def steps(self) -> int:
        return self.X.shape[2] - 1


def _stack_supply(supplies: list[SupplyPath]) -> tuple[np.ndarray, np.ndarray, float]:
    q = np.vstack([s.q for s in supplies])
    return q, supplies[0].t, supplies[0].dt


def rollout_nodes(
    tape: Tape,
    net_v: BoundNetwork,
    net_pi: BoundNetwork,
    x0: np.ndarray,
    q: np.ndarray,
    t: np.ndarray,
    dt: float,
    horizon: float,
    terminal: bool = True,
) -> tuple[list[Node], list[Node], list[Node]]:
    """Record both networks for J paths sharing the population x0; columns are j*N + n."""
    paths = q.shape[0]
    agents = len(x0)
    prices = unroll_price(net_pi, q, t, horizon)
    expand = np.kron(np.eye(paths), np.ones((1, agents)))
    states, controls = unroll_control(
        net_v, t, np.tile(x0, paths), prices, euler_advance(dt), expand=expand, terminal=terminal,
    )
    return states, controls, prices


def roll_dynamics(
    model: MarketModel,
    params_v: RnnParams,
    params_pi: RnnParams,
    x0: np.ndarray,
    supply: SupplyPath | list[SupplyPath],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Numeric (X, v, price): X and v shaped (J, N, K+1), price (J, K+1); J=1 for a single path."""
    supplies = [supply] if isinstance(supply, SupplyPath) else list(supply)
    q, t, dt = _stack_supply(supplies)
    tape = Tape()
    states, controls, prices = rollout_nodes(
        tape, BoundNetwork(params_v, tape), BoundNetwork(params_pi, tape),
        np.asarray(x0, dtype=np.float64), q, t, dt, model.horizon,
    )
    paths, agents = q.shape[0], len(x0)
    X = np.stack([s.value.reshape(paths, agents) for s in states], axis=-1)
    v = np.stack([c.value.reshape(paths, agents) for c in controls], axis=-1)
    price = np.hstack([p.value.reshape(paths, 1) for p in prices])
    return X, v, price


def adversarial_loss(
    model: MarketModel,
    tape: Tape,
    net_v: BoundNetwork,
    net_pi: BoundNetwork,
    x0: np.ndarray,
    supply: SupplyPath,
) -> Node:
    """
    (1/N) sum_n [ sum_{k<K} dt (L(X_k, v_k) + price_k (v_k - Q_k)) + u_T(X_K) ] for one supply path.
    The product price_k * (mean v_k - Q_k) carries the whole price dependence.
    """
    q, t, dt = supply.q[None, :], supply.t, supply.dt
    states, controls, prices = rollout_nodes(
        tape, net_v, net_pi, np.asarray(x0, dtype=np.float64), q, t, dt, model.horizon, terminal=False,
    )
    terms = []
    for k in range(supply.steps):
        running = tape.mean(model.lagrangian(states[k], controls[k]))
        imbalance = tape.mean(controls[k]) - float(supply.q[k])
        terms.append(running + tape.mul(prices[k], imbalance))
    total = tape.sum(tape.concat(terms, axis=1)) * dt
    return total + tape.mean(model.terminal_cost(states[-1]))


def reconstruct_adjoint(model: MarketModel, batch: ParticleBatch) -> ParticleBatch:
    """P_k = -L_v(X_k, v_k) - price_k for k = 0..K (v_K is the network's terminal output)."""
    P = -model.lagrangian_v(batch.X, batch.v) - batch.price[:, None, :]
    return replace(batch, P=P)


def _chunks(count: int, workers: int) -> list[range]:
    workers = max(1, min(workers, count))
    bounds = np.linspace(0, count, workers + 1).astype(int)
    return [range(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def simulate_batch(
    model: MarketModel,
    params_v: RnnParams,
    params_pi: RnnParams,
    x0: np.ndarray,
    supplies: list[SupplyPath],
    workers: int = 1,
) -> ParticleBatch:
    """
    Roll the population on every supply path and reconstruct adjoints.
    Paths are split across threads, each on its own tape, then joined in order.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    parts = _chunks(len(supplies), workers)

    def _roll(indices: range):
        return roll_dynamics(model, params_v, params_pi, x0, [supplies[i] for i in indices])

    if len(parts) > 1:
        with ThreadPoolExecutor(max_workers=len(parts)) as ex:
            results = list(ex.map(_roll, parts))
    else:
        results = [_roll(parts[0])]
    X = np.concatenate([r[0] for r in results], axis=0)
    v = np.concatenate([r[1] for r in results], axis=0)
    price = np.concatenate([r[2] for r in results], axis=0)
    q, t, dt = _stack_supply(supplies)
    batch = ParticleBatch(X=X, v=v, price=price, q=q, t=t, dt=dt, x0=x0)
    return reconstruct_adjoint(model, batch)


def agent_costs(model: MarketModel, batch: ParticleBatch) -> np.ndarray:
    """Per-agent cost functional with the price term, shape (J, N)."""
    K = batch.steps
    X, v = batch.X[..., :K], batch.v[..., :K]
    running = model.lagrangian(X, v) + batch.price[:, None, :K] * (v - batch.q[:, None, :K])
    return batch.dt * running.sum(axis=-1) + model.terminal_cost(batch.X[..., K])


def trajectory_rows(batch: ParticleBatch, run_id: str) -> Iterator[dict]:
    P = batch.P if batch.P is not None else np.full_like(batch.X, np.nan)
    for j in range(batch.samples):
        for n in range(batch.agents):
            for k in range(batch.steps + 1):
                yield {
                    "run_id": run_id,
                    "sample_j": j,
                    "agent_n": n,
                    "k": k,
                    "t": batch.t[k],
                    "X": batch.X[j, n, k],
                    "v": batch.v[j, n, k],
                    "P": P[j, n, k],
                    "price": batch.price[j, k],
                    "Q": batch.q[j, k],
                }
