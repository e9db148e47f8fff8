"""
Problem instances for the price formation game: running cost L, Hamiltonian H,
terminal cost u_T, initial distribution m0 and the common-noise supply SDE.

Derivatives are first-class function slots (not autodiff) because the
a posteriori estimator evaluates them outside any tape. L and u_T are written
with plain arithmetic so the same callable works on numpy arrays and on
diffgraph nodes.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

SUPPLY_PRESETS = ("oscillating", "deterministic", "zero")


def oscillating_forcing(t):
    return 3.0 * np.sin(3.0 * np.pi * np.asarray(t, dtype=np.float64))


def oscillating_volatility(q, t):
    """Noise only acts on [0.25, 0.75]; exactly zero elsewhere."""
    t = np.asarray(t, dtype=np.float64)
    return np.maximum(0.5 * np.sin(2.0 * np.pi * (t - 0.25)), 0.0)


def zero_forcing(t):
    return np.zeros_like(np.asarray(t, dtype=np.float64))


def zero_volatility(q, t):
    return np.zeros_like(np.asarray(t, dtype=np.float64))


@dataclass(frozen=True)
class SupplyModel:
    """dQ = (forcing(t) - reversion * Q) dt + volatility(Q, t) dW."""

    name: str
    forcing: Callable = oscillating_forcing
    volatility: Callable = oscillating_volatility
    reversion: float = 1.0

    def drift(self, q, t):
        return self.forcing(t) - self.reversion * np.asarray(q, dtype=np.float64)

    def diffusion(self, q, t):
        return self.volatility(q, t)


def supply_model(name: str = "oscillating", reversion: float = 1.0) -> SupplyModel:
    if name == "oscillating":
        return SupplyModel("oscillating", oscillating_forcing, oscillating_volatility, reversion)
    if name == "deterministic":
        return SupplyModel("deterministic", oscillating_forcing, zero_volatility, reversion)
    if name == "zero":
        return SupplyModel("zero", zero_forcing, zero_volatility, reversion)
    raise ValueError(f"supply must be one of {SUPPLY_PRESETS}, got {name!r}")


@dataclass(frozen=True)
class LQParams:
    lambda_x: float
    x_ref: float
    lambda_T: float


@dataclass(frozen=True)
class MarketModel:
    lagrangian: Callable
    lagrangian_x: Callable
    lagrangian_v: Callable
    hamiltonian: Callable
    hamiltonian_p: Callable
    hamiltonian_x: Callable
    terminal_cost: Callable
    terminal_cost_x: Callable
    supply: SupplyModel = field(default_factory=supply_model)
    initial_mean: float = -0.25
    initial_std: float = 0.2
    horizon: float = 1.0
    initial_supply: float = 0.0
    lq: LQParams | None = None

    def optimal_control(self, x, p):
        """v* = -H_p(x, p), the maximizer in the Legendre transform."""
        return -self.hamiltonian_p(x, p)

    def supply_drift(self, q, t):
        return self.supply.drift(q, t)

    def supply_diffusion(self, q, t):
        return self.supply.diffusion(q, t)


@dataclass(frozen=True)
class SupplyPath:
    q: np.ndarray
    dW: np.ndarray
    t: np.ndarray
    dt: float

    def __post_init__(self) -> None:
        if len(self.q) != len(self.t) or len(self.dW) != len(self.q) - 1:
            raise ValueError(
                f"inconsistent supply path: |q|={len(self.q)}, |t|={len(self.t)}, |dW|={len(self.dW)}"
            )

    @property
    def steps(self) -> int:
        return len(self.dW)


def lq_model(
    lambda_x: float = 1.0,
    x_ref: float = 1.0,
    lambda_T: float = 1.0 / math.e,
    *,
    initial_mean: float = -0.25,
    initial_std: float = 0.2,
    horizon: float = 1.0,
    initial_supply: float = 0.0,
    supply: SupplyModel | str = "oscillating",
) -> MarketModel:
    """L = lambda_x/2 (x - x_ref)^2 + v^2/2, u_T = lambda_T/2 (x - x_ref)^2."""
    if lambda_x < 0 or lambda_T < 0:
        raise ValueError(f"cost weights must be non-negative, got lambda_x={lambda_x}, lambda_T={lambda_T}")
    if initial_std < 0:
        raise ValueError(f"initial_std must be non-negative, got {initial_std}")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if isinstance(supply, str):
        supply = supply_model(supply)

    def lagrangian(x, v):
        return 0.5 * lambda_x * (x - x_ref) ** 2 + 0.5 * v ** 2

    def lagrangian_x(x, v):
        return lambda_x * (np.asarray(x, dtype=np.float64) - x_ref)

    def lagrangian_v(x, v):
        return np.asarray(v, dtype=np.float64) + 0.0 * np.asarray(x, dtype=np.float64)

    def hamiltonian(x, p):
        x = np.asarray(x, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        return 0.5 * p * p - 0.5 * lambda_x * (x - x_ref) ** 2

    def hamiltonian_p(x, p):
        return np.asarray(p, dtype=np.float64) + 0.0 * np.asarray(x, dtype=np.float64)

    def hamiltonian_x(x, p):
        return -lambda_x * (np.asarray(x, dtype=np.float64) - x_ref)

    def terminal_cost(x):
        return 0.5 * lambda_T * (x - x_ref) ** 2

    def terminal_cost_x(x):
        return lambda_T * (np.asarray(x, dtype=np.float64) - x_ref)

    return MarketModel(
        lagrangian=lagrangian,
        lagrangian_x=lagrangian_x,
        lagrangian_v=lagrangian_v,
        hamiltonian=hamiltonian,
        hamiltonian_p=hamiltonian_p,
        hamiltonian_x=hamiltonian_x,
        terminal_cost=terminal_cost,
        terminal_cost_x=terminal_cost_x,
        supply=supply,
        initial_mean=float(initial_mean),
        initial_std=float(initial_std),
        horizon=float(horizon),
        initial_supply=float(initial_supply),
        lq=LQParams(float(lambda_x), float(x_ref), float(lambda_T)),
    )


def sample_initial(model: MarketModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. draws from m0 = Normal(initial_mean, initial_std^2)."""
    if n < 1:
        raise ValueError(f"population size must be >= 1, got {n}")
    return rng.normal(model.initial_mean, model.initial_std, size=n)


def time_grid(model: MarketModel, steps: int) -> tuple[np.ndarray, float]:
    if steps < 1:
        raise ValueError(f"number of time steps must be >= 1, got {steps}")
    return np.linspace(0.0, model.horizon, steps + 1), model.horizon / steps


def simulate_supply(
    model: MarketModel, steps: int, rng: np.random.Generator | None = None, dW: np.ndarray | None = None
) -> SupplyPath:
    """
    Euler-Maruyama on the policy grid: q[k+1] = q[k] + b(q[k], t[k]) dt + sigma(q[k], t[k]) dW[k].
    Pass dW to drive the scheme with given increments (e.g. a finer path summed in blocks) instead of rng.
    """
    t, dt = time_grid(model, steps)
    if dW is None:
        if rng is None:
            raise ValueError("simulate_supply needs rng or dW")
        dW = rng.normal(0.0, math.sqrt(dt), size=steps)
    else:
        dW = np.asarray(dW, dtype=np.float64)
        if dW.shape != (steps,):
            raise ValueError(f"dW must have shape ({steps},), got {dW.shape}")
    q = np.empty(steps + 1)
    q[0] = model.initial_supply
    for k in range(steps):
        q[k + 1] = (
            q[k]
            + float(model.supply_drift(q[k], t[k])) * dt
            + float(model.supply_diffusion(q[k], t[k])) * dW[k]
        )
    return SupplyPath(q=q, dW=dW, t=t, dt=dt)


def legendre_gap(model: MarketModel, xs, ps, v_grid: np.ndarray) -> float:
    """max |H(x, p) - max_v(-p v - L(x, v))| over the (x, p) pairs, sup taken on v_grid."""
    worst = 0.0
    for x in np.atleast_1d(xs):
        lag = model.lagrangian(np.full_like(v_grid, x), v_grid)
        for p in np.atleast_1d(ps):
            sup = float(np.max(-p * v_grid - lag))
            worst = max(worst, abs(float(model.hamiltonian(x, p)) - sup))
    return worst


def convexity_violations(model: MarketModel, xs, v_grid: np.ndarray) -> int:
    """Number of grid points where v -> L(x, v) has a non-positive second difference."""
    count = 0
    for x in np.atleast_1d(xs):
        lag = model.lagrangian(np.full_like(v_grid, x), v_grid)
        second = lag[2:] - 2.0 * lag[1:-1] + lag[:-2]
        count += int(np.sum(second <= 0.0))
    return count
