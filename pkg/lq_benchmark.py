"""
Analytic price oracle for the linear-quadratic instance.

With L = lambda_x/2 (x - x_ref)^2 + v^2/2, u_T = lambda_T/2 (x - x_ref)^2 and
supply drift forcing(t) - kappa Q, the price is affine in the mean state and
the supply, price = a(t) + b(t) Xbar + c(t) Q, where

    b' = lambda_x                         b(T) = -lambda_T
    c' = kappa c + kappa - b              c(T) = -1
    a' = -forcing(t) (1 + c) - lambda_x x_ref    a(T) = lambda_T x_ref

and the price follows
    d price = (lambda_x Xbar - forcing + kappa Q - lambda_x x_ref) dt + c sigma dW.

Individual deviations from the mean are driven by the Riccati gain
rho' = rho^2 - lambda_x, rho(T) = lambda_T: v = Q - rho (x - Xbar).

The coefficients are integrated backward with RK4 on a fine grid and
interpolated linearly onto the simulation grid. For the deterministic supply
an independent check solves the N-agent Hamiltonian boundary value problem by
shooting (scipy solve_ivp + root).
"""

from __future__ import annotations

from collections.abc import Callable, Iterator
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from market_model import MarketModel, SupplyPath, time_grid
from particle_system import ParticleBatch, reconstruct_adjoint

COEFF_COLUMNS = ("k", "t", "a", "b", "c", "rho")
ORACLE_COLUMNS = ("k", "t", "Q", "mean_state", "price_exact", "price_simulated")
PRICE_COLUMNS = ("k", "t", "Q", "price_rnn", "price_oracle")
PRE_NOISE_WINDOW = (0.0, 0.25)


class UnsupportedModelError(ValueError):
    """The oracle only exists for the linear-quadratic instance."""


class OracleConsistencyError(RuntimeError):
    """Affine representation and simulated price SDE disagree beyond the O(dt) tolerance."""


@dataclass(frozen=True)
class AffineCoefficients:
    t: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    rho: np.ndarray
    w0: float

    def at(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(a, b, c, rho) linearly interpolated at times t."""
        return tuple(np.interp(t, self.t, coef) for coef in (self.a, self.b, self.c, self.rho))

    def resample(self, t: np.ndarray) -> AffineCoefficients:
        a, b, c, rho = self.at(t)
        return AffineCoefficients(np.asarray(t, dtype=np.float64), a, b, c, rho, self.w0)

    def price(self, mean_state, q, t) -> np.ndarray:
        a, b, c, _ = self.at(t)
        return a + b * np.asarray(mean_state) + c * np.asarray(q)


@dataclass(frozen=True)
class OraclePath:
    t: np.ndarray
    price: np.ndarray
    price_simulated: np.ndarray
    mean_state: np.ndarray
    supply: SupplyPath

    @property
    def max_gap(self) -> float:
        return float(np.max(np.abs(self.price - self.price_simulated)))


def require_lq(model: MarketModel):
    if model.lq is None:
        raise UnsupportedModelError("the price oracle needs a linear-quadratic model (built by lq_model)")
    return model.lq


def ode_steps(steps: int, refinement: int = 10, minimum: int = 400) -> int:
    return max(int(minimum), int(refinement) * int(steps))


def _coefficient_field(model: MarketModel) -> Callable[[float, np.ndarray], np.ndarray]:
    lq = require_lq(model)
    kappa = model.supply.reversion
    forcing = model.supply.forcing

    def field(t: float, y: np.ndarray) -> np.ndarray:
        a, b, c, rho = y
        return np.array([
            -float(forcing(t)) * (1.0 + c) - lq.lambda_x * lq.x_ref,
            lq.lambda_x,
            kappa * c + kappa - b,
            rho * rho - lq.lambda_x,
        ])

    return field


def solve_affine_coefficients(model: MarketModel, ode_grid_steps: int = 400) -> AffineCoefficients:
    """Classic RK4 backward from T on ode_grid_steps uniform steps."""
    lq = require_lq(model)
    if ode_grid_steps < 1:
        raise ValueError(f"ode_grid_steps must be >= 1, got {ode_grid_steps}")
    field = _coefficient_field(model)
    t, h = time_grid(model, ode_grid_steps)
    y = np.empty((ode_grid_steps + 1, 4))
    y[-1] = [lq.lambda_T * lq.x_ref, -lq.lambda_T, -1.0, lq.lambda_T]
    for i in range(ode_grid_steps, 0, -1):
        ti, yi = t[i], y[i]
        k1 = field(ti, yi)
        k2 = field(ti - 0.5 * h, yi - 0.5 * h * k1)
        k3 = field(ti - 0.5 * h, yi - 0.5 * h * k2)
        k4 = field(ti - h, yi - h * k3)
        y[i - 1] = yi - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    a, b, c, rho = y.T
    w0 = a[0] + b[0] * model.initial_mean + c[0] * model.initial_supply
    return AffineCoefficients(t=t, a=a, b=b, c=c, rho=rho, w0=float(w0))


def closed_form_b(model: MarketModel, t) -> np.ndarray:
    lq = require_lq(model)
    return -lq.lambda_T + lq.lambda_x * (np.asarray(t, dtype=np.float64) - model.horizon)


def closed_form_c(model: MarketModel, t) -> np.ndarray:
    """Variation of constants: c(t) = -e^{kappa(t-T)} - int_t^T e^{kappa(t-s)} (kappa - b(s)) ds (scipy quad)."""
    require_lq(model)
    kappa, T = model.supply.reversion, model.horizon

    def one(ti: float) -> float:
        integral, _ = integrate.quad(
            lambda s: np.exp(kappa * (ti - s)) * (kappa - float(closed_form_b(model, s))),
            ti, T, epsabs=1e-13, epsrel=1e-13,
        )
        return -np.exp(kappa * (ti - T)) - integral

    return np.array([one(float(ti)) for ti in np.atleast_1d(t)])


def coefficient_residuals(model: MarketModel, coeffs: AffineCoefficients) -> float:
    """
    Max pointwise residual of the coefficient ODEs in integral form: Simpson's rule
    over each pair of fine steps, divided by the pair length.
    """
    field = _coefficient_field(model)
    y = np.column_stack([coeffs.a, coeffs.b, coeffs.c, coeffs.rho])
    f = np.array([field(ti, yi) for ti, yi in zip(coeffs.t, y)])
    h = coeffs.t[1] - coeffs.t[0]
    simpson = h / 3.0 * (f[:-2] + 4.0 * f[1:-1] + f[2:])
    residual = (y[2:] - y[:-2] - simpson) / (2.0 * h)
    return float(np.max(np.abs(residual)))


def oracle_price_path(
    coeffs: AffineCoefficients,
    supply: SupplyPath,
    model: MarketModel,
    consistency_factor: float = 100.0,
    w0_override: float | None = None,
) -> OraclePath:
    """
    Mean state by Euler (dXbar = Q dt), price (i) from the affine representation and
    (ii) by Euler-Maruyama on the price SDE from w0 with the path's own increments.
    (i) is returned; a gap above consistency_factor * dt raises OracleConsistencyError.
    An overridden w0 only moves (ii), and the cross-check is skipped.
    """
    lq = require_lq(model)
    grid = coeffs.resample(supply.t)
    dt, K = supply.dt, supply.steps
    q = supply.q
    mean_state = model.initial_mean + dt * np.concatenate([[0.0], np.cumsum(q[:K])])
    exact = grid.a + grid.b * mean_state + grid.c * q

    forcing = model.supply.forcing(supply.t)
    sigma = np.broadcast_to(model.supply_diffusion(q, supply.t), q.shape)
    kappa = model.supply.reversion
    simulated = np.empty(K + 1)
    simulated[0] = coeffs.w0 if w0_override is None else float(w0_override)
    for k in range(K):
        drift = lq.lambda_x * mean_state[k] - forcing[k] + kappa * q[k] - lq.lambda_x * lq.x_ref
        simulated[k + 1] = simulated[k] + drift * dt + grid.c[k] * sigma[k] * supply.dW[k]

    path = OraclePath(t=supply.t, price=exact, price_simulated=simulated, mean_state=mean_state, supply=supply)
    if w0_override is None and path.max_gap > consistency_factor * dt:
        raise OracleConsistencyError(
            f"affine price and simulated price differ by {path.max_gap:.3e} > {consistency_factor} * dt = {consistency_factor * dt:.3e}"
        )
    return path


def oracle_feedback_control(coeffs: AffineCoefficients, x, mean_state, q, t) -> np.ndarray:
    """v = Q - rho(t) (x - Xbar); averages to Q over any population whose mean is Xbar."""
    _, _, _, rho = coeffs.at(t)
    return np.asarray(q) - rho * (np.asarray(x) - np.asarray(mean_state))


def implied_adjoint(coeffs: AffineCoefficients, x, mean_state, q, t) -> np.ndarray:
    """P = -v - price for the oracle control; equals u_T'(x) at t = T."""
    v = oracle_feedback_control(coeffs, x, mean_state, q, t)
    return -v - coeffs.price(mean_state, q, t)


def oracle_batch(
    model: MarketModel,
    coeffs: AffineCoefficients,
    x0: np.ndarray,
    supplies: list[SupplyPath],
) -> ParticleBatch:
    """
    Exact-solution batch: agents follow the oracle feedback (explicit Euler), the price is the
    affine oracle at the empirical mean, and adjoints come from reconstruct_adjoint.
    """
    require_lq(model)
    x0 = np.asarray(x0, dtype=np.float64)
    t, dt = supplies[0].t, supplies[0].dt
    K = len(t) - 1
    grid = coeffs.resample(t)
    q = np.vstack([s.q for s in supplies])
    X = np.empty((len(supplies), len(x0), K + 1))
    v = np.empty_like(X)
    price = np.empty((len(supplies), K + 1))
    X[:, :, 0] = x0
    for k in range(K + 1):
        mean_state = X[:, :, k].mean(axis=1)
        v[:, :, k] = q[:, k, None] - grid.rho[k] * (X[:, :, k] - mean_state[:, None])
        price[:, k] = grid.a[k] + grid.b[k] * mean_state + grid.c[k] * q[:, k]
        if k < K:
            X[:, :, k + 1] = X[:, :, k] + dt * v[:, :, k]
    batch = ParticleBatch(X=X, v=v, price=price, q=q, t=t, dt=dt, x0=x0)
    return reconstruct_adjoint(model, batch)


@dataclass(frozen=True)
class ShootingSolution:
    t: np.ndarray
    price: np.ndarray
    mean_state: np.ndarray
    q: np.ndarray
    X: np.ndarray
    P: np.ndarray


def shooting_price_path(model: MarketModel, x0: np.ndarray, t_eval: np.ndarray) -> ShootingSolution:
    """
    Deterministic supply only. State (Q, X^1..N, P^1..N) with price = -mean(P) - Q,
    X^n' = -(P^n + price), P^n' = -lambda_x (X^n - x_ref); the unknown P^n(0) are found
    by root-finding on P^n(T) - lambda_T (X^n(T) - x_ref).
    """
    lq = require_lq(model)
    t_check = np.linspace(0.0, model.horizon, 101)
    if np.any(model.supply_diffusion(np.zeros_like(t_check), t_check) != 0.0):
        raise ValueError("shooting needs a deterministic supply (zero volatility)")
    x0 = np.asarray(x0, dtype=np.float64)
    n = len(x0)
    kappa, forcing = model.supply.reversion, model.supply.forcing

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        q, X, P = y[0], y[1:n + 1], y[n + 1:]
        price = -P.mean() - q
        return np.concatenate([
            [float(forcing(t)) - kappa * q],
            -(P + price),
            -lq.lambda_x * (X - lq.x_ref),
        ])

    def solve(p0: np.ndarray, dense: bool = False):
        y0 = np.concatenate([[model.initial_supply], x0, p0])
        return integrate.solve_ivp(
            rhs, (0.0, model.horizon), y0, method="DOP853", rtol=1e-11, atol=1e-12,
            t_eval=t_eval if dense else None,
        )

    def mismatch(p0: np.ndarray) -> np.ndarray:
        end = solve(p0).y[:, -1]
        return end[n + 1:] - lq.lambda_T * (end[1:n + 1] - lq.x_ref)

    guess = lq.lambda_T * (x0 - lq.x_ref)
    found = optimize.root(mismatch, guess, method="hybr", tol=1e-12)
    if not found.success:
        raise RuntimeError(f"shooting did not converge: {found.message}")
    sol = solve(found.x, dense=True)
    q, X, P = sol.y[0], sol.y[1:n + 1], sol.y[n + 1:]
    return ShootingSolution(t=sol.t, price=-P.mean(axis=0) - q, mean_state=X.mean(axis=0), q=q, X=X, P=P)


def relative_l2_error(approx: np.ndarray, exact: np.ndarray) -> float:
    approx, exact = np.asarray(approx, dtype=np.float64), np.asarray(exact, dtype=np.float64)
    scale = np.linalg.norm(exact)
    diff = np.linalg.norm(approx - exact)
    return float(diff / scale) if scale > 0 else float(diff)


def price_error_summary(
    approx: np.ndarray,
    exact: np.ndarray,
    t: np.ndarray,
    window: tuple[float, float] = PRE_NOISE_WINDOW,
) -> dict[str, float]:
    """Relative L2 price error averaged over paths, overall and on [window]; rows of approx/exact are paths."""
    approx, exact = np.atleast_2d(approx), np.atleast_2d(exact)
    mask = (t >= window[0]) & (t <= window[1])
    overall = [relative_l2_error(a, e) for a, e in zip(approx, exact)]
    windowed = [relative_l2_error(a[mask], e[mask]) for a, e in zip(approx, exact)]
    return {
        "rel_l2_price_error": float(np.mean(overall)),
        "rel_l2_price_error_window": float(np.mean(windowed)),
        "window_start": float(window[0]),
        "window_end": float(window[1]),
    }


def coefficient_rows(coeffs: AffineCoefficients) -> Iterator[dict]:
    for k, (t, a, b, c, rho) in enumerate(zip(coeffs.t, coeffs.a, coeffs.b, coeffs.c, coeffs.rho)):
        yield {"k": k, "t": t, "a": a, "b": b, "c": c, "rho": rho}


def oracle_rows(path: OraclePath) -> Iterator[dict]:
    for k, t in enumerate(path.t):
        yield {
            "k": k,
            "t": t,
            "Q": path.supply.q[k],
            "mean_state": path.mean_state[k],
            "price_exact": path.price[k],
            "price_simulated": path.price_simulated[k],
        }


def price_rows(t: np.ndarray, q: np.ndarray, rnn: np.ndarray, oracle: np.ndarray) -> Iterator[dict]:
    for k in range(len(t)):
        yield {"k": k, "t": t[k], "Q": q[k], "price_rnn": rnn[k], "price_oracle": oracle[k]}
