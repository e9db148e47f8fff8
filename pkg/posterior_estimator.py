"""
A posteriori residuals of a particle batch.

MSE(eps_B) averages the squared market-clearing residual (mean_n v - Q)^2 over
samples and all K+1 grid times. MSE(eps_H) splits into a drift part, the
discrete adjoint equation dP + dt L_x = 0 checked on k = 0..K-1 and averaged
over (j, n, k), and a terminal part u_T'(X_K) - P_K averaged over (j, n).
The martingale integrand of the backward equation is never estimated; the
residuals are pathwise.
"""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import asdict, dataclass

import numpy as np

from market_model import MarketModel
from particle_system import ParticleBatch

POSTERIOR_COLUMNS = ("epoch", "mse_eb", "mse_eh", "drift_component", "terminal_component")


@dataclass(frozen=True)
class PosteriorReport:
    mse_eh: float
    mse_eb: float
    drift_component: float
    terminal_component: float
    samples: int
    agents: int
    steps: int

    def as_record(self) -> dict:
        return asdict(self)


def mse_balance(batch: ParticleBatch) -> float:
    """(1/(J (K+1))) sum_j sum_{k=0..K} (mean_n v[j, n, k] - Q[j, k])^2."""
    residual = batch.v.mean(axis=1) - batch.q
    return float(np.mean(residual ** 2))


def hamiltonian_components(model: MarketModel, batch: ParticleBatch) -> tuple[float, float]:
    """(drift_component, terminal_component) of MSE(eps_H)."""
    if batch.P is None:
        raise ValueError("batch has no adjoints; run reconstruct_adjoint first")
    K = batch.steps
    dP = np.diff(batch.P, axis=-1)
    drift = dP + batch.dt * model.lagrangian_x(batch.X[..., :K], batch.v[..., :K])
    terminal = model.terminal_cost_x(batch.X[..., K]) - batch.P[..., K]
    return float(np.mean(drift ** 2)), float(np.mean(terminal ** 2))


def mse_hamiltonian(model: MarketModel, batch: ParticleBatch) -> float:
    drift, terminal = hamiltonian_components(model, batch)
    return drift + terminal


def posterior_report(model: MarketModel, batch: ParticleBatch) -> PosteriorReport:
    drift, terminal = hamiltonian_components(model, batch)
    return PosteriorReport(
        mse_eh=drift + terminal,
        mse_eb=mse_balance(batch),
        drift_component=drift,
        terminal_component=terminal,
        samples=batch.samples,
        agents=batch.agents,
        steps=batch.steps,
    )


def certificate(report: PosteriorReport, c_hint: float = 1.0) -> float:
    """
    c_hint * (sqrt(mse_eh) + sqrt(mse_eb)). The stability constant is unknown,
    so this is a monitoring quantity for the price error, not a proven bound.
    """
    if c_hint < 0:
        raise ValueError(f"c_hint must be non-negative, got {c_hint}")
    if not (math.isfinite(report.mse_eh) and math.isfinite(report.mse_eb)):
        raise ValueError(f"report is not finite: mse_eh={report.mse_eh}, mse_eb={report.mse_eb}")
    return c_hint * (math.sqrt(report.mse_eh) + math.sqrt(report.mse_eb))


def posterior_rows(reports: list[tuple[int, PosteriorReport]]) -> Iterator[dict]:
    for epoch, report in reports:
        yield {
            "epoch": epoch,
            "mse_eb": report.mse_eb,
            "mse_eh": report.mse_eh,
            "drift_component": report.drift_component,
            "terminal_component": report.terminal_component,
        }
