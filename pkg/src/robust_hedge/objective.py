"""Payoffs, hedging P&L and OCE risk-measure losses.

Array conventions: prices have shape (N, r, T+1), holdings (N, r, T) with
holding ``t`` applied over the interval [t, t+1].  Every loss piece has a
matching ``*_backward`` returning adjoints so the network module can chain
them into one reverse pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from robust_hedge.market_sim import HestonSpec, PathBatch, variance_swap_adjoint, variance_swap_curve


class NumericOverflowError(FloatingPointError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class EuropeanCall:
    strike: float = 100.0

    kind = "call"

    def __post_init__(self):
        if not self.strike > 0:
            raise ValueError("strike must be positive")


@dataclass(frozen=True)
class AsianPut:
    """At-the-money Asian put: strike is the path's initial price."""

    kind = "asian_put"


PayoffSpec = Union[EuropeanCall, AsianPut]


@dataclass(frozen=True)
class Entropic:
    lam: float = 1.0

    kind = "entropic"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("entropic risk aversion must be positive")


@dataclass(frozen=True)
class CVaR:
    alpha: float = 0.5

    kind = "cvar"

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("CVaR level must lie in [0, 1)")


RiskMeasureSpec = Union[Entropic, CVaR]


@dataclass(frozen=True)
class CostSpec:
    rate: float = 0.0

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("transaction cost rate must be non-negative")


# ---------------------------------------------------------------------------
# payoff


def payoff_values(spec: PayoffSpec, s: np.ndarray) -> np.ndarray:
    """Payoff from the underlying price paths ``s`` of shape (N, T+1)."""
    if isinstance(spec, EuropeanCall):
        return np.maximum(s[:, -1] - spec.strike, 0.0)
    if isinstance(spec, AsianPut):
        return np.maximum(s[:, 0] - s[:, 1:].mean(axis=1), 0.0)
    raise TypeError(f"unknown payoff {spec!r}")


def payoff_grad(spec: PayoffSpec, s: np.ndarray) -> np.ndarray:
    """d payoff / d s, subgradient 0 at the kink."""
    g = np.zeros_like(s)
    if isinstance(spec, EuropeanCall):
        g[:, -1] = (s[:, -1] > spec.strike).astype(np.float64)
    elif isinstance(spec, AsianPut):
        T = s.shape[1] - 1
        itm = (s[:, 0] - s[:, 1:].mean(axis=1) > 0).astype(np.float64)
        g[:, 0] = itm
        g[:, 1:] = -itm[:, None] / T
    else:
        raise TypeError(f"unknown payoff {spec!r}")
    return g


def payoff(spec: PayoffSpec, batch: PathBatch) -> np.ndarray:
    return payoff_values(spec, batch.track("S"))


# ---------------------------------------------------------------------------
# hedge instruments


def hedge_tracks(batch: PathBatch) -> tuple[str, ...]:
    """Tradable tracks: the underlying, plus the variance swap when present."""
    return ("S", "Vswap") if "Vswap" in batch.tracks else ("S",)


def instrument_prices(batch: PathBatch) -> np.ndarray:
    """(N, r, T+1) prices of the tradable instruments.

    For Heston batches the variance swap is re-derived from the ``v`` track so a
    perturbed variance path moves the swap price consistently.
    """
    names = hedge_tracks(batch)
    if "Vswap" in names:
        spec = batch.model_spec
        if isinstance(spec, HestonSpec) and "v" in batch.tracks:
            swap = variance_swap_curve(batch.track("v"), spec)
            return np.stack([batch.track("S"), swap], axis=1)
    return np.stack([batch.track(n) for n in names], axis=1)


def instrument_prices_backward(batch: PathBatch, grad_prices: np.ndarray) -> dict[str, np.ndarray]:
    """Map adjoints of instrument prices back onto the batch tracks."""
    out = {"S": grad_prices[:, 0]}
    if grad_prices.shape[1] > 1:
        spec = batch.model_spec
        if isinstance(spec, HestonSpec) and "v" in batch.tracks:
            out["v"] = variance_swap_adjoint(grad_prices[:, 1], spec)
        else:
            out["Vswap"] = grad_prices[:, 1]
    return out


# ---------------------------------------------------------------------------
# profit and loss


def _check_shapes(deltas: np.ndarray, prices: np.ndarray) -> None:
    n, r, t1 = prices.shape
    if deltas.shape != (n, r, t1 - 1):
        raise ValueError(f"holdings of shape {deltas.shape} do not match prices {prices.shape}")


def pnl_from_prices(
    deltas: np.ndarray, prices: np.ndarray, claim: np.ndarray, rate: float = 0.0, p0: float = 0.0
) -> np.ndarray:
    _check_shapes(deltas, prices)
    gains = np.einsum("nrt,nrt->n", deltas, np.diff(prices, axis=2))
    out = p0 + gains - claim
    if rate > 0:
        trades = np.diff(deltas, axis=2, prepend=0.0)
        out = out - rate * np.einsum("nrt,nrt->n", prices[:, :, :-1], np.abs(trades))
    return out


def pnl_backward(
    deltas: np.ndarray, prices: np.ndarray, grad_pnl: np.ndarray, rate: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints (d deltas, d prices) of the trading part of the P&L, given d pnl.

    The claim term is handled by the caller via :func:`payoff_grad`.
    """
    g = grad_pnl[:, None, None]
    increments = np.diff(prices, axis=2)
    d_deltas = g * increments
    d_prices = np.zeros_like(prices)
    # prices[t] enters the gain with weight delta[t-1] - delta[t]
    d_prices[:, :, 1:] += deltas
    d_prices[:, :, :-1] -= deltas
    if rate > 0:
        trades = np.diff(deltas, axis=2, prepend=0.0)
        sgn = np.sign(trades)
        held = prices[:, :, :-1]
        d_prices[:, :, :-1] -= rate * np.abs(trades)
        # trade t = delta[t] - delta[t-1]
        d_trade = -rate * held * sgn
        d_deltas = d_deltas + g * d_trade
        d_deltas[:, :, :-1] -= g[:, :, :] * d_trade[:, :, 1:]
    d_prices *= g
    return d_deltas, d_prices


def pnl(
    deltas: np.ndarray,
    batch: PathBatch,
    payoff_spec: PayoffSpec,
    cost: CostSpec = CostSpec(),
    p0: float = 0.0,
) -> np.ndarray:
    """p0 + sum_t delta_t (S_{t+1} - S_t) - eps sum_t S_t |delta_t - delta_{t-1}| - payoff."""
    prices = instrument_prices(batch)
    claim = payoff(payoff_spec, batch)
    return pnl_from_prices(np.asarray(deltas, dtype=np.float64), prices, claim, cost.rate, p0)


# ---------------------------------------------------------------------------
# OCE losses


def oce_pointwise_loss(measure: RiskMeasureSpec, pnl_value, omega: float):
    z = np.asarray(pnl_value, dtype=np.float64)
    if isinstance(measure, Entropic):
        lam = measure.lam
        return omega - (1.0 + math.log(lam)) / lam + np.exp(-lam * (z + omega))
    if isinstance(measure, CVaR):
        return omega + np.maximum(-z - omega, 0.0) / (1.0 - measure.alpha)
    raise TypeError(f"unknown risk measure {measure!r}")


def oce_pointwise_grad(measure: RiskMeasureSpec, pnl_value, omega: float):
    """(d loss / d pnl, d loss / d omega) per sample; CVaR subgradient 0 at the kink."""
    z = np.asarray(pnl_value, dtype=np.float64)
    if isinstance(measure, Entropic):
        lam = measure.lam
        e = np.exp(-lam * (z + omega))
        return -lam * e, 1.0 - lam * e
    if isinstance(measure, CVaR):
        active = (-z - omega > 0).astype(np.float64) / (1.0 - measure.alpha)
        return -active, 1.0 - active
    raise TypeError(f"unknown risk measure {measure!r}")


_EXP_LIMIT = math.log(np.finfo(np.float64).max)


def risk_value(measure: RiskMeasureSpec, pnl_samples) -> tuple[float, float]:
    """Risk of the empirical P&L distribution and the minimising OCE threshold.

    Entropic: closed form.  CVaR: the threshold is the ceil(alpha N)-th order
    statistic of the losses -Z, which makes the result equal to the mean of the
    worst (1 - alpha) N losses whenever that count is an integer.
    """
    z = np.asarray(pnl_samples, dtype=np.float64).ravel()
    if z.size == 0:
        raise ValueError("risk_value needs at least one sample")
    if isinstance(measure, Entropic):
        lam = measure.lam
        expo = -lam * z
        worst = int(np.argmax(expo))
        if expo[worst] > _EXP_LIMIT:
            raise NumericOverflowError(f"exp(-lambda Z) overflows at sample {worst}", index=worst)
        shift = expo[worst]
        log_mean = shift + math.log(np.mean(np.exp(expo - shift)))
        risk = log_mean / lam
        omega = (math.log(lam) + log_mean) / lam
        return float(risk), float(omega)
    if isinstance(measure, CVaR):
        losses = np.sort(-z)
        n = losses.size
        k = max(1, math.ceil(measure.alpha * n - 1e-12))
        omega = float(losses[k - 1])
        tail = losses[k:] - omega
        risk = omega + tail.sum() / ((1.0 - measure.alpha) * n)
        return float(risk), omega
    raise TypeError(f"unknown risk measure {measure!r}")


def dh_loss_batch(
    deltas: np.ndarray,
    batch: PathBatch,
    payoff_spec: PayoffSpec,
    cost: CostSpec,
    measure: RiskMeasureSpec,
    omega: float,
) -> float:
    """Mean deep-hedging loss over the batch with p0 = 0."""
    values = pnl(deltas, batch, payoff_spec, cost, p0=0.0)
    return float(np.mean(oce_pointwise_loss(measure, values, omega)))
