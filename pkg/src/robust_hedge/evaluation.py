"""Strategy evaluation: test risk, attack curves, OOS/OOD summaries and path diagnostics."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from robust_hedge.attack import AttackSpec, run_attack
from robust_hedge.hedge_net import check_hedge_tracks, strategy_pnl
from robust_hedge.market_sim import MarketModelSpec, PathBatch, concat_batches, simulate
from robust_hedge.objective import RiskMeasureSpec, risk_value
from robust_hedge.training import TrainedStrategy

OOD_DESK_CONFIGS = 20
OOD_DESK_PATHS = 2000


@dataclass
class EvalReport:
    """Rows of named tables; each row is a flat dict of JSON scalars."""

    tables: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    config_hash: str = ""

    def add(self, table: str, row: dict[str, Any]) -> None:
        self.tables.setdefault(table, []).append({"config_hash": self.config_hash, **row})

    def merge(self, other: EvalReport) -> EvalReport:
        for name, rows in other.tables.items():
            self.tables.setdefault(name, []).extend(rows)
        return self

    def rows(self, table: str) -> list[dict[str, Any]]:
        return self.tables.get(table, [])

    def validate(self) -> None:
        for name, rows in self.tables.items():
            for row in rows:
                for k, v in row.items():
                    if isinstance(v, float) and not math.isfinite(v) and k != "variance":
                        raise ValueError(f"non-finite {k} in table {name}")
                if {"min", "mean", "max"} <= row.keys() and not row["min"] <= row["mean"] <= row["max"]:
                    raise ValueError(f"min <= mean <= max violated in table {name}")

    def write(self, out_dir: str | Path) -> list[Path]:
        """One CSV per table plus ``report.json``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, rows in sorted(self.tables.items()):
            path = out_dir / f"{name}.csv"
            cols: list[str] = []
            for row in rows:
                cols += [k for k in row if k not in cols]
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                for row in rows:
                    w.writerow({k: _fmt(row.get(k)) for k in cols})
            written.append(path)
        path = out_dir / "report.json"
        path.write_text(json.dumps({"config_hash": self.config_hash, "tables": self.tables}, indent=2, default=_jsonable))
        written.append(path)
        return written


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialise {type(v).__name__}")


# ---------------------------------------------------------------------------
# risk on a dataset


def evaluate_strategy(strategy: TrainedStrategy, data: PathBatch, measure: RiskMeasureSpec | None = None) -> float:
    """Risk of the strategy's P&L on ``data`` with omega re-optimised (not the trained one)."""
    check_hedge_tracks(strategy.net, data)
    if data.horizon_steps != strategy.net.n_steps:
        raise ValueError("dataset horizon does not match the strategy")
    measure = strategy.config.risk_measure if measure is None else measure
    values = strategy_pnl(strategy.net, data, strategy.config.payoff, strategy.config.cost)
    return risk_value(measure, values)[0]


def attack_curve(
    strategy: TrainedStrategy,
    data: PathBatch,
    deltas: Sequence[float],
    methods: Sequence[str] = ("WBPGD", "WPGD"),
    track_sets: Sequence[tuple[str, ...]] = (("S",),),
    base: AttackSpec | None = None,
    measure: RiskMeasureSpec | None = None,
    label: str = "strategy",
    keep_batches: bool = False,
) -> tuple[EvalReport, dict]:
    """Risk under attack for each (method, tracks, delta); the delta = 0 cell is the clean risk.

    Returns the report and, if ``keep_batches``, the perturbed batches keyed by
    (method, tracks, delta).
    """
    base = AttackSpec() if base is None else base
    report = EvalReport(config_hash=strategy.provenance.get("config_hash", ""))
    cfg = strategy.config
    clean = evaluate_strategy(strategy, data, measure)
    batches = {}
    for method in methods:
        for tracks in track_sets:
            for delta in deltas:
                if delta == 0:
                    risk, dist, batch = clean, 0.0, data
                else:
                    spec = dataclasses.replace(base, method=method, delta=float(delta), tracks=tuple(tracks), beta=None)
                    res = run_attack(strategy.net, data, cfg.payoff, cfg.cost, cfg.risk_measure, spec, strategy.omega)
                    risk, dist, batch = evaluate_strategy(strategy, res.batch, measure), res.distance, res.batch
                if keep_batches:
                    batches[(method, tuple(tracks), float(delta))] = batch
                report.add(
                    "attack_curve",
                    {
                        "strategy": label,
                        "method": method,
                        "tracks": "".join(tracks),
                        "delta": float(delta),
                        "risk": risk,
                        "distance": dist,
                    },
                )
    return report, batches


# ---------------------------------------------------------------------------
# diagnostics


def covariance_frobenius(original: PathBatch, perturbed: PathBatch, track: str = "S") -> tuple[float, float]:
    """(||Cov(perturbed) - Cov(original)||_F, ||Cov(original)||_F) over the (T+1) dates of ``track``."""
    if original.values.shape != perturbed.values.shape:
        raise ValueError("batches must have the same shape")
    if original.n_samples < 2:
        raise ValueError("need at least two samples for a covariance")
    c0 = np.cov(original.track(track), rowvar=False)
    c1 = np.cov(perturbed.track(track), rowvar=False)
    return float(np.linalg.norm(c1 - c0)), float(np.linalg.norm(c0))


def cumulative_acf(path, lag: int) -> float:
    """Cumulative autocorrelation sum_{i=0..lag} rho(i) with the population variance."""
    x = np.asarray(path, dtype=np.float64).ravel()
    if lag < 0 or lag >= x.size:
        raise ValueError("lag must lie in [0, len(path))")
    return float(_acf_matrix(x[None, :], lag)[0, lag])


def _acf_matrix(x: np.ndarray, max_lag: int) -> np.ndarray:
    """(N, max_lag+1) cumulative ACF per row."""
    n = x.shape[1]
    c = x - x.mean(axis=1, keepdims=True)
    var = (c * c).mean(axis=1)
    if np.any(var == 0):
        raise ValueError("ACF undefined for a path with zero variance")
    rho = np.empty((x.shape[0], max_lag + 1))
    for k in range(max_lag + 1):
        # lag-k autocovariance averaged over its n - k products
        rho[:, k] = (c[:, : n - k] * c[:, k:]).sum(axis=1) / ((n - k) * var)
    return np.cumsum(rho, axis=1)


def acf_diff(original: PathBatch, perturbed: PathBatch, track: str = "S", max_lag: int = 10) -> np.ndarray:
    """Mean over paths of |ACF(perturbed) - ACF(original)| for lags 0..max_lag."""
    a = _acf_matrix(original.track(track), max_lag)
    b = _acf_matrix(perturbed.track(track), max_lag)
    return np.abs(b - a).mean(axis=0)


def diagnostics_report(
    original: PathBatch,
    perturbed: dict[tuple[str, float], PathBatch],
    track: str = "S",
    max_lag: int = 10,
    config_hash: str = "",
) -> EvalReport:
    """Covariance and ACF distortion per (attack label, delta)."""
    report = EvalReport(config_hash=config_hash)
    for (label, delta), batch in sorted(perturbed.items()):
        dist, base = covariance_frobenius(original, batch, track)
        report.add("diag_covariance", {"attack": label, "delta": delta, "frobenius": dist, "base_norm": base})
        diffs = acf_diff(original, batch, track, max_lag)
        for lag, d in enumerate(diffs):
            report.add("diag_acf", {"attack": label, "delta": delta, "lag": lag, "mean_abs_diff": float(d)})
    return report


# ---------------------------------------------------------------------------
# out-of-sample and out-of-distribution summaries


def _summary(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "count": int(arr.size),
        "mean": float(arr.mean()),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "variance": float(arr.var(ddof=1)) if arr.size > 1 else math.nan,
    }


def oos_report(
    strategies: dict[tuple[str, int], list[TrainedStrategy]],
    test: PathBatch,
    measure: RiskMeasureSpec | None = None,
    table: str = "oos",
) -> EvalReport:
    """Per (kind, N): mean/min/max/variance of test risk across partition-trained strategies."""
    report = EvalReport()
    for (kind, n), group in sorted(strategies.items()):
        if not group:
            continue
        risks = [evaluate_strategy(s, test, measure) for s in group]
        report.config_hash = group[0].provenance.get("config_hash", "")
        report.add(table, {"kind": kind, "N": int(n), **_summary(risks)})
    return report


def ood_batch(
    specs: Sequence[MarketModelSpec], n_per_spec: int, seed: int, interval_mode: bool = False
) -> PathBatch:
    """Simulate every perturbed spec with its own seed and concatenate."""
    parts = [simulate(spec, n_per_spec, seed + i, interval_mode) for i, spec in enumerate(specs)]
    merged = concat_batches(parts)
    return merged.with_values(merged.values, ood_specs=len(specs), seed=seed)


def ood_report(
    strategies: dict[tuple[str, int], list[TrainedStrategy]],
    specs: Sequence[MarketModelSpec],
    n_per_spec: int = OOD_DESK_PATHS,
    seed: int = 0,
    measure: RiskMeasureSpec | None = None,
) -> EvalReport:
    data = ood_batch(specs, n_per_spec, seed)
    return oos_report(strategies, data, measure, table="ood")


def summarise(reports: Iterable[EvalReport]) -> EvalReport:
    out = EvalReport()
    for r in reports:
        out.merge(r)
        out.config_hash = out.config_hash or r.config_hash
    return out
