"""Rolling-window path batches from historical closing prices."""

from __future__ import annotations

import csv
import datetime as dt
import math
from pathlib import Path

import numpy as np

from robust_hedge.market_sim import PathBatch

DEFAULT_WINDOW = 31  # 30 hedging steps
TRADING_DAYS = 252


class PriceDataError(ValueError):
    pass


def _parse_date(text: str, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip()[:10])
    except ValueError:
        raise PriceDataError(f"line {line}: cannot parse date {text!r}") from None


def read_price_csv(path: str | Path, column: str | None = None) -> tuple[list[dt.date], dict[str, np.ndarray]]:
    """Dates and one price series per asset column.  The first column holds ISO dates."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise PriceDataError(f"{path}: need a header and at least one row")
    header = [h.strip() for h in rows[0]]
    assets = header[1:]
    if column is not None:
        if column not in assets:
            raise PriceDataError(f"{path}: no column {column!r} (have {assets})")
        assets = [column]
    if not assets:
        raise PriceDataError(f"{path}: no price columns")
    cols = [header.index(a) for a in assets]
    dates, series = [], {a: [] for a in assets}
    for i, row in enumerate(rows[1:], start=2):
        if not row or not any(cell.strip() for cell in row):
            continue
        dates.append(_parse_date(row[0], i))
        for a, c in zip(assets, cols):
            cell = row[c].strip() if c < len(row) else ""
            try:
                value = float(cell)
            except ValueError:
                raise PriceDataError(f"line {i}: missing or invalid value in column {a!r}") from None
            if not math.isfinite(value) or value <= 0:
                raise PriceDataError(f"line {i}: price in column {a!r} must be positive and finite")
            series[a].append(value)
    for prev, cur in zip(dates, dates[1:]):
        if cur <= prev:
            raise PriceDataError(f"{path}: dates must be strictly increasing ({prev} then {cur})")
    return dates, {a: np.asarray(v) for a, v in series.items()}


def rolling_windows(prices: np.ndarray, window: int, scale_to: float) -> np.ndarray:
    """(L - window + 1, window) windows, each rescaled so its first value is ``scale_to``."""
    prices = np.asarray(prices, dtype=np.float64)
    if window < 2:
        raise PriceDataError("window must cover at least two prices")
    if prices.size < window:
        raise PriceDataError(f"series of length {prices.size} is shorter than the window {window}")
    win = np.lib.stride_tricks.sliding_window_view(prices, window)
    out = win / win[:, :1] * scale_to
    out[:, 0] = scale_to
    return out


def import_price_csv(
    path: str | Path,
    scale_to: float = 10.0,
    window: int = DEFAULT_WINDOW,
    column: str | None = None,
) -> PathBatch:
    """Evaluation batch of rescaled rolling windows; windows of all selected assets are stacked."""
    if not scale_to > 0:
        raise PriceDataError("scale_to must be positive")
    dates, series = read_price_csv(path, column)
    blocks = [rolling_windows(v, window, scale_to) for v in series.values()]
    values = np.concatenate(blocks)[:, None, :]
    meta = {
        "source": str(path),
        "assets": list(series),
        "window": window,
        "scale_to": scale_to,
        "first_date": dates[0].isoformat(),
        "last_date": dates[-1].isoformat(),
    }
    return PathBatch(values, ("S",), 1.0 / TRADING_DAYS, meta)
