"""Ranking metrics, long-short backtest and regime diagnostics."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DAYS_PER_YEAR = 365


@dataclass
class ReturnSeries:
    R: np.ndarray
    dates: np.ndarray
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.R) != len(self.dates):
            raise ValueError("returns and dates differ in length")


@dataclass
class MetricReport:
    mse: float
    mae: float
    ic_mean: float | None
    icir: float | None
    ar: float | None = None
    av: float | None = None
    sr: float | None = None
    mdd: float | None = None
    ic: list = field(default_factory=list, repr=False)
    ic_dates: list = field(default_factory=list, repr=False)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("ic")
        d.pop("ic_dates")
        d.update(d.pop("extra"))
        return json.dumps(_clean(d), indent=2, sort_keys=True) + "\n"


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def pearson(a, b) -> float | None:
    """Population Pearson correlation; None if either side has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.mean(da * da)), np.sqrt(np.mean(db * db))
    if sa == 0 or sb == 0:
        return None
    return float(np.mean(da * db) / (sa * sb))


def _group(days) -> list[np.ndarray]:
    days = np.asarray(days)
    order = np.argsort(days, kind="stable")
    cuts = np.nonzero(np.diff(days[order]))[0] + 1
    return np.split(order, cuts) if len(order) else []


def ranking_metrics(predictions, labels, days) -> MetricReport:
    pred = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    days = np.asarray(days)
    err = pred - y
    ics, ic_days = [], []
    for g in _group(days):
        if len(g) < 3:
            log.warning("day %s has %d stocks; IC needs >= 3", days[g[0]], len(g))
            continue
        ic = pearson(pred[g], y[g])
        if ic is None:
            log.warning("zero variance on day %s; IC missing", days[g[0]])
            continue
        ics.append(ic)
        ic_days.append(days[g[0]])
    ic_arr = np.array(ics)
    ic_mean = float(ic_arr.mean()) if len(ic_arr) else None
    ic_std = float(ic_arr.std()) if len(ic_arr) else 0.0
    icir = ic_mean / ic_std if ic_mean is not None and ic_std > 0 else None
    return MetricReport(
        mse=float(np.mean(err**2)),
        mae=float(np.mean(np.abs(err))),
        ic_mean=ic_mean,
        icir=icir,
        ic=ics,
        ic_dates=[str(d) for d in ic_days],
    )


def simulate_long_short(
    predictions,
    returns,
    days,
    stock_ids,
    decile: float = 0.1,
    fill_calendar: bool = False,
) -> ReturnSeries:
    """Daily equal-weight long top / short bottom ``decile`` portfolio.

    ``days`` are numpy datetime64 day stamps. With ``fill_calendar`` the
    series is extended with zero returns on calendar days that carry no
    trading data (weekends, holidays).
    """
    if not 0 < decile <= 0.5:
        raise ValueError("decile must lie in (0, 0.5]")
    pred = np.asarray(predictions, dtype=np.float64)
    ret = np.asarray(returns, dtype=np.float64)
    days = np.asarray(days)
    ids = np.asarray(stock_ids).astype(str)
    out_r, out_d, skipped = [], [], []
    for g in _group(days):
        n = len(g)
        m = math.ceil(decile * n)
        if n < 2 * m or n < 2:
            log.warning("day %s skipped: %d stocks cannot fill two legs of %d", days[g[0]], n, m)
            skipped.append(days[g[0]])
            continue
        # descending prediction, ascending id on ties
        order = g[np.lexsort((ids[g], -pred[g]))]
        long_leg, short_leg = order[:m], order[n - m :]
        out_r.append(ret[long_leg].mean() - ret[short_leg].mean())
        out_d.append(days[g[0]])
    R = np.array(out_r)
    D = np.array(out_d, dtype="datetime64[D]") if out_d else np.array([], dtype="datetime64[D]")
    if fill_calendar and len(D):
        full = np.arange(D[0], D[-1] + np.timedelta64(1, "D"))
        skip = np.array(skipped, dtype="datetime64[D]")
        full = full[~np.isin(full, skip)]
        R_full = np.zeros(len(full))
        R_full[np.searchsorted(full, D)] = R
        R, D = R_full, full
    return ReturnSeries(R, D, skipped)


def max_drawdown(R) -> float:
    cum = np.cumsum(np.asarray(R, dtype=np.float64))
    if len(cum) == 0:
        return 0.0
    return float(np.max(np.maximum.accumulate(cum) - cum))


def portfolio_metrics(series: ReturnSeries | np.ndarray) -> dict:
    """AR and AV in percent; SR their ratio; MDD in the additive units of R."""
    R = np.asarray(series.R if isinstance(series, ReturnSeries) else series, dtype=np.float64)
    if len(R) < 2:
        raise ValueError("portfolio metrics need at least 2 returns")
    if not np.all(np.isfinite(R)):
        raise ValueError("returns must be finite")
    ar = float(np.mean(R) * DAYS_PER_YEAR * 100)
    av = float(np.std(R) * np.sqrt(DAYS_PER_YEAR) * 100)
    sr = ar / av if av > 0 else None
    return {"ar": ar, "av": av, "sr": sr, "mdd": max_drawdown(R)}


def assignment_accuracy(chosen, regimes) -> float:
    """Best agreement over all one-to-one relabelings of predictor indices."""
    chosen = np.asarray(chosen, dtype=np.int64)
    regimes = np.asarray(regimes, dtype=np.int64)
    if len(chosen) != len(regimes) or len(chosen) == 0:
        raise ValueError("chosen and regimes must be non-empty and aligned")
    K = int(chosen.max()) + 1
    R = int(regimes.max()) + 1
    if K > 6:
        raise ValueError("permutation search limited to K <= 6")
    conf = np.zeros((K, R))
    np.add.at(conf, (chosen, regimes), 1)
    labels = max(K, R)
    best = 0.0
    for perm in itertools.permutations(range(labels), K):
        hit = sum(conf[k, perm[k]] for k in range(K) if perm[k] < R)
        best = max(best, hit)
    return float(best / len(chosen))


def period_coefficients(features, labels, days, period_len: int) -> list[dict]:
    """OLS (with intercept) of labels on features within consecutive day blocks."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    days = np.asarray(days, dtype=np.int64)
    if period_len < 1:
        raise ValueError("period_len must be >= 1")
    start = days.min()
    block = (days - start) // period_len
    out = []
    for b in np.unique(block):
        m = block == b
        A = np.column_stack([np.ones(m.sum()), X[m]])
        coef, *_ = np.linalg.lstsq(A, y[m], rcond=None)
        out.append({"period": int(b), "first_day": int(days[m].min()), "intercept": float(coef[0]), "coef": coef[1:].tolist()})
    return out


def regime_diagnostics(chosen, regimes, features, labels, days, period_len: int) -> dict:
    coefs = period_coefficients(features, labels, days, period_len)
    if regimes is None or np.any(np.asarray(regimes) < 0):
        acc = None
    else:
        acc = assignment_accuracy(chosen, regimes)
    return {"assignment_accuracy": acc, "period_coefficients": coefs}


def write_series_csv(path, dates, values) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "value"])
        for d, v in zip(dates, values):
            w.writerow([str(d), repr(float(v))])
