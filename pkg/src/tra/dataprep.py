"""Dataset ingestion, cross-sectional transforms, splits and synthetic data.

A dataset is held column-wise in a :class:`Panel`: one row per (day, stock),
sorted by date then stock id. Day and stock indices are positions in the
panel's sorted calendar and stock list; all later modules use them as the
``t`` and ``s`` coordinates.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.stats import rankdata

from .numerics import make_rng

log = logging.getLogger(__name__)


class DataFormatError(ValueError):
    """Input file does not match the CSV schema."""


class DataError(ValueError):
    """Input content is inconsistent (duplicates, bad values)."""


class InvalidConfigError(ValueError):
    pass


@dataclass
class SampleRecord:
    stock_id: str
    date: dt.date
    features: np.ndarray
    raw_return: float


@dataclass
class SampleWindow:
    stock_id: str
    date: dt.date
    window: np.ndarray  # (window_len, F), oldest row first
    label: float


@dataclass
class Panel(Sequence):
    dates: np.ndarray  # sorted unique datetime64[D]
    stocks: list[str]  # sorted unique ids
    day_idx: np.ndarray
    stock_idx: np.ndarray
    features: np.ndarray  # (n, F)
    returns: np.ndarray  # (n,) realised return over the label horizon
    horizon: int = 1

    def __len__(self) -> int:
        return len(self.day_idx)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return SampleRecord(
            self.stocks[self.stock_idx[i]],
            self.dates[self.day_idx[i]].astype(dt.date),
            self.features[i].copy(),
            float(self.returns[i]),
        )

    def __iter__(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_stocks(self) -> int:
        return len(self.stocks)

    def day_slices(self) -> list[slice]:
        """Row slices per day index (rows are sorted by day)."""
        bounds = np.searchsorted(self.day_idx, np.arange(self.n_days + 1))
        return [slice(bounds[d], bounds[d + 1]) for d in range(self.n_days)]

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord], horizon: int = 1) -> "Panel":
        if not records:
            raise DataError("no records")
        dates = np.array([np.datetime64(r.date, "D") for r in records])
        ids = [r.stock_id for r in records]
        feats = np.array([np.asarray(r.features, dtype=np.float64) for r in records])
        rets = np.array([r.raw_return for r in records], dtype=np.float64)
        return cls._build(dates, ids, feats, rets, horizon)

    @classmethod
    def _build(cls, dates, ids, feats, rets, horizon, line_numbers=None) -> "Panel":
        udates, day_idx = np.unique(dates, return_inverse=True)
        ustocks, stock_idx = np.unique(np.asarray(ids, dtype=object).astype(str), return_inverse=True)
        key = day_idx.astype(np.int64) * len(ustocks) + stock_idx
        order = np.argsort(key, kind="stable")
        sorted_key = key[order]
        dup = np.nonzero(sorted_key[1:] == sorted_key[:-1])[0]
        if len(dup):
            i = order[dup[0] + 1]
            where = f" (line {line_numbers[i]})" if line_numbers is not None else ""
            raise DataError(f"duplicate (stock, date) key: {ids[i]}, {dates[i]}{where}")
        return cls(
            udates,
            [str(s) for s in ustocks],
            day_idx[order].astype(np.int64),
            stock_idx[order].astype(np.int64),
            np.asarray(feats, dtype=np.float64)[order],
            np.asarray(rets, dtype=np.float64)[order],
            horizon,
        )


# --------------------------------------------------------------------------
# CSV io

_RETURN_COL = re.compile(r"^return_(\d+)d$")


def load_dataset(path) -> Panel:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: line 1: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 4 or header[0] != "date" or header[1] != "stock_id":
            raise DataFormatError(f"{path}: line 1: header must start with 'date,stock_id'")
        m = _RETURN_COL.match(header[-1])
        if not m:
            raise DataFormatError(f"{path}: line 1: last column must be return_<horizon>d, got {header[-1]!r}")
        horizon = int(m.group(1))
        feat_cols = header[2:-1]
        n_feat = max([int(c[1:]) for c in feat_cols if re.fullmatch(r"f\d+", c)] + [len(feat_cols)])
        expected = [f"f{j}" for j in range(1, n_feat + 1)]
        for name in expected:
            if name not in feat_cols:
                raise DataFormatError(f"{path}: line 1: missing feature column {name!r}")
        if feat_cols != expected:
            extra = [c for c in feat_cols if c not in expected]
            raise DataFormatError(f"{path}: line 1: unexpected or misordered feature columns {extra or feat_cols}")
        dates, ids, feats, rets, lines = [], [], [], [], []
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                d = dt.date.fromisoformat(row[0])
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: bad date {row[0]!r}") from None
            try:
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise DataFormatError(f"{path}: line {lineno}: non-finite value")
            dates.append(np.datetime64(d, "D"))
            ids.append(row[1])
            feats.append(vals[:-1])
            rets.append(vals[-1])
            lines.append(lineno)
    if not dates:
        raise DataError(f"{path}: no data rows")
    return Panel._build(np.array(dates), ids, np.array(feats), np.array(rets), horizon, lines)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(panel: Panel, path) -> None:
    path = Path(path)
    header = ["date", "stock_id"] + [f"f{j}" for j in range(1, panel.n_features + 1)] + [f"return_{panel.horizon}d"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(panel)):
            w.writerow(
                [str(panel.dates[panel.day_idx[i]]), panel.stocks[panel.stock_idx[i]]]
                + [_fmt(v) for v in panel.features[i]]
                + [_fmt(panel.returns[i])]
            )


def write_regimes(panel: Panel, regimes_by_day: np.ndarray, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "stock_id", "regime"])
        for i in range(len(panel)):
            w.writerow([str(panel.dates[panel.day_idx[i]]), panel.stocks[panel.stock_idx[i]], int(regimes_by_day[panel.day_idx[i]])])


def load_regimes(path, panel: Panel) -> np.ndarray:
    """Per-row regime labels aligned with ``panel``; -1 where the sidecar has none."""
    lookup = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["date", "stock_id", "regime"]:
            raise DataFormatError(f"{path}: line 1: header must be date,stock_id,regime")
        for row in reader:
            lookup[(row["date"], row["stock_id"])] = int(row["regime"])
    out = np.full(len(panel), -1, dtype=np.int64)
    for i in range(len(panel)):
        out[i] = lookup.get((str(panel.dates[panel.day_idx[i]]), panel.stocks[panel.stock_idx[i]]), -1)
    return out


# --------------------------------------------------------------------------
# cross-sectional transforms


def cross_sectional_rank(values) -> np.ndarray:
    """Tie-averaged ranks mapped to (rank - 1) / (n - 1)."""
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0]
    if n < 2:
        raise ValueError("cross-sectional rank needs at least 2 values")
    return (rankdata(v, method="average", axis=0) - 1.0) / (n - 1.0)


def rank_features(panel: Panel) -> np.ndarray:
    out = np.empty_like(panel.features)
    for sl in panel.day_slices():
        n = sl.stop - sl.start
        if n >= 2:
            out[sl] = cross_sectional_rank(panel.features[sl])
        elif n == 1:
            out[sl] = 0.5
    return out


def make_labels(panel: Panel, horizon: int | None = None) -> np.ndarray:
    """Percentile of each stock's horizon return within its day; NaN when unrealised.

    A day's label is realised ``horizon`` trading days later, so the last
    ``horizon`` days of the calendar (and days with fewer than 2 stocks)
    carry no label.
    """
    horizon = panel.horizon if horizon is None else horizon
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    labels = np.full(len(panel), np.nan)
    last_labelled = panel.n_days - 1 - horizon
    for d, sl in enumerate(panel.day_slices()):
        if d > last_labelled or sl.stop - sl.start < 2:
            continue
        labels[sl] = cross_sectional_rank(panel.returns[sl])
    return labels


# --------------------------------------------------------------------------
# windows and splits


@dataclass
class WindowSet:
    """Index of every (stock, day) whose full feature window exists."""

    cube: np.ndarray = field(repr=False)  # (n_stocks, n_days, F) ranked features, NaN where absent
    window_len: int
    horizon: int
    dates: np.ndarray = field(repr=False)
    stocks: list[str] = field(repr=False)
    stock_idx: np.ndarray = field(repr=False)
    day_idx: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    returns: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.day_idx)

    def windows(self, sel=None) -> np.ndarray:
        s = self.stock_idx if sel is None else self.stock_idx[sel]
        d = self.day_idx if sel is None else self.day_idx[sel]
        offs = np.arange(-self.window_len + 1, 1)
        return self.cube[s[:, None], d[:, None] + offs]

    def subset(self, mask) -> "WindowSet":
        mask = np.asarray(mask)
        return WindowSet(
            self.cube,
            self.window_len,
            self.horizon,
            self.dates,
            self.stocks,
            self.stock_idx[mask],
            self.day_idx[mask],
            self.labels[mask],
            self.returns[mask],
        )

    def sample(self, i: int) -> SampleWindow:
        return SampleWindow(
            self.stocks[self.stock_idx[i]],
            self.dates[self.day_idx[i]].astype(dt.date),
            self.windows(np.array([i]))[0],
            float(self.labels[i]),
        )

    def day_groups(self) -> list[np.ndarray]:
        """Sample positions grouped by day, days ascending."""
        order = np.lexsort((self.stock_idx, self.day_idx))
        days = self.day_idx[order]
        cuts = np.nonzero(np.diff(days))[0] + 1
        return np.split(order, cuts) if len(order) else []


def make_windows(panel: Panel, window_len: int, labels: np.ndarray | None = None, require_label: bool = True) -> WindowSet:
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    labels = make_labels(panel) if labels is None else labels
    ranked = rank_features(panel)
    cube = np.full((panel.n_stocks, panel.n_days, panel.n_features), np.nan)
    cube[panel.stock_idx, panel.day_idx] = ranked
    present = np.zeros((panel.n_stocks, panel.n_days), dtype=bool)
    present[panel.stock_idx, panel.day_idx] = True
    # full[s, d] is True when days d-W+1..d are all present for stock s
    csum = np.concatenate([np.zeros((panel.n_stocks, 1), dtype=np.int64), np.cumsum(present, axis=1)], axis=1)
    full = np.zeros_like(present)
    if window_len <= panel.n_days:
        full[:, window_len - 1 :] = (csum[:, window_len:] - csum[:, : panel.n_days - window_len + 1]) == window_len
    keep = full[panel.stock_idx, panel.day_idx]
    if require_label:
        keep &= np.isfinite(labels)
    dropped = int((~keep).sum())
    if dropped:
        log.debug("dropped %d rows lacking history or label", dropped)
    return WindowSet(
        cube,
        window_len,
        panel.horizon,
        panel.dates,
        panel.stocks,
        panel.stock_idx[keep],
        panel.day_idx[keep],
        labels[keep],
        panel.returns[keep],
    )


@dataclass
class SplitSpec:
    train: tuple[str, str]
    valid: tuple[str, str]
    test: tuple[str, str]
    gap_days: int


def _range_idx(dates: np.ndarray, rng: tuple[str, str], name: str) -> tuple[int, int]:
    lo, hi = np.datetime64(rng[0], "D"), np.datetime64(rng[1], "D")
    a = int(np.searchsorted(dates, lo, side="left"))
    b = int(np.searchsorted(dates, hi, side="right")) - 1
    if hi < lo or b < a:
        raise InvalidConfigError(f"split.{name} range {rng[0]}..{rng[1]} contains no trading days")
    return a, b


def split_bounds(dates: np.ndarray, spec: SplitSpec, window_len: int, horizon: int) -> dict[str, tuple[int, int]]:
    """Validate a split and return inclusive day-index bounds per range."""
    required = window_len + horizon
    if spec.gap_days < required:
        raise InvalidConfigError(
            f"split.gap_days={spec.gap_days} is too small: need >= window_len + horizon = {required}"
        )
    bounds = {name: _range_idx(dates, getattr(spec, name), name) for name in ("train", "valid", "test")}
    for a, b in (("train", "valid"), ("valid", "test")):
        between = bounds[b][0] - bounds[a][1] - 1
        if between < spec.gap_days:
            raise InvalidConfigError(
                f"only {between} trading days between split.{a} and split.{b}; need >= {spec.gap_days}"
            )
    return bounds


def temporal_split(windows: WindowSet, spec: SplitSpec) -> dict[str, WindowSet]:
    bounds = split_bounds(windows.dates, spec, windows.window_len, windows.horizon)
    out = {}
    d = windows.day_idx
    for name, (a, b) in bounds.items():
        # lookback and label interval must both lie inside the range
        mask = (d - windows.window_len + 1 >= a) & (d + windows.horizon <= b)
        out[name] = windows.subset(mask)
        if len(out[name]) == 0:
            raise InvalidConfigError(f"split.{name} holds no complete samples")
    return out


def split_by_fraction(dates: np.ndarray, fractions: tuple[float, float, float], gap_days: int) -> SplitSpec:
    """Contiguous train/valid/test ranges by share of trading days, separated by ``gap_days``."""
    n = len(dates)
    usable = n - 2 * gap_days
    if usable <= 3:
        raise InvalidConfigError("calendar too short for the requested gaps")
    total = sum(fractions)
    n_train = int(usable * fractions[0] / total)
    n_valid = int(usable * fractions[1] / total)
    t0, t1 = 0, n_train - 1
    v0 = t1 + gap_days + 1
    v1 = v0 + n_valid - 1
    s0 = v1 + gap_days + 1
    s1 = n - 1
    if not (t1 >= t0 and v1 >= v0 and s1 >= s0):
        raise InvalidConfigError("split fractions leave an empty range")
    day = lambda i: str(dates[i])  # noqa: E731
    return SplitSpec((day(t0), day(t1)), (day(v0), day(v1)), (day(s0), day(s1)), gap_days)


# --------------------------------------------------------------------------
# synthetic regime-switching data


@dataclass
class SyntheticSpec:
    n_regimes: int = 3
    regime_weights: list[list[float]] | None = None
    schedule: list[tuple[int, int, int]] | None = None  # (first_day, end_day_exclusive, regime)
    regime_period: int = 125
    noise_std: float = 0.05
    n_stocks: int = 100
    n_days: int = 1000
    n_features: int = 16
    horizon: int = 1
    start_date: str = "2010-01-04"
    seed: int = 0


def resolve_schedule(spec: SyntheticSpec) -> np.ndarray:
    """Regime index per day; validates that the schedule tiles the calendar."""
    if spec.schedule is None:
        if spec.regime_period < 1:
            raise InvalidConfigError("synthetic.regime_period must be >= 1")
        return (np.arange(spec.n_days) // spec.regime_period) % spec.n_regimes
    per_day = np.full(spec.n_days, -1, dtype=np.int64)
    for a, b, k in spec.schedule:
        if not (0 <= a < b <= spec.n_days):
            raise InvalidConfigError(f"synthetic.schedule span {a}..{b} outside 0..{spec.n_days}")
        if not 0 <= k < spec.n_regimes:
            raise InvalidConfigError(f"synthetic.schedule regime {k} outside 0..{spec.n_regimes - 1}")
        if np.any(per_day[a:b] >= 0):
            raise InvalidConfigError(f"synthetic.schedule span {a}..{b} overlaps another span")
        per_day[a:b] = k
    if np.any(per_day < 0):
        raise InvalidConfigError(f"synthetic.schedule leaves day {int(np.argmax(per_day < 0))} uncovered")
    return per_day


def default_regime_weights(n_regimes: int, n_features: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm random patterns; the second is the sign flip of the first."""
    w = rng.standard_normal((n_regimes, n_features))
    if n_regimes >= 2:
        w[1] = -w[0]
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def business_days(start: str, n: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward")


def generate_synthetic(spec: SyntheticSpec) -> tuple[Panel, np.ndarray]:
    """Returns the panel and the per-day regime index (for diagnostics only)."""
    if spec.n_stocks < 2 or spec.n_days < 2 or spec.n_features < 1 or spec.n_regimes < 1:
        raise InvalidConfigError("synthetic dataset dimensions too small")
    if spec.noise_std < 0:
        raise InvalidConfigError("synthetic.noise_std must be >= 0")
    regimes = resolve_schedule(spec)
    rng = make_rng(spec.seed)
    if spec.regime_weights is None:
        weights = default_regime_weights(spec.n_regimes, spec.n_features, rng)
    else:
        weights = np.asarray(spec.regime_weights, dtype=np.float64)
        if weights.shape != (spec.n_regimes, spec.n_features):
            raise InvalidConfigError(f"synthetic.regime_weights must have shape ({spec.n_regimes}, {spec.n_features})")
    x = rng.uniform(0.0, 1.0, size=(spec.n_days, spec.n_stocks, spec.n_features))
    noise = rng.standard_normal((spec.n_days, spec.n_stocks)) * spec.noise_std
    ret = np.einsum("dsf,df->ds", x, weights[regimes]) + noise
    dates = business_days(spec.start_date, spec.n_days)
    day_idx = np.repeat(np.arange(spec.n_days), spec.n_stocks)
    stock_idx = np.tile(np.arange(spec.n_stocks), spec.n_days)
    width = len(str(spec.n_stocks - 1))
    stocks = [f"S{j:0{width}d}" for j in range(spec.n_stocks)]
    panel = Panel(
        dates,
        stocks,
        day_idx,
        stock_idx,
        x.reshape(-1, spec.n_features),
        ret.reshape(-1),
        spec.horizon,
    )
    return panel, regimes
