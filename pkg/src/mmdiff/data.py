"""Series and report ingestion, normalization, windowing and text alignment."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

FREQUENCIES = ("daily", "weekly", "monthly")


# -- calendar arithmetic ----------------------------------------------------------
def parse_timestamp(s: str) -> datetime:
    try:
        return datetime.fromisoformat(s.strip())
    except (ValueError, AttributeError):
        raise InputError(f"unparseable timestamp {s!r}") from None


def format_timestamp(dt: datetime) -> str:
    if dt.hour == dt.minute == dt.second == dt.microsecond == 0:
        return dt.date().isoformat()
    return dt.isoformat()


def _add_months(dt: datetime, n: int) -> datetime:
    m = dt.month - 1 + n
    year, month = dt.year + m // 12, m % 12 + 1
    # clamp day for short months
    for day in range(dt.day, 27, -1):
        try:
            return dt.replace(year=year, month=month, day=day)
        except ValueError:
            continue
    return dt.replace(year=year, month=month, day=min(dt.day, 28))


def shift(dt: datetime, freq: str, n: int) -> datetime:
    """Move ``dt`` by ``n`` sampling intervals."""
    if freq == "daily":
        return dt + timedelta(days=n)
    if freq == "weekly":
        return dt + timedelta(days=7 * n)
    if freq == "monthly":
        return _add_months(dt, n)
    raise ConfigError(f"unknown frequency {freq!r}")


def intervals_between(a: datetime, b: datetime, freq: str) -> int:
    """Whole sampling intervals from ``a`` forward to ``b`` (negative if ``b < a``)."""
    if freq == "monthly":
        n = (b.year - a.year) * 12 + (b.month - a.month)
        if n > 0 and (b.day, b.time()) < (a.day, a.time()):
            n -= 1
        return n
    days = (b - a).total_seconds() / 86400.0
    step = 7.0 if freq == "weekly" else 1.0
    return math.floor(days / step + 1e-9)


def infer_frequency(dates: list[datetime]) -> str:
    if len(dates) < 2:
        return "daily"
    gaps = Counter(round((b - a).total_seconds() / 86400.0) for a, b in zip(dates, dates[1:]))
    modal = gaps.most_common(1)[0][0]
    if modal == 1:
        return "daily"
    if modal == 7:
        return "weekly"
    if 28 <= modal <= 31:
        return "monthly"
    raise InputError(f"unsupported sampling gap of {modal} days")


# -- containers --------------------------------------------------------------------
@dataclass
class SeriesFrame:
    timestamps: list[str]
    values: np.ndarray  # [len, channels]
    names: list[str]
    freq: str
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    dates: list[datetime] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.timestamps) != len(self.values):
            raise InputError(f"{len(self.timestamps)} timestamps for {len(self.values)} rows")
        if not self.dates:
            self.dates = [parse_timestamp(t) for t in self.timestamps]

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Report:
    start: datetime
    end: datetime
    text: str
    index: int = -1


@dataclass(frozen=True)
class TextContext:
    """Reports attached to one window, oldest first, with their age in intervals."""

    reports: tuple[Report, ...] = ()
    ages: tuple[int, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.reports


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    stride: int = 1

    def __post_init__(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9 or min(self.train, self.val, self.test) < 0:
            raise ConfigError(f"split fractions must be non-negative and sum to 1, got {self}")
        if self.stride < 1:
            raise ConfigError("window stride must be >= 1")

    def boundaries(self, n: int) -> tuple[int, int]:
        return int(round(self.train * n)), int(round((self.train + self.val) * n))


@dataclass
class WindowSample:
    X: np.ndarray
    Y: np.ndarray
    T_full: list[str]
    D: TextContext
    start: int


# -- loaders ------------------------------------------------------------------------
def load_series(path: str | Path) -> SeriesFrame:
    """Read ``timestamp,<name>...`` CSV; rows must be strictly increasing in time."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if len(header) < 2 or header[0].strip().lower() != "timestamp":
            raise InputError(f"{path}: header must be 'timestamp,<names...>', got {header}")
        names = [h.strip() for h in header[1:]]
        stamps, rows, dates = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            dt = parse_timestamp(row[0])
            if dates and dt <= dates[-1]:
                raise InputError(f"{path}: row {lineno} timestamp {row[0]} is not after the previous row")
            vals = []
            for cell in row[1:]:
                if cell.strip() == "":
                    raise InputError(f"{path}: row {lineno} has a missing value")
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise InputError(f"{path}: row {lineno} has non-numeric cell {cell!r}") from None
            stamps.append(row[0].strip())
            dates.append(dt)
            rows.append(vals)
    if not rows:
        raise InputError(f"{path}: no data rows")
    return SeriesFrame(stamps, np.array(rows), names, infer_frequency(dates), dates=dates)


def load_reports(path: str | Path) -> list[Report]:
    """Read JSONL reports ``{"start", "end", "text"}`` and return them sorted by start."""
    path = Path(path)
    out = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                start, end, text = obj["start"], obj["end"], obj["text"]
                if not all(isinstance(v, str) for v in (start, end, text)):
                    raise TypeError
            except (json.JSONDecodeError, KeyError, TypeError):
                raise InputError(f"{path}: line {lineno} is not a report object with string start/end/text") from None
            s, e = parse_timestamp(start), parse_timestamp(end)
            if e < s:
                raise InputError(f"{path}: line {lineno} ends before it starts")
            out.append(Report(s, e, text))
    out.sort(key=lambda r: (r.start, r.end))
    return [replace(r, index=i) for i, r in enumerate(out)]


def write_series(frame: SeriesFrame, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *frame.names])
        for ts, row in zip(frame.timestamps, frame.values):
            w.writerow([ts, *(repr(float(v)) for v in row)])


def write_reports(reports: list[Report], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for r in reports:
            fh.write(json.dumps({"start": format_timestamp(r.start), "end": format_timestamp(r.end), "text": r.text}) + "\n")


# -- normalization ------------------------------------------------------------------
def normalize(frame: SeriesFrame, train_rows: int | None = None) -> tuple[SeriesFrame, tuple[np.ndarray, np.ndarray]]:
    """Z-score each channel with statistics from the first ``train_rows`` rows.

    Zero-variance channels get ``std = 1`` (with a warning) so they map to zeros.
    """
    n = len(frame) if train_rows is None else train_rows
    if n < 1:
        raise ConfigError("normalization needs at least one training row")
    ref = frame.values[:n]
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    for i, s in enumerate(sd):
        if not s > 0:
            log.warning("channel %r has zero variance; using std=1", frame.names[i])
            sd[i] = 1.0
    out = replace(frame, values=(frame.values - mu) / sd, mean=mu, std=sd)
    return out, (mu, sd)


def denormalize(values: np.ndarray, stats: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    mu, sd = stats
    return np.asarray(values) * sd + mu


# -- windows ------------------------------------------------------------------------
def make_windows(n: int, L_in: int, L_out: int, split: SplitSpec = SplitSpec()) -> dict[str, list[int]]:
    """Window start indices per split; a window goes where its last target row falls."""
    if L_in < 1 or L_out < 1:
        raise ConfigError("L_in and L_out must be positive")
    span = L_in + L_out
    if n < span:
        raise InputError(f"series of length {n} is shorter than L_in + L_out = {span}")
    b_train, b_val = split.boundaries(n)
    out: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for s in range(0, n - span + 1, split.stride):
        last = s + span - 1
        key = "train" if last < b_train else "val" if last < b_val else "test"
        out[key].append(s)
    return out


def attach_text(forecast_start: datetime, reports: list[Report], freq: str, lookback_intervals: int = 36) -> TextContext:
    """Reports whose end lies in ``[start - lookback, start)``, oldest first."""
    lower = shift(forecast_start, freq, -lookback_intervals)
    picked = [r for r in reports if lower <= r.end < forecast_start]
    picked.sort(key=lambda r: (r.start, r.end))
    ages = tuple(min(max(intervals_between(r.end, forecast_start, freq), 0), lookback_intervals) for r in picked)
    return TextContext(tuple(picked), ages)


def window_sample(frame: SeriesFrame, reports: list[Report], start: int, L_in: int, L_out: int, lookback: int = 36) -> WindowSample:
    X = frame.values[start : start + L_in]
    Y = frame.values[start + L_in : start + L_in + L_out]
    T = frame.timestamps[start : start + L_in + L_out]
    D = attach_text(frame.dates[start + L_in], reports, frame.freq, lookback)
    return WindowSample(X, Y, T, D, start)


@dataclass
class WindowSet:
    """Stacked arrays for a set of windows, ready for batching."""

    x: np.ndarray  # [N, L_in, C]
    y: np.ndarray  # [N, L_out, C]
    dates: list[list[datetime]]
    texts: list[TextContext]
    starts: list[int]

    def __len__(self) -> int:
        return len(self.starts)

    def subset(self, idx) -> "WindowSet":
        idx = list(np.asarray(idx, dtype=int))
        return WindowSet(self.x[idx], self.y[idx], [self.dates[i] for i in idx], [self.texts[i] for i in idx], [self.starts[i] for i in idx])


def build_window_set(frame: SeriesFrame, reports: list[Report], starts: list[int], L_in: int, L_out: int, lookback: int = 36) -> WindowSet:
    C = frame.channels
    N = len(starts)
    x = np.zeros((N, L_in, C))
    y = np.zeros((N, L_out, C))
    dates, texts = [], []
    for i, s in enumerate(starts):
        x[i] = frame.values[s : s + L_in]
        y[i] = frame.values[s + L_in : s + L_in + L_out]
        dates.append(frame.dates[s : s + L_in + L_out])
        texts.append(attach_text(frame.dates[s + L_in], reports, frame.freq, lookback))
    return WindowSet(x, y, dates, texts, list(starts))


@dataclass
class Dataset:
    """A normalized series split into train/val/test window sets."""

    frame: SeriesFrame
    reports: list[Report]
    stats: tuple[np.ndarray, np.ndarray]
    train: WindowSet
    val: WindowSet
    test: WindowSet
    L_in: int
    L_out: int


def prepare_dataset(frame: SeriesFrame, reports: list[Report], L_in: int, L_out: int, split: SplitSpec = SplitSpec(), lookback: int = 36) -> Dataset:
    b_train, _ = split.boundaries(len(frame))
    norm, stats = normalize(frame, b_train)
    idx = make_windows(len(frame), L_in, L_out, split)
    sets = {k: build_window_set(norm, reports, v, L_in, L_out, lookback) for k, v in idx.items()}
    return Dataset(norm, reports, stats, sets["train"], sets["val"], sets["test"], L_in, L_out)
