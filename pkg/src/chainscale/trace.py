"""Workload traces: CSV ingestion, synthetic generation and load-level discretization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigurationError, DomainError, EmptyTraceError, TraceParseError

TRACE_COLUMNS = ("timestamp_s", "request_rate", "cpu_util", "mem_util")
DEFAULT_NUM_LEVELS = 10


@dataclass(frozen=True)
class TraceRecord:
    timestamp: float
    request_rate: float
    cpu_util: float
    mem_util: float

    def __post_init__(self):
        if self.request_rate < 0 or not math.isfinite(self.request_rate):
            raise DomainError(f"request_rate must be finite and >= 0, got {self.request_rate}")
        for name in ("cpu_util", "mem_util"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class WorkloadTrace:
    interval_seconds: float
    records: tuple[TraceRecord, ...]

    def __post_init__(self):
        if not self.interval_seconds > 0:
            raise DomainError("interval_seconds must be positive")
        object.__setattr__(self, "records", tuple(self.records))
        previous = -math.inf
        for rec in self.records:
            if rec.timestamp <= previous:
                raise DomainError("record timestamps must be strictly increasing")
            ratio = rec.timestamp / self.interval_seconds
            if abs(ratio - round(ratio)) > 1e-9:
                raise DomainError(
                    f"timestamp {rec.timestamp} is not a multiple of {self.interval_seconds}"
                )
            previous = rec.timestamp

    def __len__(self):
        return len(self.records)

    @property
    def request_rates(self) -> np.ndarray:
        return np.array([r.request_rate for r in self.records], dtype=float)

    @property
    def cpu_utils(self) -> np.ndarray:
        return np.array([r.cpu_util for r in self.records], dtype=float)

    @property
    def mem_utils(self) -> np.ndarray:
        return np.array([r.mem_util for r in self.records], dtype=float)


@dataclass(frozen=True, order=True)
class LoadLevel:
    level: int
    num_levels: int = DEFAULT_NUM_LEVELS

    def __post_init__(self):
        if self.num_levels < 1:
            raise DomainError("num_levels must be >= 1")
        if not 0 <= self.level < self.num_levels:
            raise DomainError(f"level {self.level} outside [0, {self.num_levels - 1}]")

    def __int__(self):
        return self.level


def _parse_float(text, column, line):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise TraceParseError(f"column {column!r}: cannot parse {text!r} as a number", line)
    if not math.isfinite(value):
        raise TraceParseError(f"column {column!r}: non-finite value {text!r}", line)
    return value


def load_trace(path, interval_seconds: float = 60.0) -> WorkloadTrace:
    """Read a trace CSV and mean-aggregate its rows onto an ``interval_seconds`` grid.

    Rows whose timestamps fall in ``[k * interval, (k + 1) * interval)`` are
    averaged into a single record stamped ``k * interval``.
    """
    if not interval_seconds > 0:
        raise DomainError("interval_seconds must be positive")
    path = Path(path)
    buckets: dict[int, list[tuple[float, float, float]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyTraceError(f"{path}: empty trace file")
        header = [h.strip() for h in header]
        missing = [c for c in TRACE_COLUMNS if c not in header]
        if missing:
            raise TraceParseError(f"header is missing columns {missing}", 1)
        index = {c: header.index(c) for c in TRACE_COLUMNS}
        last_ts = -math.inf
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise TraceParseError(f"expected {len(header)} fields, got {len(row)}", line_no)
            ts, rate, cpu, mem = (
                _parse_float(row[index[c]], c, line_no) for c in TRACE_COLUMNS
            )
            if ts < 0 or ts <= last_ts:
                raise TraceParseError("timestamps must be non-negative and increasing", line_no)
            if rate < 0:
                raise TraceParseError(f"request_rate must be >= 0, got {rate}", line_no)
            for name, value in (("cpu_util", cpu), ("mem_util", mem)):
                if not 0.0 <= value <= 1.0:
                    raise TraceParseError(f"{name} {value} outside [0, 1]", line_no)
            last_ts = ts
            buckets.setdefault(int(ts // interval_seconds), []).append((rate, cpu, mem))
    if not buckets:
        raise EmptyTraceError(f"{path}: trace has no data rows")
    records = []
    for k in sorted(buckets):
        rows = np.asarray(buckets[k])
        rate, cpu, mem = rows.mean(axis=0)
        records.append(TraceRecord(k * interval_seconds, float(rate), float(cpu), float(mem)))
    return WorkloadTrace(interval_seconds, tuple(records))


def write_trace(trace: WorkloadTrace, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in trace.records:
            writer.writerow([repr(r.timestamp), repr(r.request_rate), repr(r.cpu_util), repr(r.mem_util)])


def discretize(util: float, num_levels: int = DEFAULT_NUM_LEVELS) -> LoadLevel:
    """Map a utilization fraction to ``floor(util * num_levels)``, clamping 1.0 to the top level."""
    if num_levels < 1:
        raise DomainError("num_levels must be >= 1")
    if not 0.0 <= util <= 1.0:
        raise DomainError(f"utilization {util} outside [0, 1]")
    return LoadLevel(min(int(math.floor(util * num_levels)), num_levels - 1), num_levels)


def level_series(
    trace: WorkloadTrace, num_levels: int = DEFAULT_NUM_LEVELS, column: str = "cpu_util"
) -> list[LoadLevel]:
    if not trace.records:
        raise EmptyTraceError("cannot level an empty trace")
    if column == "request_rate":
        rates = trace.request_rates
        peak = rates.max()
        values = rates / peak if peak > 0 else np.zeros_like(rates)
    elif column in ("cpu_util", "mem_util"):
        values = [getattr(r, column) for r in trace.records]
    else:
        raise ConfigurationError(f"unknown column {column!r}", "column")
    return [discretize(float(v), num_levels) for v in values]


class LevelDiscretizer(TransformerMixin, BaseEstimator):
    """Transformer turning utilization fractions into integer load levels.

    ``scale`` divides the input first, so raw request rates can be leveled
    against a reference peak. With ``scale=None`` the peak seen in ``fit`` is used.
    """

    def __init__(self, num_levels=DEFAULT_NUM_LEVELS, scale=1.0):
        self.num_levels = num_levels
        self.scale = scale

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float).ravel()
        if self.num_levels < 1:
            raise DomainError("num_levels must be >= 1")
        if self.scale is None:
            peak = float(X.max()) if X.size else 0.0
            self.scale_ = peak if peak > 0 else 1.0
        else:
            self.scale_ = float(self.scale)
        return self

    def transform(self, X):
        if not hasattr(self, "scale_"):
            self.fit(X)
        X = np.asarray(X, dtype=float).ravel() / self.scale_
        X = np.clip(X, 0.0, 1.0)
        return np.minimum(np.floor(X * self.num_levels), self.num_levels - 1).astype(int)


SYNTH_PATTERNS = ("constant", "sinusoid", "step", "replay")


def synth_workload(
    pattern: str,
    params: dict | None = None,
    horizon: int = 1,
    seed: int = 0,
    interval_seconds: float = 60.0,
) -> WorkloadTrace:
    """Generate a request-rate trace.

    Pattern parameters:

    * ``constant``: ``rate``
    * ``sinusoid``: ``base``, ``amplitude``, ``period`` (intervals), ``phase`` (radians)
    * ``step``: ``low``, ``high``, ``at`` (first interval at the high rate)
    * ``replay``: ``rates``, a sequence cycled over the horizon

    Every pattern accepts ``noise`` (std-dev of additive Gaussian noise in
    requests/s, default 0) and ``peak_rate`` (rate mapped to cpu_util 1.0,
    default the largest generated rate).
    """
    params = dict(params or {})
    if horizon < 1:
        raise DomainError("horizon must be >= 1")
    t = np.arange(horizon, dtype=float)
    try:
        if pattern == "constant":
            rates = np.full(horizon, float(params.get("rate", 100.0)))
        elif pattern == "sinusoid":
            base = float(params.get("base", 100.0))
            amplitude = float(params.get("amplitude", 50.0))
            period = float(params.get("period", 100.0))
            phase = float(params.get("phase", 0.0))
            if period <= 0:
                raise ConfigurationError("period must be positive", "period")
            rates = base + amplitude * np.sin(2 * np.pi * t / period + phase)
        elif pattern == "step":
            at = int(params.get("at", horizon // 2))
            rates = np.where(t < at, float(params.get("low", 50.0)), float(params.get("high", 150.0)))
        elif pattern == "replay":
            source = np.asarray(params["rates"], dtype=float)
            if source.size == 0:
                raise ConfigurationError("replay needs a non-empty rates list", "rates")
            rates = source[np.arange(horizon) % source.size]
        else:
            raise ConfigurationError(
                f"unknown pattern {pattern!r}; expected one of {SYNTH_PATTERNS}", "pattern"
            )
    except KeyError as exc:
        raise ConfigurationError("missing parameter", exc.args[0]) from None
    noise = float(params.get("noise", 0.0))
    if noise > 0:
        rng = np.random.default_rng(seed)
        rates = rates + rng.normal(0.0, noise, size=horizon)
    rates = np.clip(rates, 0.0, None)
    peak = float(params.get("peak_rate", rates.max()))
    cpu = np.clip(rates / peak, 0.0, 1.0) if peak > 0 else np.zeros(horizon)
    mem = np.clip(0.2 + 0.5 * cpu, 0.0, 1.0)
    records = tuple(
        TraceRecord(i * interval_seconds, float(rates[i]), float(cpu[i]), float(mem[i]))
        for i in range(horizon)
    )
    return WorkloadTrace(interval_seconds, records)


def trace_from_rates(rates: Iterable[float], interval_seconds: float = 60.0) -> WorkloadTrace:
    rates = list(rates)
    return synth_workload("replay", {"rates": rates}, len(rates), 0, interval_seconds)


def levels_to_ints(levels: Sequence[LoadLevel | int]) -> list[int]:
    return [int(level) for level in levels]
