"""Traffic series ingestion, synthetic generation and the per-client
sliding training window."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

RESOLUTION = timedelta(minutes=5)
POINTS_PER_DAY = 288
CSV_HEADER = ("detector_id", "timestamp", "volume")
DEFAULT_T0 = datetime(2019, 8, 1, tzinfo=timezone.utc)


class ParseError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(f"row {row}: {message}" if row is not None else message)
        self.row = row


class EndOfData(Exception):
    """The stream cannot supply the requested points.

    ``partial`` holds whatever points were still available; they are consumed.
    """

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = np.zeros(0) if partial is None else partial


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TrafficSeries:
    detector_id: str
    t0: datetime
    volumes: np.ndarray

    def __post_init__(self):
        vols = np.array(self.volumes, dtype=np.float64)
        if vols.ndim != 1:
            raise ValueError("volumes must be one-dimensional")
        if np.any(vols < 0) or not np.all(np.isfinite(vols)):
            raise ValueError("volumes must be finite and non-negative")
        vols.setflags(write=False)
        object.__setattr__(self, "volumes", vols)

    def __len__(self):
        return len(self.volumes)

    def timestamps(self) -> list[datetime]:
        return [self.t0 + k * RESOLUTION for k in range(len(self))]

    def head(self, fraction: float) -> "TrafficSeries":
        """First ``fraction`` of the series (the real-time portion)."""
        n = int(len(self) * fraction)
        return TrafficSeries(self.detector_id, self.t0, self.volumes[:n])


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def ingest_csv(path) -> list[TrafficSeries]:
    """Load ``detector_id,timestamp,volume`` rows into one series per detector.

    Rows may come in any order; each detector's rows must form a gap-free
    5-minute grid once sorted.  Row numbers in errors count the header as 1.
    """
    rows: dict[str, list[tuple[datetime, float, int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"missing column(s): {', '.join(missing)}", 1)
        for lineno, rec in enumerate(reader, start=2):
            try:
                ts = parse_timestamp(rec["timestamp"])
                vol = float(rec["volume"])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"unparseable value ({exc})", lineno) from None
            if not np.isfinite(vol) or vol < 0:
                raise ParseError(f"invalid volume {rec['volume']!r}", lineno)
            det = (rec["detector_id"] or "").strip()
            if not det:
                raise ParseError("empty detector_id", lineno)
            rows.setdefault(det, []).append((ts, vol, lineno))

    series = []
    for det in sorted(rows):
        recs = sorted(rows[det], key=lambda r: r[0])
        for prev, cur in zip(recs, recs[1:]):
            step = cur[0] - prev[0]
            if step != RESOLUTION:
                kind = "duplicate timestamp" if step == timedelta(0) else f"spacing of {step}"
                raise ParseError(f"{det}: {kind} after {format_timestamp(prev[0])}", cur[2])
        series.append(TrafficSeries(det, recs[0][0], np.array([r[1] for r in recs])))
    return series


def write_csv(series: list[TrafficSeries], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in series:
            for ts, v in zip(s.timestamps(), s.volumes):
                writer.writerow((s.detector_id, format_timestamp(ts), repr(float(v))))


@dataclass
class SynthSpec:
    seed: int = 0
    days: float = 14.0
    base: float = 300.0
    daily_amplitude: float = 150.0
    noise_std: float = 2.0
    phase_step: int = 41  # ~1/7 day: detectors spread over the daily cycle
    n_points: int | None = None
    t0: str = "2019-08-01T00:00:00Z"

    def __post_init__(self):
        if self.base <= self.daily_amplitude + 3 * self.noise_std:
            raise ValueError("base must exceed daily_amplitude + 3*noise_std")
        if self.noise_std < 0 or self.daily_amplitude < 0:
            raise ValueError("amplitude and noise must be non-negative")

    @property
    def length(self) -> int:
        return self.n_points if self.n_points is not None else int(round(self.days * POINTS_PER_DAY))


def synth_generate(spec: SynthSpec, n_detectors: int) -> list[TrafficSeries]:
    """Daily sinusoid plus gaussian noise, one phase offset per detector."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length, dtype=np.float64)
    t0 = parse_timestamp(spec.t0)
    out = []
    for k in range(n_detectors):
        phase = k * spec.phase_step
        clean = spec.base + spec.daily_amplitude * np.sin(2 * np.pi * (t + phase) / POINTS_PER_DAY)
        noise = rng.normal(0.0, spec.noise_std, size=t.size) if spec.noise_std > 0 else 0.0
        out.append(TrafficSeries(f"SYN{k:03d}_NB", t0, np.maximum(clean + noise, 0.0)))
    return out


class StreamCursor:
    """Sequential reader over one series."""

    def __init__(self, series: TrafficSeries, position: int = 0):
        if not 0 <= position <= len(series):
            raise ValueError("position out of range")
        self.series = series
        self.position = position

    @property
    def remaining(self) -> int:
        return len(self.series) - self.position

    def collect(self, n: int) -> np.ndarray:
        if n > self.remaining:
            left = self.remaining
            partial = self.series.volumes[self.position:].copy()
            self.position = len(self.series)
            raise EndOfData(f"{self.series.detector_id}: requested {n}, {left} remaining",
                            partial)
        out = self.series.volumes[self.position:self.position + n].copy()
        self.position += n
        return out

    def collect_one(self) -> float:
        return float(self.collect(1)[0])


@dataclass
class WindowState:
    max_size: int
    data: np.ndarray = field(default_factory=lambda: np.zeros(0))
    removed: int = 0

    def __post_init__(self):
        if self.max_size < 1:
            raise ValueError("max_size must be >= 1")
        self.data = np.asarray(self.data, dtype=np.float64)


def upd_dataset(window: WindowState, d_in) -> WindowState:
    """Append new points and drop the oldest beyond ``max_size``."""
    d_in = np.asarray(d_in, dtype=np.float64)
    if d_in.size == 0:
        raise ValueError("d_in must be non-empty")
    merged = np.concatenate([window.data, d_in])
    remove = max(0, merged.size - window.max_size)
    return WindowState(window.max_size, merged[remove:], remove)


@dataclass(frozen=True)
class Scaler:
    """Fixed min-max map from [0, cap] vehicles to [0, 1]."""
    cap: float = 1000.0

    def normalize(self, values):
        return np.asarray(values, dtype=np.float64) / self.cap

    def denormalize(self, values):
        return np.asarray(values, dtype=np.float64) * self.cap


def make_samples(data, input_shape: int, scaler: Scaler | None = None):
    """Sliding (x, y) pairs: x = data[t-input_shape:t], y = data[t].

    Returns normalized arrays ``X`` of shape (n, input_shape) and ``y`` of
    shape (n,), with n = len(data) - input_shape.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.size < input_shape + 1:
        raise InsufficientDataError(
            f"need at least {input_shape + 1} points, have {data.size}")
    if scaler is not None:
        data = scaler.normalize(data)
    n = data.size - input_shape
    idx = np.arange(n)[:, None] + np.arange(input_shape)[None, :]
    return data[idx], data[input_shape:].copy()
