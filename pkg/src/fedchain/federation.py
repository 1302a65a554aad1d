"""Round engine: local training, baseline training, real-time inference,
FedAvg aggregation and the error metrics computed over round reports."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import chain, nn
from .streaming import (
    EndOfData,
    Scaler,
    StreamCursor,
    TrafficSeries,
    WindowState,
    make_samples,
    upd_dataset,
)


class AggregationError(ValueError):
    pass


class ConsistencyError(RuntimeError):
    """Clients disagree on the aggregated global model."""


class RoundAbort(RuntimeError):
    def __init__(self, round_number: int, cause: str):
        super().__init__(f"round {round_number} aborted: {cause}")
        self.round_number = round_number
        self.cause = cause


@dataclass
class RoundCommit:
    heights: list[int]
    retrieved: dict[str, list[chain.ModelUpdate]]
    sim_time: float = 0.0


# -- aggregation ---------------------------------------------------------------

def fedavg(param_sets) -> np.ndarray:
    """Unweighted elementwise mean of equally sized parameter vectors.

    Each coordinate is summed as offsets from the smallest input, in sorted
    order, so the result does not depend on input order and k identical
    vectors average back to exactly that vector.
    """
    vectors = [np.asarray(v, dtype=np.float64) for v in param_sets]
    if not vectors:
        raise AggregationError("nothing to aggregate")
    shape = vectors[0].shape
    if len(shape) != 1 or any(v.shape != shape for v in vectors):
        raise AggregationError("parameter vectors differ in layout")
    stack = np.stack(vectors)
    ref = stack.min(axis=0)
    return ref + np.sort(stack - ref, axis=0).sum(axis=0) / len(vectors)


# -- metrics ---------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorSummary:
    mae: float
    mse: float
    rmse: float
    mape: float | None  # None when every truth value is zero
    n: int
    mape_skipped: int = 0
    window: str = ""

    def as_dict(self) -> dict:
        return {"mae": self.mae, "mse": self.mse, "rmse": self.rmse, "mape": self.mape,
                "n": self.n, "mape_skipped": self.mape_skipped, "window": self.window}


METRICS = ("mae", "mse", "rmse", "mape")


def compute_errors(truth, pred, window: str = "") -> ErrorSummary:
    truth = np.asarray(truth, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if truth.shape != pred.shape:
        raise ValueError(f"length mismatch: {truth.size} truths vs {pred.size} predictions")
    if truth.size == 0:
        raise ValueError("no points to score")
    err = pred - truth
    mse = float(np.mean(err * err))
    pos = truth > 0
    mape = float(np.mean(np.abs(err[pos]) / truth[pos])) if pos.any() else None
    return ErrorSummary(float(np.mean(np.abs(err))), mse, math.sqrt(mse), mape,
                        int(truth.size), int(np.count_nonzero(~pos)), window)


# -- reports -------------------------------------------------------------------

@dataclass
class ClientRoundReport:
    client_id: str
    truth: np.ndarray
    base: np.ndarray
    fed: np.ndarray
    train_loss: float
    base_loss: float
    window_size: int
    removed: int
    samples: int


@dataclass
class RoundReport:
    round: int
    clients: dict[str, ClientRoundReport]
    heights: list[int] = field(default_factory=list)
    sim_time: float = 0.0

    @property
    def has_inference(self) -> bool:
        return self.round > 1


def inference_reports(reports) -> list[RoundReport]:
    return [r for r in reports if r.has_inference]


def _series(reports, client: str | None, model: str):
    truth, pred = [], []
    for r in reports:
        for cid, c in r.clients.items():
            if client is None or cid == client:
                truth.append(c.truth)
                pred.append(c.base if model == "Base" else c.fed)
    return np.concatenate(truth), np.concatenate(pred)


def error_table(reports, last: int = 24) -> dict[str, dict[str, ErrorSummary]]:
    """Per detector, Base and Fed errors over the last ``last`` inference rounds."""
    rows = inference_reports(reports)[-last:]
    if not rows:
        return {}
    window = f"rounds {rows[0].round}-{rows[-1].round}"
    table = {}
    for cid in rows[0].clients:
        table[cid] = {m: compute_errors(*_series(rows, cid, m), window=window)
                      for m in ("Base", "Fed")}
    return table


@dataclass
class BucketCurve:
    ranges: list[tuple[int, int]]
    values: dict[str, list[float]]

    def fed_better(self) -> list[bool]:
        return [f < b for f, b in zip(self.values["Fed"], self.values["Base"])]


def bucket_errors(reports, bucket: int = 100, client: str | None = None) -> BucketCurve:
    """Normalized MAE per ``bucket`` consecutive inference rounds.

    Normalization divides the bucket's MAE by its mean true volume.  With
    ``client=None`` the points of all clients are pooled.
    """
    rows = inference_reports(reports)
    if not rows:
        raise ValueError("no inference rounds to bucket")
    ranges, values = [], {"Base": [], "Fed": []}
    for k in range(0, len(rows), bucket):
        chunk = rows[k:k + bucket]
        ranges.append((chunk[0].round, chunk[-1].round))
        for m in values:
            truth, pred = _series(chunk, client, m)
            scale = float(np.mean(truth))
            values[m].append(float(np.mean(np.abs(pred - truth))) / scale if scale > 0
                             else float("nan"))
    return BucketCurve(ranges, values)


def best_model_count(errors: dict[str, dict[str, ErrorSummary]]) -> dict[str, dict[str, int]]:
    """Per metric, how many detectors each model is best on (ties count for all)."""
    models = sorted({m for row in errors.values() for m in row})
    counts = {metric: {m: 0 for m in models} for metric in METRICS}
    for row in errors.values():
        for metric in METRICS:
            vals = {m: getattr(s, metric) for m, s in row.items()
                    if getattr(s, metric) is not None}
            if not vals:
                continue
            best = min(vals.values())
            for m, v in vals.items():
                if v == best:
                    counts[metric][m] += 1
    return counts


# -- clients and transport -----------------------------------------------------

@dataclass
class ClientState:
    client_id: str
    window: WindowState
    cursor: StreamCursor
    global_model: nn.RnnModel
    baseline_model: nn.RnnModel
    round: int = 0


class InProcessBus:
    """Transport test double: every client sees every update immediately."""

    def __init__(self):
        self.height = 0

    def commit_round(self, round_number: int, updates) -> RoundCommit:
        self.height += 1
        ordered = sorted(updates, key=lambda u: u.detector_id)
        return RoundCommit([self.height], {u.detector_id: list(ordered) for u in updates})


def realtime_inference(state: ClientState, input_shape: int, scaler: Scaler):
    """Predict the next ``input_shape`` points one step ahead while collecting them.

    The prediction window starts as the newest ``input_shape`` points of the
    training window; after each step its oldest point is dropped and the
    freshly collected point appended.
    """
    if state.window.data.size < input_shape:
        raise ValueError("window holds fewer points than input_shape")
    pred_window = deque(state.window.data[-input_shape:].tolist(), maxlen=input_shape)
    windows, collected = [], []
    for _ in range(input_shape):
        windows.append(list(pred_window))
        point = state.cursor.collect_one()
        collected.append(point)
        pred_window.append(point)  # maxlen drops the oldest
    X = scaler.normalize(np.array(windows))
    base = scaler.denormalize(nn.predict(state.baseline_model, X))
    fed = scaler.denormalize(nn.predict(state.global_model, X))
    return np.array(collected), base, fed


def points_needed(round_number: int, input_shape: int) -> int:
    return 2 * input_shape if round_number == 1 else input_shape


def rounds_supported(n_points: int, input_shape: int) -> int:
    """Complete rounds a series of ``n_points`` can feed."""
    first = points_needed(1, input_shape)
    if n_points < first:
        return 0
    return 1 + (n_points - first) // input_shape


def window_schedule(max_size: int, rounds: int, input_shape: int = 12):
    """Window size, evicted count and sample count per round, without training."""
    window = WindowState(max_size)
    out = []
    for i in range(1, rounds + 1):
        window = upd_dataset(window, np.zeros(points_needed(i, input_shape)))
        out.append((window.data.size, window.removed, window.data.size - input_shape))
    return out


class Federation:
    """All clients of one federated experiment for one model architecture."""

    def __init__(self, series: list[TrafficSeries], arch: nn.ModelArch, max_data_size: int,
                 transport=None, federated_id: str = "fed", seed: int = 0, epochs: int = 5,
                 adam: nn.AdamConfig | None = None, scaler: Scaler | None = None):
        if not series:
            raise ValueError("need at least one client")
        if max_data_size < arch.input_shape + 1:
            raise ValueError("max_data_size must exceed input_shape")
        self.arch = arch
        self.input_shape = arch.input_shape
        self.transport = transport or InProcessBus()
        self.federated_id = federated_id
        self.epochs = epochs
        self.adam = adam or nn.AdamConfig()
        self.scaler = scaler or Scaler()
        initial = nn.init_model(arch, seed)
        self.clients = [
            ClientState(s.detector_id, WindowState(max_data_size), StreamCursor(s),
                        initial.copy(), initial.copy())
            for s in sorted(series, key=lambda s: s.detector_id)
        ]
        self.round = 0
        self.global_history: list[bytes] = [initial.params.tobytes()]

    @property
    def exhausted(self) -> bool:
        need = points_needed(self.round + 1, self.input_shape)
        return any(c.cursor.remaining < need for c in self.clients)

    def _train(self, i, model, X, y, who):
        try:
            return nn.train_epochs(model, X, y, self.epochs, self.adam)
        except nn.DivergenceError as exc:
            raise RoundAbort(i, f"{who} training diverged at step {exc.step}") from None

    def run_round(self) -> RoundReport:
        i = self.round + 1
        if self.exhausted:
            raise EndOfData(f"not enough data left for round {i}")
        S = self.input_shape
        staged = []
        for c in self.clients:
            if i == 1:
                truth = c.cursor.collect(points_needed(1, S))
                base_pred = fed_pred = np.zeros(0)
            else:
                truth, base_pred, fed_pred = realtime_inference(c, S, self.scaler)
            window = upd_dataset(c.window, truth)
            X, y = make_samples(window.data, S, self.scaler)
            local = self._train(i, c.global_model, X, y, f"{c.client_id} local")
            base = self._train(i, c.baseline_model, X, y, f"{c.client_id} baseline")
            report = ClientRoundReport(
                c.client_id, truth if i > 1 else np.zeros(0), base_pred, fed_pred,
                local.losses[-1], base.losses[-1], window.data.size, window.removed, len(y))
            staged.append((c, window, local.model, base.model, report))

        updates = [chain.ModelUpdate(self.federated_id, c.client_id, i,
                                     nn.encode_blob(self.arch, local.params))
                   for c, _, local, _, _ in staged]
        commit = self.transport.commit_round(i, updates)

        new_globals = []
        for c, window, local, base, _ in staged:
            got = commit.retrieved[c.client_id]
            if len(got) != len(self.clients) or any(u.round_number != i for u in got):
                raise RoundAbort(i, f"{c.client_id} retrieved {len(got)} updates")
            vectors = [nn.decode_blob(u.model_parameters)[1] for u in got]
            c.global_model = local.with_params(fedavg(vectors))
            c.baseline_model = base
            c.window = window
            c.round = i
            new_globals.append(c.global_model.params.tobytes())
        if len(set(new_globals)) != 1:
            raise ConsistencyError(f"clients disagree on the global model after round {i}")
        self.global_history.append(new_globals[0])
        self.round = i
        return RoundReport(i, {r.client_id: r for *_, r in staged}, list(commit.heights),
                           commit.sim_time)

    def run(self, rounds: int | None = None, on_round=None) -> list[RoundReport]:
        """Run until ``rounds`` complete or the data runs out."""
        reports = []
        while rounds is None or self.round < rounds:
            if self.exhausted:
                break
            report = self.run_round()
            reports.append(report)
            if on_round is not None:
                on_round(report)
        return reports
