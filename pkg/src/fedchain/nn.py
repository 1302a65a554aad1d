"""Recurrent sequence-to-one regressors (GRU / LSTM) written directly in numpy.

Parameters live in a single flat float64 vector whose layout is a pure
function of the architecture, so the same vector can be averaged across
clients, hashed, and shipped on the ledger without any conversion step.

Gate conventions
----------------
GRU (row blocks of W/U/b ordered z, r, h)::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    hh = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * hh

LSTM (row blocks ordered i, f, g, o)::

    c' = f * c + i * g
    h' = o * tanh(c')
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

GATES = {"GRU": 3, "LSTM": 4}
DEFAULT_UNITS = {"GRU": 50, "LSTM": 128}


class InputShapeError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    """Raised when a training step produces a non-finite loss or parameter."""

    def __init__(self, step: int, message: str = "non-finite loss or parameters"):
        super().__init__(f"divergence at step {step}: {message}")
        self.step = step


class BlobDecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ModelArch:
    kind: str = "GRU"
    input_shape: int = 12
    hidden_layers: int = 2
    hidden_units: int = 50
    output_units: int = 1

    def __post_init__(self):
        if self.kind not in GATES:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_shape < 1 or self.hidden_layers < 1 or self.hidden_units < 1:
            raise ValueError("input_shape, hidden_layers and hidden_units must be >= 1")
        if self.output_units != 1:
            raise ValueError("only single-output heads are supported")

    @classmethod
    def for_kind(cls, kind: str, input_shape: int = 12, hidden_layers: int = 2,
                 hidden_units: int | None = None) -> "ModelArch":
        kind = kind.upper()
        return cls(kind, input_shape, hidden_layers,
                   hidden_units or DEFAULT_UNITS[kind])


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]
    fan_in: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@lru_cache(maxsize=None)
def param_layout(arch: ModelArch) -> tuple[Segment, ...]:
    """Named segments of the flat parameter vector, in storage order."""
    segments = []
    offset = 0
    gates = GATES[arch.kind]
    H = arch.hidden_units

    def add(name, shape, fan_in):
        nonlocal offset
        seg = Segment(name, offset, shape, fan_in)
        segments.append(seg)
        offset += seg.size

    for layer in range(arch.hidden_layers):
        d = 1 if layer == 0 else H
        add(f"rnn{layer}.W", (gates * H, d), d)
        add(f"rnn{layer}.U", (gates * H, H), H)
        add(f"rnn{layer}.b", (gates * H,), H)
    add("head.W", (1, H), H)
    add("head.b", (1,), H)
    return tuple(segments)


def param_count(arch: ModelArch) -> int:
    last = param_layout(arch)[-1]
    return last.offset + last.size


def unflatten(arch: ModelArch, vector: np.ndarray) -> dict[str, np.ndarray]:
    """Split a flat vector into named views (no copy)."""
    vector = np.asarray(vector)
    if vector.ndim != 1 or vector.shape[0] != param_count(arch):
        raise LayoutError(
            f"vector of shape {vector.shape} does not match layout of "
            f"{param_count(arch)} parameters")
    return {s.name: vector[s.offset:s.offset + s.size].reshape(s.shape)
            for s in param_layout(arch)}


def flatten(arch: ModelArch, params: dict[str, np.ndarray]) -> np.ndarray:
    layout = param_layout(arch)
    if set(params) != {s.name for s in layout}:
        raise LayoutError("parameter names do not match layout")
    parts = []
    for s in layout:
        arr = np.asarray(params[s.name], dtype=np.float64)
        if arr.shape != s.shape:
            raise LayoutError(f"{s.name}: shape {arr.shape} != {s.shape}")
        parts.append(arr.ravel())
    return np.concatenate(parts)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)


@dataclass
class RnnModel:
    arch: ModelArch
    params: np.ndarray
    opt_state: AdamState = None
    seed: int = 0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (param_count(self.arch),):
            raise LayoutError("parameter vector does not match architecture")
        if self.opt_state is None:
            self.opt_state = AdamState.zeros(self.params.size)

    def with_params(self, params: np.ndarray) -> "RnnModel":
        """Same optimizer state, new parameters (used after aggregation)."""
        return RnnModel(self.arch, np.array(params, dtype=np.float64),
                        self.opt_state.copy(), self.seed)

    def copy(self) -> "RnnModel":
        return RnnModel(self.arch, self.params.copy(), self.opt_state.copy(), self.seed)


def init_model(arch: ModelArch, seed: int) -> RnnModel:
    """Uniform(-s, s) initialization with s = 1/sqrt(fan_in) per segment."""
    rng = np.random.default_rng(seed)
    parts = []
    for seg in param_layout(arch):
        s = 1.0 / np.sqrt(seg.fan_in)
        parts.append(rng.uniform(-s, s, size=seg.size))
    return RnnModel(arch, np.concatenate(parts), seed=seed)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _gru_core(xw, h, U, H):
    zr = _sigmoid(xw[..., :2 * H] + h @ U[:2 * H].T)
    z, r = zr[..., :H], zr[..., H:]
    rh = r * h
    hh = np.tanh(xw[..., 2 * H:] + rh @ U[2 * H:].T)
    return z, r, rh, hh, (1.0 - z) * h + z * hh


def gru_cell(x, h, W, U, b):
    """One GRU step; returns the new hidden state."""
    H = U.shape[1]
    return _gru_core(np.asarray(x) @ W.T + b, np.asarray(h), U, H)[-1]


def _lstm_core(xw, h, c, U, H):
    a = xw + h @ U.T
    i = _sigmoid(a[..., :H])
    f = _sigmoid(a[..., H:2 * H])
    g = np.tanh(a[..., 2 * H:3 * H])
    o = _sigmoid(a[..., 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return i, f, g, o, tc, c_new, o * tc


def lstm_cell(x, h, c, W, U, b):
    """One LSTM step; returns (h', c')."""
    H = U.shape[1]
    out = _lstm_core(np.asarray(x) @ W.T + b, np.asarray(h), np.asarray(c), U, H)
    return out[-1], out[-2]


def _layer_forward(kind, W, U, b, xs):
    T, B, _ = xs.shape
    H = U.shape[1]
    xw = xs @ W.T + b
    hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = []
    for t in range(T):
        if kind == "GRU":
            z, r, rh, hh, h_new = _gru_core(xw[t], h, U, H)
            cache.append((h, z, r, rh, hh))
        else:
            i, f, g, o, tc, c_new, h_new = _lstm_core(xw[t], h, c, U, H)
            cache.append((h, c, i, f, g, o, tc))
            c = c_new
        h = h_new
        hs[t] = h
    return hs, cache


def _layer_backward(kind, W, U, xs, cache, dhs, need_dx):
    T, B, _ = xs.shape
    H = U.shape[1]
    G = GATES[kind]
    da_all = np.empty((T, B, G * H))
    dU = np.zeros_like(U)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dh + dhs[t]
        if kind == "GRU":
            h_prev, z, r, rh, hh = cache[t]
            da_h = dh * z * (1.0 - hh * hh)
            d_rh = da_h @ U[2 * H:]
            dU[2 * H:] += da_h.T @ rh
            da_z = dh * (hh - h_prev) * z * (1.0 - z)
            da_r = d_rh * h_prev * r * (1.0 - r)
            da_zr = np.concatenate([da_z, da_r], axis=1)
            dU[:2 * H] += da_zr.T @ h_prev
            dh = dh * (1.0 - z) + d_rh * r + da_zr @ U[:2 * H]
            da_all[t, :, :2 * H] = da_zr
            da_all[t, :, 2 * H:] = da_h
        else:
            h_prev, c_prev, i, f, g, o, tc = cache[t]
            dc = dc + dh * o * (1.0 - tc * tc)
            da = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                dh * tc * o * (1.0 - o),
            ], axis=1)
            dU += da.T @ h_prev
            dh = da @ U
            dc = dc * f
            da_all[t] = da
    flat = da_all.reshape(T * B, G * H)
    dW = flat.T @ xs.reshape(T * B, -1)
    db = flat.sum(axis=0)
    dxs = da_all @ W if need_dx else None
    return dW, dU, db, dxs


def _as_batch(arch, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.input_shape:
        raise InputShapeError(
            f"expected sequences of length {arch.input_shape}, got shape {X.shape}")
    return X


def _forward(arch, vector, X):
    p = unflatten(arch, vector)
    layer_in = X.T[:, :, None]  # (T, B, 1)
    inputs, caches = [], []
    for layer in range(arch.hidden_layers):
        inputs.append(layer_in)
        hs, cache = _layer_forward(arch.kind, p[f"rnn{layer}.W"], p[f"rnn{layer}.U"],
                                   p[f"rnn{layer}.b"], layer_in)
        caches.append(cache)
        layer_in = hs
    h_last = layer_in[-1]
    yhat = (h_last @ p["head.W"].T)[:, 0] + p["head.b"][0]
    return yhat, (p, inputs, caches, layer_in)


def predict(model: RnnModel, X) -> np.ndarray:
    """Batch prediction; X has shape (batch, input_shape)."""
    return _forward(model.arch, model.params, _as_batch(model.arch, X))[0]


def forward(model: RnnModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputShapeError("forward takes a single sequence")
    return float(predict(model, x)[0])


def loss_and_gradient(arch: ModelArch, vector: np.ndarray, X, y) -> tuple[float, np.ndarray]:
    X = _as_batch(arch, X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise EmptyBatchError("gradient needs at least one sample")
    if y.shape[0] != X.shape[0]:
        raise InputShapeError("X and y batch sizes differ")
    B = X.shape[0]
    yhat, (p, inputs, caches, top) = _forward(arch, vector, X)
    resid = yhat - y
    loss = float(np.mean(resid * resid))
    dy = (2.0 / B) * resid

    grads = {"head.W": dy[None, :] @ top[-1], "head.b": np.array([dy.sum()])}
    dhs = np.zeros_like(top)
    dhs[-1] = dy[:, None] * p["head.W"]
    for layer in range(arch.hidden_layers - 1, -1, -1):
        dW, dU, db, dxs = _layer_backward(
            arch.kind, p[f"rnn{layer}.W"], p[f"rnn{layer}.U"], inputs[layer],
            caches[layer], dhs, need_dx=layer > 0)
        grads[f"rnn{layer}.W"] = dW
        grads[f"rnn{layer}.U"] = dU
        grads[f"rnn{layer}.b"] = db
        dhs = dxs
    return loss, flatten(arch, grads)


def gradient(model: RnnModel, X, y) -> np.ndarray:
    """Gradient of the batch-mean squared error, in parameter layout order."""
    return loss_and_gradient(model.arch, model.params, X, y)[1]


def mse(model: RnnModel, X, y) -> float:
    resid = predict(model, X) - np.asarray(y, dtype=np.float64).reshape(-1)
    return float(np.mean(resid * resid))


class Fitted(NamedTuple):
    model: RnnModel
    losses: list[float]


def train_epochs(model: RnnModel, X, y, epochs: int,
                 adam: AdamConfig | None = None) -> Fitted:
    """One full-batch Adam step per epoch; returns a new model.

    ``losses`` holds the batch loss measured before each step.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    adam = adam or AdamConfig()
    params = model.params.copy()
    state = model.opt_state.copy()
    losses = []
    for _ in range(epochs):
        loss, g = loss_and_gradient(model.arch, params, X, y)
        step = state.step + 1
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise DivergenceError(step)
        norm = float(np.sqrt(g @ g))
        if norm > adam.clip_norm:
            g = g * (adam.clip_norm / norm)
        state.m = adam.beta1 * state.m + (1.0 - adam.beta1) * g
        state.v = adam.beta2 * state.v + (1.0 - adam.beta2) * g * g
        state.step = step
        m_hat = state.m / (1.0 - adam.beta1 ** step)
        v_hat = state.v / (1.0 - adam.beta2 ** step)
        params = params - adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps)
        if not np.all(np.isfinite(params)):
            raise DivergenceError(step)
        losses.append(loss)
    return Fitted(RnnModel(model.arch, params, state, model.seed), losses)


# -- parameter blob ---------------------------------------------------------

BLOB_MAGIC = b"RNNP"
BLOB_VERSION = 1
_HEADER = struct.Struct("<4sHBBIIIIQ")
_KIND_CODES = {"GRU": 0, "LSTM": 1}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def encode_blob(arch: ModelArch, vector: np.ndarray) -> bytes:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (param_count(arch),):
        raise LayoutError("vector does not match architecture")
    if not np.all(np.isfinite(vector)):
        raise ValueError("cannot encode non-finite parameters")
    header = _HEADER.pack(BLOB_MAGIC, BLOB_VERSION, _KIND_CODES[arch.kind], 0,
                          arch.input_shape, arch.hidden_layers, arch.hidden_units,
                          arch.output_units, vector.size)
    return header + vector.astype("<f8").tobytes()


def decode_blob(blob: bytes) -> tuple[ModelArch, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise BlobDecodeError("truncated header", len(blob))
    magic, version, kind, _, n_in, layers, units, outs, count = _HEADER.unpack_from(blob)
    if magic != BLOB_MAGIC:
        raise BlobDecodeError("bad magic", 0)
    if version != BLOB_VERSION:
        raise BlobDecodeError(f"unsupported version {version}", 4)
    if kind not in _CODE_KINDS:
        raise BlobDecodeError(f"unknown model kind code {kind}", 6)
    try:
        arch = ModelArch(_CODE_KINDS[kind], n_in, layers, units, outs)
    except ValueError as exc:
        raise BlobDecodeError(f"invalid architecture: {exc}", 8) from None
    if count != param_count(arch):
        raise BlobDecodeError("parameter count does not match architecture", 24)
    expected = _HEADER.size + 8 * count
    if len(blob) != expected:
        raise BlobDecodeError(f"body length {len(blob) - _HEADER.size} != {8 * count}",
                              min(len(blob), expected))
    vector = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(vector))
    if bad.size:
        raise BlobDecodeError("non-finite parameter", _HEADER.size + 8 * int(bad[0]))
    return arch, vector
