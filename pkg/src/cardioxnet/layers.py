"""Trainable layers with explicit forward and backward passes.

The functional ops (``relu``, ``softmax``, ``batchnorm_forward``,
``lstm_step``, ``bilstm_forward``, ``fire_forward`` ...) are pure. The
:class:`Layer` subclasses wrap them for model assembly: ``forward`` returns
``(output, cache)`` and ``backward(dy, cache)`` returns ``(dx, grads)``, so a
layer never stores activations. The only state a layer mutates is the batch
norm running statistics, and only in train mode.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

TRAIN, INFER = "train", "infer"

GATES = ("i", "f", "o", "g")


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


# --------------------------------------------------------------------------
# activations

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z, axis: int = -1):
    z = np.asarray(z, dtype=np.result_type(z, np.float32))
    if z.shape[axis] < 2:
        raise ShapeError("softmax needs at least two classes")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp, p, axis: int = -1):
    return p * (dp - np.sum(dp * p, axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# batch norm

@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
                   momentum, eps)

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError("batchnorm eps must be > 0")
        if np.any(self.running_var < 0):
            raise ConfigError("batchnorm running variance must be >= 0")


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bn_shape(x):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def batchnorm_forward(x, params: BatchNormParams, mode: str):
    """Per-channel normalisation of ``(B, C, ...)`` input.

    Train mode normalises with the (biased) batch statistics and folds them
    into the running averages; infer mode uses the running averages.
    """
    _check_mode(mode)
    axes, shape = _bn_axes(x), _bn_shape(x)
    if mode == TRAIN:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = params.momentum
        params.running_mean[...] = m * params.running_mean + (1 - m) * mean
        params.running_var[...] = m * params.running_var + (1 - m) * var
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = params.gamma.reshape(shape) * xhat + params.beta.reshape(shape)
    return y, (xhat, inv_std, mode)


def batchnorm_backward(dy, cache, params: BatchNormParams):
    xhat, inv_std, mode = cache
    axes, shape = _bn_axes(dy), _bn_shape(dy)
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = np.sum(dy, axis=axes)
    dxhat = dy * params.gamma.reshape(shape)
    if mode == INFER:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    n = dy.size / dy.shape[1]
    dx = (inv_std.reshape(shape) / n) * (
        n * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=axes, keepdims=True))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# dropout

def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x, rate: float, mode: str, seed=None, mask=None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None in infer mode."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == INFER or rate == 0.0:
        return x, None
    if mask is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        mask = dropout_mask(x.shape, rate, rng)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


# --------------------------------------------------------------------------
# LSTM

@dataclass
class LSTMParams:
    """Stacked gate parameters, gate order (i, f, o, g).

    ``W_x`` is ``(4H, D)``, ``W_h`` is ``(4H, H)``, ``b`` is ``(4H,)``.
    ``w_c`` holds the optional diagonal peephole weights for (i, f, o),
    shape ``(3H,)``; None for the standard cell.
    """

    W_x: np.ndarray
    W_h: np.ndarray
    b: np.ndarray
    w_c: np.ndarray | None = None

    def __post_init__(self):
        four_h, d = self.W_x.shape
        if four_h % 4:
            raise ShapeError("W_x must have 4H rows")
        h = four_h // 4
        if self.W_h.shape != (4 * h, h) or self.b.shape != (4 * h,):
            raise ShapeError(f"inconsistent LSTM shapes W_x={self.W_x.shape} W_h={self.W_h.shape} b={self.b.shape}")
        if self.w_c is not None and self.w_c.shape != (3 * h,):
            raise ShapeError(f"peephole weights must have shape {(3 * h,)}")

    @property
    def hidden_size(self) -> int:
        return self.W_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_x.shape[1]

    def gate(self, name: str):
        """``(W_x, W_h, b)`` slices for one gate."""
        k, h = GATES.index(name), self.hidden_size
        sl = slice(k * h, (k + 1) * h)
        return self.W_x[sl], self.W_h[sl], self.b[sl]

    @classmethod
    def from_gates(cls, W_x: dict, W_h: dict, b: dict, w_c: dict | None = None) -> "LSTMParams":
        stack = lambda d: np.concatenate([np.asarray(d[g], dtype=np.float64) for g in GATES])
        peep = None if w_c is None else np.concatenate([np.asarray(w_c[g], dtype=np.float64) for g in "ifo"])
        return cls(stack(W_x), stack(W_h), stack(b), peep)

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int, peephole: bool = False) -> "LSTMParams":
        h = hidden_size
        return cls(np.zeros((4 * h, input_size)), np.zeros((4 * h, h)), np.zeros(4 * h),
                   np.zeros(3 * h) if peephole else None)


@dataclass
class LSTMState:
    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, hidden_size: int, batch: int | None = None) -> "LSTMState":
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))


def _gate_activations(a, c_prev, params: LSTMParams):
    h = params.hidden_size
    if params.w_c is not None:
        peep = np.concatenate([c_prev, c_prev, c_prev], axis=-1) * params.w_c
        a = a.copy()
        a[..., :3 * h] += peep
    ifo = sigmoid(a[..., :3 * h])
    g = np.tanh(a[..., 3 * h:])
    return ifo[..., :h], ifo[..., h:2 * h], ifo[..., 2 * h:], g


def lstm_step(x_t, prev: LSTMState, params: LSTMParams) -> LSTMState:
    """One LSTM update; ``x_t`` is ``(D,)`` or ``(B, D)``."""
    if x_t.shape[-1] != params.input_size or prev.h.shape[-1] != params.hidden_size:
        raise ShapeError(f"lstm_step: x {x_t.shape}, h {prev.h.shape} vs D={params.input_size}, "
                         f"H={params.hidden_size}")
    a = x_t @ params.W_x.T + prev.h @ params.W_h.T + params.b
    i, f, o, g = _gate_activations(a, prev.c, params)
    c = f * prev.c + i * g
    return LSTMState(c, o * np.tanh(c))


def lstm_sequence(x, params: LSTMParams, reverse: bool = False):
    """Run an LSTM over ``(B, T, D)`` from zero state.

    Returns hidden states ``(B, T, H)`` in input time order, plus a cache
    for :func:`lstm_sequence_backward`.
    """
    B, steps, _ = x.shape
    H = params.hidden_size
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    c = np.zeros((B, H), dtype=x.dtype)
    h = np.zeros((B, H), dtype=x.dtype)
    hs = np.empty((B, steps, H), dtype=x.dtype)
    trace = []
    for t in order:
        # per-step projection: identical arithmetic whichever direction the sequence is read
        a = (x[:, t] @ params.W_x.T + params.b) + h @ params.W_h.T
        i, f, o, g = _gate_activations(a, c, params)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        trace.append((t, i, f, o, g, c, h, tc))
        c, h = c_new, h_new
        hs[:, t] = h
    return hs, (x, params, trace)


def lstm_sequence_backward(dhs, cache):
    """Backpropagation through time. Returns ``(dx, grads)``; grads keyed W_x, W_h, b[, w_c]."""
    x, params, trace = cache
    H = params.hidden_size
    dW_x = np.zeros_like(params.W_x)
    dW_h = np.zeros_like(params.W_h)
    db = np.zeros_like(params.b)
    dw_c = None if params.w_c is None else np.zeros_like(params.w_c)
    dx = np.zeros_like(x)
    B = x.shape[0]
    dh_next = np.zeros((B, H), dtype=dhs.dtype)
    dc_next = np.zeros((B, H), dtype=dhs.dtype)
    da = np.empty((B, 4 * H), dtype=dhs.dtype)
    for t, i, f, o, g, c_prev, h_prev, tc in reversed(trace):
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        da[:, :H] = dc * g * i * (1.0 - i)
        da[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        da[:, 3 * H:] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        if dw_c is not None:
            wci, wcf, wco = params.w_c[:H], params.w_c[H:2 * H], params.w_c[2 * H:]
            dc_next = dc_next + da[:, :H] * wci + da[:, H:2 * H] * wcf + da[:, 2 * H:3 * H] * wco
            dw_c += np.concatenate([(da[:, :H] * c_prev).sum(0), (da[:, H:2 * H] * c_prev).sum(0),
                                    (da[:, 2 * H:3 * H] * c_prev).sum(0)])
        dW_x += da.T @ x[:, t]
        dW_h += da.T @ h_prev
        db += da.sum(axis=0)
        dx[:, t] = da @ params.W_x
        dh_next = da @ params.W_h
    grads = {"W_x": dW_x, "W_h": dW_h, "b": db}
    if dw_c is not None:
        grads["w_c"] = dw_c
    return dx, grads


def bilstm_forward(seq, fwd: LSTMParams, bwd: LSTMParams):
    """Bidirectional LSTM over ``(T, D)`` or ``(B, T, D)``; output ``[h_fwd || h_bwd]`` per step."""
    y, _ = bilstm_forward_cached(seq, fwd, bwd)
    return y


def bilstm_forward_cached(seq, fwd: LSTMParams, bwd: LSTMParams):
    squeeze = seq.ndim == 2
    x = seq[None] if squeeze else seq
    if x.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"bi-LSTM needs a non-empty (T, D) sequence, got shape {seq.shape}")
    hf, cf = lstm_sequence(x, fwd)
    hb, cb = lstm_sequence(x, bwd, reverse=True)
    y = np.concatenate([hf, hb], axis=-1)
    return (y[0] if squeeze else y), (cf, cb, squeeze)


def bilstm_backward(dy, cache):
    cf, cb, squeeze = cache
    if squeeze:
        dy = dy[None]
    H = dy.shape[-1] // 2
    dxf, gf = lstm_sequence_backward(dy[..., :H], cf)
    dxb, gb = lstm_sequence_backward(dy[..., H:], cb)
    dx = dxf + dxb
    return (dx[0] if squeeze else dx), gf, gb


# --------------------------------------------------------------------------
# fire module

SQUEEZE_RATIO = 0.125


@dataclass
class FireParams:
    squeeze_w: np.ndarray  # (s, C, 1, 1)
    squeeze_b: np.ndarray
    expand1_w: np.ndarray  # (e1, s, 1, 1)
    expand1_b: np.ndarray
    expand3_w: np.ndarray  # (e3, s, 3, 3)
    expand3_b: np.ndarray

    @property
    def squeeze(self) -> int:
        return self.squeeze_w.shape[0]

    @property
    def expand1(self) -> int:
        return self.expand1_w.shape[0]

    @property
    def expand3(self) -> int:
        return self.expand3_w.shape[0]

    @property
    def squeeze_ratio(self) -> float:
        return self.squeeze / (self.expand1 + self.expand3)

    @classmethod
    def zeros(cls, in_channels: int, squeeze: int, expand1: int, expand3: int) -> "FireParams":
        return cls(np.zeros((squeeze, in_channels, 1, 1)), np.zeros(squeeze),
                   np.zeros((expand1, squeeze, 1, 1)), np.zeros(expand1),
                   np.zeros((expand3, squeeze, 3, 3)), np.zeros(expand3))


def fire_param_count(in_channels: int, squeeze: int, expand1: int, expand3: int) -> int:
    return (in_channels * squeeze + squeeze + squeeze * expand1 + expand1
            + 9 * squeeze * expand3 + expand3)


def check_squeeze_ratio(squeeze: int, expand1: int, expand3: int, policy: str = "warn") -> None:
    ratio = squeeze / (expand1 + expand3)
    if math.isclose(ratio, SQUEEZE_RATIO) or policy == "ignore":
        return
    msg = f"fire module squeeze ratio {squeeze}/{expand1 + expand3} = {ratio:.4g}, expected {SQUEEZE_RATIO}"
    if policy == "error":
        raise ConfigError(msg)
    warnings.warn(msg, stacklevel=3)


def _fire_specs(c: int, p: FireParams):
    return (T.conv_spec_2d(1, 1, "same", c, p.squeeze),
            T.conv_spec_2d(1, 1, "same", p.squeeze, p.expand1),
            T.conv_spec_2d(3, 1, "same", p.squeeze, p.expand3))


def fire_forward_cached(x, params: FireParams):
    xb = x[None] if x.ndim == 3 else x
    if xb.ndim != 4:
        raise ShapeError(f"fire module expects (C, H, W) or (B, C, H, W), got {x.shape}")
    sq_spec, e1_spec, e3_spec = _fire_specs(xb.shape[1], params)
    s_pre = T.conv2d(xb, sq_spec, params.squeeze_w, params.squeeze_b)
    s = relu(s_pre)
    e1_pre = T.conv2d(s, e1_spec, params.expand1_w, params.expand1_b)
    e3_pre = T.conv2d(s, e3_spec, params.expand3_w, params.expand3_b)
    y = np.concatenate([relu(e1_pre), relu(e3_pre)], axis=1)
    cache = (xb, s_pre, s, e1_pre, e3_pre, x.ndim == 3)
    return (y[0] if x.ndim == 3 else y), cache


def fire_forward(x, params: FireParams):
    """Squeeze (1x1 + ReLU), then channel-concat of 1x1 and 3x3 expansions (each + ReLU)."""
    return fire_forward_cached(x, params)[0]


def fire_backward(dy, cache, params: FireParams):
    xb, s_pre, s, e1_pre, e3_pre, squeeze = cache
    if squeeze:
        dy = dy[None]
    sq_spec, e1_spec, e3_spec = _fire_specs(xb.shape[1], params)
    e1 = params.expand1
    de1 = relu_backward(dy[:, :e1], e1_pre)
    de3 = relu_backward(dy[:, e1:], e3_pre)
    ds1, dw1, db1 = T.conv_backward(de1, s, e1_spec, params.expand1_w)
    ds3, dw3, db3 = T.conv_backward(de3, s, e3_spec, params.expand3_w)
    ds = relu_backward(ds1 + ds3, s_pre)
    dx, dws, dbs = T.conv_backward(ds, xb, sq_spec, params.squeeze_w)
    grads = {"squeeze_w": dws, "squeeze_b": dbs, "expand1_w": dw1, "expand1_b": db1,
             "expand3_w": dw3, "expand3_b": db3}
    return (dx[0] if squeeze else dx), grads


# --------------------------------------------------------------------------
# layer objects used by the model

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base class. ``params`` are trainable; ``buffers`` are persisted but not trained."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, mode: str, rng: np.random.Generator | None = None):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape (no batch axis)."""
        return in_shape

    def flops(self, in_shape: tuple[int, ...]) -> int:
        """FLOPs for one sample, a multiply-accumulate counting as 2."""
        return 0

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


class Conv(Layer):
    """1D or 2D convolution with an optional fused ReLU."""

    def __init__(self, spec: T.ConvSpec, activation: bool = True, rng=None):
        super().__init__()
        self.spec = spec
        self.activation = activation
        taps = int(np.prod(spec.kernel))
        rng = rng or np.random.default_rng(0)
        self.params["w"] = glorot_uniform(rng, spec.weight_shape, spec.in_channels * taps,
                                          spec.out_channels * taps)
        self.params["b"] = np.zeros(spec.out_channels)

    def forward(self, x, mode, rng=None):
        op = T.conv1d if self.spec.ndim == 1 else T.conv2d
        pre = op(x, self.spec, self.params["w"], self.params["b"])
        return (relu(pre) if self.activation else pre), (x, pre)

    def backward(self, dy, cache):
        x, pre = cache
        if self.activation:
            dy = relu_backward(dy, pre)
        dx, dw, db = T.conv_backward(dy, x, self.spec, self.params["w"])
        return dx, {"w": dw, "b": db}

    def output_shape(self, in_shape):
        if in_shape[0] != self.spec.in_channels:
            raise ShapeError(f"conv expects {self.spec.in_channels} channels, got {in_shape[0]}")
        return (self.spec.out_channels,) + self.spec.output_shape(in_shape[1:])

    def flops(self, in_shape):
        out = self.output_shape(in_shape)
        positions = int(np.prod(out))
        taps = int(np.prod(self.spec.kernel))
        # activations are not counted
        return 2 * positions * self.spec.in_channels * taps + positions


class MaxPool(Layer):
    def __init__(self, window, stride=None, padding: str = "same"):
        super().__init__()
        self.window = window
        self.stride = stride
        self.padding = padding

    def forward(self, x, mode, rng=None):
        y, idx = T.maxpool_with_indices(x, self.window, self.stride, self.padding)
        return y, (x.shape, idx)

    def backward(self, dy, cache):
        shape, idx = cache
        return T.maxpool_backward(dy, idx, shape, self.window, self.stride, self.padding), {}

    def _geometry(self, nd):
        window = T._as_tuple(self.window, nd)
        stride = window if self.stride is None else T._as_tuple(self.stride, nd)
        return window, stride

    def output_shape(self, in_shape):
        nd = 1 if isinstance(self.window, int) else len(self.window)
        window, stride = self._geometry(nd)
        spatial = tuple(T.pad_amounts(n, k, s, self.padding)[0]
                        for n, k, s in zip(in_shape[-nd:], window, stride))
        return tuple(in_shape[:-nd]) + spatial

    def flops(self, in_shape):
        nd = 1 if isinstance(self.window, int) else len(self.window)
        window, _ = self._geometry(nd)
        # one comparison per extra window element
        return int(np.prod(self.output_shape(in_shape))) * (int(np.prod(window)) - 1)


class GlobalMax(Layer):
    def forward(self, x, mode, rng=None):
        y, idx = T.global_max(x)
        return y, (x.shape, idx)

    def backward(self, dy, cache):
        shape, idx = cache
        return T.global_max_backward(dy, idx, shape), {}

    def output_shape(self, in_shape):
        return (in_shape[0],)

    def flops(self, in_shape):
        return in_shape[0] * (int(np.prod(in_shape[1:])) - 1)


class BatchNorm(Layer):
    """Batch norm followed by an optional ReLU."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, activation: bool = True):
        super().__init__()
        bn = BatchNormParams.create(channels, momentum, eps)
        self.params = {"gamma": bn.gamma, "beta": bn.beta}
        self.buffers = {"running_mean": bn.running_mean, "running_var": bn.running_var}
        self.momentum, self.eps = momentum, eps
        self.activation = activation
        self.frozen = False

    def bn_params(self) -> BatchNormParams:
        return BatchNormParams(self.params["gamma"], self.params["beta"], self.buffers["running_mean"],
                               self.buffers["running_var"], self.momentum, self.eps)

    def forward(self, x, mode, rng=None):
        y, cache = batchnorm_forward(x, self.bn_params(), INFER if self.frozen else mode)
        return (relu(y) if self.activation else y), (cache, y)

    def backward(self, dy, cache):
        bn_cache, y = cache
        if self.activation:
            dy = relu_backward(dy, y)
        dx, dg, db = batchnorm_backward(dy, bn_cache, self.bn_params())
        return dx, {"gamma": dg, "beta": db}

    def flops(self, in_shape):
        # inference form: one scale and one shift per element
        return 2 * int(np.prod(in_shape))


class Fire(Layer):
    def __init__(self, in_channels: int, squeeze: int, expand1: int, expand3: int, rng=None,
                 sr_policy: str = "warn"):
        super().__init__()
        check_squeeze_ratio(squeeze, expand1, expand3, sr_policy)
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.params = {
            "squeeze_w": glorot_uniform(rng, (squeeze, in_channels, 1, 1), in_channels, squeeze),
            "squeeze_b": np.zeros(squeeze),
            "expand1_w": glorot_uniform(rng, (expand1, squeeze, 1, 1), squeeze, expand1),
            "expand1_b": np.zeros(expand1),
            "expand3_w": glorot_uniform(rng, (expand3, squeeze, 3, 3), 9 * squeeze, 9 * expand3),
            "expand3_b": np.zeros(expand3),
        }

    def fire_params(self) -> FireParams:
        return FireParams(**self.params)

    def forward(self, x, mode, rng=None):
        return fire_forward_cached(x, self.fire_params())

    def backward(self, dy, cache):
        return fire_backward(dy, cache, self.fire_params())

    def output_shape(self, in_shape):
        p = self.fire_params()
        return (p.expand1 + p.expand3,) + tuple(in_shape[1:])

    def flops(self, in_shape):
        p = self.fire_params()
        px = int(np.prod(in_shape[1:]))
        c = in_shape[0]
        s, e1, e3 = p.squeeze, p.expand1, p.expand3
        macs = px * (c * s + s * e1 + 9 * s * e3)
        return 2 * macs + px * (s + e1 + e3)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng=None, zero: bool = False):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if zero:
            w = np.zeros((out_features, in_features))
        else:
            w = glorot_uniform(rng, (out_features, in_features), in_features, out_features)
        self.params = {"w": w, "b": np.zeros(out_features)}

    def forward(self, x, mode, rng=None):
        return T.affine(x, self.params["w"], self.params["b"]), x

    def backward(self, dy, cache):
        dx, dw, db = T.affine_backward(dy, cache, self.params["w"])
        return dx, {"w": dw, "b": db}

    def output_shape(self, in_shape):
        return (self.params["w"].shape[0],)

    def flops(self, in_shape):
        k, d = self.params["w"].shape
        return 2 * k * d + k


class BiLSTM(Layer):
    """Bidirectional LSTM layer over ``(B, T, D)``, returning the full ``(B, T, 2H)`` sequence."""

    def __init__(self, input_size: int, hidden_size: int, rng=None, peephole: bool = False,
                 forget_bias: float = 1.0):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        H, D = hidden_size, input_size
        for direction in ("fwd", "bwd"):
            b = np.zeros(4 * H)
            b[H:2 * H] = forget_bias
            self.params[f"{direction}.W_x"] = glorot_uniform(rng, (4 * H, D), D, H)
            self.params[f"{direction}.W_h"] = glorot_uniform(rng, (4 * H, H), H, H)
            self.params[f"{direction}.b"] = b
            if peephole:
                self.params[f"{direction}.w_c"] = np.zeros(3 * H)
        self.hidden_size = H
        self.input_size = D

    def lstm_params(self, direction: str) -> LSTMParams:
        p = self.params
        return LSTMParams(p[f"{direction}.W_x"], p[f"{direction}.W_h"], p[f"{direction}.b"],
                          p.get(f"{direction}.w_c"))

    def forward(self, x, mode, rng=None):
        return bilstm_forward_cached(x, self.lstm_params("fwd"), self.lstm_params("bwd"))

    def backward(self, dy, cache):
        dx, gf, gb = bilstm_backward(dy, cache)
        grads = {f"fwd.{k}": v for k, v in gf.items()}
        grads.update({f"bwd.{k}": v for k, v in gb.items()})
        return dx, grads

    def output_shape(self, in_shape):
        return (in_shape[0], 2 * self.hidden_size)

    def flops(self, in_shape):
        steps, D = in_shape
        H = self.hidden_size
        # gate MACs + (3 sigmoid, 2 tanh, 3 products, 1 add) per hidden unit
        per_step = 2 * 4 * H * (D + H) + 4 * H + 9 * H
        return 2 * steps * per_step


class Dropout(Layer):
    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, mode, rng=None):
        return dropout(x, self.rate, mode, rng if rng is not None else 0)

    def backward(self, dy, cache):
        return dropout_backward(dy, cache), {}

    def flops(self, in_shape):
        return 0
