"""Pure-numpy forward kernels with the same contract as ``_ckernels``.

Convolutions are accumulated tap by tap (input channel outer, kernel offset
inner) rather than through BLAS so that every output element sees the same
sequence of floating-point additions as the compiled kernel.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv1d_valid(x, w, b, stride):
    B, C, L = x.shape
    O, _, m = w.shape
    L_out = (L - m) // stride + 1
    span = stride * (L_out - 1) + 1
    acc = np.zeros((B, O, L_out), dtype=x.dtype)
    for c in range(C):
        for k in range(m):
            acc += w[None, :, c, k, None] * x[:, None, c, k:k + span:stride]
    return acc + b[None, :, None]


def conv2d_valid(x, w, b, stride_h, stride_w):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    H_out = (H - kh) // stride_h + 1
    W_out = (W - kw) // stride_w + 1
    span_h = stride_h * (H_out - 1) + 1
    span_w = stride_w * (W_out - 1) + 1
    acc = np.zeros((B, O, H_out, W_out), dtype=x.dtype)
    for c in range(C):
        for p in range(kh):
            for q in range(kw):
                patch = x[:, None, c, p:p + span_h:stride_h, q:q + span_w:stride_w]
                acc += w[None, :, c, p, q, None, None] * patch
    return acc + b[None, :, None, None]


def maxpool1d_valid(x, window, stride):
    win = sliding_window_view(x, window, axis=2)[:, :, ::stride, :]
    local = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    starts = np.arange(win.shape[2]) * stride
    return np.ascontiguousarray(out), (starts[None, None, :] + local).astype(np.int64)


def maxpool2d_valid(x, window_h, window_w, stride_h, stride_w):
    W = x.shape[3]
    win = sliding_window_view(x, (window_h, window_w), axis=(2, 3))
    win = win[:, :, ::stride_h, ::stride_w]
    flat = win.reshape(win.shape[:4] + (window_h * window_w,))
    local = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(win.shape[2])[:, None] * stride_h + local // window_w
    cols = np.arange(win.shape[3])[None, :] * stride_w + local % window_w
    return np.ascontiguousarray(out), (rows * W + cols).astype(np.int64)
