# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward kernels.

All inputs arrive already padded. Convolution accumulators start at 0.0 and
sum over input channels (outer) then kernel taps (inner), adding the bias
last; ``_pykernels`` follows the same order so both backends agree bitwise.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def conv1d_valid(real[:, :, ::1] x, real[:, :, ::1] w, real[::1] b, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t O = w.shape[0], m = w.shape[2]
    cdef Py_ssize_t L_out = (L - m) // stride + 1
    cdef Py_ssize_t n, o, t, c, k, start
    cdef real acc
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, O, L_out), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    for n in range(B):
        for o in range(O):
            for t in range(L_out):
                start = t * stride
                acc = 0
                for c in range(C):
                    for k in range(m):
                        acc = acc + w[o, c, k] * x[n, c, start + k]
                out[n, o, t] = acc + b[o]
    return out_arr


def conv2d_valid(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b,
                 Py_ssize_t stride_h, Py_ssize_t stride_w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t H_out = (H - kh) // stride_h + 1
    cdef Py_ssize_t W_out = (W - kw) // stride_w + 1
    cdef Py_ssize_t n, o, i, j, c, p, q, i0, j0
    cdef real acc
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, O, H_out, W_out), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    for n in range(B):
        for o in range(O):
            for i in range(H_out):
                i0 = i * stride_h
                for j in range(W_out):
                    j0 = j * stride_w
                    acc = 0
                    for c in range(C):
                        for p in range(kh):
                            for q in range(kw):
                                acc = acc + w[o, c, p, q] * x[n, c, i0 + p, j0 + q]
                    out[n, o, i, j] = acc + b[o]
    return out_arr


def maxpool1d_valid(real[:, :, ::1] x, Py_ssize_t window, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t L_out = (L - window) // stride + 1
    cdef Py_ssize_t n, c, t, k, start, best_idx
    cdef real best, v
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, C, L_out), dtype=dtype)
    arg_arr = np.empty((B, C, L_out), dtype=np.int64)
    cdef real[:, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, ::1] arg = arg_arr
    for n in range(B):
        for c in range(C):
            for t in range(L_out):
                start = t * stride
                best = x[n, c, start]
                best_idx = start
                for k in range(1, window):
                    v = x[n, c, start + k]
                    if v > best:
                        best = v
                        best_idx = start + k
                out[n, c, t] = best
                arg[n, c, t] = best_idx
    return out_arr, arg_arr


def maxpool2d_valid(real[:, :, :, ::1] x, Py_ssize_t window_h, Py_ssize_t window_w,
                    Py_ssize_t stride_h, Py_ssize_t stride_w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t H_out = (H - window_h) // stride_h + 1
    cdef Py_ssize_t W_out = (W - window_w) // stride_w + 1
    cdef Py_ssize_t n, c, i, j, p, q, i0, j0, best_idx
    cdef real best, v
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, C, H_out, W_out), dtype=dtype)
    arg_arr = np.empty((B, C, H_out, W_out), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    for n in range(B):
        for c in range(C):
            for i in range(H_out):
                i0 = i * stride_h
                for j in range(W_out):
                    j0 = j * stride_w
                    best = x[n, c, i0, j0]
                    best_idx = i0 * W + j0
                    for p in range(window_h):
                        for q in range(window_w):
                            v = x[n, c, i0 + p, j0 + q]
                            if v > best:
                                best = v
                                best_idx = (i0 + p) * W + j0 + q
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = best_idx
    return out_arr, arg_arr
