"""Dense tensor primitives: convolution, pooling, affine maps and their gradients.

Tensors are plain ``numpy.ndarray`` values, float64 unless a caller asks for
float32. Convolutions use cross-correlation orientation (no kernel flip) and
accept either unbatched ``(C, *spatial)`` or batched ``(B, C, *spatial)``
inputs. Forward passes run through the kernel backend selected in
:mod:`cardioxnet.kernels`; backward passes are vectorised numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .errors import NumericalError, ShapeError

Tensor = np.ndarray

PADDINGS = ("valid", "same")


def as_tensor(x, dtype=np.float64) -> Tensor:
    return np.ascontiguousarray(x, dtype=dtype)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NumericalError(f"{what} has a non-finite value at index {tuple(int(i) for i in bad)}")
    return x


def _as_tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ShapeError(f"expected {n} extents, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 1D or 2D convolution layer."""

    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: str
    in_channels: int
    out_channels: int

    def __post_init__(self):
        object.__setattr__(self, "kernel", _as_tuple(self.kernel, len(np.atleast_1d(self.kernel))))
        object.__setattr__(self, "stride", _as_tuple(self.stride, len(self.kernel)))
        if any(k < 1 for k in self.kernel):
            raise ShapeError(f"kernel extents must be >= 1, got {self.kernel}")
        if any(s < 1 for s in self.stride):
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding not in PADDINGS:
            raise ShapeError(f"padding must be one of {PADDINGS}, got {self.padding!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")

    @property
    def ndim(self) -> int:
        return len(self.kernel)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels) + self.kernel

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, ...]:
        return tuple(pad_amounts(n, k, s, self.padding)[0]
                     for n, k, s in zip(spatial, self.kernel, self.stride))


def conv_spec_1d(kernel: int, stride: int, padding: str, in_channels: int, out_channels: int) -> ConvSpec:
    return ConvSpec((kernel,), (stride,), padding, in_channels, out_channels)


def conv_spec_2d(kernel, stride, padding: str, in_channels: int, out_channels: int) -> ConvSpec:
    return ConvSpec(_as_tuple(kernel, 2), _as_tuple(stride, 2), padding, in_channels, out_channels)


def pad_amounts(n: int, k: int, s: int, padding: str) -> tuple[int, int, int]:
    """Return ``(n_out, pad_left, pad_right)`` for one spatial axis.

    Same padding splits the total pad left-floor / right-ceil.
    """
    if padding == "valid":
        if k > n:
            raise ShapeError(f"window {k} larger than input extent {n} under valid padding")
        return (n - k) // s + 1, 0, 0
    if padding == "same":
        n_out = -(-n // s)
        total = max((n_out - 1) * s + k - n, 0)
        return n_out, total // 2, total - total // 2
    raise ShapeError(f"unknown padding {padding!r}")


def _batched(x: Tensor, spatial_dims: int) -> tuple[Tensor, bool]:
    if x.ndim == spatial_dims + 1:
        return x[None], True
    if x.ndim == spatial_dims + 2:
        return x, False
    raise ShapeError(f"expected rank {spatial_dims + 1} or {spatial_dims + 2} input, got shape {x.shape}")


def _check_conv_operands(x: Tensor, spec: ConvSpec, w: Tensor, b: Tensor) -> None:
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {b.shape} does not match {spec.out_channels} output channels")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")


def _pad_spatial(x: Tensor, spec_kernel, spec_stride, padding, fill=0.0):
    pads, outs = [], []
    for n, k, s in zip(x.shape[2:], spec_kernel, spec_stride):
        n_out, left, right = pad_amounts(n, k, s, padding)
        pads.append((left, right))
        outs.append(n_out)
    if any(p != (0, 0) for p in pads):
        x = np.pad(x, [(0, 0), (0, 0)] + pads, constant_values=fill)
    return np.ascontiguousarray(x), pads, outs


def conv1d(x: Tensor, spec: ConvSpec, w: Tensor, b: Tensor) -> Tensor:
    """1D cross-correlation of ``x`` (``(C_in, L)`` or ``(B, C_in, L)``)."""
    xb, squeeze = _batched(x, 1)
    _check_conv_operands(xb, spec, w, b)
    xp, _, _ = _pad_spatial(xb, spec.kernel, spec.stride, spec.padding)
    dtype = xp.dtype
    y = kernels.get().conv1d_valid(xp, as_tensor(w, dtype), as_tensor(b, dtype), spec.stride[0])
    return y[0] if squeeze else y


def conv2d(x: Tensor, spec: ConvSpec, w: Tensor, b: Tensor) -> Tensor:
    """2D cross-correlation of ``x`` (``(C_in, H, W)`` or ``(B, C_in, H, W)``)."""
    xb, squeeze = _batched(x, 2)
    _check_conv_operands(xb, spec, w, b)
    xp, _, _ = _pad_spatial(xb, spec.kernel, spec.stride, spec.padding)
    dtype = xp.dtype
    y = kernels.get().conv2d_valid(xp, as_tensor(w, dtype), as_tensor(b, dtype), *spec.stride)
    return y[0] if squeeze else y


def conv_backward(dy: Tensor, x: Tensor, spec: ConvSpec, w: Tensor, need_dx: bool = True):
    """Gradients ``(dx, dw, db)`` of a conv1d/conv2d given the output gradient."""
    nd = spec.ndim
    xb, squeeze = _batched(x, nd)
    dyb = dy[None] if squeeze else dy
    xp, pads, outs = _pad_spatial(xb, spec.kernel, spec.stride, spec.padding)
    axes = tuple(range(2, 2 + nd))
    win = sliding_window_view(xp, spec.kernel, axis=axes)
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in spec.stride)]
    # win: (B, C, *out, *kernel)
    sum_axes = (0,) + tuple(range(2, 2 + nd))
    dw = np.tensordot(dyb, win, axes=(sum_axes, sum_axes))
    db = dyb.sum(axis=sum_axes)
    dx = None
    if need_dx:
        # dwin: (B, *out, C, *kernel)
        dwin = np.tensordot(dyb, w, axes=([1], [0]))
        dxp = np.zeros_like(xp)
        n_out = int(np.prod(outs))
        n_taps = int(np.prod(spec.kernel))
        if n_taps <= n_out:
            for tap in np.ndindex(*spec.kernel):
                dst = (slice(None), slice(None)) + tuple(
                    slice(t, t + s * (o - 1) + 1, s) for t, s, o in zip(tap, spec.stride, outs))
                src = dwin[(Ellipsis,) + tap]  # (B, *out, C)
                dxp[dst] += np.moveaxis(src, -1, 1)
        else:
            for pos in np.ndindex(*outs):
                dst = (slice(None), slice(None)) + tuple(
                    slice(p * s, p * s + k) for p, s, k in zip(pos, spec.stride, spec.kernel))
                dxp[dst] += dwin[(slice(None),) + pos]
        crop = (slice(None), slice(None)) + tuple(
            slice(left, xp.shape[2 + i] - right) for i, (left, right) in enumerate(pads))
        dx = dxp[crop]
        if squeeze:
            dx = dx[0]
    return dx, dw, db


def maxpool_with_indices(x: Tensor, window, stride=None, padding: str = "valid"):
    """Max pooling over the trailing ``len(window)`` axes.

    Returns the pooled tensor and flat argmax indices into the padded
    spatial block, for use by :func:`maxpool_backward`. Padded positions
    hold ``-inf`` and therefore never win the max.
    """
    nd = 1 if isinstance(window, (int, np.integer)) else len(window)
    if nd not in (1, 2):
        raise ShapeError("maxpool supports 1 or 2 spatial dimensions")
    window = _as_tuple(window, nd)
    stride = window if stride is None else _as_tuple(stride, nd)
    if any(k < 1 for k in window) or any(s < 1 for s in stride):
        raise ShapeError("pool window and stride must be >= 1")
    if x.ndim < nd:
        raise ShapeError(f"input rank {x.ndim} < pooling rank {nd}")
    lead = x.shape[:-nd]
    flat = x.reshape((-1, 1) + x.shape[-nd:])
    xp, _, outs = _pad_spatial(flat, window, stride, padding, fill=-np.inf)
    k = kernels.get()
    if nd == 1:
        y, idx = k.maxpool1d_valid(xp, window[0], stride[0])
    else:
        y, idx = k.maxpool2d_valid(xp, window[0], window[1], stride[0], stride[1])
    if not np.all(np.isfinite(y)):
        raise ShapeError("a pooling window lies entirely in padding")
    shape = lead + tuple(outs)
    return y.reshape(shape), idx.reshape(shape)


def maxpool(x: Tensor, window, stride=None, padding: str = "valid") -> Tensor:
    return maxpool_with_indices(x, window, stride, padding)[0]


def maxpool_backward(dy: Tensor, idx: Tensor, x_shape, window, stride=None, padding: str = "valid") -> Tensor:
    nd = 1 if isinstance(window, (int, np.integer)) else len(window)
    window = _as_tuple(window, nd)
    stride = window if stride is None else _as_tuple(stride, nd)
    spatial = x_shape[-nd:]
    padded, pads = [], []
    for n, k, s in zip(spatial, window, stride):
        _, left, right = pad_amounts(n, k, s, padding)
        padded.append(n + left + right)
        pads.append((left, right))
    rows = int(np.prod(x_shape[:-nd], dtype=np.int64))
    size = int(np.prod(padded))
    flat_idx = idx.reshape(rows, -1) + (np.arange(rows) * size)[:, None]
    dxp = np.bincount(flat_idx.ravel(), weights=dy.reshape(rows, -1).ravel(), minlength=rows * size)
    dxp = dxp.reshape((rows,) + tuple(padded)).astype(dy.dtype, copy=False)
    crop = (slice(None),) + tuple(slice(left, p - right) for (left, right), p in zip(pads, padded))
    return dxp[crop].reshape(x_shape)


def global_max(x: Tensor):
    """Max over all spatial axes of ``(B, C, *spatial)``; returns values and flat argmax."""
    flat = x.reshape(x.shape[0], x.shape[1], -1)
    idx = np.argmax(flat, axis=-1)
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], idx


def global_max_backward(dy: Tensor, idx: Tensor, x_shape) -> Tensor:
    dx = np.zeros((x_shape[0], x_shape[1], int(np.prod(x_shape[2:]))), dtype=dy.dtype)
    np.put_along_axis(dx, idx[..., None], dy[..., None], axis=-1)
    return dx.reshape(x_shape)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``y_k = sum_d w_kd x_d + b_k`` for ``x`` of shape ``(D,)`` or ``(B, D)``."""
    if w.ndim != 2 or b.shape != (w.shape[0],) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"affine: input {x.shape}, weights {w.shape}, bias {b.shape} disagree")
    return x @ w.T + b


def affine_backward(dy: Tensor, x: Tensor, w: Tensor):
    if x.ndim == 1:
        return w.T @ dy, np.outer(dy, x), dy.copy()
    return dy @ w, dy.T @ x, dy.sum(axis=0)


# --------------------------------------------------------------------------
# finite-difference gradient checking

@dataclass
class GradCheckReport:
    max_relative_error: float
    errors: dict[str, float]
    tolerance: float
    passed: bool
    location: str | None = None
    checked_coords: int = 0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.location})" if self.location else ""
        return f"{status} max_rel_err={self.max_relative_error:.3e} tol={self.tolerance:g}{extra}"


DifferentiableOp = Callable[..., tuple[Tensor, Callable[[Tensor], Sequence[Tensor | None]]]]


def grad_check(op: DifferentiableOp,
               inputs: Mapping[str, Tensor] | Sequence[Tensor],
               tolerance: float = 1e-4,
               seed: int = 0,
               max_coords: int | None = None,
               wrt: Sequence[str] | None = None) -> GradCheckReport:
    """Compare an op's analytic backward pass against central differences.

    ``op(*inputs)`` must return ``(output, backward)`` where
    ``backward(grad_output)`` yields one gradient per input, in order. The
    scalar probed is ``sum(output * R)`` for a fixed random ``R``. Each
    coordinate is perturbed by ``h = 1e-5 * max(1, |x|)``. The error for an
    input is ``||g_analytic - g_fd||_inf / max(1, ||g_fd||_inf)``.

    ``max_coords`` limits the number of randomly chosen coordinates probed
    per input; ``wrt`` restricts the check to the named inputs.
    """
    if isinstance(inputs, Mapping):
        names = list(inputs)
        values = [np.array(v, dtype=np.float64) for v in inputs.values()]
    else:
        values = [np.array(v, dtype=np.float64) for v in inputs]
        names = [f"input{i}" for i in range(len(values))]
    for name, v in zip(names, values):
        check_finite(v, name)

    rng = np.random.default_rng(seed)
    out, backward = op(*values)
    out = np.asarray(out, dtype=np.float64)
    probe = rng.standard_normal(out.shape)
    analytic = list(backward(probe))

    def scalar() -> float:
        return float(np.sum(np.asarray(op(*values)[0], dtype=np.float64) * probe))

    errors: dict[str, float] = {}
    location = None
    coords = 0
    for name, v, g in zip(names, values, analytic):
        if wrt is not None and name not in wrt:
            continue
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != v.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {v.shape}")
        if not np.all(np.isfinite(g)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(g))[0])
            errors[name] = math.inf
            location = location or f"non-finite analytic gradient in {name} at {bad}"
            continue
        flat_v = v.reshape(-1)
        idx = np.arange(flat_v.size)
        if max_coords is not None and flat_v.size > max_coords:
            idx = np.sort(rng.choice(flat_v.size, size=max_coords, replace=False))
        fd = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat_v[i]
            h = 1e-5 * max(1.0, abs(orig))
            flat_v[i] = orig + h
            up = scalar()
            flat_v[i] = orig - h
            down = scalar()
            flat_v[i] = orig
            fd[j] = (up - down) / (2 * h)
        coords += idx.size
        ga = g.reshape(-1)[idx]
        diff = np.abs(ga - fd)
        err = float(diff.max() / max(1.0, float(np.abs(fd).max()))) if idx.size else 0.0
        errors[name] = err
        if err >= tolerance and location is None:
            worst = int(idx[int(np.argmax(diff))])
            location = f"{name}[{np.unravel_index(worst, v.shape)}]"
    max_err = max(errors.values(), default=0.0)
    return GradCheckReport(max_err, errors, tolerance, max_err < tolerance, location, coords)
