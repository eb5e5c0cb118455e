"""Valid-mode N-d convolution and its transpose (1 to 3 spatial axes).

Layout is channels-first: inputs are ``(batch, channels, *spatial)``.
Convolution kernels are ``(out_ch, in_ch, *k)``; transposed-convolution
kernels are ``(in_ch, out_ch, *k)`` so that the same array drives an op
and its adjoint.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, record

# upper bound on im2col elements materialised at once
_COLS_LIMIT = 1 << 23


def _spatial_axes(nd: int) -> tuple[int, ...]:
    return tuple(range(2, 2 + nd))


def _windows(x: np.ndarray, k: tuple[int, ...], stride: int) -> np.ndarray:
    """Strided view ``(batch, ch, *out, *k)`` over ``x``."""
    nd = len(k)
    v = sliding_window_view(x, k, axis=_spatial_axes(nd))
    if stride > 1:
        v = v[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
    return v


def _chunks(batch: int, per_sample: int):
    step = max(1, _COLS_LIMIT // max(per_sample, 1))
    for lo in range(0, batch, step):
        yield slice(lo, min(batch, lo + step))


def _split_leading(nd: int, stride: int) -> bool:
    # unit-stride volumes: windowing only the trailing axes gathers k0 times less data
    return nd == 3 and stride == 1


def _trailing_windows(x: np.ndarray, k: tuple[int, ...]) -> np.ndarray:
    """View ``(B, C, D, *O_rest, *K_rest)`` windowing all but the first spatial axis."""
    return sliding_window_view(x, k[1:], axis=tuple(range(3, 2 + len(k))))


def _correlate_split(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    nd = w.ndim - 2
    k = w.shape[2:]
    o0 = x.shape[2] - k[0] + 1
    rest = list(range(1, nd))
    wr = np.moveaxis(w, (0, 2), (-1, -2))  # (C, *K_rest, k0, F)
    per_sample = x.shape[1] * x.shape[2] * int(np.prod([s - kk + 1 for s, kk in zip(x.shape[3:], k[1:])])) * \
        int(np.prod(k[1:]))
    pieces = []
    for sl in _chunks(x.shape[0], per_sample):
        v = _trailing_windows(x[sl], k)
        z = np.tensordot(v, wr, axes=([1] + [2 + nd + r - 1 for r in rest], [0] + rest))  # (b, D, *O_rest, k0, F)
        out = z[:, 0:o0, ..., 0, :].copy()
        for kz in range(1, k[0]):
            out += z[:, kz:kz + o0, ..., kz, :]
        pieces.append(np.moveaxis(out, -1, 1))
    return np.concatenate(pieces) if len(pieces) > 1 else pieces[0]


def _weight_grad_split(x: np.ndarray, g: np.ndarray, k: tuple[int, ...]) -> np.ndarray:
    nd = len(k)
    o0 = g.shape[2]
    out = np.zeros((g.shape[1], x.shape[1]) + tuple(k), dtype=np.result_type(x, g))
    per_sample = x.shape[1] * x.shape[2] * int(np.prod(g.shape[3:])) * int(np.prod(k[1:]))
    axes = list(range(nd + 1))
    for sl in _chunks(x.shape[0], per_sample):
        v = np.ascontiguousarray(np.moveaxis(_trailing_windows(x[sl], k), 1, nd + 1))  # (b, D, *O_rest, C, *K_rest)
        gl = np.ascontiguousarray(np.moveaxis(g[sl], 1, -1))  # (b, O0, *O_rest, F)
        for kz in range(k[0]):
            out[:, :, kz] += np.tensordot(gl, v[:, kz:kz + o0], axes=(axes, axes))
    return out


def correlate(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Cross-correlation without padding: ``(B, C, *S) x (F, C, *K) -> (B, F, *O)``."""
    nd = w.ndim - 2
    if _split_leading(nd, stride):
        return _correlate_split(x, w)
    k = w.shape[2:]
    out_sp = tuple((s - kk) // stride + 1 for s, kk in zip(x.shape[2:], k))
    out = np.empty((x.shape[0], w.shape[0]) + out_sp, dtype=np.result_type(x, w))
    per_sample = int(np.prod(out_sp)) * w[0].size
    w_axes = [1] + list(range(2, 2 + nd))
    v_axes = [1] + list(range(2 + nd, 2 + 2 * nd))
    for sl in _chunks(x.shape[0], per_sample):
        cols = _windows(x[sl], k, stride)
        res = np.tensordot(cols, w, axes=(v_axes, w_axes))  # (b, *O, F)
        out[sl] = np.moveaxis(res, -1, 1)
    return out


def scatter(g: np.ndarray, w: np.ndarray, stride: int, out_spatial: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`correlate` w.r.t. its input.

    ``g`` is ``(B, F, *O)`` and ``w`` is ``(F, C, *K)``; returns ``(B, C, *out_spatial)``
    where every input patch position receives ``sum_f g * w``.
    """
    k = w.shape[2:]
    o = g.shape[2:]
    out_cl = np.zeros((g.shape[0],) + tuple(out_spatial) + (w.shape[1],), dtype=np.result_type(g, w))
    # contiguous operands keep every product on the BLAS path
    g_cl = np.ascontiguousarray(np.moveaxis(g, 1, -1)).reshape(-1, g.shape[1])  # (B * prod(O), F)
    w_k = np.ascontiguousarray(np.moveaxis(w, (0, 1), (-2, -1)))  # (*K, F, C)
    for kidx in itertools.product(*(range(kk) for kk in k)):
        region = tuple(slice(ki, ki + stride * (oi - 1) + 1, stride) for ki, oi in zip(kidx, o))
        contrib = (g_cl @ w_k[kidx]).reshape((g.shape[0],) + o + (w.shape[1],))
        out_cl[(slice(None),) + region] += contrib
    return np.ascontiguousarray(np.moveaxis(out_cl, -1, 1))


def weight_grad(x: np.ndarray, g: np.ndarray, stride: int, k: tuple[int, ...]) -> np.ndarray:
    """``dW[f, c, *k] = sum_{b, o} g[b, f, o] * x[b, c, o * stride + k]``."""
    nd = len(k)
    if _split_leading(nd, stride):
        return _weight_grad_split(x, g, k)
    out = np.zeros((g.shape[1], x.shape[1]) + tuple(k), dtype=np.result_type(x, g))
    per_sample = int(np.prod(g.shape[2:])) * x.shape[1] * int(np.prod(k))
    g_axes = [0] + list(range(2, 2 + nd))
    v_axes = [0] + list(range(2, 2 + nd))
    for sl in _chunks(x.shape[0], per_sample):
        cols = _windows(x[sl], k, stride)
        out += np.tensordot(g[sl], cols, axes=(g_axes, v_axes))
    return out


def _check(x: Tensor, w: Tensor, stride: int, transposed: bool) -> int:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    nd = w.ndim - 2
    if nd < 1 or nd > 3:
        raise ShapeError(f"kernel must have 1-3 spatial axes, got shape {w.shape}")
    if x.ndim != nd + 2:
        raise ShapeError(f"input rank {x.ndim} does not match kernel rank {w.ndim}")
    if x.shape[1] != w.shape[0 if transposed else 1]:
        raise ShapeError(f"channel mismatch: input {x.shape}, kernel {w.shape}")
    if not transposed and any(kk > s for kk, s in zip(w.shape[2:], x.shape[2:])):
        raise ShapeError(f"kernel {w.shape[2:]} larger than input {x.shape[2:]}")
    return nd


def _bias_shape(nd: int) -> tuple[int, ...]:
    return (1, -1) + (1,) * nd


def conv_forward(x, kernel, stride: int = 1, bias=None) -> Tensor:
    x, kernel = as_tensor(x), as_tensor(kernel)
    nd = _check(x, kernel, stride, transposed=False)
    k = kernel.shape[2:]
    out = correlate(x.data, kernel.data, stride)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({kernel.shape[0]},)")
        out += bias.data.reshape(_bias_shape(nd))
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def grad_fn(g):
        gx = scatter(g, kernel.data, stride, x.shape[2:]) if x.requires_grad else None
        gw = weight_grad(x.data, g, stride, k) if kernel.requires_grad else None
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0,) + _spatial_axes(nd)) if bias.requires_grad else None,)
        return grads

    return record(out, parents, grad_fn, "conv")


def conv_transpose_forward(x, kernel, stride: int = 1, bias=None) -> Tensor:
    """Fractionally-strided convolution; output extent ``(in - 1) * stride + k`` per axis."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    nd = _check(x, kernel, stride, transposed=True)
    k = kernel.shape[2:]
    out_sp = tuple((s - 1) * stride + kk for s, kk in zip(x.shape[2:], k))
    out = scatter(x.data, kernel.data, stride, out_sp)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} != ({kernel.shape[1]},)")
        out += bias.data.reshape(_bias_shape(nd))
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def grad_fn(g):
        gx = correlate(g, kernel.data, stride) if x.requires_grad else None
        gw = weight_grad(g, x.data, stride, k) if kernel.requires_grad else None
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0,) + _spatial_axes(nd)) if bias.requires_grad else None,)
        return grads

    return record(out, parents, grad_fn, "conv_transpose")


def conv_output_shape(spatial, k: int, stride: int) -> tuple[int, ...]:
    out = tuple((s - k) // stride + 1 for s in spatial)
    if any(o < 1 for o in out):
        raise ShapeError(f"kernel {k} does not fit input extent {tuple(spatial)}")
    return out


def conv_transpose_output_shape(spatial, k: int, stride: int) -> tuple[int, ...]:
    return tuple((s - 1) * stride + k for s in spatial)
