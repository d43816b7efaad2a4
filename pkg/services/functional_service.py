"""
Neural-network kernels on top of ``tensor_service``: convolution, pooling,
projections, normalization, activations and bilinear resampling.

Conventions: zero padding, floor division for output sizes, layer/batch norm
eps 1e-5, exact (erf) GELU, bilinear with align_corners=False.
"""
import math
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from models.errors import DimensionError, UsageError
from services.tensor_service import Tensor

NORM_EPS = 1e-5


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - kernel + 2 * padding) // stride + 1


# convolution


def _windows(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """Strided view [N, C, H', W', k, k] of the padded input."""
    view = sliding_window_view(xp, (k, k), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :h_out, :w_out]


def _col2im(cols: np.ndarray, padded_shape: Tuple[int, ...], k: int, stride: int) -> np.ndarray:
    """Scatter-add window gradients [N, C, H', W', k, k] back onto the padded input."""
    _, _, h_out, w_out, _, _ = cols.shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += cols[:, :, :, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects x [N,C,H,W] and w [C_out,C_in/groups,k,k]",
                             {"x": list(x.shape), "w": list(w.shape)})
    if stride < 1 or padding < 0 or groups < 1:
        raise UsageError("conv2d needs stride >= 1, padding >= 0, groups >= 1",
                         {"stride": stride, "padding": padding, "groups": groups})
    n, c_in, h, wd = x.shape
    c_out, c_group, k, k2 = w.shape
    if k != k2 or k < 1:
        raise DimensionError("conv2d kernels must be square", {"w": list(w.shape)})
    if c_in % groups or c_out % groups or c_group != c_in // groups:
        raise DimensionError("channel counts do not match the group layout",
                             {"c_in": c_in, "c_out": c_out, "groups": groups, "w": list(w.shape)})
    if b is not None and b.shape != (c_out,):
        raise DimensionError("conv2d bias must be [C_out]", {"b": list(b.shape), "c_out": c_out})
    h_out = conv_output_size(h, k, stride, padding)
    w_out = conv_output_size(wd, k, stride, padding)
    if h_out < 1 or w_out < 1:
        raise DimensionError("conv2d output would be empty",
                             {"input": [h, wd], "kernel": k, "stride": stride, "padding": padding})

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    cols = _windows(xp, k, stride, h_out, w_out)
    depthwise = groups == c_in and c_group == 1 and c_out == c_in

    if groups == 1:
        out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    elif depthwise:
        out = np.zeros((n, c_out, h_out, w_out), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                out += cols[:, :, :, :, i, j] * w.data[None, :, 0, i, j, None, None]
    else:
        cols_g = cols.reshape(n, groups, c_group, h_out, w_out, k, k)
        w_g = w.data.reshape(groups, c_out // groups, c_group, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", cols_g, w_g, optimize=True).reshape(n, c_out, h_out, w_out)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def _backward(g):
        gx = gw = None
        if groups == 1:
            if w.requires_grad:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gcols = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
                gx = _col2im(gcols, xp.shape, k, stride)
        elif depthwise:
            gw = np.zeros_like(w.data)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, cols[:, :, :, :, i, j])
                    gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                        g * w.data[None, :, 0, i, j, None, None]
            gx = gxp
        else:
            g_g = g.reshape(n, groups, c_out // groups, h_out, w_out)
            cols_g = cols.reshape(n, groups, c_group, h_out, w_out, k, k)
            w_g = w.data.reshape(groups, c_out // groups, c_group, k, k)
            gw = np.einsum("ngohw,ngchwij->gocij", g_g, cols_g, optimize=True).reshape(w.shape)
            gcols = np.einsum("ngohw,gocij->ngchwij", g_g, w_g, optimize=True)
            gx = _col2im(gcols.reshape(n, c_in, h_out, w_out, k, k), xp.shape, k, stride)
        if gx is not None and padding:
            gx = gx[:, :, padding:padding + h, padding:padding + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, inputs, _backward, "conv2d")


# pooling and resampling


@lru_cache(maxsize=256)
def _pool_matrix(in_size: int, out_size: int, dtype: str) -> np.ndarray:
    m = np.zeros((out_size, in_size), dtype=dtype)
    for b in range(out_size):
        start = (b * in_size) // out_size
        end = -((-(b + 1) * in_size) // out_size)
        m[b, start:end] = 1.0 / (end - start)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def _interp_matrix(in_size: int, out_size: int, dtype: str) -> np.ndarray:
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str) -> Tensor:
    """out = rows @ x @ cols.T over the last two axes."""
    out = np.ascontiguousarray((rows @ x.data) @ cols.T)

    def _backward(g):
        return ((rows.T @ g) @ cols,)

    return Tensor._make(out, (x,), _backward, op)


def adaptive_avgpool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over adaptive bins [floor(b*H/out), ceil((b+1)*H/out))."""
    if x.ndim != 4:
        raise DimensionError("adaptive_avgpool2d expects [N,C,H,W]", {"shape": list(x.shape)})
    h, w = x.shape[2:]
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise DimensionError("pooled size must lie within the input size",
                             {"input": [h, w], "output": [out_h, out_w]})
    dtype = x.dtype.name
    return _separable(x, _pool_matrix(h, out_h, dtype), _pool_matrix(w, out_w, dtype), "adaptive_avgpool2d")


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError("resize_bilinear expects [N,C,H,W]", {"shape": list(x.shape)})
    if out_h < 1 or out_w < 1:
        raise DimensionError("resize target must be positive", {"output": [out_h, out_w]})
    h, w = x.shape[2:]
    dtype = x.dtype.name
    return _separable(x, _interp_matrix(h, out_h, dtype), _interp_matrix(w, out_w, dtype), "bilinear")


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise UsageError("upsample factor must be >= 1", {"factor": factor})
    if factor == 1:
        return x
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


# projections and normalization


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError("linear inner dimensions differ", {"x": list(x.shape), "w": list(w.shape)})
    d_in, d_out = w.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, d_out)

    def _backward(g):
        g2 = g.reshape(-1, d_out)
        grads = [(g2 @ w.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, inputs, _backward, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), _backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("layer_norm affine size must match the last axis",
                             {"x": list(x.shape), "gamma": list(gamma.shape), "beta": list(beta.shape)})
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def _backward(g):
        reduce_axes = tuple(range(x.ndim - 1))
        dxhat = g * gamma.data
        gx = inv_std / c * (c * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return Tensor._make(out, (x, gamma, beta), _backward, "layer_norm")


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = NORM_EPS) -> Tensor:
    """Per-channel normalization; running buffers are updated in place while training."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise DimensionError("batch_norm2d expects [N,C,H,W] with [C] affine",
                             {"x": list(x.shape), "gamma": list(gamma.shape)})
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def _backward(g):
        dxhat = g * gamma.data.reshape(shape)
        if training:
            m = x.size // x.shape[1]
            gx = inv_std.reshape(shape) / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                               - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = dxhat * inv_std.reshape(shape)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._make(out, (x, gamma, beta), _backward, "batch_norm2d")


# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    out = (x.data * cdf).astype(x.dtype)

    def _backward(g):
        pdf = np.exp(-0.5 * x.data ** 2) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return Tensor._make(out, (x,), _backward, "gelu")
