"""Convolution and normalisation primitives on NCHW tensors."""

from __future__ import annotations

import numpy as np

from .engine import Tensor, TensorError, _make, _unbroadcast, as_tensor


def _gather_patches(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Channels-last (N, Hp, Wp, C) -> (N, OH, OW, k, k, C) patch array."""
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, oh, ow, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    return cols


def _scatter_patches(cols: np.ndarray, shape: tuple, k: int, stride: int) -> np.ndarray:
    """Adjoint of ``_gather_patches`` into channels-last ``shape``; overlaps are summed."""
    n, oh, ow = cols.shape[:3]
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols[:, :, :, i, j, :]
    return out


def _nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def conv_output_size(size: int, k: int, stride: int = 1, padding: int = 0) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise TensorError(f"kernel {k} larger than padded input {size + 2 * padding}")
    return span // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (N, C, H, W) with weight (O, C, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise TensorError("conv2d expects 4-d input and weight")
    n, c, h, w = x.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise TensorError(f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    # weight rows ordered (ky, kx, c) to match the channels-last patches
    wm = weight.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    xt = _nhwc(x.data)

    if k == 1 and stride == 1 and padding == 0:
        cols = xt.reshape(n * h * w, c)
        xp_shape = None
    else:
        xp = np.pad(xt, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xt
        xp_shape = xp.shape
        cols = _gather_patches(xp, k, stride, oh, ow).reshape(n * oh * ow, k * k * c)
    out = cols @ wm.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gw = (gm.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gcols = gm @ wm
        if xp_shape is None:
            gx = gcols.reshape(n, h, w, c)
        else:
            gx = _scatter_patches(gcols.reshape(n, oh, ow, k, k, c), xp_shape, k, stride)
            if padding:
                gx = gx[:, padding:padding + h, padding:padding + w, :]
        gx = gx.transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bwd, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Transposed convolution; weight is (C_in, C_out, k, k), no padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    cw, o, k, _ = weight.shape
    if cw != c:
        raise TensorError(f"conv_transpose2d weight {weight.shape} incompatible with input {x.shape}")
    oh, ow = (h - 1) * stride + k, (w - 1) * stride + k
    wm = weight.data.transpose(0, 2, 3, 1).reshape(c, k * k * o)
    xm = _nhwc(x.data).reshape(n * h * w, c)
    cols = (xm @ wm).reshape(n, h, w, k, k, o)
    out = np.ascontiguousarray(_scatter_patches(cols, (n, oh, ow, o), k, stride).transpose(0, 3, 1, 2))
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)

    def bwd(g):
        gcols = _gather_patches(_nhwc(g), k, stride, h, w).reshape(n * h * w, k * k * o)
        gx = (gcols @ wm.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        gw = (xm.T @ gcols).reshape(c, k, k, o).transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bwd, "conv_transpose2d")


def _channel_view(arr: np.ndarray, ndim: int) -> np.ndarray:
    return arr.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over all axes except 1.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0,) + tuple(range(2, x.ndim))
    gd = _channel_view(gamma.data, x.ndim)
    if training:
        count = x.size // x.shape[1]
        if count < 2:
            raise TensorError("batch_norm in training mode needs more than one value per channel")
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * count / (count - 1)

        def bwd(g):
            dxhat = g * gd
            dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = 1.0 / np.sqrt(_channel_view(running_var, x.ndim) + eps)
        xhat = (x.data - _channel_view(running_mean, x.ndim)) * inv

        def bwd(g):
            return g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * gd + _channel_view(beta.data, x.ndim)).astype(x.dtype)
    return _make(out, (x, gamma, beta), bwd, "batch_norm")


def layer_norm(x, axes, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise over ``axes`` independently for every other index.

    ``gamma`` and ``beta`` must broadcast against x when given.
    """
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in ((axes,) if isinstance(axes, int) else axes))
    count = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.sum(axis=axes, keepdims=True) / count
    xc = x.data - mu
    var = (xc * xc).sum(axis=axes, keepdims=True) / count
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    inputs = [x]
    out = xhat
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        out = xhat * gamma.data + beta.data
        inputs += [gamma, beta]
    gd = gamma.data if gamma is not None else None

    def bwd(g):
        dxhat = g * gd if gd is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        if gd is None:
            return (dx,)
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, gd.shape)

    return _make(out.astype(x.dtype), tuple(inputs), bwd, "layer_norm")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise TensorError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
