"""Convolution, pooling and normalization ops with hand-written backward passes."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _wrap, as_tensor


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> tuple[np.ndarray, int, int]:
    """(N, C, H, W) padded input -> (N, Ho*Wo, C*kh*kw) patch matrix."""
    n, c, h, w = xp.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"kernel ({kh}, {kw}) larger than padded input {xp.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add a patch matrix back onto a (N, C, H, W) canvas."""
    n, c, h, w = shape
    out = np.zeros(shape, dtype=cols.dtype)
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += blocks[:, :, i, j]
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """2D cross-correlation.

    ``weight`` is (O, C, kh, kw), or (N, O, C, kh, kw) for per-sample kernels
    produced by another network.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (N, C, H, W) input, got shape {x.shape}")
    per_sample = weight.ndim == 5
    o, c, kh, kw = weight.shape[-4:]
    if x.shape[1] != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if per_sample and weight.shape[0] != x.shape[0]:
        raise ValueError(f"per-sample weight batch {weight.shape} does not match input {x.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols, ho, wo = _im2col(xp, kh, kw, sh, sw)
    wm = weight.data.reshape(weight.shape[0] if per_sample else 1, o, c * kh * kw)
    out = np.matmul(cols, wm.transpose(0, 2, 1))  # (N, P, O)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        # (O,) shared bias or (N, O) per-sample bias
        out = out + (bias.data[None, None, :] if bias.ndim == 1 else bias.data[:, None, :])
        parents.append(bias)
    n = x.shape[0]
    result = out.transpose(0, 2, 1).reshape(n, o, ho, wo)

    def bw(g):
        gm = g.reshape(n, o, ho * wo).transpose(0, 2, 1)  # (N, P, O)
        dx = dw = None
        if x.requires_grad:
            dcols = np.matmul(gm, wm)  # (N, P, CK)
            dxp = _col2im(dcols, xp.shape, kh, kw, sh, sw, ho, wo)
            dx = dxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]] if (ph or pw) else dxp
        if weight.requires_grad:
            if per_sample:
                dw = np.matmul(gm.transpose(0, 2, 1), cols).reshape(n, o, c, kh, kw)
            else:
                # one GEMM over the flattened batch instead of N small ones
                dw = (gm.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)).reshape(o, c, kh, kw)
        grads = [dx, dw]
        if bias is not None:
            grads.append(gm.sum(axis=1) if bias.ndim == 2 else gm.sum(axis=(0, 1)))
        return tuple(grads)

    return _wrap(np.ascontiguousarray(result), parents, bw)


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """1D cross-correlation on (N, C, L) input with (O, C, k) weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3:
        raise ValueError(f"conv1d expects (N, C, L) input, got shape {x.shape}")
    if weight.ndim != 3 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"conv1d shape mismatch: input {x.shape} vs weight {weight.shape}")
    x4 = x.reshape(x.shape[0], x.shape[1], 1, x.shape[2])
    w4 = weight.reshape(weight.shape[0], weight.shape[1], 1, weight.shape[2])
    y = conv2d(x4, w4, bias, stride=(1, stride), padding=(0, padding))
    return y.reshape(y.shape[0], y.shape[1], y.shape[3])


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise ValueError(f"conv_transpose2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    full_shape = (n, cout, (h - 1) * sh + kh, (w - 1) * sw + kw)
    xm = x.data.transpose(0, 2, 3, 1).reshape(n, h * w, cin)
    wm = weight.data.reshape(cin, cout * kh * kw)
    cols = xm @ wm
    full = _col2im(cols, full_shape, kh, kw, sh, sw, h, w)
    out = full[:, :, ph : full_shape[2] - ph, pw : full_shape[3] - pw]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else g
        gcols, _, _ = _im2col(gp, kh, kw, sh, sw)  # (N, H*W, Cout*kh*kw)
        dx = (gcols @ wm.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        dw = np.einsum("npi,npk->ik", xm, gcols).reshape(cin, cout, kh, kw)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _wrap(np.ascontiguousarray(out), parents, bw)


def linear(x, weight, bias=None) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    y = x @ weight.T
    return y + bias if bias is not None else y


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d needs spatial size divisible by {k}, got {x.shape}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _wrap(out, (x,), bw)


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Parameter-free normalization over the spatial axes of (N, C, ...)."""
    x = as_tensor(x)
    axes = tuple(range(2, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _wrap(y.astype(x.dtype, copy=False), (x,), bw)


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an optional affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    out = _wrap(y.astype(x.dtype, copy=False), (x,), bw)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def upsample_nearest(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)

    def bw(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // k, k, w // k, k).sum(axis=(3, 5)),)

    return _wrap(out, (x,), bw)


__all__ = [
    "conv1d",
    "conv2d",
    "conv_transpose2d",
    "linear",
    "avg_pool2d",
    "instance_norm",
    "layer_norm",
    "upsample_nearest",
]
