"""Convolution and pooling on NCHW arrays (a single CHW image also works)."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DimensionError, Tensor, as_tensor, make_result


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, kernels, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Zero-padded cross-correlation.

    Args:
        x: ``C_in x H x W`` or ``N x C_in x H x W``.
        kernels: ``C_out x C_in x kh x kw``.
        bias: optional ``C_out`` vector.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >=1 and padding >=0, got {stride}, {padding}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d: expected CHW/NCHW input and OIHW kernels, got {x.shape} and {kernels.shape}")
    n, c, h, w = xd.shape
    o, ck, kh, kw = kernels.shape
    if ck != c:
        raise DimensionError(f"conv2d: input channels {c} do not match kernels {kernels.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows: (n, ho, wo); cols: (c, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernels.data.reshape(o, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
    if single:
        out = out[0]

    def grad_fn(g):
        g4 = g[None] if single else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (g2.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            if single:
                gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_result(out, parents, grad_fn, "conv2d")


def _pool_view(xd: np.ndarray, size: int, op: str) -> np.ndarray:
    *lead, h, w = xd.shape
    if h % size or w % size:
        raise DimensionError(f"{op}: spatial dims {h}x{w} not divisible by {size}")
    return xd.reshape(*lead, h // size, size, w // size, size)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes.

    The gradient goes to the first maximal element of each window.
    """
    x = as_tensor(x)
    v = _pool_view(x.data, size, "max_pool2d")
    nd = v.ndim
    # (..., h2, w2, size*size)
    win = np.moveaxis(v, nd - 3, nd - 2).reshape(*v.shape[:-3], v.shape[-2], size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gv = np.moveaxis(gw.reshape(*v.shape[:-3], v.shape[-2], size, size), nd - 2, nd - 3)
        return (gv.reshape(x.shape),)

    return make_result(out, (x,), grad_fn, "max_pool2d")


def avg_pool2d(x, size: int = 2) -> Tensor:
    x = as_tensor(x)
    v = _pool_view(x.data, size, "avg_pool2d")
    out = v.mean(axis=(-3, -1))

    def grad_fn(g):
        full = np.broadcast_to(g[..., :, None, :, None] / (size * size), v.shape)
        return (np.array(full).reshape(x.shape),)

    return make_result(out, (x,), grad_fn, "avg_pool2d")
