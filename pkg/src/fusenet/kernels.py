"""Raw numpy kernels for stride-1, zero "same"-padded 2-D convolution.

Three forward routes share one contract (NCHW input, OIkk kernel, per-output
bias):

* :func:`conv2d_naive` -- six nested Python loops, the reference oracle.
* :func:`conv2d_direct` -- one channel contraction per kernel tap.
* :func:`conv2d_im2col` -- a single GEMM over a patch matrix.

The backward kernels mirror the im2col route.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def check_conv_shapes(x_shape, w_shape, b_shape=None) -> int:
    """Validate shapes and return the padding ``(k - 1) // 2``."""
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x_shape} and {w_shape}")
    cout, cin, kh, kw = w_shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}")
    if x_shape[1] != cin:
        raise ValueError(f"channel mismatch: input has {x_shape[1]}, kernel expects {cin}")
    if b_shape is not None and tuple(b_shape) != (cout,):
        raise ValueError(f"bias shape {tuple(b_shape)} does not match {cout} output channels")
    return (kh - 1) // 2


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Reference cross-correlation written as plain loops. Slow; tests only."""
    pad = check_conv_shapes(x.shape, w.shape, None if b is None else b.shape)
    n_batch, cin, height, width = x.shape
    cout, _, k, _ = w.shape
    out = np.zeros((n_batch, cout, height, width), dtype=np.result_type(x, w))
    for n in range(n_batch):
        for o in range(cout):
            for i in range(height):
                for j in range(width):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for di in range(k):
                            ii = i + di - pad
                            if ii < 0 or ii >= height:
                                continue
                            for dj in range(k):
                                jj = j + dj - pad
                                if 0 <= jj < width:
                                    acc += float(x[n, c, ii, jj]) * float(w[o, c, di, dj])
                    out[n, o, i, j] = acc
    return out


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Accumulate one ``(Cout, Cin)`` contraction per kernel tap."""
    pad = check_conv_shapes(x.shape, w.shape, None if b is None else b.shape)
    n_batch, _, height, width = x.shape
    cout, _, k, _ = w.shape
    xp = _pad(x, pad)
    out = np.zeros((n_batch, cout, height, width), dtype=np.result_type(x, w))
    for di in range(k):
        for dj in range(k):
            window = xp[:, :, di:di + height, dj:dj + width]
            out += np.einsum("oc,nchw->nohw", w[:, :, di, dj], window, optimize=True)
    if b is not None:
        out += b.reshape(1, cout, 1, 1)
    return out


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix of shape ``(Cin*k*k, N*H*W)`` for a same-padded input."""
    pad = (k - 1) // 2
    n_batch, cin, height, width = x.shape
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(cin, n_batch * height * width)
    windows = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))  # N,C,H,W,k,k
    return windows.transpose(1, 4, 5, 0, 2, 3).reshape(cin * k * k, n_batch * height * width)


def col2im(cols: np.ndarray, x_shape, k: int) -> np.ndarray:
    """Scatter-add the adjoint of :func:`im2col` back to input layout."""
    pad = (k - 1) // 2
    n_batch, cin, height, width = x_shape
    if k == 1:
        return cols.reshape(cin, n_batch, height, width).transpose(1, 0, 2, 3)
    cols = cols.reshape(cin, k, k, n_batch, height, width)
    out = np.zeros((n_batch, cin, height + 2 * pad, width + 2 * pad), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + height, dj:dj + width] += cols[:, di, dj].transpose(1, 0, 2, 3)
    return out[:, :, pad:pad + height, pad:pad + width]


def conv2d_im2col(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                  cols: np.ndarray | None = None) -> np.ndarray:
    check_conv_shapes(x.shape, w.shape, None if b is None else b.shape)
    n_batch, _, height, width = x.shape
    cout, _, k, _ = w.shape
    if cols is None:
        cols = im2col(x, k)
    out = w.reshape(cout, -1) @ cols
    if b is not None:
        out += b.reshape(cout, 1)
    return out.reshape(cout, n_batch, height, width).transpose(1, 0, 2, 3)


def conv2d_backward(grad_out: np.ndarray, x_shape, w: np.ndarray, cols: np.ndarray):
    """Gradients ``(dx, dw, db)`` given the forward patch matrix ``cols``."""
    cout, _, k, _ = w.shape
    g = grad_out.transpose(1, 0, 2, 3).reshape(cout, -1)
    dw = (g @ cols.T).reshape(w.shape)
    db = g.sum(axis=1)
    dx = col2im(w.reshape(cout, -1).T @ g, x_shape, k)
    return dx, dw, db
