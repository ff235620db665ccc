"""Pure-numpy im2col/col2im used when the compiled kernels are unavailable."""

from __future__ import annotations

import numpy as np


def im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Lower (B, C, H, W) into patch columns (B, C*kh*kw, oh*ow).

    Column k*oh*ow + p holds the kernel element k of output position p, so
    a (cout, C*kh*kw) weight matrix times the columns is the convolution.
    """
    bsz, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]             # (B, C, oh, ow, kh, kw)
    cols = windows.transpose(0, 1, 4, 5, 2, 3)              # (B, C, kh, kw, oh, ow)
    return np.ascontiguousarray(cols).reshape(bsz, c * kh * kw, oh * ow)


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add columns back onto the input grid."""
    bsz, c, h, w = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = cols.reshape(bsz, c, kh, kw, oh, ow)
    out = np.zeros(x_shape, dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                cols[:, :, ki, kj]
    return out
