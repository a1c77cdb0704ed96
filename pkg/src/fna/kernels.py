"""Convolution hot-path kernels with a compiled core and a numpy fallback.

The heavy inner loops of every convolution are the patch gather (im2col)
and the gradient scatter (col2im). Both exist twice:

* a Cython extension (``fna._conv_cy``), built at install time when a
  compiler is available;
* a pure-numpy implementation in this module.

The backend is chosen once at import. Set ``FNA_KERNEL_BACKEND=numpy`` or
``=cython`` to force one; forcing cython raises if the extension is
missing. The two backends are bitwise-identical: im2col is a pure gather
and col2im accumulates kernel offsets in the same row-major order per
destination element, so swapping backends never changes numerics.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from fna import _conv_cy
except ImportError:
    _conv_cy = None

_forced = os.environ.get("FNA_KERNEL_BACKEND")
if _forced not in (None, "", "auto", "cython", "numpy"):
    raise ValueError(f"unknown FNA_KERNEL_BACKEND {_forced!r}")
if _forced == "cython" and _conv_cy is None:
    raise ImportError("FNA_KERNEL_BACKEND=cython but the compiled extension is not installed")

BACKEND = "numpy" if _forced == "numpy" or _conv_cy is None else "cython"


def conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    """Output extent of one spatial dimension."""
    eff_k = dilation * (k - 1) + 1
    return (size + 2 * padding - eff_k) // stride + 1


def _im2col_numpy(xp: np.ndarray, k: int, stride: int, dilation: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    out_h = (hp - dilation * (k - 1) - 1) // stride + 1
    out_w = (wp - dilation * (k - 1) - 1) // stride + 1
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, out_h, out_w),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(n, c * k * k, out_h * out_w)


def _col2im_numpy(cols: np.ndarray, xp_shape, k: int, stride: int, dilation: int) -> np.ndarray:
    n, c, hp, wp = xp_shape
    out_h = (hp - dilation * (k - 1) - 1) // stride + 1
    out_w = (wp - dilation * (k - 1) - 1) // stride + 1
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    patches = cols.reshape(n, c, k, k, out_h, out_w)
    for a in range(k):
        for b in range(k):
            xp[:, :,
               a * dilation: a * dilation + out_h * stride: stride,
               b * dilation: b * dilation + out_w * stride: stride] += patches[:, :, a, b]
    return xp


def im2col(xp: np.ndarray, k: int, stride: int, dilation: int) -> np.ndarray:
    """[N,C,Hp,Wp] padded input -> [N, C*k*k, out_h*out_w] columns."""
    if BACKEND == "numpy":
        return _im2col_numpy(xp, k, stride, dilation)
    n, c, hp, wp = xp.shape
    out_h = (hp - dilation * (k - 1) - 1) // stride + 1
    out_w = (wp - dilation * (k - 1) - 1) // stride + 1
    cols = np.empty((n, c * k * k, out_h * out_w), dtype=xp.dtype)
    _conv_cy.im2col(np.ascontiguousarray(xp), k, stride, dilation, cols)
    return cols


def col2im(cols: np.ndarray, xp_shape, k: int, stride: int, dilation: int) -> np.ndarray:
    """Scatter-add columns back to the padded input layout (gradient of im2col)."""
    if BACKEND == "numpy":
        return _col2im_numpy(cols, xp_shape, k, stride, dilation)
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    _conv_cy.col2im(np.ascontiguousarray(cols), k, stride, dilation, xp)
    return xp
