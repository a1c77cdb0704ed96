# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels for the convolution hot path.

Both kernels mirror `fna.kernels` pure-numpy semantics exactly, including
the accumulation order of col2im (kernel offsets visited in row-major
order per destination element), so outputs are bitwise identical across
backends.
"""

cimport cython

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] xp, int k, int stride, int dilation,
           floating[:, :, ::1] cols):
    """Gather k*k patches of the padded input into a column matrix.

    xp:   [N, C, Hp, Wp] padded input
    cols: [N, C*k*k, out_h*out_w] output buffer, overwritten
    """
    cdef Py_ssize_t n_batch = xp.shape[0]
    cdef Py_ssize_t channels = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2]
    cdef Py_ssize_t wp = xp.shape[3]
    cdef Py_ssize_t out_h = (hp - dilation * (k - 1) - 1) // stride + 1
    cdef Py_ssize_t out_w = (wp - dilation * (k - 1) - 1) // stride + 1
    cdef Py_ssize_t n, c, a, b, i, j, row, col

    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for a in range(k):
                    for b in range(k):
                        row = (c * k + a) * k + b
                        for i in range(out_h):
                            for j in range(out_w):
                                col = i * out_w + j
                                cols[n, row, col] = xp[
                                    n, c, a * dilation + i * stride,
                                    b * dilation + j * stride]
    return 0


def col2im(floating[:, :, ::1] cols, int k, int stride, int dilation,
           floating[:, :, :, ::1] xp):
    """Scatter-add a column matrix back onto the padded input layout.

    xp must be zero-initialized by the caller; overlapping patches
    accumulate in kernel-offset order.
    """
    cdef Py_ssize_t n_batch = xp.shape[0]
    cdef Py_ssize_t channels = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2]
    cdef Py_ssize_t wp = xp.shape[3]
    cdef Py_ssize_t out_h = (hp - dilation * (k - 1) - 1) // stride + 1
    cdef Py_ssize_t out_w = (wp - dilation * (k - 1) - 1) // stride + 1
    cdef Py_ssize_t n, c, a, b, i, j, row, col

    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for a in range(k):
                    for b in range(k):
                        row = (c * k + a) * k + b
                        for i in range(out_h):
                            for j in range(out_w):
                                col = i * out_w + j
                                xp[n, c, a * dilation + i * stride,
                                   b * dilation + j * stride] += cols[n, row, col]
    return 0
