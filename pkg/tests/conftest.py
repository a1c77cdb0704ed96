"""Shared test oracles: central finite differences and a loop-nest
convolution reference. Both stay independent of the library code paths
they check."""

import numpy as np
import pytest

from fna.tensor import Tensor


def gradcheck(build_loss, params, h=1e-5, rtol=1e-4, atol=1e-7):
    """Compare analytic gradients of a scalar loss against central
    finite differences, parameter by parameter. build_loss must rebuild
    the forward graph from the live parameter tensors on every call."""
    for p in params:
        p.grad = None
    loss = build_loss()
    assert loss.ndim == 0, "gradcheck needs a scalar loss"
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    for p, g in zip(params, analytic):
        flat = p.data.ravel()
        assert flat.base is p.data or flat is p.data  # in-place nudges must alias
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss().data)
            flat[i] = orig - h
            down = float(build_loss().data)
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        numeric = numeric.reshape(p.data.shape)
        denom = np.maximum(np.abs(g), np.abs(numeric))
        mask = denom > atol
        if mask.any():
            rel = np.abs(g - numeric)[mask] / denom[mask]
            assert rel.max() < rtol, f"gradient mismatch: max rel err {rel.max():.3e}"
        else:
            np.testing.assert_allclose(g, numeric, atol=atol)


def conv2d_oracle(x, w, stride=1, padding=0, dilation=1, groups=1):
    """Direct loop-nest grouped cross-correlation."""
    n, c_in, h, width = x.shape
    c_out, c_in_g, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out_w = (width + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, c_out, out_h, out_w), dtype=x.dtype)
    og = c_out // groups
    for ni in range(n):
        for co in range(c_out):
            gi = co // og
            for i in range(out_h):
                for j in range(out_w):
                    acc = 0.0
                    for ci in range(c_in_g):
                        for a in range(k):
                            for b in range(k):
                                acc += (xp[ni, gi * c_in_g + ci,
                                           i * stride + a * dilation,
                                           j * stride + b * dilation]
                                        * w[co, ci, a, b])
                    out[ni, co, i, j] = acc
    return out


def conv_madds_oracle(x_shape, w_shape, stride=1, padding=0, dilation=1, groups=1):
    """Count multiplies of the conv loop nest (one MAdd per multiply)."""
    n, c_in, h, width = x_shape
    c_out, c_in_g, k, _ = w_shape
    out_h = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out_w = (width + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    return out_h * out_w * c_out * c_in_g * k * k


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)
