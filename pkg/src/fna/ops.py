"""Differentiable operations over `fna.tensor.Tensor`.

Covers exactly what the adaptation pipeline needs: grouped/depthwise
convolution, batch norm with controllable statistics updates, the block
glue (relu6, add, linear, pooling, nearest upsampling, softmax
cross-entropy), and the small scalar algebra used by the search loss
(softmax, weighted sums, log10, constant contractions).

Shapes are strict [N,C,H,W]; there is no implicit broadcasting beyond
per-channel affine parameters and the linear bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fna import kernels
from fna.errors import ShapeError
from fna.tensor import Tensor


@dataclass
class ConvParams:
    """Weights and hyperparameters of one grouped 2-d convolution.

    weight is laid out [C_out, C_in/groups, k, k]; k must be odd so the
    central region of a kernel is well defined for remapping.
    """

    weight: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.ndim}")
        k, k2 = self.weight.shape[2], self.weight.shape[3]
        if k != k2:
            raise ShapeError(f"conv kernel must be square, got {k}x{k2}")
        if k % 2 == 0:
            raise ShapeError(f"conv kernel size must be odd, got {k}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0 or self.groups < 1:
            raise ShapeError("stride/dilation must be >= 1, padding >= 0, groups >= 1")
        if self.weight.shape[0] % self.groups != 0:
            raise ShapeError(
                f"out_channels {self.weight.shape[0]} not divisible by groups {self.groups}")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups


@dataclass
class BNParams:
    """Per-channel batch-norm state.

    identity_mode bypasses normalization entirely (used by the
    function-preservation checks). frozen switches to inference
    behaviour: running statistics are used, never updated, and gamma/beta
    receive no gradients.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    identity_mode: bool = False
    frozen: bool = False

    def __post_init__(self):
        n = self.gamma.shape[0]
        for name, v in (("beta", self.beta.data), ("running_mean", self.running_mean),
                        ("running_var", self.running_var)):
            if v.shape != (n,):
                raise ShapeError(f"BN {name} has shape {v.shape}, expected ({n},)")
        if np.any(self.running_var < 0):
            raise ValueError("BN running_var must be elementwise non-negative")
        if not (0.0 < self.momentum < 1.0):
            raise ValueError(f"BN momentum must lie in (0,1), got {self.momentum}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BNParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Grouped 2-d cross-correlation, differentiable in input and weight."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4 [N,C,H,W], got rank {x.ndim}")
    n, c_in, h, w = x.shape
    c_out, c_in_g, k, _ = p.weight.shape
    g = p.groups
    if c_in_g * g != c_in:
        raise ShapeError(
            f"input channel dimension is {c_in} but weight expects {c_in_g * g} "
            f"(C_in/groups={c_in_g}, groups={g})")
    out_h = kernels.conv_out_size(h, k, p.stride, p.padding, p.dilation)
    out_w = kernels.conv_out_size(w, k, p.stride, p.padding, p.dilation)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv output spatial size {out_h}x{out_w} < 1 for input {h}x{w}, "
            f"k={k}, stride={p.stride}, padding={p.padding}, dilation={p.dilation}")
    if x.dtype != p.weight.dtype:
        raise ShapeError(f"input dtype {x.dtype} != weight dtype {p.weight.dtype}")

    pad = p.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = kernels.im2col(xp, k, p.stride, p.dilation)          # [N, C_in*k*k, L]
    colsg = cols.reshape(n, g, c_in_g * k * k, out_h * out_w)   # [N, g, K, L]
    wg = p.weight.data.reshape(g, c_out // g, c_in_g * k * k)   # [g, O, K]
    out = np.matmul(wg[None], colsg)                            # [N, g, O, L]
    y = out.reshape(n, c_out, out_h, out_w)

    weight = p.weight
    requires = x.requires_grad or weight.requires_grad

    def backward(grad: np.ndarray):
        go = grad.reshape(n, g, c_out // g, out_h * out_w)
        if weight.requires_grad:
            dw = np.matmul(go, colsg.swapaxes(2, 3)).sum(axis=0)
            weight.accumulate_grad(dw.reshape(weight.shape))
        if x.requires_grad:
            dcols = np.matmul(wg.swapaxes(1, 2)[None], go)
            dxp = kernels.col2im(dcols.reshape(n, c_in * k * k, -1), xp.shape,
                                 k, p.stride, p.dilation)
            dx = dxp[:, :, pad: pad + h, pad: pad + w] if pad else dxp
            x.accumulate_grad(dx)

    return Tensor.from_op(y, (x, weight), backward, requires)


def depthwise_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Per-channel spatial convolution: groups == C_in == C_out."""
    c_in = x.shape[1] if x.ndim == 4 else -1
    if p.groups != c_in or p.out_channels != c_in:
        raise ShapeError(
            f"depthwise conv requires groups == C_in == C_out, got groups={p.groups}, "
            f"C_in={c_in}, C_out={p.out_channels}")
    return conv2d(x, p)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, bn: BNParams, training: bool, update_stats: bool = True) -> Tensor:
    """Channel-wise normalization y = gamma*(x-mu)/sqrt(var+eps) + beta.

    training mode normalizes with batch statistics and (when
    update_stats) folds them into the running ones with the configured
    momentum; otherwise the running statistics are used. A frozen BN
    always behaves as inference regardless of `training`.
    """
    if bn.identity_mode:
        return x
    if x.ndim != 4:
        raise ShapeError(f"batch_norm input must be rank 4, got rank {x.ndim}")
    c = x.shape[1]
    if c != bn.channels:
        raise ShapeError(f"batch_norm channel dimension is {c}, parameters have {bn.channels}")

    use_batch_stats = training and not bn.frozen
    if use_batch_stats:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise FloatingPointError("non-finite batch statistics in batch_norm")
        if update_stats:
            m = bn.momentum
            bn.running_mean = ((1.0 - m) * bn.running_mean + m * mu).astype(bn.running_mean.dtype)
            bn.running_var = ((1.0 - m) * bn.running_var + m * var).astype(bn.running_var.dtype)
    else:
        mu = bn.running_mean.astype(x.dtype)
        var = bn.running_var.astype(x.dtype)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise FloatingPointError("non-finite running statistics in batch_norm")

    inv_std = 1.0 / np.sqrt(var + np.asarray(bn.eps, dtype=x.dtype))
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = bn.gamma.data[None, :, None, None] * xhat + bn.beta.data[None, :, None, None]

    gamma, beta = bn.gamma, bn.beta
    affine_grads = not bn.frozen
    requires = x.requires_grad or (affine_grads and (gamma.requires_grad or beta.requires_grad))
    m_count = x.shape[0] * x.shape[2] * x.shape[3]

    def backward(grad: np.ndarray):
        if affine_grads:
            if gamma.requires_grad:
                gamma.accumulate_grad((grad * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta.accumulate_grad(grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = grad * gamma.data[None, :, None, None]
            if use_batch_stats:
                # mu and var are functions of x: full coupled derivative
                sum_g = gxhat.sum(axis=(0, 2, 3))
                sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))
                dx = (inv_std[None, :, None, None] / m_count) * (
                    m_count * gxhat
                    - sum_g[None, :, None, None]
                    - xhat * sum_gx[None, :, None, None])
            else:
                dx = gxhat * inv_std[None, :, None, None]
            x.accumulate_grad(dx)

    return Tensor.from_op(y, (x, gamma, beta), backward, requires)


# ---------------------------------------------------------------------------
# block glue
# ---------------------------------------------------------------------------

def relu6(x: Tensor) -> Tensor:
    y = np.minimum(np.maximum(x.data, 0), np.asarray(6, dtype=x.dtype))

    def backward(grad: np.ndarray):
        if x.requires_grad:
            mask = (x.data > 0) & (x.data < 6)
            x.accumulate_grad(grad * mask)

    return Tensor.from_op(y, (x,), backward, x.requires_grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add requires equal shapes, got {a.shape} and {b.shape}")
    y = a.data + b.data

    def backward(grad: np.ndarray):
        if a.requires_grad:
            a.accumulate_grad(grad)
        if b.requires_grad:
            b.accumulate_grad(grad)

    return Tensor.from_op(y, (a, b), backward, a.requires_grad or b.requires_grad)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x [N,F] @ weight.T [F,O] (+ bias [O])."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.ndim}-d and {weight.ndim}-d")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear feature dimension {x.shape[1]} != weight in-features {weight.shape[1]}")
    y = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
        y = y + bias.data

    prev = (x, weight) if bias is None else (x, weight, bias)

    def backward(grad: np.ndarray):
        if x.requires_grad:
            x.accumulate_grad(grad @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(grad.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(grad.sum(axis=0))

    return Tensor.from_op(y, prev, backward, any(t.requires_grad for t in prev))


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be rank 4, got rank {x.ndim}")
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3))

    def backward(grad: np.ndarray):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(grad[:, :, None, None] / (h * w), x.shape).astype(x.dtype))

    return Tensor.from_op(y, (x,), backward, x.requires_grad)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest input must be rank 4, got rank {x.ndim}")
    if factor < 1 or int(factor) != factor:
        raise ShapeError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(grad: np.ndarray):
        if x.requires_grad:
            dx = grad.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
            x.accumulate_grad(dx)

    return Tensor.from_op(y, (x,), backward, x.requires_grad)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy; logits [N,K] with labels [N], or [N,K,H,W] with [N,H,W]."""
    labels = np.asarray(labels)
    if logits.ndim == 2:
        flat = logits.data
        flat_labels = labels.reshape(-1)
    elif logits.ndim == 4:
        if labels.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
            raise ShapeError(
                f"dense labels shape {labels.shape} does not match logits {logits.shape}")
        flat = logits.data.transpose(0, 2, 3, 1).reshape(-1, logits.shape[1])
        flat_labels = labels.reshape(-1)
    else:
        raise ShapeError(f"softmax_cross_entropy expects rank 2 or 4 logits, got rank {logits.ndim}")
    m, k = flat.shape
    if flat_labels.shape != (m,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if flat_labels.min() < 0 or flat_labels.max() >= k:
        raise ShapeError(f"label values must lie in [0,{k - 1}]")

    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    y = np.asarray(-logp[np.arange(m), flat_labels].mean(), dtype=logits.dtype)

    def backward(grad: np.ndarray):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(m), flat_labels] -= 1.0
            p *= grad / m
            if logits.ndim == 2:
                dlogits = p
            else:
                n, c, h, w = logits.shape
                dlogits = p.reshape(n, h, w, c).transpose(0, 3, 1, 2)
            logits.accumulate_grad(dlogits.astype(logits.dtype))

    return Tensor.from_op(y, (logits,), backward, logits.requires_grad)


# ---------------------------------------------------------------------------
# scalar algebra for the search loss and mixed layers
# ---------------------------------------------------------------------------

def softmax(alpha: Tensor) -> Tensor:
    """1-d softmax with the exact Jacobian in backward."""
    if alpha.ndim != 1:
        raise ShapeError(f"softmax expects a 1-d tensor, got rank {alpha.ndim}")
    e = np.exp(alpha.data - alpha.data.max())
    p = e / e.sum()

    def backward(grad: np.ndarray):
        if alpha.requires_grad:
            alpha.accumulate_grad((p * (grad - np.dot(grad, p))).astype(alpha.dtype))

    return Tensor.from_op(p, (alpha,), backward, alpha.requires_grad)


def weighted_sum(tensors: list[Tensor], weights: Tensor) -> Tensor:
    """sum_i weights[i] * tensors[i] for same-shape tensors and a 1-d weight vector."""
    if weights.ndim != 1 or len(tensors) != weights.shape[0]:
        raise ShapeError(
            f"weighted_sum got {len(tensors)} tensors and {weights.shape} weights")
    shape = tensors[0].shape
    for i, t in enumerate(tensors):
        if t.shape != shape:
            raise ShapeError(f"weighted_sum operand {i} has shape {t.shape}, expected {shape}")
    y = np.zeros(shape, dtype=tensors[0].dtype)
    for wi, t in zip(weights.data, tensors):
        y += wi * t.data

    def backward(grad: np.ndarray):
        for wi, t in zip(weights.data, tensors):
            if t.requires_grad:
                t.accumulate_grad((wi * grad).astype(t.dtype))
        if weights.requires_grad:
            dw = np.array([np.vdot(grad, t.data) for t in tensors], dtype=weights.dtype)
            weights.accumulate_grad(dw)

    prev = tuple(tensors) + (weights,)
    return Tensor.from_op(y, prev, backward, any(t.requires_grad for t in prev))


def dot_const(t: Tensor, const: np.ndarray) -> Tensor:
    """Full contraction of t with a constant array of the same shape -> scalar."""
    const = np.asarray(const, dtype=t.dtype)
    if const.shape != t.shape:
        raise ShapeError(f"dot_const shapes differ: {t.shape} vs {const.shape}")
    y = np.asarray(np.vdot(t.data, const), dtype=t.dtype)

    def backward(grad: np.ndarray):
        if t.requires_grad:
            t.accumulate_grad(grad * const)

    return Tensor.from_op(y, (t,), backward, t.requires_grad)


def scale(t: Tensor, c: float) -> Tensor:
    y = t.data * np.asarray(c, dtype=t.dtype)

    def backward(grad: np.ndarray):
        if t.requires_grad:
            t.accumulate_grad((grad * c).astype(t.dtype))

    return Tensor.from_op(y, (t,), backward, t.requires_grad)


def log10(t: Tensor) -> Tensor:
    if np.any(t.data <= 0):
        raise ValueError("log10 requires strictly positive input")
    y = np.log10(t.data)

    def backward(grad: np.ndarray):
        if t.requires_grad:
            t.accumulate_grad((grad / (t.data * math.log(10.0))).astype(t.dtype))

    return Tensor.from_op(y, (t,), backward, t.requires_grad)
