"""Parameterized building blocks and concrete networks.

Blocks own their Tensors and expose a flat, deterministic name->array
state mapping used by remapping and checkpoints. The same block classes
serve as supernet candidates.
"""

from __future__ import annotations

import numpy as np

from fna import ops
from fna.arch import ArchDescriptor, OpSpec, parse_head
from fna.errors import ArchError
from fna.ops import BNParams, ConvParams
from fna.tensor import Tensor


def he_conv_weight(shape, rng: np.random.Generator | None, dtype) -> np.ndarray:
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    fan_in = shape[1] * shape[2] * shape[3]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _conv(c_in, c_out, k, stride, groups, rng, dtype, dilation=1) -> ConvParams:
    w = he_conv_weight((c_out, c_in // groups, k, k), rng, dtype)
    return ConvParams(Tensor(w, requires_grad=True), stride=stride,
                      padding=dilation * (k - 1) // 2, dilation=dilation, groups=groups)


class ConvBN:
    """conv -> batch norm -> optional relu6."""

    def __init__(self, c_in, c_out, k, stride=1, groups=1, act=True,
                 rng=None, dtype=np.float32):
        self.conv = _conv(c_in, c_out, k, stride, groups, rng, dtype)
        self.bn = BNParams.fresh(c_out, dtype)
        self.act = act

    def forward(self, x, training=False, update_stats=True):
        out = ops.conv2d(x, self.conv)
        out = ops.batch_norm(out, self.bn, training, update_stats)
        return ops.relu6(out) if self.act else out

    def named_tensors(self, prefix):
        yield f"{prefix}.weight", self.conv.weight
        yield f"{prefix}.bn.gamma", self.bn.gamma
        yield f"{prefix}.bn.beta", self.bn.beta

    def named_stats(self, prefix):
        yield f"{prefix}.bn.running_mean", self.bn
        yield f"{prefix}.bn.running_var", self.bn

    def bn_params(self):
        yield self.bn


class MBConvBlock:
    """Inverted residual: pointwise expand (ratio e), depthwise k x k, pointwise project."""

    kind = "MBConv"

    def __init__(self, op: OpSpec, rng=None, dtype=np.float32):
        inner = op.expansion * op.in_channels
        self.op = op
        self.expand = None
        if op.expansion > 1:
            self.expand = ConvBN(op.in_channels, inner, 1, 1, 1, act=True, rng=rng, dtype=dtype)
        self.dw = ConvBN(inner, inner, op.kernel_size, op.stride, inner, act=True,
                         rng=rng, dtype=dtype)
        self.project = ConvBN(inner, op.out_channels, 1, 1, 1, act=False, rng=rng, dtype=dtype)
        self.use_skip = op.in_channels == op.out_channels and op.stride == 1

    def forward(self, x, training=False, update_stats=True):
        out = x
        if self.expand is not None:
            out = self.expand.forward(out, training, update_stats)
        out = self.dw.forward(out, training, update_stats)
        out = self.project.forward(out, training, update_stats)
        if self.use_skip:
            out = ops.add(out, x)
        return out

    def _parts(self):
        parts = []
        if self.expand is not None:
            parts.append(("expand", self.expand))
        parts.append(("dw", self.dw))
        parts.append(("project", self.project))
        return parts

    def named_tensors(self, prefix):
        for name, part in self._parts():
            yield from part.named_tensors(f"{prefix}.{name}")

    def named_stats(self, prefix):
        for name, part in self._parts():
            yield from part.named_stats(f"{prefix}.{name}")

    def bn_params(self):
        for _, part in self._parts():
            yield from part.bn_params()


class ResBasicBlock:
    """Two 3x3-ish convs with a residual; the first conv carries (k, groups)."""

    kind = "ResBasic"

    def __init__(self, op: OpSpec, rng=None, dtype=np.float32):
        self.op = op
        self.conv1 = ConvBN(op.in_channels, op.out_channels, op.kernel_size, op.stride,
                            op.groups, act=True, rng=rng, dtype=dtype)
        self.conv2 = ConvBN(op.out_channels, op.out_channels, 3, 1, 1, act=False,
                            rng=rng, dtype=dtype)
        self.down = None
        if op.in_channels != op.out_channels or op.stride != 1:
            self.down = ConvBN(op.in_channels, op.out_channels, 1, op.stride, 1, act=False,
                               rng=rng, dtype=dtype)

    def forward(self, x, training=False, update_stats=True):
        out = self.conv1.forward(x, training, update_stats)
        out = self.conv2.forward(out, training, update_stats)
        sc = x if self.down is None else self.down.forward(x, training, update_stats)
        return ops.relu6(ops.add(out, sc))

    def _parts(self):
        parts = [("conv1", self.conv1), ("conv2", self.conv2)]
        if self.down is not None:
            parts.append(("down", self.down))
        return parts

    def named_tensors(self, prefix):
        for name, part in self._parts():
            yield from part.named_tensors(f"{prefix}.{name}")

    def named_stats(self, prefix):
        for name, part in self._parts():
            yield from part.named_stats(f"{prefix}.{name}")

    def bn_params(self):
        for _, part in self._parts():
            yield from part.bn_params()


class ResBottleneckBlock:
    """1x1 reduce, searchable k x k grouped conv on the mid width, 1x1 expand."""

    kind = "ResBottleneck"

    def __init__(self, op: OpSpec, rng=None, dtype=np.float32):
        mid = op.out_channels // 4
        self.op = op
        self.conv1 = ConvBN(op.in_channels, mid, 1, 1, 1, act=True, rng=rng, dtype=dtype)
        self.conv2 = ConvBN(mid, mid, op.kernel_size, op.stride, op.groups, act=True,
                            rng=rng, dtype=dtype)
        self.conv3 = ConvBN(mid, op.out_channels, 1, 1, 1, act=False, rng=rng, dtype=dtype)
        self.down = None
        if op.in_channels != op.out_channels or op.stride != 1:
            self.down = ConvBN(op.in_channels, op.out_channels, 1, op.stride, 1, act=False,
                               rng=rng, dtype=dtype)

    def forward(self, x, training=False, update_stats=True):
        out = self.conv1.forward(x, training, update_stats)
        out = self.conv2.forward(out, training, update_stats)
        out = self.conv3.forward(out, training, update_stats)
        sc = x if self.down is None else self.down.forward(x, training, update_stats)
        return ops.relu6(ops.add(out, sc))

    def _parts(self):
        parts = [("conv1", self.conv1), ("conv2", self.conv2), ("conv3", self.conv3)]
        if self.down is not None:
            parts.append(("down", self.down))
        return parts

    def named_tensors(self, prefix):
        for name, part in self._parts():
            yield from part.named_tensors(f"{prefix}.{name}")

    def named_stats(self, prefix):
        for name, part in self._parts():
            yield from part.named_stats(f"{prefix}.{name}")

    def bn_params(self):
        for _, part in self._parts():
            yield from part.bn_params()


class IdentityBlock:
    kind = "Identity"

    def __init__(self, op: OpSpec, rng=None, dtype=np.float32):
        self.op = op

    def forward(self, x, training=False, update_stats=True):
        return x

    def named_tensors(self, prefix):
        return iter(())

    def named_stats(self, prefix):
        return iter(())

    def bn_params(self):
        return iter(())


class ClassificationHead:
    """Global average pool then a linear layer."""

    def __init__(self, c_in, classes, rng=None, dtype=np.float32):
        if rng is None:
            w = np.zeros((classes, c_in), dtype=dtype)
        else:
            w = (rng.standard_normal((classes, c_in)) * np.sqrt(1.0 / c_in)).astype(dtype)
        self.fc_weight = Tensor(w, requires_grad=True)
        self.fc_bias = Tensor(np.zeros(classes, dtype=dtype), requires_grad=True)

    def forward(self, x, training=False, update_stats=True):
        return ops.linear(ops.global_avg_pool(x), self.fc_weight, self.fc_bias)

    def named_tensors(self, prefix):
        yield f"{prefix}.fc.weight", self.fc_weight
        yield f"{prefix}.fc.bias", self.fc_bias

    def named_stats(self, prefix):
        return iter(())

    def bn_params(self):
        return iter(())


class DenseHead:
    """1x1 conv to class logits, nearest-upsampled back to the input resolution."""

    def __init__(self, c_in, classes, upsample_factor, rng=None, dtype=np.float32):
        self.conv = _conv(c_in, classes, 1, 1, 1, rng, dtype)
        self.factor = upsample_factor

    def forward(self, x, training=False, update_stats=True):
        out = ops.conv2d(x, self.conv)
        if self.factor > 1:
            out = ops.upsample_nearest(out, self.factor)
        return out

    def named_tensors(self, prefix):
        yield f"{prefix}.conv.weight", self.conv.weight

    def named_stats(self, prefix):
        return iter(())

    def bn_params(self):
        return iter(())


_BLOCK_CLASSES = {
    "MBConv": MBConvBlock,
    "ResBasic": ResBasicBlock,
    "ResBottleneck": ResBottleneckBlock,
    "Identity": IdentityBlock,
}


def build_block(op: OpSpec, rng=None, dtype=np.float32):
    try:
        cls = _BLOCK_CLASSES[op.kind]
    except KeyError:
        raise ArchError(f"no block implementation for op kind {op.kind}")
    return cls(op, rng=rng, dtype=dtype)


def build_head(head: str, c_in: int, total_stride: int, rng=None, dtype=np.float32):
    kind, classes = parse_head(head)
    if kind == "classification":
        return ClassificationHead(c_in, classes, rng, dtype)
    return DenseHead(c_in, classes, total_stride, rng, dtype)


class Network:
    """A concrete network instantiated from an ArchDescriptor."""

    def __init__(self, arch: ArchDescriptor, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        arch.validate()
        self.arch = arch
        self.dtype = dtype
        self.stem = ConvBN(arch.stem.in_channels, arch.stem.out_channels,
                           arch.stem.kernel_size, arch.stem.stride, act=True,
                           rng=rng, dtype=dtype)
        self.stages = [[build_block(op, rng, dtype) for op in stage.layers]
                       for stage in arch.stages]
        self.head = build_head(arch.head, arch.out_channels, arch.total_stride(),
                               rng, dtype)

    def features(self, x: Tensor, training=False, update_stats=True) -> Tensor:
        out = self.stem.forward(x, training, update_stats)
        for stage in self.stages:
            for block in stage:
                out = block.forward(out, training, update_stats)
        return out

    def forward(self, x: Tensor, training=False, update_stats=True) -> Tensor:
        return self.head.forward(self.features(x, training, update_stats),
                                 training, update_stats)

    # -- parameter access -----------------------------------------------------

    def named_tensors(self):
        """Deterministic (name, Tensor) iteration over trainable parameters."""
        yield from self.stem.named_tensors("stem")
        for si, stage in enumerate(self.stages):
            for li, block in enumerate(stage):
                yield from block.named_tensors(f"s{si}.l{li}")
        yield from self.head.named_tensors("head")

    def _named_stats(self):
        yield from self.stem.named_stats("stem")
        for si, stage in enumerate(self.stages):
            for li, block in enumerate(stage):
                yield from block.named_stats(f"s{si}.l{li}")
        yield from self.head.named_stats("head")

    def parameters(self):
        return [t for _, t in self.named_tensors()]

    def bn_params(self):
        yield from self.stem.bn_params()
        for stage in self.stages:
            for block in stage:
                yield from block.bn_params()
        yield from self.head.bn_params()

    def state_dict(self) -> dict[str, np.ndarray]:
        return collect_state(self.named_tensors(), self._named_stats())

    def load_state_dict(self, state: dict[str, np.ndarray]):
        load_state(dict(self.named_tensors()), dict(self._named_stats()), state)


def collect_state(named_tensors, named_stats) -> dict[str, np.ndarray]:
    state = {name: t.data.copy() for name, t in named_tensors}
    for name, bn in named_stats:
        stat = bn.running_mean if name.endswith("running_mean") else bn.running_var
        state[name] = stat.copy()
    return state


def load_state(tensors: dict, stats: dict, state: dict):
    """Strict name-for-name load of a state mapping into live parameters."""
    expected = set(tensors) | set(stats)
    missing = sorted(expected - set(state))
    extra = sorted(set(state) - expected)
    if missing or extra:
        raise ArchError(f"state mismatch: missing={missing[:4]} extra={extra[:4]}")
    for name, value in state.items():
        value = np.asarray(value)
        if name in tensors:
            t = tensors[name]
            if value.shape != t.data.shape:
                raise ArchError(f"{name}: shape {value.shape} != {t.data.shape}")
            t.data = value.astype(t.data.dtype, copy=True)
        else:
            bn = stats[name]
            if name.endswith("running_mean"):
                bn.running_mean = value.astype(bn.running_mean.dtype, copy=True)
            else:
                bn.running_var = value.astype(bn.running_var.dtype, copy=True)
