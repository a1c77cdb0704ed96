"""Multiply-accumulate accounting for candidate ops, layers and networks.

Convention: one MAdd per multiply of a convolution inner product, i.e.
conv cost = H_out * W_out * k^2 * (C_in/groups) * C_out. Bias, batch
norm, activations and pooling are ignored (conv-dominated networks).
Strided convs use `same` padding, so output extents are ceil-divided.
Block costs sum their constituent convolutions, including a residual
projection conv where one exists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fna import ops
from fna.arch import ArchDescriptor, OpSpec, SearchSpace, parse_head
from fna.errors import ShapeError
from fna.tensor import Tensor


def resolution_after(hw: tuple[int, int], stride: int) -> tuple[int, int]:
    h, w = hw
    return (-(-h // stride), -(-w // stride))


def _conv_madds(hw_out: tuple[int, int], k: int, c_in: int, c_out: int, groups: int = 1) -> int:
    h, w = hw_out
    return h * w * k * k * (c_in // groups) * c_out


def op_madds(op: OpSpec, input_hw: tuple[int, int]) -> int:
    """MAdds of one block given the resolution entering it."""
    h, w = input_hw
    if h < 1 or w < 1:
        raise ShapeError(f"non-positive input resolution {input_hw}")
    if op.kind == "Identity":
        return 0
    out_hw = resolution_after(input_hw, op.stride)
    if op.kind == "PlainConv":
        return _conv_madds(out_hw, op.kernel_size, op.in_channels, op.out_channels, op.groups)
    if op.kind == "MBConv":
        inner = op.expansion * op.in_channels
        total = 0
        if op.expansion > 1:
            total += _conv_madds(input_hw, 1, op.in_channels, inner)
        total += _conv_madds(out_hw, op.kernel_size, inner, inner, groups=inner)
        total += _conv_madds(out_hw, 1, inner, op.out_channels)
        return total
    if op.kind == "ResBasic":
        total = _conv_madds(out_hw, op.kernel_size, op.in_channels, op.out_channels, op.groups)
        total += _conv_madds(out_hw, 3, op.out_channels, op.out_channels)
        if op.in_channels != op.out_channels or op.stride != 1:
            total += _conv_madds(out_hw, 1, op.in_channels, op.out_channels)
        return total
    if op.kind == "ResBottleneck":
        mid = op.out_channels // 4
        total = _conv_madds(input_hw, 1, op.in_channels, mid)
        total += _conv_madds(out_hw, op.kernel_size, mid, mid, op.groups)
        total += _conv_madds(out_hw, 1, mid, op.out_channels)
        if op.in_channels != op.out_channels or op.stride != 1:
            total += _conv_madds(out_hw, 1, op.in_channels, op.out_channels)
        return total
    raise ShapeError(f"cannot cost op kind {op.kind}")


def head_madds(head: str, backbone_channels: int, backbone_hw: tuple[int, int]) -> int:
    kind, classes = parse_head(head)
    if kind == "classification":
        return backbone_channels * classes
    h, w = backbone_hw
    return h * w * backbone_channels * classes


@dataclass
class CostTable:
    """Per searchable layer, candidate-aligned MAdds; everything else is fixed_cost."""

    layer_costs: list[np.ndarray]
    fixed_cost: int

    def __post_init__(self):
        for i, row in enumerate(self.layer_costs):
            if np.any(row < 0):
                raise ValueError(f"negative cost in layer {i}")
        if self.fixed_cost < 0:
            raise ValueError("negative fixed cost")

    def min_total(self) -> int:
        return self.fixed_cost + sum(int(row.min()) for row in self.layer_costs)

    def max_total(self) -> int:
        return self.fixed_cost + sum(int(row.max()) for row in self.layer_costs)


def build_cost_table(space: SearchSpace, input_hw: tuple[int, int]) -> CostTable:
    """Propagate resolutions through the stage strides and cost every candidate."""
    fixed = op_madds(space.stem, input_hw)
    hw = resolution_after(input_hw, space.stem.stride)
    layer_costs = []
    for stage in space.stages:
        for li, cands in enumerate(stage.candidates):
            stride = stage.spec.stride if li == 0 else 1
            row = np.array([op_madds(c, hw) for c in cands], dtype=np.int64)
            if stage.spec.searchable:
                layer_costs.append(row)
            else:
                fixed += int(row[0])
            hw = resolution_after(hw, stride)
    fixed += head_madds(space.head, space.stages[-1].spec.out_channels, hw)
    return CostTable(layer_costs=layer_costs, fixed_cost=fixed)


def expected_layer_cost(costs, alpha):
    """Softmax(alpha)-weighted mean of the candidate costs.

    With a Tensor alpha the result is a differentiable scalar Tensor;
    with a plain vector it is a float.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if isinstance(alpha, Tensor):
        if alpha.shape != costs.shape:
            raise ShapeError(f"alpha shape {alpha.shape} != costs shape {costs.shape}")
        return ops.dot_const(ops.softmax(alpha), costs)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != costs.shape:
        raise ShapeError(f"alpha shape {alpha.shape} != costs shape {costs.shape}")
    e = np.exp(alpha - alpha.max())
    return float(np.dot(e / e.sum(), costs))


def expected_network_cost(table: CostTable, alphas: list[Tensor]):
    """Differentiable total: fixed cost plus expected cost of every layer."""
    if len(alphas) != len(table.layer_costs):
        raise ShapeError(f"{len(alphas)} alphas for {len(table.layer_costs)} layers")
    total = None
    for row, alpha in zip(table.layer_costs, alphas):
        term = expected_layer_cost(row, alpha)
        total = term if total is None else ops.add(total, term)
    fixed = Tensor(np.asarray(float(table.fixed_cost), dtype=np.float64))
    return ops.add(total, fixed) if total is not None else fixed


def arch_madds(arch: ArchDescriptor, input_hw: tuple[int, int]) -> int:
    """Exact MAdds of a concrete architecture."""
    total = op_madds(arch.stem, input_hw)
    hw = resolution_after(input_hw, arch.stem.stride)
    for stage in arch.stages:
        for op in stage.layers:
            total += op_madds(op, hw)
            hw = resolution_after(hw, op.stride)
    total += head_madds(arch.head, arch.stages[-1].spec.out_channels, hw)
    return total


def network_cost(space_or_arch, input_hw: tuple[int, int], alphas=None):
    """Total network MAdds: exact for an ArchDescriptor, alpha-expected for a SearchSpace."""
    if isinstance(space_or_arch, ArchDescriptor):
        return arch_madds(space_or_arch, input_hw)
    if alphas is None:
        raise ShapeError("network_cost over a SearchSpace needs alpha vectors")
    table = build_cost_table(space_or_arch, input_hw)
    if alphas and isinstance(alphas[0], Tensor):
        return expected_network_cost(table, alphas)
    total = float(table.fixed_cost)
    for row, alpha in zip(table.layer_costs, alphas):
        total += expected_layer_cost(row, alpha)
    return total


def cost_report(arch: ArchDescriptor, input_hw: tuple[int, int]) -> str:
    """Human-readable per-layer table plus totals for a concrete architecture."""
    lines = [f"cost report  input={input_hw[0]}x{input_hw[1]}  (MAdds)"]
    lines.append(f"{'layer':<12}{'candidate':<28}{'madds':>14}")
    total = 0
    hw = input_hw
    stem_cost = op_madds(arch.stem, hw)
    total += stem_cost
    lines.append(f"{'stem':<12}{_op_label(arch.stem):<28}{stem_cost:>14}")
    hw = resolution_after(hw, arch.stem.stride)
    for si, stage in enumerate(arch.stages):
        for li, op in enumerate(stage.layers):
            c = op_madds(op, hw)
            total += c
            lines.append(f"{f's{si}.l{li}':<12}{_op_label(op):<28}{c:>14}")
            hw = resolution_after(hw, op.stride)
    hc = head_madds(arch.head, arch.stages[-1].spec.out_channels, hw)
    total += hc
    lines.append(f"{'head':<12}{arch.head:<28}{hc:>14}")
    lines.append(f"{'total':<40}{total:>14}")
    return "\n".join(lines) + "\n"


def _op_label(op: OpSpec) -> str:
    if op.kind == "MBConv":
        return f"MBConv(k{op.kernel_size}e{op.expansion})"
    if op.kind in ("ResBasic", "ResBottleneck"):
        return f"{op.kind}(k{op.kernel_size}g{op.groups})"
    if op.kind == "PlainConv":
        return f"PlainConv(k{op.kernel_size},s{op.stride})"
    return "Identity"
