"""Parameter remapping between seed networks, super networks and derived
architectures.

All transformations are deterministic index maps on weight arrays:

* depth level: target layer i takes seed layer min(i, l-1) (0-based; the
  customary 1-based statement min(i, l) shifts both sides by one), so
  extra layers replicate the seed stage's last layer;
* width level: the overlapping channel box is copied, new channels are
  exactly zero, extra seed channels are dropped;
* grouped width: output channel i of a grouped conv reads the seed input
  slice belonging to its group, id_g = i // (p/g);
* kernel level: central crop when shrinking, central embedding with a
  zero border when growing; the alternative dilation rule spreads a 3x3
  kernel onto the corners/centers of the larger kernel;
* reference-guided width: channels are chosen as the top-k of a
  per-channel reference vector (|gamma|, weight std, or weight L1 norm),
  then mapped in ascending index order.

Depth remapping is applied first; width/group and kernel remapping act
on independent axes and are applied together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fna.arch import ArchDescriptor, OpSpec, SearchSpace
from fna.errors import RemapError

STRATEGIES = ("standard", "bn_gamma", "weight_std", "weight_l1", "kernel_dilate")

REFERENCE_KINDS = ("BN_gamma_abs", "Weight_std", "Weight_L1")

_BN_FILL = {"gamma": 0.0, "beta": 0.0, "running_mean": 0.0, "running_var": 1.0}


# ---------------------------------------------------------------------------
# single-level remapping rules
# ---------------------------------------------------------------------------

def remap_depth(seed_layers: list, m: int) -> list:
    """Stage depth l -> m: prefix copy, then replicate the last layer."""
    l = len(seed_layers)
    if l < 1 or m < 1:
        raise RemapError(f"depth remap needs l >= 1 and m >= 1, got l={l}, m={m}")
    return [seed_layers[min(i, l - 1)] for i in range(m)]


def remap_width(seed_w: np.ndarray, target_shape) -> np.ndarray:
    """Copy the overlapping [out, in] channel box; everything else is zero."""
    target_shape = tuple(target_shape)
    if seed_w.ndim != 4 or len(target_shape) != 4:
        raise RemapError(
            f"width remap expects rank-4 tensors, got {seed_w.ndim} and {len(target_shape)}")
    if seed_w.shape[2:] != target_shape[2:]:
        raise RemapError(
            f"width remap cannot change spatial dims: {seed_w.shape[2:]} vs {target_shape[2:]}")
    out = np.zeros(target_shape, dtype=seed_w.dtype)
    r = min(seed_w.shape[0], target_shape[0])
    s = min(seed_w.shape[1], target_shape[1])
    out[:r, :s] = seed_w[:r, :s]
    return out


def remap_grouped(seed_w: np.ndarray, groups: int) -> np.ndarray:
    """Plain conv [p,q,h,w] -> grouped conv [p, q/groups, h, w].

    Output channel i keeps the seed input channels of its own group.
    """
    if seed_w.ndim != 4:
        raise RemapError(f"grouped remap expects a rank-4 tensor, got rank {seed_w.ndim}")
    p, q = seed_w.shape[:2]
    if groups < 1 or p % groups or q % groups:
        raise RemapError(f"groups {groups} must divide out={p} and in={q}")
    qg = q // groups
    id_g = np.arange(p) // (p // groups)
    cols = id_g[:, None] * qg + np.arange(qg)[None, :]
    return seed_w[np.arange(p)[:, None], cols, :, :]


def remap_kernel(seed_w: np.ndarray, target_k: int) -> np.ndarray:
    """Central crop (shrink) or central embedding with zero border (grow)."""
    if seed_w.ndim < 2 or seed_w.shape[-1] != seed_w.shape[-2]:
        raise RemapError(f"kernel remap expects square trailing dims, got {seed_w.shape}")
    k = seed_w.shape[-1]
    if k % 2 == 0 or target_k % 2 == 0:
        raise RemapError(f"kernel sizes must be odd, got {k} -> {target_k}")
    if target_k == k:
        return seed_w.copy()
    off = abs(k - target_k) // 2
    if target_k < k:
        return seed_w[..., off: off + target_k, off: off + target_k].copy()
    out = np.zeros(seed_w.shape[:-2] + (target_k, target_k), dtype=seed_w.dtype)
    out[..., off: off + k, off: off + k] = seed_w
    return out


def remap_kernel_dilated(seed_w: np.ndarray, target_k: int) -> np.ndarray:
    """Spread a 3x3 kernel onto positions {0, (k-1)/2, k-1} of a k x k kernel."""
    if seed_w.ndim < 2 or seed_w.shape[-2:] != (3, 3):
        raise RemapError(f"dilated kernel remap needs a 3x3 source, got {seed_w.shape}")
    if target_k not in (3, 5, 7):
        raise RemapError(f"dilated kernel remap supports k in (3,5,7), got {target_k}")
    pos = np.array([0, (target_k - 1) // 2, target_k - 1])
    out = np.zeros(seed_w.shape[:-2] + (target_k, target_k), dtype=seed_w.dtype)
    out[..., pos[:, None], pos[None, :]] = seed_w
    return out


@dataclass(frozen=True)
class ReferenceVector:
    """Per-output-channel channel-importance scores for width selection."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in REFERENCE_KINDS:
            raise RemapError(f"unknown reference kind {self.kind!r}")
        if np.asarray(self.values).ndim != 1:
            raise RemapError("reference values must be a vector")
        if np.any(np.asarray(self.values) < 0):
            raise RemapError("reference values must be non-negative")


def reference_vector(kind: str, *, gamma: np.ndarray | None = None,
                     weight: np.ndarray | None = None) -> ReferenceVector:
    if kind == "BN_gamma_abs":
        if gamma is None:
            raise RemapError("BN_gamma_abs needs the seed gamma vector")
        return ReferenceVector(kind, np.abs(np.asarray(gamma, dtype=np.float64)))
    if weight is None:
        raise RemapError(f"{kind} needs the seed weight tensor")
    w = np.asarray(weight, dtype=np.float64).reshape(weight.shape[0], -1)
    if kind == "Weight_std":
        return ReferenceVector(kind, w.std(axis=1))
    if kind == "Weight_L1":
        return ReferenceVector(kind, np.abs(w).sum(axis=1))
    raise RemapError(f"unknown reference kind {kind!r}")


def topk_sorted_indices(values: np.ndarray, q: int) -> np.ndarray:
    """Indices of the q largest values (stable on ties), sorted ascending."""
    values = np.asarray(values)
    if q > values.shape[0]:
        raise RemapError(f"cannot select top-{q} of {values.shape[0]} channels")
    order = np.argsort(-values, kind="stable")
    return np.sort(order[:q])


def remap_width_by_reference(seed_w: np.ndarray, target_shape,
                             ref: ReferenceVector) -> np.ndarray:
    """Width remap where output channels are chosen by reference score."""
    target_shape = tuple(target_shape)
    if seed_w.ndim != 4 or len(target_shape) != 4:
        raise RemapError("reference width remap expects rank-4 tensors")
    if len(ref.values) != seed_w.shape[0]:
        raise RemapError(
            f"reference has {len(ref.values)} entries for {seed_w.shape[0]} seed channels")
    q_t = target_shape[0]
    if q_t > len(ref.values):
        raise RemapError(
            f"target wants {q_t} output channels, only {len(ref.values)} are available")
    idx = topk_sorted_indices(ref.values, q_t)
    selected = seed_w[idx]
    out = np.zeros(target_shape, dtype=seed_w.dtype)
    s = min(seed_w.shape[1], target_shape[1])
    out[:, :s] = selected[:, :s, :, :]
    return out


def channel_remap(vec: np.ndarray, n: int, fill: float) -> np.ndarray:
    """Per-channel vector to length n: overlap copied, new channels filled."""
    out = np.full(n, fill, dtype=vec.dtype)
    m = min(n, vec.shape[0])
    out[:m] = vec[:m]
    return out


# ---------------------------------------------------------------------------
# remap plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RuleApp:
    name: str
    args: tuple = ()

    def __str__(self):
        inner = ", ".join(f"{k}={v}" for k, v in self.args)
        return f"{self.name}({inner})"


@dataclass(frozen=True)
class PlanEntry:
    target: str
    source: str | None
    rules: tuple[RuleApp, ...]

    def __str__(self):
        chain = " -> ".join(str(r) for r in self.rules) or "Copy()"
        return f"{self.target} <- {self.source or '(fresh)'} | {chain}"


@dataclass
class Plan:
    entries: list[PlanEntry] = field(default_factory=list)

    def add(self, target, source, *rules):
        self.entries.append(PlanEntry(target, source, tuple(rules)))

    def dump(self) -> str:
        lines = [f"# remap plan: {len(self.entries)} target tensors"]
        lines += [str(e) for e in self.entries]
        return "\n".join(lines) + "\n"


def _rule(name, **args) -> RuleApp:
    return RuleApp(name, tuple(sorted(args.items())))


def _width_rule(src_shape, dst_shape) -> list[RuleApp]:
    if tuple(src_shape) == tuple(dst_shape):
        return [_rule("Copy")]
    if dst_shape[0] > src_shape[0] or dst_shape[1] > src_shape[1]:
        return [_rule("WidthPad", out=dst_shape[0], into=dst_shape[1])]
    return [_rule("WidthTruncate", out=dst_shape[0], into=dst_shape[1])]


def _kernel_rule(src_k, dst_k, dilate: bool) -> list[RuleApp]:
    if dilate and dst_k != src_k:
        return [_rule("KernelDilate", k=dst_k)]
    if dst_k == src_k:
        return []
    name = "KernelCenterEmbed" if dst_k > src_k else "KernelCenterCrop"
    return [_rule(name, k=dst_k)]


# ---------------------------------------------------------------------------
# block-level composition
# ---------------------------------------------------------------------------

def _bn_names():
    return ("gamma", "beta", "running_mean", "running_var")


def _remap_bn(out, plan, dst_prefix, src_prefix, state, n, idx, depth_rules):
    """Remap one BN parameter group to n channels, optionally via selected indices."""
    for name in _bn_names():
        vec = state[f"{src_prefix}.{name}"]
        if idx is not None:
            sel = vec[idx]
            value = channel_remap(sel, n, _BN_FILL[name])
            rules = depth_rules + [_rule("WidthPad" if n > len(idx) else "Copy",
                                         channels=n, selected=len(idx))]
        else:
            value = channel_remap(vec, n, _BN_FILL[name])
            if n == vec.shape[0]:
                rules = depth_rules + [_rule("Copy")]
            else:
                rules = depth_rules + [
                    _rule("WidthPad" if n > vec.shape[0] else "WidthTruncate", channels=n)]
        out[f"{dst_prefix}.{name}"] = value
        plan.add(f"{dst_prefix}.{name}", f"{src_prefix}.{name}", *rules)


def _select_rows(w, idx, n):
    """Rows idx of w placed first, zero rows after, to n rows total."""
    out = np.zeros((n,) + w.shape[1:], dtype=w.dtype)
    out[: len(idx)] = w[idx]
    return out


def _select_cols(w, idx, n):
    out = np.zeros((w.shape[0], n) + w.shape[2:], dtype=w.dtype)
    out[:, : len(idx)] = w[:, idx]
    return out


def _inner_selection(seed_state, seed_prefix, seed_op: OpSpec, target_inner: int,
                     strategy: str):
    """Choose seed inner channels for reference-guided strategies.

    Returns (indices, rule) or (None, None) for positional strategies.
    When the target is wider than the seed, all seed channels are kept
    (in order) and the remainder zero-pads.
    """
    if strategy in ("standard", "kernel_dilate"):
        return None, None
    if seed_op.expansion <= 1:
        raise RemapError(
            f"reference strategies need a seed expansion conv at {seed_prefix}")
    if strategy == "bn_gamma":
        ref = reference_vector("BN_gamma_abs",
                               gamma=seed_state[f"{seed_prefix}.expand.bn.gamma"])
    elif strategy == "weight_std":
        ref = reference_vector("Weight_std", weight=seed_state[f"{seed_prefix}.expand.weight"])
    elif strategy == "weight_l1":
        ref = reference_vector("Weight_L1", weight=seed_state[f"{seed_prefix}.expand.weight"])
    else:
        raise RemapError(f"unknown remap strategy {strategy!r}")
    q = min(target_inner, len(ref.values))
    idx = topk_sorted_indices(ref.values, q)
    return idx, _rule("TopkSelect", kind=ref.kind, k=q)


def _remap_mbconv(out, plan, dst_prefix, src_prefix, seed_op: OpSpec, target_op: OpSpec,
                  seed_state, strategy: str, replicated: bool):
    if target_op.expansion > 1 and seed_op.expansion == 1:
        raise RemapError(
            f"cannot remap {dst_prefix}: seed block has no expansion conv to widen")
    depth_rules = [_rule("DepthReplicate", src_layer=src_prefix)] if replicated else []
    inner_t = target_op.expansion * target_op.in_channels
    inner_s = seed_op.expansion * seed_op.in_channels
    dilate = strategy == "kernel_dilate"
    idx, sel_rule = _inner_selection(seed_state, src_prefix, seed_op, inner_t, strategy)
    sel_rules = [sel_rule] if sel_rule else []

    if target_op.expansion > 1:
        w = seed_state[f"{src_prefix}.expand.weight"]
        shape = (inner_t, target_op.in_channels, 1, 1)
        if idx is not None:
            value = _select_rows(w, idx, inner_t)
            value = remap_width(value, shape)
        else:
            value = remap_width(w, shape)
        out[f"{dst_prefix}.expand.weight"] = value
        plan.add(f"{dst_prefix}.expand.weight", f"{src_prefix}.expand.weight",
                 *(depth_rules + sel_rules + _width_rule(w.shape, shape)))
        _remap_bn(out, plan, f"{dst_prefix}.expand.bn", f"{src_prefix}.expand.bn",
                  seed_state, inner_t, idx, depth_rules + sel_rules)

    w = seed_state[f"{src_prefix}.dw.weight"]
    if dilate and w.shape[-1] != 3:
        raise RemapError(f"kernel_dilate needs a 3x3 seed kernel at {src_prefix}.dw")
    kernel_fn = remap_kernel_dilated if (dilate and target_op.kernel_size != w.shape[-1]) \
        else remap_kernel
    if idx is not None:
        value = _select_rows(w, idx, inner_t)
    else:
        value = remap_width(w, (inner_t, 1) + w.shape[2:])
    value = kernel_fn(value, target_op.kernel_size)
    out[f"{dst_prefix}.dw.weight"] = value
    plan.add(f"{dst_prefix}.dw.weight", f"{src_prefix}.dw.weight",
             *(depth_rules + sel_rules + _width_rule(w.shape[:2], (inner_t, 1))
               + _kernel_rule(w.shape[-1], target_op.kernel_size, dilate)))
    _remap_bn(out, plan, f"{dst_prefix}.dw.bn", f"{src_prefix}.dw.bn",
              seed_state, inner_t, idx, depth_rules + sel_rules)

    w = seed_state[f"{src_prefix}.project.weight"]
    shape = (target_op.out_channels, inner_t, 1, 1)
    if idx is not None:
        value = _select_cols(w, idx, inner_t)
        value = remap_width(value, shape)
    else:
        value = remap_width(w, shape)
    out[f"{dst_prefix}.project.weight"] = value
    plan.add(f"{dst_prefix}.project.weight", f"{src_prefix}.project.weight",
             *(depth_rules + sel_rules + _width_rule(w.shape, shape)))
    _remap_bn(out, plan, f"{dst_prefix}.project.bn", f"{src_prefix}.project.bn",
              seed_state, target_op.out_channels, None, depth_rules)


def _remap_resnet(out, plan, dst_prefix, src_prefix, seed_op: OpSpec, target_op: OpSpec,
                  seed_state, strategy: str, replicated: bool):
    depth_rules = [_rule("DepthReplicate", src_layer=src_prefix)] if replicated else []
    dilate = strategy == "kernel_dilate"
    searched = "conv1" if target_op.kind == "ResBasic" else "conv2"

    w = seed_state[f"{src_prefix}.{searched}.weight"]
    if dilate and w.shape[-1] != 3:
        raise RemapError(f"kernel_dilate needs a 3x3 seed kernel at {src_prefix}.{searched}")
    rules = list(depth_rules)
    value = w
    if target_op.groups > 1:
        value = remap_grouped(value, target_op.groups)
        rules.append(_rule("GroupSlice", groups=target_op.groups))
    if dilate and target_op.kernel_size != w.shape[-1]:
        value = remap_kernel_dilated(value, target_op.kernel_size)
    else:
        value = remap_kernel(value, target_op.kernel_size)
    rules += _kernel_rule(w.shape[-1], target_op.kernel_size, dilate)
    if len(rules) == len(depth_rules):
        rules.append(_rule("Copy"))
    out[f"{dst_prefix}.{searched}.weight"] = value
    plan.add(f"{dst_prefix}.{searched}.weight", f"{src_prefix}.{searched}.weight", *rules)
    searched_bn_channels = value.shape[0]
    _remap_bn(out, plan, f"{dst_prefix}.{searched}.bn", f"{src_prefix}.{searched}.bn",
              seed_state, searched_bn_channels, None, depth_rules)

    parts = {"ResBasic": ("conv1", "conv2", "down"),
             "ResBottleneck": ("conv1", "conv2", "conv3", "down")}[target_op.kind]
    for part in parts:
        if part == searched:
            continue
        key = f"{src_prefix}.{part}.weight"
        if key not in seed_state:
            continue
        out[f"{dst_prefix}.{part}.weight"] = seed_state[key].copy()
        plan.add(f"{dst_prefix}.{part}.weight", key, *(depth_rules + [_rule("Copy")]))
        n = seed_state[key].shape[0]
        _remap_bn(out, plan, f"{dst_prefix}.{part}.bn", f"{src_prefix}.{part}.bn",
                  seed_state, n, None, depth_rules)


def _remap_block(out, plan, dst_prefix, src_prefix, seed_op, target_op, seed_state,
                 strategy, replicated):
    if target_op.kind == "MBConv":
        if seed_op.kind != "MBConv":
            raise RemapError(f"cannot remap {seed_op.kind} seed into MBConv at {dst_prefix}")
        _remap_mbconv(out, plan, dst_prefix, src_prefix, seed_op, target_op,
                      seed_state, strategy, replicated)
    elif target_op.kind in ("ResBasic", "ResBottleneck"):
        if seed_op.kind != target_op.kind:
            raise RemapError(
                f"cannot remap {seed_op.kind} seed into {target_op.kind} at {dst_prefix}")
        _remap_resnet(out, plan, dst_prefix, src_prefix, seed_op, target_op,
                      seed_state, strategy, replicated)
    else:
        raise RemapError(f"cannot remap into op kind {target_op.kind}")


def _copy_prefixed(out, plan, state, src_prefix, dst_prefix):
    for name, value in state.items():
        if name.startswith(src_prefix + "."):
            dst = dst_prefix + name[len(src_prefix):]
            out[dst] = np.asarray(value).copy()
            plan.add(dst, name, _rule("Copy"))


def _fresh_head(out, plan, head: str, channels: int, dtype):
    # a new task head starts at zero: first logits are neutral and early
    # finetuning dynamics are governed by the remapped features
    from fna.arch import parse_head

    kind, classes = parse_head(head)
    if kind == "classification":
        out["head.fc.weight"] = np.zeros((classes, channels), dtype=dtype)
        out["head.fc.bias"] = np.zeros(classes, dtype=dtype)
        plan.add("head.fc.weight", None, _rule("ZeroInit"))
        plan.add("head.fc.bias", None, _rule("ZeroInit"))
    else:
        out["head.conv.weight"] = np.zeros((classes, channels, 1, 1), dtype=dtype)
        plan.add("head.conv.weight", None, _rule("ZeroInit"))


def _state_dtype(state) -> np.dtype:
    return np.asarray(next(iter(state.values()))).dtype


# ---------------------------------------------------------------------------
# whole-network remapping
# ---------------------------------------------------------------------------

def _check_stage_alignment(seed: ArchDescriptor, space: SearchSpace):
    if len(seed.stages) != len(space.stages):
        raise RemapError(
            f"seed has {len(seed.stages)} stages, space has {len(space.stages)}")
    for si, (a, b) in enumerate(zip(seed.stages, space.stages)):
        if a.spec.out_channels != b.spec.out_channels:
            raise RemapError(
                f"stage {si}: seed out_channels {a.spec.out_channels} != space "
                f"{b.spec.out_channels}")
        if a.spec.searchable != b.spec.searchable:
            raise RemapError(f"stage {si}: searchable flag mismatch")


def remap_seed_to_supernet(seed: ArchDescriptor, seed_state: dict, space: SearchSpace,
                           strategy: str = "standard"):
    """Fill every candidate of every searched layer from the seed.

    All candidates of one layer are remapped from the same seed layer
    (depth rule), each through its own width/group/kernel composition.
    Returns (state, plan) where state is keyed by supernet tensor names.
    """
    if strategy not in STRATEGIES:
        raise RemapError(f"unknown remap strategy {strategy!r}; choose from {STRATEGIES}")
    seed.validate()
    _check_stage_alignment(seed, space)
    out: dict[str, np.ndarray] = {}
    plan = Plan()
    dtype = _state_dtype(seed_state)

    _copy_prefixed(out, plan, seed_state, "stem", "stem")
    for si, (seed_stage, space_stage) in enumerate(zip(seed.stages, space.stages)):
        if not space_stage.spec.searchable:
            for li in range(len(space_stage.candidates)):
                _copy_prefixed(out, plan, seed_state, f"s{si}.l{li}", f"s{si}.l{li}")
            continue
        l = len(seed_stage.layers)
        for li in range(space_stage.spec.max_layers):
            src_li = min(li, l - 1)
            for ci, cand in enumerate(space_stage.candidates[li]):
                if cand.kind == "Identity":
                    continue
                _remap_block(out, plan, f"s{si}.l{li}.c{ci}", f"s{si}.l{src_li}",
                             seed_stage.layers[src_li], cand, seed_state, strategy,
                             replicated=li >= l)

    if space.head == seed.head:
        _copy_prefixed(out, plan, seed_state, "head", "head")
    else:
        _fresh_head(out, plan, space.head, space.stages[-1].spec.out_channels, dtype)
    return out, plan


def remap_supernet_to_target(space: SearchSpace, super_state: dict,
                             arch: ArchDescriptor):
    """Collect the chosen candidates' tensors bit-exactly into a target state."""
    arch.validate()
    out: dict[str, np.ndarray] = {}
    plan = Plan()
    _copy_prefixed(out, plan, super_state, "stem", "stem")
    for si, (space_stage, arch_stage) in enumerate(zip(space.stages, arch.stages)):
        for li, op in enumerate(arch_stage.layers):
            if not space_stage.spec.searchable:
                _copy_prefixed(out, plan, super_state, f"s{si}.l{li}", f"s{si}.l{li}")
                continue
            cands = space_stage.candidates[li]
            try:
                ci = cands.index(op)
            except ValueError:
                raise RemapError(
                    f"stage {si} layer {li}: op {op} is not a candidate of this layer")
            _copy_prefixed(out, plan, super_state, f"s{si}.l{li}.c{ci}", f"s{si}.l{li}")
    _copy_prefixed(out, plan, super_state, "head", "head")
    return out, plan


def remap_seed_to_target(seed: ArchDescriptor, seed_state: dict, arch: ArchDescriptor,
                         strategy: str = "standard"):
    """Remap the seed directly into a derived architecture (no super network)."""
    if strategy not in STRATEGIES:
        raise RemapError(f"unknown remap strategy {strategy!r}; choose from {STRATEGIES}")
    seed.validate()
    arch.validate()
    if len(seed.stages) != len(arch.stages):
        raise RemapError(
            f"seed has {len(seed.stages)} stages, target has {len(arch.stages)}")
    out: dict[str, np.ndarray] = {}
    plan = Plan()
    dtype = _state_dtype(seed_state)

    _copy_prefixed(out, plan, seed_state, "stem", "stem")
    for si, (seed_stage, arch_stage) in enumerate(zip(seed.stages, arch.stages)):
        if seed_stage.spec.out_channels != arch_stage.spec.out_channels:
            raise RemapError(f"stage {si}: seed/target out_channels differ")
        l = len(seed_stage.layers)
        for li, op in enumerate(arch_stage.layers):
            if not arch_stage.spec.searchable:
                _copy_prefixed(out, plan, seed_state, f"s{si}.l{li}", f"s{si}.l{li}")
                continue
            src_li = min(li, l - 1)
            _remap_block(out, plan, f"s{si}.l{li}", f"s{si}.l{src_li}",
                         seed_stage.layers[src_li], op, seed_state, strategy,
                         replicated=li >= l)

    if arch.head == seed.head:
        _copy_prefixed(out, plan, seed_state, "head", "head")
    else:
        _fresh_head(out, plan, arch.head, arch.stages[-1].spec.out_channels, dtype)
    return out, plan
