"""Architecture descriptors and expandable search spaces.

An ArchDescriptor is a concrete network: a stem, ordered stages holding
chosen block specs, and a task-head identifier. A SearchSpace is the
expanded form: per searchable layer an ordered candidate list whose
index is also the index into that layer's architecture-parameter vector.

Indexing is 0-based throughout; stage layer numbering used in remapping
formulas is translated at the remapper boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from fna.errors import ArchError

OP_KINDS = ("MBConv", "ResBasic", "ResBottleneck", "PlainConv", "Identity")
KERNEL_OPTIONS = (3, 5, 7)
EXPANSION_OPTIONS = (1, 3, 6)
RESNET_CATALOG = ((3, 1), (5, 2), (5, 4), (7, 4), (7, 8))

ARCH_FORMAT_VERSION = "fna_arch_v1"


@dataclass(frozen=True)
class OpSpec:
    """One block choice: kind plus its shape hyperparameters.

    expansion is the MBConv inner-width ratio; groups applies to the
    searchable convolution of the ResNet kinds (and is 1 elsewhere).
    """

    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    kernel_size: int = 3
    expansion: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ArchError(f"unknown op kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1 or self.stride < 1:
            raise ArchError(f"non-positive dimension in {self}")
        if self.kind == "Identity":
            if self.in_channels != self.out_channels or self.stride != 1:
                raise ArchError("Identity requires in_channels == out_channels and stride == 1")
            return
        if self.kernel_size % 2 == 0:
            raise ArchError(f"kernel size must be odd, got {self.kernel_size}")
        if self.kind == "MBConv":
            if self.kernel_size not in KERNEL_OPTIONS:
                raise ArchError(f"MBConv kernel size must be one of {KERNEL_OPTIONS}")
            if self.expansion not in EXPANSION_OPTIONS:
                raise ArchError(f"MBConv expansion must be one of {EXPANSION_OPTIONS}")
        if self.kind in ("ResBasic", "ResBottleneck"):
            if (self.kernel_size, self.groups) not in RESNET_CATALOG:
                raise ArchError(
                    f"(k={self.kernel_size}, g={self.groups}) not in the block catalog "
                    f"{RESNET_CATALOG}")


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    max_layers: int
    stride: int
    searchable: bool = True

    def __post_init__(self):
        if self.max_layers < 1:
            raise ArchError(f"stage max_layers must be >= 1, got {self.max_layers}")
        if self.stride < 1:
            raise ArchError(f"stage stride must be >= 1, got {self.stride}")


@dataclass(frozen=True)
class ArchStage:
    spec: StageSpec
    layers: tuple[OpSpec, ...]


@dataclass(frozen=True)
class ArchDescriptor:
    stem: OpSpec
    stages: tuple[ArchStage, ...]
    head: str

    def validate(self) -> "ArchDescriptor":
        if self.stem.kind != "PlainConv":
            raise ArchError(f"stem must be PlainConv, got {self.stem.kind}")
        _parse_head(self.head)
        prev = self.stem.out_channels
        for si, stage in enumerate(self.stages):
            if not stage.layers:
                raise ArchError(f"stage {si} has no layers")
            if len(stage.layers) > stage.spec.max_layers:
                raise ArchError(
                    f"stage {si} has {len(stage.layers)} layers, max is {stage.spec.max_layers}")
            seen_identity = False
            for li, op in enumerate(stage.layers):
                if op.in_channels != prev:
                    raise ArchError(
                        f"stage {si} layer {li}: in_channels {op.in_channels} breaks the "
                        f"channel chain (previous out_channels {prev})")
                if li > 0 and op.stride != 1:
                    raise ArchError(f"stage {si} layer {li}: only the first layer may stride")
                if op.kind == "Identity":
                    seen_identity = True
                elif seen_identity:
                    raise ArchError(
                        f"stage {si} layer {li}: non-Identity layer after an Identity choice")
                prev = op.out_channels
            if prev != stage.spec.out_channels:
                raise ArchError(
                    f"stage {si} ends at {prev} channels, spec says {stage.spec.out_channels}")
        return self

    @property
    def out_channels(self) -> int:
        return self.stages[-1].spec.out_channels

    def total_stride(self) -> int:
        s = self.stem.stride
        for stage in self.stages:
            for op in stage.layers:
                s *= op.stride
        return s


@dataclass(frozen=True)
class SpaceStage:
    spec: StageSpec
    # one candidate tuple per layer slot; non-searchable stages hold singletons
    candidates: tuple[tuple[OpSpec, ...], ...]


@dataclass(frozen=True)
class SearchSpace:
    stem: OpSpec
    stages: tuple[SpaceStage, ...]
    head: str

    def validate(self) -> "SearchSpace":
        prev = self.stem.out_channels
        for si, stage in enumerate(self.stages):
            if len(stage.candidates) != stage.spec.max_layers:
                raise ArchError(f"stage {si}: candidate rows != max_layers")
            for li, cands in enumerate(stage.candidates):
                if stage.spec.searchable and len(cands) < 2:
                    raise ArchError(f"stage {si} layer {li}: searchable layer needs >= 2 candidates")
                if li == 0 and any(c.kind == "Identity" for c in cands):
                    raise ArchError(f"stage {si}: Identity not allowed on the first layer")
                for c in cands:
                    expect_in = prev if li == 0 else stage.spec.out_channels
                    if c.kind != "Identity" and c.in_channels != expect_in:
                        raise ArchError(
                            f"stage {si} layer {li}: candidate in_channels {c.in_channels} "
                            f"!= {expect_in}")
            prev = stage.spec.out_channels
        return self

    def searchable_layers(self):
        """Yield (stage_idx, layer_idx, candidates) for every searched slot, in order."""
        for si, stage in enumerate(self.stages):
            if not stage.spec.searchable:
                continue
            for li, cands in enumerate(stage.candidates):
                yield si, li, cands

    def num_searchable_layers(self) -> int:
        return sum(1 for _ in self.searchable_layers())


@dataclass(frozen=True)
class TaskProfile:
    """Per-task stage pattern: layer budgets, first-layer strides, target head."""

    name: str
    stage_layers: tuple[int, ...]
    stage_strides: tuple[int, ...]
    kernel_options: tuple[int, ...] = (3, 5, 7)
    expansion_options: tuple[int, ...] = (3, 6)
    include_identity: bool = True
    head: str | None = None  # None keeps the seed's head

    def __post_init__(self):
        if len(self.stage_layers) != len(self.stage_strides):
            raise ArchError("profile stage_layers and stage_strides lengths differ")


# Searchable-stage patterns (layer counts, first-layer strides) per task family.
_STAGE_PATTERNS = {
    "seg": ((4, 4, 6, 6, 4, 1), (2, 2, 2, 1, 1, 1)),
    "det": ((4, 4, 4, 4, 4, 1), (2, 2, 2, 1, 2, 1)),
    "pose": ((4, 4, 4, 4, 4, 1), (2, 2, 2, 1, 2, 1)),
}


def task_profile(name: str, num_stages: int, layer_factor: float = 0.5,
                 flat_strides: bool = False) -> TaskProfile:
    """Desk-scale profile: the task's stage pattern truncated to num_stages
    and layer counts scaled by layer_factor (floored at 1).

    flat_strides replaces the pattern's strides with 1 everywhere, for
    resolution-preserving dense tasks on tiny images.
    """
    if name not in _STAGE_PATTERNS:
        raise ArchError(f"unknown task profile {name!r}; choose from {sorted(_STAGE_PATTERNS)}")
    layers, strides = _STAGE_PATTERNS[name]
    if num_stages > len(layers):
        raise ArchError(f"profile {name!r} supports at most {len(layers)} stages")
    scaled = tuple(max(1, round(n * layer_factor)) for n in layers[:num_stages])
    s = tuple(1 for _ in range(num_stages)) if flat_strides else strides[:num_stages]
    return TaskProfile(name=name, stage_layers=scaled, stage_strides=s)


def build_mbconv_space(seed: ArchDescriptor, profile: TaskProfile) -> SearchSpace:
    """Expand an MBConv-family seed into a search space following the profile.

    Non-searchable stages are carried over unchanged. Every searchable
    layer gets one MBConv candidate per (kernel, expansion) pair, plus an
    Identity candidate on non-first layers so depth is searched too.
    """
    seed.validate()
    searchable = [st for st in seed.stages if st.spec.searchable]
    for st in searchable:
        for op in st.layers:
            if op.kind != "MBConv":
                raise ArchError(f"seed is not MBConv-family: found {op.kind} in a searchable stage")
    if len(searchable) != len(profile.stage_layers):
        raise ArchError(
            f"seed has {len(searchable)} searchable stages but profile "
            f"{profile.name!r} describes {len(profile.stage_layers)}")

    stages = []
    prev = seed.stem.out_channels
    search_idx = 0
    for st in seed.stages:
        if not st.spec.searchable:
            stages.append(SpaceStage(
                spec=replace(st.spec, max_layers=len(st.layers)),
                candidates=tuple((op,) for op in st.layers)))
            prev = st.spec.out_channels
            continue
        out = st.spec.out_channels
        n = profile.stage_layers[search_idx]
        stride = profile.stage_strides[search_idx]
        search_idx += 1
        rows = []
        for li in range(n):
            in_c = prev if li == 0 else out
            s = stride if li == 0 else 1
            cands = [OpSpec("MBConv", in_c, out, s, k, e)
                     for k in profile.kernel_options for e in profile.expansion_options]
            if li > 0 and profile.include_identity:
                cands.append(OpSpec("Identity", out, out, 1))
            rows.append(tuple(cands))
        stages.append(SpaceStage(
            spec=StageSpec(out, n, stride, searchable=True),
            candidates=tuple(rows)))
        prev = out
    head = profile.head if profile.head is not None else seed.head
    return SearchSpace(stem=seed.stem, stages=tuple(stages), head=head).validate()


def build_resnet_space(seed: ArchDescriptor) -> SearchSpace:
    """Expand a ResNet-family seed: every searchable block gets the
    five-entry (kernel, groups) catalog; depth mirrors the seed."""
    seed.validate()
    stages = []
    prev = seed.stem.out_channels
    for si, st in enumerate(seed.stages):
        if not st.spec.searchable:
            stages.append(SpaceStage(
                spec=replace(st.spec, max_layers=len(st.layers)),
                candidates=tuple((op,) for op in st.layers)))
            prev = st.spec.out_channels
            continue
        rows = []
        for li, op in enumerate(st.layers):
            if op.kind not in ("ResBasic", "ResBottleneck"):
                raise ArchError(f"seed is not ResNet-family: found {op.kind} in stage {si}")
            cands = []
            for k, g in RESNET_CATALOG:
                # the searchable conv is in->out (basic) or mid->mid (bottleneck)
                if op.kind == "ResBasic":
                    ok = op.in_channels % g == 0 and op.out_channels % g == 0
                else:
                    mid = op.out_channels // 4
                    ok = mid % g == 0
                if not ok:
                    raise ArchError(
                        f"stage {si} layer {li}: groups {g} does not divide the searched "
                        f"conv channels")
                cands.append(replace(op, kernel_size=k, groups=g))
            rows.append(tuple(cands))
        stages.append(SpaceStage(
            spec=replace(st.spec, max_layers=len(st.layers)),
            candidates=tuple(rows)))
        prev = st.spec.out_channels
    return SearchSpace(stem=seed.stem, stages=tuple(stages), head=seed.head).validate()


def derive_architecture(space: SearchSpace, alphas: list) -> ArchDescriptor:
    """Pick the argmax-weight candidate per searched layer.

    Exact ties break toward the lower-MAdds candidate (then the lower
    index). A stage is truncated at its first Identity choice, so derived
    depth is always a prefix of the stage's layer budget.
    """
    from fna import cost  # local import; cost depends on arch types

    alphas = list(alphas)
    if len(alphas) != space.num_searchable_layers():
        raise ArchError(
            f"got {len(alphas)} alpha vectors for {space.num_searchable_layers()} "
            f"searchable layers")
    chosen: dict[tuple[int, int], OpSpec] = {}
    for (si, li, cands), alpha in zip(space.searchable_layers(), alphas):
        a = np.asarray(alpha, dtype=np.float64)
        if a.shape != (len(cands),):
            raise ArchError(
                f"stage {si} layer {li}: alpha has shape {a.shape}, expected ({len(cands)},)")
        if len(cands) == 0:
            raise ArchError(f"stage {si} layer {li}: empty candidate list")
        best = a.max()
        tied = [i for i in range(len(cands)) if a[i] == best]
        idx = min(tied, key=lambda i: (cost.op_madds(cands[i], (32, 32)), i))
        chosen[(si, li)] = cands[idx]

    stages = []
    for si, stage in enumerate(space.stages):
        layers = []
        for li in range(stage.spec.max_layers):
            op = chosen[(si, li)] if stage.spec.searchable else stage.candidates[li][0]
            if op.kind == "Identity":
                break
            layers.append(op)
        stages.append(ArchStage(spec=stage.spec, layers=tuple(layers)))
    return ArchDescriptor(stem=space.stem, stages=tuple(stages), head=space.head).validate()


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_OP_FIELDS = ("kind", "in_channels", "out_channels", "stride", "kernel_size",
              "expansion", "groups")


def _op_to_dict(op: OpSpec) -> dict:
    return {f: getattr(op, f) for f in _OP_FIELDS}


def _op_from_dict(d: dict) -> OpSpec:
    unknown = set(d) - set(_OP_FIELDS)
    if unknown:
        raise ArchError(f"unknown op fields {sorted(unknown)}")
    if d.get("kind") not in OP_KINDS:
        raise ArchError(f"unknown op kind {d.get('kind')!r}")
    return OpSpec(**d)


def serialize_arch(arch: ArchDescriptor) -> str:
    """Stable JSON encoding; equal descriptors produce byte-equal documents."""
    doc = {
        "version": ARCH_FORMAT_VERSION,
        "stem": _op_to_dict(arch.stem),
        "stages": [
            {
                "out_channels": st.spec.out_channels,
                "max_layers": st.spec.max_layers,
                "stride": st.spec.stride,
                "searchable": st.spec.searchable,
                "layers": [_op_to_dict(op) for op in st.layers],
            }
            for st in arch.stages
        ],
        "head": arch.head,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def deserialize_arch(text: str) -> ArchDescriptor:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArchError(f"malformed architecture document at line {e.lineno}: {e.msg}") from e
    if not isinstance(doc, dict) or doc.get("version") != ARCH_FORMAT_VERSION:
        raise ArchError(
            f"unsupported architecture document version {doc.get('version')!r}, "
            f"expected {ARCH_FORMAT_VERSION!r}")
    try:
        stages = tuple(
            ArchStage(
                spec=StageSpec(s["out_channels"], s["max_layers"], s["stride"], s["searchable"]),
                layers=tuple(_op_from_dict(o) for o in s["layers"]),
            )
            for s in doc["stages"]
        )
        arch = ArchDescriptor(stem=_op_from_dict(doc["stem"]), stages=stages, head=doc["head"])
    except (KeyError, TypeError) as e:
        raise ArchError(f"malformed architecture document: missing field {e}") from e
    return arch.validate()


SPACE_FORMAT_VERSION = "fna_space_v1"


def serialize_space(space: SearchSpace) -> str:
    doc = {
        "version": SPACE_FORMAT_VERSION,
        "stem": _op_to_dict(space.stem),
        "stages": [
            {
                "out_channels": st.spec.out_channels,
                "max_layers": st.spec.max_layers,
                "stride": st.spec.stride,
                "searchable": st.spec.searchable,
                "candidates": [[_op_to_dict(op) for op in row] for row in st.candidates],
            }
            for st in space.stages
        ],
        "head": space.head,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def deserialize_space(text: str) -> SearchSpace:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArchError(f"malformed space document at line {e.lineno}: {e.msg}") from e
    if not isinstance(doc, dict) or doc.get("version") != SPACE_FORMAT_VERSION:
        raise ArchError(f"unsupported space document version {doc.get('version')!r}")
    try:
        stages = tuple(
            SpaceStage(
                spec=StageSpec(s["out_channels"], s["max_layers"], s["stride"], s["searchable"]),
                candidates=tuple(tuple(_op_from_dict(o) for o in row)
                                 for row in s["candidates"]),
            )
            for s in doc["stages"]
        )
        space = SearchSpace(stem=_op_from_dict(doc["stem"]), stages=stages, head=doc["head"])
    except (KeyError, TypeError) as e:
        raise ArchError(f"malformed space document: missing field {e}") from e
    return space.validate()


# ---------------------------------------------------------------------------
# head identifiers and seed constructors
# ---------------------------------------------------------------------------

def _parse_head(head: str) -> tuple[str, int]:
    try:
        kind, classes = head.split(":")
        classes = int(classes)
    except (ValueError, AttributeError):
        raise ArchError(f"bad head identifier {head!r}, expected 'classification:K' or 'dense:K'")
    if kind not in ("classification", "dense") or classes < 2:
        raise ArchError(f"bad head identifier {head!r}")
    return kind, classes


def parse_head(head: str) -> tuple[str, int]:
    """-> (kind, num_classes); kind is 'classification' or 'dense'."""
    return _parse_head(head)


def make_mbconv_seed(in_channels: int, stem_channels: int, first_channels: int,
                     stage_channels: tuple[int, ...], stage_layers: tuple[int, ...],
                     stage_strides: tuple[int, ...], head: str, stem_stride: int = 1,
                     kernel: int = 3, expansion: int = 6) -> ArchDescriptor:
    """A small MBConv-family seed: stem conv, one fixed expansion-1 block,
    then the given searchable stages."""
    stem = OpSpec("PlainConv", in_channels, stem_channels, stem_stride, 3)
    stages = [ArchStage(
        spec=StageSpec(first_channels, 1, 1, searchable=False),
        layers=(OpSpec("MBConv", stem_channels, first_channels, 1, 3, 1),))]
    prev = first_channels
    for out, n, s in zip(stage_channels, stage_layers, stage_strides):
        layers = []
        for li in range(n):
            layers.append(OpSpec("MBConv", prev if li == 0 else out, out,
                                 s if li == 0 else 1, kernel, expansion))
        stages.append(ArchStage(spec=StageSpec(out, n, s, searchable=True),
                                layers=tuple(layers)))
        prev = out
    return ArchDescriptor(stem=stem, stages=tuple(stages), head=head).validate()


def make_resnet_seed(in_channels: int, stem_channels: int,
                     stage_channels: tuple[int, ...], stage_layers: tuple[int, ...],
                     stage_strides: tuple[int, ...], head: str, stem_stride: int = 1,
                     bottleneck: bool = False) -> ArchDescriptor:
    kind = "ResBottleneck" if bottleneck else "ResBasic"
    stem = OpSpec("PlainConv", in_channels, stem_channels, stem_stride, 3)
    stages = []
    prev = stem_channels
    for out, n, s in zip(stage_channels, stage_layers, stage_strides):
        layers = []
        for li in range(n):
            layers.append(OpSpec(kind, prev if li == 0 else out, out,
                                 s if li == 0 else 1, 3, 1, 1))
        stages.append(ArchStage(spec=StageSpec(out, n, s, searchable=True),
                                layers=tuple(layers)))
        prev = out
    return ArchDescriptor(stem=stem, stages=tuple(stages), head=head).validate()
