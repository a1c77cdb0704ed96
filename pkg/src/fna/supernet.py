"""The search-space representation network.

Every searched layer is a MixedLayer: all candidate blocks instantiated
side by side with an architecture-parameter vector alpha. The mixed
forward pass is the softmax(alpha)-weighted sum of candidate outputs;
single-path forwards run exactly one sampled candidate per layer, so
weight gradients of different sub-networks stay decoupled.
"""

from __future__ import annotations

import numpy as np

from fna import ops
from fna.arch import ArchDescriptor, SearchSpace, derive_architecture
from fna.blocks import ConvBN, build_block, build_head, collect_state, load_state
from fna.errors import ArchError
from fna.tensor import Tensor


class MixedLayer:
    def __init__(self, op_specs, rng=None, dtype=np.float32):
        self.op_specs = tuple(op_specs)
        self.candidates = [build_block(op, rng, dtype) for op in self.op_specs]
        # alpha kept in float64: tiny vectors, high-precision search gradients
        self.alpha = Tensor(np.zeros(len(self.candidates), dtype=np.float64),
                            requires_grad=True)

    def mixed_forward(self, x, training=False, update_stats=True):
        weights = ops.softmax(self.alpha)
        outs = [c.forward(x, training, update_stats) for c in self.candidates]
        shape = outs[0].shape
        for i, o in enumerate(outs):
            if o.shape != shape:
                raise ArchError(
                    f"candidate {i} output shape {o.shape} != {shape}; "
                    f"mixed layers need shape-aligned candidates")
        return ops.weighted_sum(outs, weights)

    def path_forward(self, x, idx, training=False, update_stats=True):
        if not 0 <= idx < len(self.candidates):
            raise ArchError(f"candidate index {idx} out of range")
        return self.candidates[idx].forward(x, training, update_stats)


class SuperNet:
    """Stem + per-stage mixed layers + head, with path-sampling state."""

    def __init__(self, space: SearchSpace, rng_seed: int = 0, init_rng=None,
                 dtype=np.float32):
        space.validate()
        self.space = space
        self.dtype = dtype
        self.stem = ConvBN(space.stem.in_channels, space.stem.out_channels,
                           space.stem.kernel_size, space.stem.stride, act=True,
                           rng=init_rng, dtype=dtype)
        self.stages = []
        for stage in space.stages:
            row = []
            for cands in stage.candidates:
                if stage.spec.searchable:
                    row.append(MixedLayer(cands, init_rng, dtype))
                else:
                    row.append(build_block(cands[0], init_rng, dtype))
            self.stages.append(row)
        total_stride = space.stem.stride
        for stage in space.stages:
            total_stride *= stage.spec.stride
        self.head = build_head(space.head, space.stages[-1].spec.out_channels,
                               total_stride, init_rng, dtype)
        self.bn_updates_enabled = True
        self.rng = np.random.Generator(np.random.PCG64(rng_seed))

    # -- structure ------------------------------------------------------------

    def mixed_layers(self):
        """(stage_idx, layer_idx, MixedLayer) for every searched slot, in order."""
        for si, stage in enumerate(self.space.stages):
            if not stage.spec.searchable:
                continue
            for li in range(stage.spec.max_layers):
                yield si, li, self.stages[si][li]

    def alphas(self) -> list[Tensor]:
        return [layer.alpha for _, _, layer in self.mixed_layers()]

    def derive(self) -> ArchDescriptor:
        return derive_architecture(self.space, [a.data for a in self.alphas()])

    # -- forward passes ---------------------------------------------------------

    def features_mixed(self, x, training=True, update_stats=True):
        out = self.stem.forward(x, training, update_stats)
        for si, stage in enumerate(self.space.stages):
            for li, layer in enumerate(self.stages[si]):
                if stage.spec.searchable:
                    out = layer.mixed_forward(out, training, update_stats)
                else:
                    out = layer.forward(out, training, update_stats)
        return out

    def forward_mixed(self, x, training=True, update_stats=True):
        return self.head.forward(self.features_mixed(x, training, update_stats),
                                 training, update_stats)

    def forward_path(self, x, path, training=True, update_stats=True):
        """Forward through one sampled candidate per searched layer."""
        path = list(path)
        if len(path) != sum(1 for _ in self.mixed_layers()):
            raise ArchError(f"path length {len(path)} != number of searched layers")
        out = self.stem.forward(x, training, update_stats)
        it = iter(path)
        for si, stage in enumerate(self.space.stages):
            for li, layer in enumerate(self.stages[si]):
                if stage.spec.searchable:
                    out = layer.path_forward(out, next(it), training, update_stats)
                else:
                    out = layer.forward(out, training, update_stats)
        return self.head.forward(out, training, update_stats)

    def sample_path(self, rng=None) -> list[int]:
        """One candidate index per searched layer, drawn from softmax(alpha)."""
        rng = rng if rng is not None else self.rng
        path = []
        for _, _, layer in self.mixed_layers():
            a = layer.alpha.data
            e = np.exp(a - a.max())
            p = e / e.sum()
            path.append(int(rng.choice(len(p), p=p)))
        return path

    # -- BN control -------------------------------------------------------------

    def set_bn_updates(self, enabled: bool):
        """Enable/disable affine updates and running-stat accumulation of all BNs."""
        self.bn_updates_enabled = bool(enabled)
        for bn in self._all_bns():
            bn.frozen = not enabled

    def _all_bns(self):
        yield from self.stem.bn_params()
        for row in self.stages:
            for layer in row:
                if isinstance(layer, MixedLayer):
                    for cand in layer.candidates:
                        yield from cand.bn_params()
                else:
                    yield from layer.bn_params()
        yield from self.head.bn_params()

    # -- parameter access ---------------------------------------------------------

    def named_tensors(self):
        yield from self.stem.named_tensors("stem")
        for si, stage in enumerate(self.space.stages):
            for li, layer in enumerate(self.stages[si]):
                if stage.spec.searchable:
                    for ci, cand in enumerate(layer.candidates):
                        yield from cand.named_tensors(f"s{si}.l{li}.c{ci}")
                else:
                    yield from layer.named_tensors(f"s{si}.l{li}")
        yield from self.head.named_tensors("head")

    def _named_stats(self):
        yield from self.stem.named_stats("stem")
        for si, stage in enumerate(self.space.stages):
            for li, layer in enumerate(self.stages[si]):
                if stage.spec.searchable:
                    for ci, cand in enumerate(layer.candidates):
                        yield from cand.named_stats(f"s{si}.l{li}.c{ci}")
                else:
                    yield from layer.named_stats(f"s{si}.l{li}")
        yield from self.head.named_stats("head")

    def weight_parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return collect_state(self.named_tensors(), self._named_stats())

    def load_state_dict(self, state):
        load_state(dict(self.named_tensors()), dict(self._named_stats()), state)

    # -- rng state ---------------------------------------------------------------

    def get_rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_rng_state(self, state: dict):
        self.rng.bit_generator.state = state
