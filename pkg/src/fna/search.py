"""Architecture adaptation: warmup, alternating bilevel optimization with a
cost-regularized loss, argmax derivation, plus random-search and
random-sampling baselines and plain finetuning.

The loss optimized on the validation split is

    L = L_task + lambda * log10(expected_cost)

where expected_cost is the softmax(alpha)-weighted total MAdds. During
warmup only operation weights train (one sampled path per step);
afterwards every iteration pairs one weight step on the train split with
one alpha step (full mixture) on the validation split.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from fna import cost as cost_model
from fna import ops
from fna.arch import ArchDescriptor, SearchSpace, derive_architecture, serialize_arch
from fna.blocks import Network
from fna.errors import SearchDivergence
from fna.optim import Adam, SGDMomentum
from fna.remap import remap_seed_to_supernet, remap_seed_to_target
from fna.supernet import SuperNet
from fna.tasks import SyntheticDataset, evaluate
from fna.tensor import Tensor


@dataclass
class SearchConfig:
    total_epochs: int = 40
    warmup_epochs: int = 20
    lambda_cost: float = 1e-3
    val_fraction: float = 0.2
    w_lr: float = 0.05
    w_momentum: float = 0.9
    w_weight_decay: float = 1e-4
    alpha_lr: float = 3e-3
    alpha_weight_decay: float = 0.0
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs cannot exceed total_epochs")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction must lie in (0,1)")
        if self.lambda_cost < 0:
            raise ValueError("lambda_cost must be non-negative")


@dataclass
class TraceRecord:
    step: int
    epoch: int
    phase: str  # warmup | w | alpha
    task_loss: float
    cost_term: float
    expected_madds: float
    path: tuple | None
    arch_hash: str


@dataclass
class SearchTrace:
    records: list[TraceRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, rec: TraceRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("trace steps must be strictly increasing")
        self.records.append(rec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,epoch,phase,task_loss,cost_term,expected_madds,arch_hash\n")
        for r in self.records:
            buf.write(f"{r.step},{r.epoch},{r.phase},{r.task_loss!r},"
                      f"{r.cost_term!r},{r.expected_madds!r},{r.arch_hash}\n")
        return buf.getvalue()


def arch_hash(arch: ArchDescriptor) -> str:
    return hashlib.sha256(serialize_arch(arch).encode()).hexdigest()[:12]


def search_loss(task_loss: Tensor, expected_cost: Tensor, lam: float) -> Tensor:
    """task loss plus lambda * log10(cost); differentiable through both."""
    if float(expected_cost.data) <= 0:
        raise ValueError(f"expected cost must be positive, got {float(expected_cost.data)}")
    if lam == 0.0:
        return task_loss
    return ops.add(_as_dtype(task_loss, np.float64),
                   ops.scale(ops.log10(expected_cost), lam))


def _as_dtype(t: Tensor, dtype) -> Tensor:
    if t.dtype == dtype:
        return t
    y = t.data.astype(dtype)

    def backward(grad):
        if t.requires_grad:
            t.accumulate_grad(grad.astype(t.dtype))

    return Tensor.from_op(y, (t,), backward, t.requires_grad)


def _check_finite(value: float, what: str, partial):
    if not np.isfinite(value):
        raise SearchDivergence(f"non-finite {what} ({value}); aborting", partial=partial)


def _batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(indices)
    for start in range(0, len(order), batch_size):
        yield order[start: start + batch_size]


def run_search(space: SearchSpace, seed, dataset: SyntheticDataset, cfg: SearchConfig,
               strategy: str = "standard", on_step=None):
    """-> (derived ArchDescriptor, SuperNet, SearchTrace).

    seed is (seed ArchDescriptor, seed state dict) or None for a randomly
    initialized super network. on_step, when given, is called as
    on_step(phase, net) after every optimizer step (test instrumentation).
    """
    ss = np.random.SeedSequence(cfg.seed)
    init_seed, head_seed, split_seed, data_seed, path_seed = ss.spawn(5)
    input_hw = dataset.spec.resolution
    table = cost_model.build_cost_table(space, input_hw)

    if seed is not None:
        seed_arch, seed_state = seed
        net = SuperNet(space, rng_seed=0, init_rng=None)
        state, _plan = remap_seed_to_supernet(seed_arch, seed_state, space,
                                              strategy=strategy)
        net.load_state_dict(state)
    else:
        net = SuperNet(space, rng_seed=0,
                       init_rng=np.random.Generator(np.random.PCG64(init_seed)))
    net.set_rng_state(np.random.Generator(np.random.PCG64(path_seed)).bit_generator.state)

    split_rng = np.random.Generator(np.random.PCG64(split_seed))
    base = dataset.splits["train"]
    shuffled = split_rng.permutation(base)
    n_val = max(1, int(round(len(base) * cfg.val_fraction)))
    val_idx = np.sort(shuffled[:n_val])
    train_idx = np.sort(shuffled[n_val:])

    trace = SearchTrace(meta={
        "seed": cfg.seed,
        "strategy": strategy,
        "search_train_indices": train_idx.tolist(),
        "search_val_indices": val_idx.tolist(),
        "min_path_madds": table.min_total(),
        "max_path_madds": table.max_total(),
    })

    w_opt = SGDMomentum(net.weight_parameters(), cfg.w_lr, cfg.w_momentum,
                        cfg.w_weight_decay)
    a_opt = Adam(net.alphas(), cfg.alpha_lr, weight_decay=cfg.alpha_weight_decay)
    data_rng = np.random.Generator(np.random.PCG64(data_seed))

    def snapshot():
        alphas = [a.data for a in net.alphas()]
        expected = float(table.fixed_cost)
        for row, a in zip(table.layer_costs, alphas):
            expected += cost_model.expected_layer_cost(row, a)
        return expected, arch_hash(derive_architecture(space, alphas))

    step = 0
    for epoch in range(cfg.total_epochs):
        warm = epoch < cfg.warmup_epochs
        phase = "warmup" if warm else "w"
        val_batches = None if warm else _batches(val_idx, cfg.batch_size, data_rng)
        for batch in _batches(train_idx, cfg.batch_size, data_rng):
            # weight step on one sampled path
            x = Tensor(dataset.images[batch].astype(net.dtype))
            y = dataset.labels[batch]
            path = net.sample_path()
            try:
                logits = net.forward_path(x, path, training=True, update_stats=True)
                loss = ops.softmax_cross_entropy(logits, y)
            except FloatingPointError as e:
                raise SearchDivergence(f"non-finite state in weight step: {e}",
                                       partial=trace) from e
            task_loss = float(loss.data)
            _check_finite(task_loss, "weight-step loss", trace)
            w_opt.zero_grad()
            a_opt.zero_grad()
            loss.backward()
            w_opt.step()
            step += 1
            expected, h = snapshot()
            cost_term = cfg.lambda_cost * np.log10(expected)
            trace.append(TraceRecord(step, epoch, phase, task_loss,
                                     float(cost_term), expected, tuple(path), h))
            if on_step is not None:
                on_step(phase, net)

            if warm:
                continue
            # alpha step on the next validation batch, full mixture
            if val_batches is None:
                val_batches = _batches(val_idx, cfg.batch_size, data_rng)
            vb = next(val_batches, None)
            if vb is None:
                val_batches = _batches(val_idx, cfg.batch_size, data_rng)
                vb = next(val_batches)
            xv = Tensor(dataset.images[vb].astype(net.dtype))
            yv = dataset.labels[vb]
            try:
                logits_v = net.forward_mixed(xv, training=True, update_stats=False)
                task_v = ops.softmax_cross_entropy(logits_v, yv)
                expected_cost = cost_model.expected_network_cost(table, net.alphas())
                total = search_loss(task_v, expected_cost, cfg.lambda_cost)
            except FloatingPointError as e:
                raise SearchDivergence(f"non-finite state in alpha step: {e}",
                                       partial=trace) from e
            _check_finite(float(total.data), "alpha-step loss", trace)
            w_opt.zero_grad()
            a_opt.zero_grad()
            total.backward()
            a_opt.step()
            step += 1
            expected, h = snapshot()
            cost_term = cfg.lambda_cost * np.log10(expected)
            trace.append(TraceRecord(step, epoch, "alpha", float(task_v.data),
                                     float(cost_term), expected, None, h))
            if on_step is not None:
                on_step("alpha", net)

    final = net.derive()
    return final, net, trace


# ---------------------------------------------------------------------------
# random search / random sampling baselines
# ---------------------------------------------------------------------------

def sample_architecture(space: SearchSpace, rng: np.random.Generator) -> ArchDescriptor:
    """Uniformly draw one candidate per searched layer (Identity included)."""
    alphas = []
    for _, _, cands in space.searchable_layers():
        a = np.zeros(len(cands))
        a[rng.integers(len(cands))] = 1.0
        alphas.append(a)
    return derive_architecture(space, alphas)


def sample_architecture_in_window(space: SearchSpace, input_hw, cost_target: float,
                                  tolerance: float, rng: np.random.Generator,
                                  max_tries: int = 2000) -> ArchDescriptor:
    lo = cost_target * (1.0 - tolerance)
    hi = cost_target * (1.0 + tolerance)
    for _ in range(max_tries):
        arch = sample_architecture(space, rng)
        madds = cost_model.arch_madds(arch, input_hw)
        if lo <= madds <= hi:
            return arch
    raise SearchDivergence(
        f"could not sample an architecture with MAdds in [{lo:.3g}, {hi:.3g}] "
        f"after {max_tries} tries")


def run_random_sample_baseline(space: SearchSpace, n: int, cost_target: float,
                               tolerance: float, rng: np.random.Generator,
                               input_hw) -> list[ArchDescriptor]:
    """n architectures rejection-sampled into the MAdds window; no training."""
    return [sample_architecture_in_window(space, input_hw, cost_target, tolerance, rng)
            for _ in range(n)]


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0


def finetune(arch: ArchDescriptor, init_state, dataset: SyntheticDataset,
             cfg: FinetuneConfig):
    """Supervised training of one concrete architecture.

    init_state None means random initialization. Returns (Network, curve)
    where curve rows are {epoch, train_loss, val_metric}.
    """
    ss = np.random.SeedSequence(cfg.seed)
    init_seed, data_seed = ss.spawn(2)
    if init_state is None:
        net = Network(arch, rng=np.random.Generator(np.random.PCG64(init_seed)))
    else:
        net = Network(arch, rng=None)
        net.load_state_dict(init_state)
    opt = SGDMomentum(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    data_rng = np.random.Generator(np.random.PCG64(data_seed))
    train_idx = dataset.splits["train"]
    curve = []
    for epoch in range(cfg.epochs):
        losses = []
        for batch in _batches(train_idx, cfg.batch_size, data_rng):
            x = Tensor(dataset.images[batch].astype(net.dtype))
            y = dataset.labels[batch]
            try:
                logits = net.forward(x, training=True)
                loss = ops.softmax_cross_entropy(logits, y)
            except FloatingPointError as e:
                raise SearchDivergence(f"non-finite state in finetune: {e}",
                                       partial=curve) from e
            val = float(loss.data)
            _check_finite(val, "finetune loss", curve)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(val)
        report = evaluate(net, dataset, split="val")
        curve.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_metric": float(report["metric"]),
        })
    return net, curve


def curve_to_csv(curve: list[dict]) -> str:
    buf = io.StringIO()
    buf.write("epoch,train_loss,val_metric\n")
    for row in curve:
        buf.write(f"{row['epoch']},{row['train_loss']!r},{row['val_metric']!r}\n")
    return buf.getvalue()


def run_random_search(space: SearchSpace, seed, dataset: SyntheticDataset,
                      n_samples: int, cost_target: float, tolerance: float,
                      rng_seed: int = 0, short_epochs: int = 1,
                      strategy: str = "standard"):
    """Rejection-sample n architectures in the MAdds window, remap the seed
    into each, train each briefly, and return the best by validation metric.

    -> (best ArchDescriptor, per-candidate report list)
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    ss = np.random.SeedSequence(rng_seed)
    sample_seed, ft_seed = ss.spawn(2)
    rng = np.random.Generator(np.random.PCG64(sample_seed))
    input_hw = dataset.spec.resolution
    reports = []
    best = None
    for i in range(n_samples):
        arch = sample_architecture_in_window(space, input_hw, cost_target, tolerance, rng)
        if seed is not None:
            seed_arch, seed_state = seed
            init_state, _ = remap_seed_to_target(seed_arch, seed_state, arch,
                                                 strategy=strategy)
        else:
            init_state = None
        _, curve = finetune(arch, init_state, dataset,
                            FinetuneConfig(epochs=short_epochs,
                                           seed=int(ft_seed.generate_state(1)[0]) + i))
        metric = curve[-1]["val_metric"] if curve else 0.0
        madds = cost_model.arch_madds(arch, input_hw)
        reports.append({"index": i, "madds": madds, "val_metric": metric, "arch": arch})
        if best is None or metric > best[0]:
            best = (metric, arch)
    return best[1], reports
