"""Command-line driver for the full adaptation pipeline.

Subcommands: train-seed, adapt, random-search, cost, remap, eval.
Every run resolves its configuration (defaults <- config file <- flags),
persists it next to the outputs, and is byte-reproducible from
(config, seed). Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from fna import checkpoint as ckpt
from fna import cost as cost_model
from fna import search as search_mod
from fna import tasks
from fna.arch import (ArchDescriptor, TaskProfile, build_mbconv_space, build_resnet_space,
                      deserialize_arch, make_mbconv_seed, make_resnet_seed, serialize_arch,
                      task_profile)
from fna.errors import ArchError, CheckpointError, RemapError, SearchDivergence
from fna.remap import remap_seed_to_target, remap_supernet_to_target
from fna.search import FinetuneConfig, SearchConfig

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "runs/default",
    "strategy": "standard",
    "adapt_source": "supernet",
    "search_init": "remap",  # remap | random
    "seed_checkpoint": None,  # defaults to <out>/seed.ckpt at adapt time
    "seed_task": {
        "family": "marker_count", "classes": 2, "resolution": [24, 24],
        "size": 120, "seed": 100, "noise": 0.05, "background": "stripes",
        "marker_amplitude": 3.0, "marker_counts": [2, 10],
    },
    "target_task": {
        "family": "context_markers", "classes": 2, "resolution": [24, 24],
        "size": 120, "seed": 200, "noise": 0.05, "context_radius": 5,
        "background": "stripes", "marker_amplitude": 3.0,
    },
    "seed_arch": {
        "family": "mbconv", "in_channels": 1, "stem_channels": 8, "stem_stride": 1,
        "first_channels": 8, "stage_channels": [8, 16], "stage_layers": [1, 1],
        "stage_strides": [1, 1], "expansion": 6,
    },
    "profile": {
        "name": "custom", "stage_layers": [1, 1], "stage_strides": [1, 1],
        "layer_factor": 0.5, "flat_strides": False, "include_identity": True,
    },
    "seed_train": {"epochs": 8, "lr": 0.1, "momentum": 0.9, "weight_decay": 1e-4,
                   "batch_size": 8},
    "search": {"total_epochs": 40, "warmup_epochs": 20, "lambda_cost": 1e-3,
               "val_fraction": 0.2, "w_lr": 0.05, "w_momentum": 0.9,
               "w_weight_decay": 1e-4, "alpha_lr": 3e-3, "alpha_weight_decay": 0.0,
               "batch_size": 8},
    "finetune": {"epochs": 8, "lr": 0.03, "momentum": 0.9, "weight_decay": 1e-4,
                 "batch_size": 8},
    "random_search": {"n_samples": 8, "cost_target": None, "cost_tolerance": 0.3,
                      "short_epochs": 1},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


class UsageError(Exception):
    pass


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            with open(args.config) as f:
                loaded = json.load(f)
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config {args.config} is not valid JSON: line {e.lineno}: {e.msg}")
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        cfg = _deep_merge(cfg, loaded)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["out"] = args.out
    if getattr(args, "strategy", None):
        cfg["strategy"] = args.strategy
    if getattr(args, "adapt_source", None):
        cfg["adapt_source"] = args.adapt_source
    if getattr(args, "lambda_cost", None) is not None:
        cfg["search"]["lambda_cost"] = args.lambda_cost
    return cfg


def _write(path: str, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def _persist_config(cfg: dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "config.json"),
           json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _dataset_spec(d: dict) -> tasks.DatasetSpec:
    d = dict(d)
    d["resolution"] = tuple(d["resolution"])
    if d.get("marker_counts") is not None:
        d["marker_counts"] = tuple(d["marker_counts"])
    return tasks.DatasetSpec(**d)


def _seed_descriptor(cfg: dict) -> ArchDescriptor:
    sa = cfg["seed_arch"]
    head = f"classification:{cfg['seed_task']['classes']}"
    if sa["family"] == "mbconv":
        return make_mbconv_seed(
            sa["in_channels"], sa["stem_channels"], sa["first_channels"],
            tuple(sa["stage_channels"]), tuple(sa["stage_layers"]),
            tuple(sa["stage_strides"]), head, stem_stride=sa.get("stem_stride", 1),
            expansion=sa.get("expansion", 6))
    if sa["family"] == "resnet":
        return make_resnet_seed(
            sa["in_channels"], sa["stem_channels"], tuple(sa["stage_channels"]),
            tuple(sa["stage_layers"]), tuple(sa["stage_strides"]), head,
            stem_stride=sa.get("stem_stride", 1), bottleneck=sa.get("bottleneck", False))
    raise UsageError(f"unknown seed_arch family {sa['family']!r}")


def _build_space(cfg: dict, seed_arch: ArchDescriptor):
    p = cfg["profile"]
    head = f"dense:{cfg['target_task']['classes']}"
    if cfg["seed_arch"]["family"] == "resnet":
        return build_resnet_space(seed_arch)
    if p.get("name", "custom") == "custom":
        profile = TaskProfile(
            name="custom",
            stage_layers=tuple(p["stage_layers"]),
            stage_strides=tuple(p["stage_strides"]),
            include_identity=p.get("include_identity", True),
            head=head)
    else:
        base = task_profile(p["name"], len(cfg["seed_arch"]["stage_channels"]),
                            p.get("layer_factor", 0.5), p.get("flat_strides", False))
        profile = TaskProfile(
            name=base.name, stage_layers=base.stage_layers,
            stage_strides=base.stage_strides,
            include_identity=p.get("include_identity", True), head=head)
    return build_mbconv_space(seed_arch, profile)


def _load_seed(cfg: dict):
    path = cfg.get("seed_checkpoint") or os.path.join(cfg["out"], "seed.ckpt")
    if not os.path.exists(path):
        raise CheckpointError(
            f"seed checkpoint {path} not found; run `fna train-seed` first or set "
            f"seed_checkpoint in the config")
    arch, net = ckpt.load_network(path)
    return arch, net.state_dict()


def _search_config(cfg: dict) -> SearchConfig:
    return SearchConfig(seed=cfg["seed"], **cfg["search"])


def _finetune_config(cfg: dict, seed_offset: int = 0) -> FinetuneConfig:
    return FinetuneConfig(seed=cfg["seed"] + seed_offset, **cfg["finetune"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_seed(cfg: dict) -> int:
    out = cfg["out"]
    _persist_config(cfg, out)
    dataset = tasks.make_seed_task(_dataset_spec(cfg["seed_task"]))
    arch = _seed_descriptor(cfg)
    st = cfg["seed_train"]
    ft = FinetuneConfig(epochs=st["epochs"], lr=st["lr"], momentum=st["momentum"],
                        weight_decay=st["weight_decay"], batch_size=st["batch_size"],
                        seed=cfg["seed"])
    net, curve = search_mod.finetune(arch, None, dataset, ft)
    report = tasks.evaluate(net, dataset, split="test")
    ckpt.save_network(os.path.join(out, "seed.ckpt"), arch, net,
                      meta={"val_accuracy": report["accuracy"]})
    _write(os.path.join(out, "seed_arch.json"), serialize_arch(arch))
    _write(os.path.join(out, "seed_train_curve.csv"), search_mod.curve_to_csv(curve))
    _write(os.path.join(out, "seed_summary.json"), json.dumps(
        {"test": report, "final_train_loss": curve[-1]["train_loss"] if curve else None},
        indent=2, sort_keys=True, default=float) + "\n")
    print(f"seed checkpoint written to {os.path.join(out, 'seed.ckpt')}; "
          f"test accuracy {report['accuracy']:.3f}")
    return 0


def _adapt_params(cfg, stage, space, supernet, seed_pair, arch):
    source = cfg["adapt_source"]
    if source == "supernet":
        return remap_supernet_to_target(space, supernet.state_dict(), arch)
    if source == "seed":
        if seed_pair is None:
            raise RemapError("adapt_source=seed needs a seed checkpoint")
        return remap_seed_to_target(seed_pair[0], seed_pair[1], arch,
                                    strategy=cfg["strategy"])
    if source == "random":
        return None, None
    raise UsageError(f"unknown adapt_source {source!r}")


def cmd_adapt(cfg: dict, explain_remap: bool = False) -> int:
    out = cfg["out"]
    _persist_config(cfg, out)
    stage = "load-seed"
    try:
        seed_pair = _load_seed(cfg) if (cfg["search_init"] == "remap"
                                        or cfg["adapt_source"] == "seed") else None
        stage = "build-space"
        seed_arch = seed_pair[0] if seed_pair else _seed_descriptor(cfg)
        space = _build_space(cfg, seed_arch)
        dataset = tasks.make_target_task(_dataset_spec(cfg["target_task"]))
        input_hw = dataset.spec.resolution

        stage = "search"
        search_seed = seed_pair if cfg["search_init"] == "remap" else None
        arch, supernet, trace = search_mod.run_search(
            space, search_seed, dataset, _search_config(cfg), strategy=cfg["strategy"])
        _write(os.path.join(out, "search_trace.csv"), trace.to_csv())
        ckpt.save_supernet(os.path.join(out, "supernet.ckpt"), supernet)

        stage = "derive"
        _write(os.path.join(out, "arch.json"), serialize_arch(arch))
        _write(os.path.join(out, "cost_report.txt"),
               cost_model.cost_report(arch, input_hw))

        stage = "adapt-params"
        init_state, plan = _adapt_params(cfg, stage, space, supernet, seed_pair, arch)
        if explain_remap:
            plans = []
            if plan is not None:
                plans.append(f"# parameter adaptation ({cfg['adapt_source']})\n"
                             + plan.dump())
            _write(os.path.join(out, "remap_plan.txt"),
                   "\n".join(plans) or "# random initialization: no remapping\n")

        stage = "finetune"
        net, curve = search_mod.finetune(arch, init_state, dataset, _finetune_config(cfg))
        _write(os.path.join(out, "finetune_curve.csv"), search_mod.curve_to_csv(curve))
        ckpt.save_network(os.path.join(out, "target.ckpt"), arch, net)

        stage = "evaluate"
        val = tasks.evaluate(net, dataset, split="val")
        test = tasks.evaluate(net, dataset, split="test")
        summary = {
            "arch_hash": search_mod.arch_hash(arch),
            "arch_madds": cost_model.arch_madds(arch, input_hw),
            "val": val,
            "test": test,
            "adapt_source": cfg["adapt_source"],
            "search_init": cfg["search_init"],
            "strategy": cfg["strategy"],
        }
        _write(os.path.join(out, "summary.json"),
               json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
        print(f"adapted architecture {summary['arch_hash']} "
              f"({summary['arch_madds']} MAdds): val {val['metric']:.3f}, "
              f"test {test['metric']:.3f}")
        return 0
    except (ArchError, RemapError, CheckpointError, SearchDivergence,
            FloatingPointError, ValueError) as e:
        _write(os.path.join(out, "FAILED.txt"), f"stage: {stage}\nerror: {e}\n")
        print(f"adapt failed during {stage}: {e}", file=sys.stderr)
        return 2


def cmd_random_search(cfg: dict) -> int:
    out = cfg["out"]
    _persist_config(cfg, out)
    stage = "load-seed"
    try:
        seed_pair = _load_seed(cfg) if cfg["search_init"] == "remap" else None
        seed_arch = seed_pair[0] if seed_pair else _seed_descriptor(cfg)
        stage = "build-space"
        space = _build_space(cfg, seed_arch)
        dataset = tasks.make_target_task(_dataset_spec(cfg["target_task"]))
        input_hw = dataset.spec.resolution
        rs = cfg["random_search"]
        table = cost_model.build_cost_table(space, input_hw)
        cost_target = rs["cost_target"]
        if cost_target is None:
            cost_target = 0.5 * (table.min_total() + table.max_total())

        stage = "random-search"
        best_arch, reports = search_mod.run_random_search(
            space, seed_pair, dataset, rs["n_samples"], cost_target,
            rs["cost_tolerance"], rng_seed=cfg["seed"],
            short_epochs=rs["short_epochs"], strategy=cfg["strategy"])
        lines = ["index,madds,val_metric,arch_hash"]
        for r in reports:
            lines.append(f"{r['index']},{r['madds']},{r['val_metric']!r},"
                         f"{search_mod.arch_hash(r['arch'])}")
        _write(os.path.join(out, "random_candidates.csv"), "\n".join(lines) + "\n")
        _write(os.path.join(out, "arch.json"), serialize_arch(best_arch))
        _write(os.path.join(out, "cost_report.txt"),
               cost_model.cost_report(best_arch, input_hw))

        stage = "adapt-params"
        if seed_pair is not None and cfg["adapt_source"] != "random":
            init_state, _ = remap_seed_to_target(seed_pair[0], seed_pair[1], best_arch,
                                                 strategy=cfg["strategy"])
        else:
            init_state = None

        stage = "finetune"
        net, curve = search_mod.finetune(best_arch, init_state, dataset,
                                         _finetune_config(cfg))
        _write(os.path.join(out, "finetune_curve.csv"), search_mod.curve_to_csv(curve))
        ckpt.save_network(os.path.join(out, "target.ckpt"), best_arch, net)

        stage = "evaluate"
        val = tasks.evaluate(net, dataset, split="val")
        test = tasks.evaluate(net, dataset, split="test")
        summary = {
            "arch_hash": search_mod.arch_hash(best_arch),
            "arch_madds": cost_model.arch_madds(best_arch, input_hw),
            "cost_target": cost_target,
            "cost_tolerance": rs["cost_tolerance"],
            "val": val,
            "test": test,
        }
        _write(os.path.join(out, "summary.json"),
               json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
        print(f"random search picked {summary['arch_hash']} "
              f"({summary['arch_madds']} MAdds): val {val['metric']:.3f}")
        return 0
    except (ArchError, RemapError, CheckpointError, SearchDivergence,
            FloatingPointError, ValueError) as e:
        _write(os.path.join(out, "FAILED.txt"), f"stage: {stage}\nerror: {e}\n")
        print(f"random-search failed during {stage}: {e}", file=sys.stderr)
        return 2


def cmd_cost(args) -> int:
    try:
        with open(args.arch) as f:
            arch = deserialize_arch(f.read())
    except OSError as e:
        raise UsageError(f"cannot read architecture {args.arch}: {e}")
    try:
        h, w = (int(v) for v in args.resolution.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad resolution {args.resolution!r}, expected HxW like 24x24")
    print(cost_model.cost_report(arch, (h, w)), end="")
    return 0


def cmd_remap(cfg: dict, args) -> int:
    seed_pair = _load_seed(cfg)
    with open(args.arch) as f:
        arch = deserialize_arch(f.read())
    state, plan = remap_seed_to_target(seed_pair[0], seed_pair[1], arch,
                                       strategy=cfg["strategy"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    from fna.blocks import Network

    net = Network(arch, rng=None)
    net.load_state_dict(state)
    ckpt.save_network(os.path.join(out, "remapped.ckpt"), arch, net)
    if args.explain_remap:
        _write(os.path.join(out, "remap_plan.txt"), plan.dump())
        print(plan.dump(), end="")
    print(f"remapped checkpoint written to {os.path.join(out, 'remapped.ckpt')}")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    arch, net = ckpt.load_network(args.ckpt)
    which = cfg["target_task"] if args.task == "target" else cfg["seed_task"]
    spec = _dataset_spec(which)
    dataset = tasks.make_target_task(spec) if args.task == "target" \
        else tasks.make_seed_task(spec)
    report = tasks.evaluate(net, dataset, split=args.split)
    print(json.dumps(report, indent=2, sort_keys=True, default=float))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="master rng seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--strategy", choices=("standard", "bn_gamma", "weight_std",
                                          "weight_l1", "kernel_dilate"),
                   help="parameter remapping strategy")
    p.add_argument("--adapt-source", dest="adapt_source",
                   choices=("supernet", "seed", "random"),
                   help="where the derived architecture's initial parameters come from")
    p.add_argument("--lambda", dest="lambda_cost", type=float, default=None,
                   help="cost-regularization weight")
    p.add_argument("--explain-remap", dest="explain_remap", action="store_true",
                   help="dump the remapping plan alongside the outputs")


def build_parser() -> _Parser:
    parser = _Parser(prog="fna", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train-seed", "adapt", "random-search"):
        p = sub.add_parser(name)
        _add_common(p)

    p = sub.add_parser("cost")
    p.add_argument("arch", help="architecture descriptor JSON")
    p.add_argument("--resolution", default="24x24", help="input resolution HxW")

    p = sub.add_parser("remap")
    _add_common(p)
    p.add_argument("arch", help="target architecture descriptor JSON")

    p = sub.add_parser("eval")
    _add_common(p)
    p.add_argument("ckpt", help="network checkpoint")
    p.add_argument("--task", choices=("seed", "target"), default="target")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "cost":
            return cmd_cost(args)
        cfg = resolve_config(args)
        if args.command == "train-seed":
            return cmd_train_seed(cfg)
        if args.command == "adapt":
            return cmd_adapt(cfg, explain_remap=args.explain_remap)
        if args.command == "random-search":
            return cmd_random_search(cfg)
        if args.command == "remap":
            return cmd_remap(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ArchError, RemapError, CheckpointError, SearchDivergence,
            FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
