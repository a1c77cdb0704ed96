"""End-to-end CLI runs on a miniature configuration: artifacts,
reproducibility, exit codes."""

import json
import os

import pytest

from fna import cost as cost_model
from fna.arch import deserialize_arch
from fna.cli import main

FAST_CONFIG = {
    "seed": 0,
    "seed_task": {"family": "stripes", "classes": 2, "resolution": [16, 16],
                  "size": 60, "seed": 100, "noise": 0.0},
    "target_task": {"family": "context_markers", "classes": 2, "resolution": [16, 16],
                    "size": 60, "seed": 200, "noise": 0.05, "context_radius": 3},
    "seed_arch": {"family": "mbconv", "in_channels": 1, "stem_channels": 4,
                  "stem_stride": 1, "first_channels": 4, "stage_channels": [8, 8],
                  "stage_layers": [1, 1], "stage_strides": [1, 1], "expansion": 6},
    "profile": {"name": "custom", "stage_layers": [1, 1], "stage_strides": [1, 1]},
    "seed_train": {"epochs": 4, "lr": 0.1, "momentum": 0.9, "weight_decay": 1e-4,
                   "batch_size": 8},
    "search": {"total_epochs": 3, "warmup_epochs": 1, "lambda_cost": 1e-3,
               "val_fraction": 0.25, "w_lr": 0.05, "w_momentum": 0.9,
               "w_weight_decay": 1e-4, "alpha_lr": 3e-3, "alpha_weight_decay": 0.0,
               "batch_size": 8},
    "finetune": {"epochs": 2, "lr": 0.05, "momentum": 0.9, "weight_decay": 1e-4,
                 "batch_size": 8},
    "random_search": {"n_samples": 2, "cost_target": None, "cost_tolerance": 1.0,
                      "short_epochs": 1},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(FAST_CONFIG))
    return str(path)


def run(argv):
    return main(argv)


def train_seed(config_path, out):
    code = run(["train-seed", "--config", config_path, "--out", out])
    assert code == 0
    return out


class TestTrainSeed:
    def test_creates_missing_output_dir_and_artifacts(self, config_path, tmp_path):
        out = str(tmp_path / "nested" / "run1")
        train_seed(config_path, out)
        for name in ("seed.ckpt", "seed_arch.json", "seed_train_curve.csv",
                     "seed_summary.json", "config.json"):
            assert os.path.exists(os.path.join(out, name)), name

    def test_reaches_95_percent_on_zero_noise_task(self, config_path, tmp_path):
        out = str(tmp_path / "acc")
        train_seed(config_path, out)
        summary = json.load(open(os.path.join(out, "seed_summary.json")))
        assert summary["test"]["accuracy"] >= 0.95

    def test_deterministic_checkpoint(self, config_path, tmp_path):
        a = str(tmp_path / "a")
        b = str(tmp_path / "b")
        train_seed(config_path, a)
        train_seed(config_path, b)
        with open(os.path.join(a, "seed.ckpt"), "rb") as f:
            ba = f.read()
        with open(os.path.join(b, "seed.ckpt"), "rb") as f:
            bb = f.read()
        assert ba == bb


class TestAdapt:
    def test_full_pipeline_and_artifacts(self, config_path, tmp_path):
        out = str(tmp_path / "run")
        train_seed(config_path, out)
        code = run(["adapt", "--config", config_path, "--out", out, "--explain-remap"])
        assert code == 0
        for name in ("search_trace.csv", "arch.json", "cost_report.txt",
                     "finetune_curve.csv", "supernet.ckpt", "target.ckpt",
                     "summary.json", "remap_plan.txt"):
            assert os.path.exists(os.path.join(out, name)), name
        arch = deserialize_arch(open(os.path.join(out, "arch.json")).read())
        arch.validate()
        trace = open(os.path.join(out, "search_trace.csv")).read()
        assert trace.splitlines()[0] == \
            "step,epoch,phase,task_loss,cost_term,expected_madds,arch_hash"

    def test_reruns_are_byte_identical(self, config_path, tmp_path):
        base = str(tmp_path / "base")
        train_seed(config_path, base)
        outs = []
        for name in ("r1", "r2"):
            out = str(tmp_path / name)
            cfg = dict(FAST_CONFIG)
            cfg["seed_checkpoint"] = os.path.join(base, "seed.ckpt")
            path = tmp_path / f"cfg_{name}.json"
            path.write_text(json.dumps(cfg))
            assert run(["adapt", "--config", str(path), "--out", out]) == 0
            outs.append(out)
        for artifact in ("search_trace.csv", "finetune_curve.csv", "arch.json",
                         "cost_report.txt"):
            a = open(os.path.join(outs[0], artifact), "rb").read()
            b = open(os.path.join(outs[1], artifact), "rb").read()
            assert a == b, artifact

    def test_adapt_sources_produce_distinct_runs(self, config_path, tmp_path):
        base = str(tmp_path / "base")
        train_seed(config_path, base)
        curves = {}
        for source in ("supernet", "seed", "random"):
            out = str(tmp_path / source)
            cfg = dict(FAST_CONFIG)
            cfg["seed_checkpoint"] = os.path.join(base, "seed.ckpt")
            path = tmp_path / f"cfg_{source}.json"
            path.write_text(json.dumps(cfg))
            assert run(["adapt", "--config", str(path), "--out", out,
                        "--adapt-source", source]) == 0
            curves[source] = open(os.path.join(out, "finetune_curve.csv")).read()
            summary = json.load(open(os.path.join(out, "summary.json")))
            assert summary["adapt_source"] == source
        assert curves["supernet"] != curves["random"]
        assert curves["seed"] != curves["random"]

    def test_missing_seed_checkpoint_fails_with_marker(self, config_path, tmp_path):
        out = str(tmp_path / "nockpt")
        code = run(["adapt", "--config", config_path, "--out", out])
        assert code == 2
        assert os.path.exists(os.path.join(out, "FAILED.txt"))


class TestRandomSearchCmd:
    def test_runs_and_respects_window(self, config_path, tmp_path):
        out = str(tmp_path / "rs")
        train_seed(config_path, out)
        code = run(["random-search", "--config", config_path, "--out", out])
        assert code == 0
        summary = json.load(open(os.path.join(out, "summary.json")))
        lo = summary["cost_target"] * (1 - summary["cost_tolerance"])
        hi = summary["cost_target"] * (1 + summary["cost_tolerance"])
        rows = open(os.path.join(out, "random_candidates.csv")).read().splitlines()[1:]
        assert len(rows) == FAST_CONFIG["random_search"]["n_samples"]
        for row in rows:
            madds = int(row.split(",")[1])
            assert lo <= madds <= hi


class TestQueryCommands:
    def test_cost_command_matches_cost_model(self, config_path, tmp_path, capsys):
        out = str(tmp_path / "run")
        train_seed(config_path, out)
        arch_path = os.path.join(out, "seed_arch.json")
        assert run(["cost", arch_path, "--resolution", "16x16"]) == 0
        printed = capsys.readouterr().out
        total = int([ln for ln in printed.splitlines()
                     if ln.startswith("total")][-1].split()[-1])
        arch = deserialize_arch(open(arch_path).read())
        assert total == cost_model.network_cost(arch, (16, 16))

    def test_remap_command_writes_plan(self, config_path, tmp_path, capsys):
        out = str(tmp_path / "run")
        train_seed(config_path, out)
        cfg = dict(FAST_CONFIG)
        cfg["seed_checkpoint"] = os.path.join(out, "seed.ckpt")
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        arch_path = os.path.join(out, "seed_arch.json")
        assert run(["remap", "--config", str(path), "--out", out,
                    "--explain-remap", arch_path]) == 0
        assert os.path.exists(os.path.join(out, "remapped.ckpt"))
        plan = open(os.path.join(out, "remap_plan.txt")).read()
        assert "stem.weight <- stem.weight" in plan

    def test_eval_command(self, config_path, tmp_path, capsys):
        out = str(tmp_path / "run")
        train_seed(config_path, out)
        capsys.readouterr()  # drop train-seed output
        assert run(["eval", "--config", config_path,
                    os.path.join(out, "seed.ckpt"), "--task", "seed",
                    "--split", "test"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["task"] == "classification"
        assert 0.0 <= report["accuracy"] <= 1.0


class TestExitCodes:
    def test_usage_error_is_exit_1(self):
        with pytest.raises(SystemExit) as e:
            main(["adapt", "--bogus-flag"])
        assert e.value.code == 1

    def test_unreadable_config_is_usage_error(self, tmp_path):
        assert main(["adapt", "--config", str(tmp_path / "nope.json")]) == 1

    def test_runtime_failure_is_exit_2(self, config_path, tmp_path):
        out = str(tmp_path / "x")
        assert main(["adapt", "--config", config_path, "--out", out]) == 2
