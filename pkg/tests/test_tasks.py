"""Synthetic task generators, the metric report, and the
receptive-field accuracy bound."""

import numpy as np
import pytest

from fna import tasks
from fna.arch import make_mbconv_seed
from fna.search import FinetuneConfig, finetune
from fna.tasks import DatasetSpec


def stripes_spec(**kw):
    base = dict(family="stripes", classes=2, resolution=(16, 16), size=60,
                seed=3, noise=0.0)
    base.update(kw)
    return DatasetSpec(**base)


def markers_spec(**kw):
    base = dict(family="context_markers", classes=2, resolution=(20, 20), size=60,
                seed=4, noise=0.05, context_radius=5)
    base.update(kw)
    return DatasetSpec(**base)


class TestGeneration:
    def test_same_spec_same_data(self):
        a = tasks.make_seed_task(stripes_spec())
        b = tasks.make_seed_task(stripes_spec())
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seed_different_data(self):
        a = tasks.make_seed_task(stripes_spec())
        b = tasks.make_seed_task(stripes_spec(seed=99))
        assert not np.array_equal(a.images, b.images)

    def test_splits_are_disjoint_and_cover(self):
        ds = tasks.make_target_task(markers_spec())
        all_idx = np.concatenate([ds.splits[s] for s in ("train", "val", "test")])
        assert len(set(all_idx.tolist())) == len(all_idx) == len(ds)

    def test_dense_labels_match_window_rule(self):
        ds = tasks.make_target_task(markers_spec(noise=0.0, size=10))
        markers = ds.images[:, 0] > ds.spec.marker_amplitude / 2
        r = ds.spec.context_radius
        h, w = ds.spec.resolution
        for n in (0, 3):
            for i in (0, 7, h - 1):
                for j in (0, 11, w - 1):
                    window = markers[n, max(0, i - r): i + r + 1,
                                     max(0, j - r): j + r + 1]
                    assert ds.labels[n, i, j] == int(window.any())

    def test_marker_density_balances_classes(self):
        ds = tasks.make_target_task(markers_spec(size=200))
        frac = ds.labels.mean()
        assert 0.35 < frac < 0.65

    def test_constant_label_family(self):
        ds = tasks.make_target_task(markers_spec(family="constant_label"))
        assert np.all(ds.labels == 0)

    def test_bad_family_rejected(self):
        with pytest.raises(ValueError):
            DatasetSpec(family="imagenet", classes=2, resolution=(8, 8), size=10, seed=0)
        with pytest.raises(ValueError):
            tasks.make_seed_task(markers_spec())


class TestMetricReport:
    def test_perfect_predictions_score_one(self):
        conf = tasks.confusion_matrix(np.array([0, 1, 1, 0]), np.array([0, 1, 1, 0]), 2)
        miou, _ = tasks.miou_from_confusion(conf)
        assert miou == 1.0

    def test_single_class_prediction_on_balanced_map(self):
        truth = np.array([0] * 50 + [1] * 50)
        pred = np.zeros(100, dtype=np.int64)
        miou, per_class = tasks.miou_from_confusion(
            tasks.confusion_matrix(truth, pred, 2))
        assert per_class[0] == 0.5 and per_class[1] == 0.0
        assert miou == 0.25

    def test_absent_class_excluded_from_mean(self):
        truth = np.array([0, 0, 1, 1])
        pred = np.array([0, 0, 1, 1])
        conf = tasks.confusion_matrix(truth, pred, 3)
        miou, per_class = tasks.miou_from_confusion(conf)
        assert per_class[2] is None
        assert miou == 1.0

    def test_label_out_of_range_rejected(self):
        with pytest.raises(Exception):
            tasks.confusion_matrix(np.array([0, 3]), np.array([0, 1]), 2)


class TestTraining:
    def test_zero_noise_stripes_reach_perfect_train_accuracy(self):
        ds = tasks.make_seed_task(stripes_spec(size=50))
        arch = make_mbconv_seed(1, 4, 4, (8,), (1,), (1,), "classification:2")
        net, curve = finetune(arch, None, ds, FinetuneConfig(epochs=6, lr=0.1, seed=0))
        report = tasks.evaluate(net, ds, split="train")
        assert report["accuracy"] == 1.0

    def test_constant_label_map_is_trivially_learned(self):
        ds = tasks.make_target_task(markers_spec(family="constant_label", size=30))
        arch = make_mbconv_seed(1, 4, 4, (8,), (1,), (1,), "dense:2")
        net, _ = finetune(arch, None, ds, FinetuneConfig(epochs=3, lr=0.1, seed=0))
        report = tasks.evaluate(net, ds, split="train")
        assert report["accuracy"] == 1.0


class TestWindowBound:
    def test_bound_below_one_for_limited_windows(self):
        ds = tasks.make_target_task(markers_spec(size=100))
        bound = tasks.limited_window_accuracy_bound(ds, visible_radius=4)
        assert 0.5 < bound < 0.999

    def test_bound_is_one_when_window_suffices(self):
        ds = tasks.make_target_task(markers_spec(size=40))
        assert tasks.limited_window_accuracy_bound(ds, visible_radius=5) == 1.0

    def test_bound_grows_with_radius(self):
        ds = tasks.make_target_task(markers_spec(size=100))
        bounds = [tasks.limited_window_accuracy_bound(ds, r) for r in (1, 2, 3, 4)]
        assert all(b > a for a, b in zip(bounds, bounds[1:]))

    def test_small_kernel_network_respects_bound(self):
        # stem(3x3) + expansion-1 block + one 3x3 stage: receptive field 9,
        # i.e. visible radius 4 < context radius 5
        ds = tasks.make_target_task(markers_spec(size=80, noise=0.0))
        arch = make_mbconv_seed(1, 8, 8, (16,), (1,), (1,), "dense:2")
        net, _ = finetune(arch, None, ds, FinetuneConfig(epochs=10, lr=0.1, seed=1))
        report = tasks.evaluate(net, ds, split="test")
        bound = tasks.limited_window_accuracy_bound(ds, visible_radius=4)
        assert report["accuracy"] <= bound + 1e-9


class TestSpecFiles:
    def test_spec_round_trip(self):
        spec = markers_spec()
        assert tasks.spec_from_json(tasks.spec_to_json(spec)) == spec

    def test_pgm_dump(self, tmp_path):
        ds = tasks.make_seed_task(stripes_spec(size=12))
        tasks.dump_samples_pgm(ds, tmp_path, count=3)
        files = sorted(p.name for p in tmp_path.iterdir())
        assert files == ["sample_000.pgm", "sample_001.pgm", "sample_002.pgm"]
        head = (tmp_path / "sample_000.pgm").read_bytes()[:2]
        assert head == b"P5"
