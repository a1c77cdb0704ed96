"""Synthetic desk-scale tasks.

Generator families standing in for the usual source/target tasks:

* ``stripes``: oriented-grating classification. The class is the grating
  orientation, separable by a small oriented filter, so it trains in
  seconds.
* ``marker_count``: classification on striped backgrounds where the
  class is the number of bright marker pixels scattered on top. Solving
  it builds marker-vs-texture features on the same image domain the
  dense target uses, so its weights are worth transferring.
* ``context_markers``: dense two-class prediction, optionally on the
  same striped backgrounds. A pixel's label says whether any marker lies
  within a Chebyshev window of the given context radius, so accuracy is
  receptive-field limited by construction: predictors that cannot see
  the full window hit a computable ceiling
  (`limited_window_accuracy_bound`).
* ``constant_label``: noise images with an all-zero label map, for
  degenerate checks.

Datasets are pure functions of their spec (seed included) with disjoint
train/val/test index splits.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from fna import ops
from fna.errors import ShapeError
from fna.tensor import Tensor

FAMILIES = ("stripes", "marker_count", "context_markers", "constant_label")

_SPLIT_FRACTIONS = (("train", 0.6), ("val", 0.2), ("test", 0.2))


@dataclass(frozen=True)
class DatasetSpec:
    family: str
    classes: int
    resolution: tuple[int, int]
    size: int
    seed: int
    noise: float = 0.0
    context_radius: int = 5
    marker_density: float | None = None
    marker_amplitude: float = 3.0
    background: str = "none"  # none | stripes
    background_amplitude: float = 1.0
    marker_counts: tuple[int, ...] | None = None  # marker_count family

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown dataset family {self.family!r}")
        if self.classes < 2 or self.size < 5:
            raise ValueError("need at least 2 classes and 5 samples")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")
        if self.family == "context_markers" and self.classes != 2:
            raise ValueError("context_markers is a two-class task")
        if self.background not in ("none", "stripes"):
            raise ValueError(f"unknown background {self.background!r}")
        if self.background == "stripes" and self.family in ("marker_count",
                                                            "context_markers"):
            # markers must stay threshold-separable from texture plus noise
            if self.marker_amplitude <= 2 * (self.background_amplitude + 3 * self.noise):
                raise ValueError(
                    "marker_amplitude too small to separate markers from the background")
        if self.family == "marker_count":
            counts = self.marker_counts or _DEFAULT_MARKER_COUNTS[: self.classes]
            if len(counts) != self.classes or len(set(counts)) != self.classes:
                raise ValueError("marker_counts must give one distinct count per class")


_DEFAULT_MARKER_COUNTS = (2, 10, 20, 32)


class SyntheticDataset:
    def __init__(self, spec: DatasetSpec, images: np.ndarray, labels: np.ndarray,
                 task: str):
        self.spec = spec
        self.images = images
        self.labels = labels
        self.task = task
        n = images.shape[0]
        bounds = []
        start = 0
        for name, frac in _SPLIT_FRACTIONS:
            count = int(round(n * frac))
            bounds.append((name, start, min(start + count, n)))
            start += count
        self.splits = {name: np.arange(a, b) for name, a, b in bounds}

    def split_arrays(self, split: str):
        idx = self.splits[split]
        return self.images[idx], self.labels[idx]

    def __len__(self):
        return self.images.shape[0]


def _finish(images, spec) -> np.ndarray:
    return images.astype(np.float32)


def _grating(rng, h, w, theta, amplitude):
    ys, xs = np.mgrid[0:h, 0:w]
    freq = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    coord = np.cos(theta) * xs + np.sin(theta) * ys
    return amplitude * np.sin(2 * np.pi * freq * coord / max(h, w) + phase)


def make_seed_task(spec: DatasetSpec) -> SyntheticDataset:
    """Classification task: grating orientation (``stripes``) or number of
    scattered markers on a striped background (``marker_count``)."""
    if spec.family == "stripes":
        return _make_stripes(spec)
    if spec.family == "marker_count":
        return _make_marker_count(spec)
    raise ValueError(
        f"make_seed_task expects 'stripes' or 'marker_count', got {spec.family!r}")


def _make_stripes(spec: DatasetSpec) -> SyntheticDataset:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h, w = spec.resolution
    labels = rng.integers(0, spec.classes, size=spec.size)
    images = np.empty((spec.size, 1, h, w), dtype=np.float64)
    for i in range(spec.size):
        theta = np.pi * labels[i] / spec.classes
        images[i, 0] = _grating(rng, h, w, theta, 1.0)
    if spec.noise > 0:
        images += spec.noise * rng.standard_normal(images.shape)
    return SyntheticDataset(spec, _finish(images, spec), labels.astype(np.int64),
                            "classification")


def _make_marker_count(spec: DatasetSpec) -> SyntheticDataset:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h, w = spec.resolution
    counts = spec.marker_counts or _DEFAULT_MARKER_COUNTS[: spec.classes]
    labels = rng.integers(0, spec.classes, size=spec.size)
    images = np.zeros((spec.size, 1, h, w), dtype=np.float64)
    for i in range(spec.size):
        if spec.background == "stripes":
            images[i, 0] = _grating(rng, h, w, rng.uniform(0, np.pi),
                                    spec.background_amplitude)
        flat = rng.choice(h * w, size=counts[labels[i]], replace=False)
        images[i, 0].flat[flat] += spec.marker_amplitude
    if spec.noise > 0:
        images += spec.noise * rng.standard_normal(images.shape)
    return SyntheticDataset(spec, _finish(images, spec), labels.astype(np.int64),
                            "classification")


def chebyshev_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1)^2 square window, zero-padded at borders."""
    n, h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in range(-radius, radius + 1):
        ys0, ys1 = max(dy, 0), min(h + dy, h)
        yt0, yt1 = max(-dy, 0), min(h - dy, h)
        for dx in range(-radius, radius + 1):
            xs0, xs1 = max(dx, 0), min(w + dx, w)
            xt0, xt1 = max(-dx, 0), min(w - dx, w)
            np.maximum(out[:, yt0:yt1, xt0:xt1], mask[:, ys0:ys1, xs0:xs1],
                       out=out[:, yt0:yt1, xt0:xt1])
    return out


def _default_density(radius: int) -> float:
    # balances the two classes: P(no marker in the full window) == 0.5
    window = (2 * radius + 1) ** 2
    return 1.0 - 0.5 ** (1.0 / window)


def make_target_task(spec: DatasetSpec) -> SyntheticDataset:
    """Dense prediction whose labels need context of the configured radius."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h, w = spec.resolution
    if spec.family == "constant_label":
        images = rng.standard_normal((spec.size, 1, h, w))
        labels = np.zeros((spec.size, h, w), dtype=np.int64)
        return SyntheticDataset(spec, _finish(images, spec), labels, "dense")
    if spec.family != "context_markers":
        raise ValueError(
            f"make_target_task expects 'context_markers' or 'constant_label', "
            f"got {spec.family!r}")
    density = spec.marker_density if spec.marker_density is not None \
        else _default_density(spec.context_radius)
    markers = (rng.random((spec.size, h, w)) < density)
    labels = chebyshev_dilate(markers.astype(np.int64), spec.context_radius)
    if spec.background == "stripes":
        images = np.empty((spec.size, 1, h, w), dtype=np.float64)
        for i in range(spec.size):
            images[i, 0] = _grating(rng, h, w, rng.uniform(0, np.pi),
                                    spec.background_amplitude)
        images[:, 0] += spec.marker_amplitude * markers
    else:
        images = spec.marker_amplitude * markers.astype(np.float64)[:, None, :, :]
    if spec.noise > 0:
        images += spec.noise * rng.standard_normal(images.shape)
    return SyntheticDataset(spec, _finish(images, spec), labels, "dense")


def make_dataset(spec: DatasetSpec) -> SyntheticDataset:
    if spec.family == "stripes":
        return make_seed_task(spec)
    return make_target_task(spec)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def confusion_matrix(truth: np.ndarray, pred: np.ndarray, classes: int) -> np.ndarray:
    truth = truth.reshape(-1)
    pred = pred.reshape(-1)
    if truth.shape != pred.shape:
        raise ShapeError(f"truth {truth.shape} and prediction {pred.shape} differ")
    if truth.min() < 0 or truth.max() >= classes or pred.min() < 0 or pred.max() >= classes:
        raise ShapeError(f"labels must lie in [0,{classes - 1}]")
    conf = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    return conf


def miou_from_confusion(conf: np.ndarray) -> tuple[float, list]:
    """Mean IOU over classes present in truth or prediction; absent classes
    are excluded from the mean."""
    ious = []
    per_class = []
    for c in range(conf.shape[0]):
        tp = conf[c, c]
        denom = conf[c, :].sum() + conf[:, c].sum() - tp
        if denom == 0:
            per_class.append(None)
            continue
        iou = float(tp) / float(denom)
        per_class.append(iou)
        ious.append(iou)
    return float(np.mean(ious)) if ious else 0.0, per_class


def predict(network, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    preds = []
    for start in range(0, images.shape[0], batch_size):
        x = Tensor(images[start: start + batch_size].astype(network.dtype))
        logits = network.forward(x, training=False)
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds, axis=0)


def evaluate(network, dataset: SyntheticDataset, split: str = "test",
             batch_size: int = 32) -> dict:
    """Metric report: accuracy for classification, mean-IOU (and accuracy)
    for dense prediction. Deterministic."""
    images, labels = dataset.split_arrays(split)
    pred = predict(network, images, batch_size)
    if pred.shape != labels.shape:
        raise ShapeError(f"prediction shape {pred.shape} != labels {labels.shape}")
    conf = confusion_matrix(labels, pred, dataset.spec.classes)
    accuracy = float(np.trace(conf)) / float(conf.sum())
    miou, per_class = miou_from_confusion(conf)
    metric = miou if dataset.task == "dense" else accuracy
    return {
        "task": dataset.task,
        "split": split,
        "metric": metric,
        "accuracy": accuracy,
        "miou": miou,
        "per_class_iou": per_class,
    }


def dataset_loss(network, images: np.ndarray, labels: np.ndarray,
                 batch_size: int = 32) -> float:
    """Mean cross-entropy over a full array pair, eval mode."""
    total = 0.0
    count = 0
    for start in range(0, images.shape[0], batch_size):
        xb = images[start: start + batch_size]
        yb = labels[start: start + batch_size]
        logits = network.forward(Tensor(xb.astype(network.dtype)), training=False)
        loss = ops.softmax_cross_entropy(logits, yb)
        total += loss.item() * xb.shape[0]
        count += xb.shape[0]
    return total / count


# ---------------------------------------------------------------------------
# oracle bound for receptive-field-limited predictors
# ---------------------------------------------------------------------------

def limited_window_accuracy_bound(dataset: SyntheticDataset, visible_radius: int,
                                  split: str = "test") -> float:
    """Best possible per-pixel accuracy for any predictor that sees only a
    Chebyshev window of visible_radius around each pixel.

    Markers inside the visible window force label 1 (always correct);
    for pixels with no visible marker, the best move is the majority
    label of that group, computed exactly on the split.
    """
    if dataset.spec.family != "context_markers":
        raise ValueError("the window bound is defined for context_markers datasets")
    if visible_radius >= dataset.spec.context_radius:
        return 1.0
    images, labels = dataset.split_arrays(split)
    markers = (images[:, 0] > dataset.spec.marker_amplitude / 2).astype(np.int64)
    visible = chebyshev_dilate(markers, visible_radius)
    n_visible = int(visible.sum())
    hidden = visible == 0
    hidden_pos = int((labels[hidden] == 1).sum())
    hidden_neg = int(hidden.sum()) - hidden_pos
    total = labels.size
    return (n_visible + max(hidden_pos, hidden_neg)) / total


# ---------------------------------------------------------------------------
# spec files and sample dumps
# ---------------------------------------------------------------------------

def spec_to_json(spec: DatasetSpec) -> str:
    d = asdict(spec)
    d["resolution"] = list(spec.resolution)
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def spec_from_json(text: str) -> DatasetSpec:
    d = json.loads(text)
    d["resolution"] = tuple(d["resolution"])
    if d.get("marker_counts") is not None:
        d["marker_counts"] = tuple(d["marker_counts"])
    return DatasetSpec(**d)


def dump_samples_pgm(dataset: SyntheticDataset, out_dir: str, count: int = 8):
    """Write the first samples as binary PGM grayscale files for inspection."""
    os.makedirs(out_dir, exist_ok=True)
    for i in range(min(count, len(dataset))):
        img = dataset.images[i, 0]
        lo, hi = img.min(), img.max()
        scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
        data = (scaled * 255).astype(np.uint8)
        path = os.path.join(out_dir, f"sample_{i:03d}.pgm")
        with open(path, "wb") as f:
            f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
            f.write(data.tobytes())
