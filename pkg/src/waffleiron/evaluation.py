"""Confusion matrix, IoU metrics and test-time-augmentation inference.

Inference on a scan crops to the configured FOV, runs the network on the
remaining points, and propagates per-point softmax probabilities back to the
full cloud by nearest neighbor. Test-time augmentation averages those
probabilities over randomly rotated/flipped passes with stochastic depth
kept active, then takes the argmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .augment import random_flip, random_rotate_z
from .backbone import WaffleIron, prepare_inputs
from .geometry import IGNORE_LABEL, PointCloud, crop_fov, nearest_indices, voxel_downsample
from .training import softmax


class ConfusionMatrix:
    """K x K integer counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError("prediction/label length mismatch")
        scored = gt != IGNORE_LABEL
        p, g = pred[scored], gt[scored]
        k = self.num_classes
        if ((g < 0) | (g >= k)).any() or ((p < 0) | (p >= k)).any():
            raise ValueError("label outside [0, num_classes) and not ignore")
        np.add.at(self.counts, (g, p), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean.

    Classes absent from both ground truth and predictions (zero denominator)
    get NaN and are excluded from the mean.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = np.full(cm.num_classes, np.nan)
    present = denom > 0
    per_class[present] = tp[present] / denom[present]
    miou = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, miou


def infer_probs(model: WaffleIron, pc: PointCloud, drop_rng=None) -> np.ndarray:
    """Class probabilities for every point of ``pc`` (N x K).

    Crops to the model FOV, runs an eval-mode forward (stochastic depth only
    when ``drop_rng`` is given), and fills points outside the FOV from their
    nearest inside neighbor.
    """
    inside, _ = crop_fov(pc, model.config.fov)
    if inside.n_valid == 0:
        raise ValueError("no points inside the FOV")
    feats, neighbors, projections, valid = prepare_inputs(model, inside)
    logits = model.forward(
        feats, neighbors, projections, valid, training=False, drop_rng=drop_rng
    )
    probs_inside = softmax(logits).T  # (n_inside, K)
    src = nearest_indices(inside.positions, pc.positions)
    return probs_inside[src]


def tta_infer(
    pc: PointCloud,
    model: WaffleIron,
    n_aug: int = 10,
    rng: Optional[np.random.Generator] = None,
    transform: bool = True,
    stochastic: bool = True,
) -> np.ndarray:
    """Labels for every point of ``pc`` by averaged-softmax TTA.

    Each pass applies a random z-rotation and axis flips (re-cropping to the
    FOV afterwards) and keeps stochastic depth active, then the per-point
    probabilities are averaged and argmaxed. Ties go to the lower class id.
    With ``n_aug=1``, ``transform=False`` and ``stochastic=False`` this is
    plain inference.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    acc = np.zeros((pc.n_points, model.config.num_classes), dtype=np.float64)
    for _ in range(n_aug):
        variant = pc
        if transform:
            variant = random_rotate_z(variant, rng)
            variant = random_flip(variant, rng)
        drop_rng = rng if (stochastic and model.config.drop_prob > 0) else None
        acc += infer_probs(model, variant, drop_rng=drop_rng)
    return np.argmax(acc, axis=1).astype(np.int32)


def infer_labels(
    pc: PointCloud,
    model: WaffleIron,
    tta: bool = False,
    n_aug: int = 10,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    if tta:
        return tta_infer(pc, model, n_aug=n_aug, rng=rng)
    return tta_infer(pc, model, n_aug=1, rng=rng, transform=False, stochastic=False)


@dataclass
class MetricsReport:
    per_class_iou: np.ndarray
    miou: float
    confusion: ConfusionMatrix
    class_names: Optional[Sequence[str]] = None

    def _name(self, c: int) -> str:
        if self.class_names and c < len(self.class_names):
            return self.class_names[c]
        return f"class_{c}"

    def to_table(self) -> str:
        width = max(len(self._name(c)) for c in range(len(self.per_class_iou)))
        lines = [f"{'class'.ljust(width)}  IoU"]
        for c, v in enumerate(self.per_class_iou):
            cell = "  n/a" if np.isnan(v) else f"{v:.4f}"
            lines.append(f"{self._name(c).ljust(width)}  {cell}")
        lines.append(f"{'mIoU'.ljust(width)}  {self.miou:.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["class,iou"]
        for c, v in enumerate(self.per_class_iou):
            cell = "" if np.isnan(v) else f"{v:.6f}"
            lines.append(f"{self._name(c)},{cell}")
        return "\n".join(lines) + "\n"

    def miou_line(self) -> str:
        return f"mIoU {self.miou:.6f}\n"


def evaluate_split(
    dataset: Sequence[PointCloud],
    model: WaffleIron,
    tta: bool = False,
    voxel_size: float = 0.10,
    rng: Optional[np.random.Generator] = None,
    class_names: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """Score a model over labeled scans.

    Per scan: voxel downsample, infer on the downsampled cloud (which crops
    internally and fills outside-FOV points by nearest neighbor), propagate
    the predictions back to every original point, accumulate the confusion
    matrix against the original labels.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    cm = ConfusionMatrix(model.config.num_classes)
    for pc in dataset:
        if pc.labels is None:
            raise ValueError("evaluation needs labeled scans")
        down, _ = voxel_downsample(pc, voxel_size)
        labels_down = infer_labels(down, model, tta=tta, rng=rng)
        pred = labels_down[nearest_indices(down.positions, pc.positions)]
        cm.update(pred, pc.labels)
    per_class, miou = iou(cm)
    return MetricsReport(per_class, miou, cm, class_names)
