"""SECOND-protocol metrics over a shared confusion matrix.

Rows are ground truth, columns are predictions, index 0 is no-change. Both
temporal label maps of every pair are tallied into the same matrix.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateMatrix, EmptyMatrix, LabelOutOfRange, ShapeMismatch


class ConfusionMatrix:
    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.C = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)
        self.samples = 0

    def update(self, pred_pre, pred_post, gt_pre, gt_post) -> "ConfusionMatrix":
        maps = [np.asarray(m) for m in (pred_pre, pred_post, gt_pre, gt_post)]
        if len({m.shape for m in maps}) != 1:
            raise ShapeMismatch(f"label map shapes differ: {[m.shape for m in maps]}")
        for m in maps:
            if m.size and (m.min() < 0 or m.max() >= self.C):
                raise LabelOutOfRange(f"label values must lie in [0, {self.C})")
        for pred, gt in ((maps[0], maps[2]), (maps[1], maps[3])):
            idx = gt.astype(np.int64).ravel() * self.C + pred.astype(np.int64).ravel()
            self.counts += np.bincount(idx, minlength=self.C * self.C).reshape(self.C, self.C)
        self.samples += 1
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.C, self.counts + other.counts)
        out.samples = self.samples + other.samples
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(conf: ConfusionMatrix, pred_pre, pred_post, gt_pre, gt_post) -> ConfusionMatrix:
    return conf.update(pred_pre, pred_post, gt_pre, gt_post)


def _counts(conf) -> np.ndarray:
    q = conf.counts if isinstance(conf, ConfusionMatrix) else np.asarray(conf)
    q = q.astype(np.float64)
    if q.sum() <= 0:
        raise EmptyMatrix("confusion matrix has no counts")
    return q


def compute_oa(conf) -> float:
    q = _counts(conf)
    return 100.0 * np.trace(q) / q.sum()


def _binary_iou(q: np.ndarray) -> tuple[float, float]:
    q00 = q[0, 0]
    union_nc = q[0, :].sum() + q[:, 0].sum() - q00
    tp = q[1:, 1:].sum()
    fp = q[0, 1:].sum()
    fn = q[1:, 0].sum()
    union_c = tp + fp + fn
    iou_nc = q00 / union_nc if union_nc > 0 else 1.0
    iou_c = tp / union_c if union_c > 0 else 1.0
    return float(iou_nc), float(iou_c)


def compute_miou(conf) -> float:
    iou_nc, iou_c = _binary_iou(_counts(conf))
    return 100.0 * (iou_nc + iou_c) / 2.0


def compute_sek(conf) -> float:
    """Kappa of the matrix with the no-change/no-change cell removed, damped by exp(IoU_c - 1)."""
    q = _counts(conf)
    _, iou_c = _binary_iou(q)
    qh = q.copy()
    qh[0, 0] = 0.0
    n = qh.sum()
    if n == 0:
        warnings.warn("confusion matrix is empty outside the no-change cell; SeK = 0", DegenerateMatrix)
        return 0.0
    rho = np.trace(qh) / n
    eta = float((qh.sum(axis=1) * qh.sum(axis=0)).sum()) / n**2
    kappa = 0.0 if 1.0 - eta == 0 else (rho - eta) / (1.0 - eta)
    return 100.0 * math.exp(iou_c - 1.0) * kappa


def compute_fscd(conf) -> float:
    """F-score over changed pixels, counting a hit only when the class is right."""
    q = _counts(conf)
    tp = np.trace(q[1:, 1:])
    pred_changed = q[:, 1:].sum()
    gt_changed = q[1:, :].sum()
    p = tp / pred_changed if pred_changed > 0 else 0.0
    r = tp / gt_changed if gt_changed > 0 else 0.0
    return 0.0 if p + r == 0 else 100.0 * 2 * p * r / (p + r)


def compute_binary_f1(conf) -> float:
    """Changed-vs-unchanged F1, ignoring semantic classes."""
    q = _counts(conf)
    tp = q[1:, 1:].sum()
    fp = q[0, 1:].sum()
    fn = q[1:, 0].sum()
    return 0.0 if tp == 0 else 100.0 * 2 * tp / (2 * tp + fp + fn)


@dataclass
class MetricsReport:
    oa: float
    f1: float
    miou: float
    sek: float
    pixels: int
    samples: int
    vocabulary: list[str]
    f1_bcd: float = float("nan")

    @classmethod
    def from_confusion(cls, conf: ConfusionMatrix, vocabulary) -> "MetricsReport":
        return cls(
            oa=compute_oa(conf),
            f1=compute_fscd(conf),
            miou=compute_miou(conf),
            sek=compute_sek(conf),
            pixels=conf.total,
            samples=conf.samples,
            vocabulary=list(vocabulary),
            f1_bcd=compute_binary_f1(conf),
        )

    def to_json(self) -> dict:
        return {
            "oa": round(self.oa, 2),
            "f1": round(self.f1, 2),
            "miou": round(self.miou, 2),
            "sek": round(self.sek, 2),
            "pixels": int(self.pixels),
            "samples": int(self.samples),
            "vocabulary": list(self.vocabulary),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    def table_row(self) -> str:
        return f"OA {self.oa:.2f} | F1 {self.f1:.2f} | mIoU {self.miou:.2f} | SeK {self.sek:.2f}"


def evaluate(model, manifest, threshold: float = 0.5) -> MetricsReport:
    """Run ``model`` over every sample and report metrics from one global matrix.

    ``model`` is either a SemanticCD network or any callable taking a
    BiTemporalSample and returning ``(pred_pre, pred_post)`` label maps.
    """
    import torch

    from .data import collate

    conf = ConfusionMatrix(manifest.vocabulary.C)
    is_net = isinstance(model, torch.nn.Module)
    if is_net:
        model.eval()
    for sample in manifest.samples():
        if is_net:
            img1, img2, *_ = collate([sample])
            dtype = next(model.parameters()).dtype
            _, (p1, p2) = model.predict(img1.to(dtype), img2.to(dtype), threshold)
            p1, p2 = p1[0].numpy(), p2[0].numpy()
        else:
            p1, p2 = model(sample)
        conf.update(p1, p2, sample.label_pre, sample.label_post)
    return MetricsReport.from_confusion(conf, manifest.vocabulary.names)


def ground_truth_stub(sample):
    return sample.label_pre, sample.label_post


def no_change_stub(sample):
    return np.zeros_like(sample.label_pre), np.zeros_like(sample.label_post)
