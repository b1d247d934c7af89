"""Height regression errors and semantic-segmentation scores."""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyEvaluation, ShapeError
from .geodata import IGNORE_INDEX, Raster


@dataclass
class RegressionReport:
    mae: float
    mse: float
    rmse: float
    n: int


def regression_metrics(pred, gt):
    """mae, mse and rmse over pixels valid in both rasters."""
    p_vals, p_mask = _unpack(pred)
    g_vals, g_mask = _unpack(gt)
    if p_vals.shape != g_vals.shape:
        raise ShapeError(f"prediction {p_vals.shape} and ground truth {g_vals.shape} differ")
    valid = p_mask & g_mask
    n = int(valid.sum())
    if n == 0:
        raise EmptyEvaluation("no pixel is valid in both prediction and ground truth")
    diff = p_vals[valid].astype(np.float64) - g_vals[valid].astype(np.float64)
    mae = float(np.abs(diff).mean())
    mse = float((diff * diff).mean())
    return RegressionReport(mae, mse, math.sqrt(mse), n)


def _unpack(r):
    if isinstance(r, Raster):
        return r.plane, r.mask
    arr = np.asarray(r)
    return arr, ~np.isnan(arr) if arr.dtype.kind == "f" else np.ones(arr.shape, dtype=bool)


@dataclass
class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions."""

    num_classes: int
    ignore_index: int = IGNORE_INDEX
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ShapeError(f"counts must be {self.num_classes}x{self.num_classes}")

    @classmethod
    def from_counts(cls, counts):
        counts = np.asarray(counts, dtype=np.int64)
        return cls(counts.shape[0], counts=counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def accumulate(self, pred_labels, gt_labels):
        pred = np.asarray(pred_labels.plane if isinstance(pred_labels, Raster) else pred_labels)
        gt = np.asarray(gt_labels.plane if isinstance(gt_labels, Raster) else gt_labels)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != self.ignore_index
        c = self.num_classes
        for name, arr, mask in (("ground-truth", gt, keep), ("predicted", pred, keep)):
            bad = mask & ((arr < 0) | (arr >= c))
            if bad.any():
                where = tuple(int(i) for i in np.argwhere(bad)[0])
                raise DataError(f"{name} label {int(arr[where])} at pixel {where} outside [0, {c})")
        idx = gt[keep].astype(np.int64) * c + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other):
        return ConfusionMatrix(self.num_classes, self.ignore_index, self.counts + other.counts)

    def _require_counts(self):
        if self.total == 0:
            raise EmptyEvaluation("confusion matrix is empty")

    def per_class_recall(self):
        """Recall per class; NaN for classes absent from the ground truth."""
        rows = self.counts.sum(axis=1).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / rows, np.nan)


def confusion_accumulate(cm, pred_labels, gt_labels):
    return cm.accumulate(pred_labels, gt_labels)


def oa(cm):
    cm._require_counts()
    return float(np.trace(cm.counts) / cm.total)


def aa(cm):
    """Mean recall over classes that occur in the ground truth."""
    cm._require_counts()
    recall = cm.per_class_recall()
    return float(np.nanmean(recall))


def kappa(cm):
    cm._require_counts()
    total = float(cm.total)
    p_o = float(np.trace(cm.counts)) / total
    rows = cm.counts.sum(axis=1).astype(np.float64)
    cols = cm.counts.sum(axis=0).astype(np.float64)
    p_e = float(rows @ cols) / (total * total)
    if p_e == 1.0:
        # every pixel in one class on both sides: agreement is either perfect or void
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def evaluate(pred_height=None, gt_height=None, pred_labels=None, gt_labels=None, num_classes=None):
    """Flat report dict for whichever of the two tasks has inputs."""
    report = {}
    if pred_height is not None and gt_height is not None:
        r = regression_metrics(pred_height, gt_height)
        report.update(mae=r.mae, mse=r.mse, rmse=r.rmse, n_height=r.n)
    if pred_labels is not None and gt_labels is not None:
        if num_classes is None:
            gt = gt_labels.plane if isinstance(gt_labels, Raster) else np.asarray(gt_labels)
            pr = pred_labels.plane if isinstance(pred_labels, Raster) else np.asarray(pred_labels)
            present = np.concatenate([gt[gt != IGNORE_INDEX].ravel(), pr[gt != IGNORE_INDEX].ravel()])
            num_classes = int(present.max()) + 1 if present.size else 1
        cm = ConfusionMatrix(num_classes).accumulate(pred_labels, gt_labels)
        report.update(oa=oa(cm), aa=aa(cm), kappa=kappa(cm), n_labels=cm.total)
        for c, r in enumerate(cm.per_class_recall()):
            report[f"recall_{c}"] = float(r)
    return report


def write_report(report, path):
    lines = [f"{k}={_fmt(v)}" for k, v in report.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
