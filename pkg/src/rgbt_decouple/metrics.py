"""Segmentation scores and the three-condition evaluation protocol."""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import numpy as np

from . import kernels
from . import tensor as T
from .data import stack
from .model import GROUPS, unimodal_groups


class Condition(str, Enum):
    RGBT = "RGBT"
    RGB_ONLY = "RGB_ONLY"
    T_ONLY = "T_ONLY"

    @classmethod
    def parse(cls, text):
        aliases = {"rgbt": cls.RGBT, "rgb": cls.RGB_ONLY, "t": cls.T_ONLY, "thermal": cls.T_ONLY}
        if isinstance(text, cls):
            return text
        if text in aliases:
            return aliases[text]
        return cls(text)


# "branch" scores the dedicated unimodal branch; "zero-fill" feeds the fused
# path with the missing modality replaced by zeros (how a fusion-only model
# has to cope).
ROUTES = ("branch", "zero-fill")


def required_groups(condition, route="branch"):
    condition = Condition.parse(condition)
    if condition is Condition.RGBT or route == "zero-fill":
        return GROUPS
    return unimodal_groups("rgb" if condition is Condition.RGB_ONLY else "t")


def confusion_matrix(label, pred, k):
    return kernels.confusion_matrix(label, pred, k)


def scores(cm):
    """Per-class IoU and recall from a confusion matrix (rows = reference).

    A class absent from both reference and prediction gets NaN and is left
    out of the means; mean accuracy averages recall over classes present in
    the reference. Counts are integers, so the means are formed as exact
    fractions and rounded once.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    k = cm.shape[0]
    tp = [int(cm[c, c]) for c in range(k)]
    ref = [int(v) for v in cm.sum(axis=1)]
    pred = [int(v) for v in cm.sum(axis=0)]
    iou_q = [Fraction(tp[c], ref[c] + pred[c] - tp[c]) if ref[c] + pred[c] > 0 else None for c in range(k)]
    acc_q = [Fraction(tp[c], ref[c]) if ref[c] > 0 else None for c in range(k)]
    iou = np.array([float(q) if q is not None else np.nan for q in iou_q])
    acc = np.array([float(q) if q is not None else np.nan for q in acc_q])
    return iou, acc, _exact_mean(iou_q), _exact_mean(acc_q)


def _exact_mean(values):
    present = [q for q in values if q is not None]
    return float(sum(present, Fraction(0)) / len(present)) if present else float("nan")


@dataclass
class EvalReport:
    condition: Condition
    branch: str
    confusion: np.ndarray
    iou: np.ndarray = field(init=False)
    acc: np.ndarray = field(init=False)
    miou: float = field(init=False)
    macc: float = field(init=False)
    groups_read: tuple = ()

    def __post_init__(self):
        self.iou, self.acc, self.miou, self.macc = scores(self.confusion)

    @property
    def n_classes(self):
        return self.confusion.shape[0]

    def rows(self):
        ref = self.confusion.sum(axis=1)
        out = []
        for c in range(self.n_classes):
            out.append([self.condition.value, self.branch, str(c), _fmt(self.iou[c]), _fmt(self.acc[c]), str(int(ref[c]))])
        out.append([self.condition.value, self.branch, "mean", _fmt(self.miou), _fmt(self.macc), str(int(ref.sum()))])
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["condition", "branch", "class", "iou", "acc", "support"])
            w.writerows(self.rows())

    def summary(self):
        lines = [
            f"condition: {self.condition.value}",
            f"branch: {self.branch}",
            f"groups read: {', '.join(self.groups_read)}",
            f"pixels: {int(self.confusion.sum())}",
            f"{'class':>6} {'iou':>9} {'acc':>9}",
        ]
        for c in range(self.n_classes):
            lines.append(f"{c:>6} {_pct(self.iou[c]):>9} {_pct(self.acc[c]):>9}")
        lines.append(f"{'mean':>6} {_pct(self.miou):>9} {_pct(self.macc):>9}")
        return "\n".join(lines) + "\n"


def _fmt(x):
    return "nan" if not np.isfinite(x) else repr(float(x))


def _pct(x):
    return "-" if not np.isfinite(x) else f"{100 * x:.2f}"


def predict(network, rgb, th, condition, route="branch"):
    """Argmax class map ``[N,H,W]`` for one batch under ``condition``."""
    condition = Condition.parse(condition)
    with T.no_grad():
        if condition is Condition.RGBT:
            p = network.forward_full(rgb, th).p_fuse
        elif route == "zero-fill":
            if condition is Condition.RGB_ONLY:
                th = np.zeros_like(th)
            else:
                rgb = np.zeros_like(rgb)
            p = network.forward_full(rgb, th).p_fuse
        elif condition is Condition.RGB_ONLY:
            p = network.forward_unimodal(rgb, "rgb")
        else:
            p = network.forward_unimodal(th, "t")
    return np.argmax(p.data, axis=1)


def evaluate(network, samples, condition, route="branch", batch_size=25, workers=1):
    """Score ``samples`` under one condition, accumulating a global confusion matrix."""
    condition = Condition.parse(condition)
    if route not in ROUTES:
        raise ValueError(f"route must be one of {ROUTES}")
    k = network.config.n_classes
    batches = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]

    def run(batch):
        rgb, th, label = stack(batch)
        return confusion_matrix(label, predict(network, rgb, th, condition, route), k)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, batches))
    else:
        parts = [run(b) for b in batches]
    cm = np.sum(parts, axis=0) if parts else np.zeros((k, k), dtype=np.int64)
    if condition is Condition.RGBT:
        branch = "fused"
    elif route == "zero-fill":
        branch = "fused(zero-fill)"
    else:
        branch = "rgb" if condition is Condition.RGB_ONLY else "thermal"
    groups = tuple(g for g in required_groups(condition, route) if g in network.params)
    return EvalReport(condition, branch, cm, groups_read=groups)
