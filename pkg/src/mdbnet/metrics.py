"""Scene completion (SC) and semantic scene completion (SSC) evaluation."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import EmptyEvaluationRegion, LabelOutOfRange, TooFewFolds
from .geometry import Visibility, VisibilityGrid

N_CLASSES = 12
IGNORE_LABEL = 255
CLASS_NAMES = ("empty", "ceil.", "floor", "wall", "win.", "chair", "bed", "sofa", "table", "tvs", "furn.", "objs")
SC_EMPTY_RATIO = 1.0


def _pct(num, den):
    return 100.0 * num / den if den > 0 else 0.0


class ScScores(NamedTuple):
    precision: float
    recall: float
    iou: float
    flags: tuple = ()


@dataclass
class ScCounts:
    """Binary occupancy counts; accumulate over scenes, then read the scores."""

    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "ScCounts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def scores(self) -> ScScores:
        flags = []
        if self.tp + self.fp == 0:
            flags.append("precision_undefined")
        if self.tp + self.fn == 0:
            flags.append("recall_undefined")
        if self.tp + self.fp + self.fn == 0:
            flags.append("iou_undefined")
        return ScScores(_pct(self.tp, self.tp + self.fp), _pct(self.tp, self.tp + self.fn),
                        _pct(self.tp, self.tp + self.fp + self.fn), tuple(flags))


def sc_region(gt_labels, visibility, resample_seed: int = 0, empty_ratio: float = SC_EMPTY_RATIO) -> np.ndarray:
    """Occluded voxels that are occupied in GT plus a seeded sample of empty occluded ones."""
    gt = np.asarray(gt_labels)
    states = visibility.states if isinstance(visibility, VisibilityGrid) else np.asarray(visibility)
    occluded = (states == Visibility.OCCLUDED) & (gt != IGNORE_LABEL)
    region = occluded & (gt > 0)
    empty_idx = np.flatnonzero(occluded & (gt == 0))
    quota = min(empty_idx.size, int(np.floor(empty_ratio * region.sum())))
    if quota:
        chosen = np.random.default_rng(resample_seed).choice(empty_idx, size=quota, replace=False)
        region.reshape(-1)[chosen] = True
    return region


def sc_counts(pred_labels, gt_labels, visibility, resample_seed: int = 0,
              empty_ratio: float = SC_EMPTY_RATIO) -> ScCounts:
    region = sc_region(gt_labels, visibility, resample_seed, empty_ratio)
    if not region.any():
        raise EmptyEvaluationRegion("no occluded voxels to evaluate")
    pred = np.asarray(pred_labels)[region] > 0
    gt = np.asarray(gt_labels)[region] > 0
    return ScCounts(int(np.sum(pred & gt)), int(np.sum(pred & ~gt)), int(np.sum(~pred & gt)))


def sc_eval(pred_labels, gt_labels, visibility, resample_seed: int = 0,
            empty_ratio: float = SC_EMPTY_RATIO) -> ScScores:
    """Binary occupancy precision/recall/IoU (percent) over the occluded evaluation region.

    Zero denominators report 0 and are listed in ``flags``.
    """
    return sc_counts(pred_labels, gt_labels, visibility, resample_seed, empty_ratio).scores()


def ssc_mask(gt_labels, visibility) -> np.ndarray:
    """Observed surface plus occluded voxels, sentinel labels removed."""
    states = visibility.states if isinstance(visibility, VisibilityGrid) else np.asarray(visibility)
    return ((states == Visibility.SURFACE) | (states == Visibility.OCCLUDED)) & (np.asarray(gt_labels) != IGNORE_LABEL)


class ConfusionMatrix:
    """12x12 counts, rows = ground truth, columns = prediction."""

    def __init__(self, n_classes: int = N_CLASSES):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred_labels, gt_labels, mask=None):
        pred = np.asarray(pred_labels)
        gt = np.asarray(gt_labels)
        keep = gt != IGNORE_LABEL
        if mask is not None:
            keep &= np.asarray(mask, dtype=bool)
        p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        for arr, what in ((p, "prediction"), (g, "ground truth")):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_classes):
                raise LabelOutOfRange(f"{what} labels outside 0..{self.n_classes - 1}")
        self.counts += np.bincount(g * self.n_classes + p, minlength=self.n_classes ** 2).reshape(
            self.n_classes, self.n_classes)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def class_iou(self) -> np.ndarray:
        """Per-class IoU in percent for classes 1..n-1; NaN where a class is absent from both."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        den = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(den > 0, 100.0 * tp / den, np.nan)
        return iou[1:]


class SscScores(NamedTuple):
    per_class_iou: np.ndarray  # 11 values, NaN = class absent from pred and GT
    miou: float


def miou_of(per_class_iou) -> float:
    defined = np.asarray(per_class_iou, dtype=np.float64)
    defined = defined[~np.isnan(defined)]
    return float(defined.mean()) if defined.size else 0.0


def ssc_eval(pred_labels, gt_labels, mask=None) -> SscScores:
    """Per-class IoU over the masked voxels; mIoU averages only classes present in pred or GT."""
    cm = ConfusionMatrix().update(pred_labels, gt_labels, mask)
    iou = cm.class_iou()
    return SscScores(iou, miou_of(iou))


@dataclass
class EvalReport:
    sc_precision: float
    sc_recall: float
    sc_iou: float
    per_class_iou: list
    ssc_miou: float
    fold_id: int = 0
    flags: list = field(default_factory=list)

    CSV_HEADER = ("fold", "sc_precision", "sc_recall", "sc_iou") + tuple(
        f"iou_{name.rstrip('.')}" for name in CLASS_NAMES[1:]) + ("ssc_miou", "flags")

    def row(self) -> list:
        def fmt(x):
            return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))

        return ([str(self.fold_id), fmt(self.sc_precision), fmt(self.sc_recall), fmt(self.sc_iou)]
                + [fmt(v) for v in self.per_class_iou] + [fmt(self.ssc_miou), ";".join(self.flags)])

    @classmethod
    def from_row(cls, row: dict) -> "EvalReport":
        per_class = [float(row[f"iou_{name.rstrip('.')}"]) for name in CLASS_NAMES[1:]]
        flags = [f for f in row.get("flags", "").split(";") if f]
        return cls(float(row["sc_precision"]), float(row["sc_recall"]), float(row["sc_iou"]),
                   per_class, float(row["ssc_miou"]), int(row["fold"]), flags)


def write_reports_csv(reports, path=None, header_comments=()) -> str:
    buf = io.StringIO()
    for line in header_comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EvalReport.CSV_HEADER)
    for r in reports:
        writer.writerow(r.row())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_reports_csv(path) -> list:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return [EvalReport.from_row(row) for row in csv.DictReader(lines)]


@dataclass(frozen=True)
class FoldSummary:
    mean: float
    std: float
    n: int

    def __str__(self):
        if math.isnan(self.mean):
            return "-"
        return f"{self.mean:.1f}±{self.std:.1f}"


def summarize(values) -> FoldSummary:
    arr = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        return FoldSummary(float("nan"), float("nan"), 0)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return FoldSummary(float(arr.mean()), std, int(arr.size))


def aggregate_folds(reports) -> dict:
    """Mean and Bessel-corrected std per metric across fold reports."""
    reports = list(reports)
    if len(reports) < 2:
        raise TooFewFolds(f"need at least 2 fold reports, got {len(reports)}")
    out = {
        "sc_precision": summarize(r.sc_precision for r in reports),
        "sc_recall": summarize(r.sc_recall for r in reports),
        "sc_iou": summarize(r.sc_iou for r in reports),
        "ssc_miou": summarize(r.ssc_miou for r in reports),
    }
    for c, name in enumerate(CLASS_NAMES[1:]):
        out[name] = summarize(r.per_class_iou[c] for r in reports)
    return out


def rare_class_miou(reports, rare) -> FoldSummary:
    """Mean±std over folds of the mean IoU across the ``rare`` class ids (1..11)."""
    idx = [c - 1 for c in rare]
    per_fold = []
    for r in reports:
        vals = [r.per_class_iou[i] for i in idx if not math.isnan(r.per_class_iou[i])]
        per_fold.append(float(np.mean(vals)) if vals else float("nan"))
    return summarize(per_fold)


def overlaps(a: FoldSummary, b: FoldSummary) -> bool:
    """True when the mean±std intervals of two summaries intersect."""
    return a.mean - a.std <= b.mean + b.std and b.mean - b.std <= a.mean + a.std


def format_weighting_table(rows: dict, rare_rows: dict, rare, title: str = "") -> str:
    """Loss-weighting ablation plus a direction check of the first row against the others.

    A reversed direction on means is reported as ``REVERSED``; intersecting
    std intervals are flagged but not treated as a failure.
    """
    names = [CLASS_NAMES[c] for c in rare]
    body = [[name, str(agg["sc_iou"]), str(agg["ssc_miou"]), str(rare_rows[name])] for name, agg in rows.items()]
    text = _render([["Loss", "SC-IoU%", "SSC-mIoU%", "Rare-mIoU%"]] + body, title)
    labels = list(rows)
    lines = [f"rare classes: {', '.join(names)}"]
    ref = rare_rows[labels[0]]
    for other in labels[1:]:
        cmp = rare_rows[other]
        holds = ref.mean > cmp.mean
        flag = "std intervals overlap (flag)" if overlaps(ref, cmp) else "std intervals separate"
        lines.append(f"direction {labels[0]} > {other} on rare-class mIoU: "
                     f"{'holds' if holds else 'REVERSED'} ({ref.mean:.1f} vs {cmp.mean:.1f}); {flag}")
    return text + "\n".join(lines) + "\n"


def format_results_table(rows: dict, title: str = "") -> str:
    """Aligned text table in the column order Prec. Recall IoU | 11 classes | mIoU.

    ``rows`` maps a method name to the output of :func:`aggregate_folds`.
    """
    cols = ["Method", "Prec.", "Recall", "IoU", *CLASS_NAMES[1:], "mIoU"]
    body = []
    for method, agg in rows.items():
        body.append([method, str(agg["sc_precision"]), str(agg["sc_recall"]), str(agg["sc_iou"])]
                    + [str(agg[name]) for name in CLASS_NAMES[1:]] + [str(agg["ssc_miou"])])
    return _render([cols] + body, title)


def format_ablation_table(rows: dict, first_column: str = "Fusion Method", title: str = "") -> str:
    """Two-metric ablation table: ``SC-IoU%`` and ``SSC-mIoU%`` per row (mean±std)."""
    body = [[name, str(agg["sc_iou"]), str(agg["ssc_miou"])] for name, agg in rows.items()]
    return _render([[first_column, "SC-IoU%", "SSC-mIoU%"]] + body, title)


def _render(table, title):
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    lines = [title] if title else []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("-" * len(lines[-1]))
    return "\n".join(lines) + "\n"
