"""Pixel-level localization metrics, authentic-image metrics and CSV reports."""

from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.stats import rankdata

from gifl.errors import ShapeError

THRESHOLD = 0.5
ITEM_HEADER = ("item", "method", "f1", "iou", "acc", "auc")
AUTH_HEADER = ("item", "p_acc", "i_pred")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp=tp, fp=fp, tn=pred.size - tp - fp - fn, fn=fn)


def localization_metrics(c: ConfusionCounts) -> Dict[str, float]:
    """F1, IoU and accuracy from pixel counts.

    An empty prediction on an empty ground truth scores 1 for both F1 and IoU.
    """
    if c.tp + c.fp + c.fn == 0:
        f1 = iou = 1.0
    else:
        # 2PR/(P+R) rewritten over integer counts: one rounding, and 0 when P+R=0
        f1 = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
        iou = c.tp / (c.tp + c.fp + c.fn)
    return {"f1": f1, "iou": iou, "acc": (c.tp + c.tn) / c.total}


def auc(scores: np.ndarray, gt: np.ndarray) -> float:
    """Exact ROC AUC via the Mann-Whitney statistic with midrank ties.

    Returns NaN when ``gt`` holds a single class.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    g = np.asarray(gt).astype(bool).ravel()
    if s.shape != g.shape:
        raise ShapeError(f"scores {np.shape(scores)} vs ground truth {np.shape(gt)}")
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(s)
    u = ranks[g].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def authenticity_metrics(prob: np.ndarray, image_score: float) -> dict:
    """Pixel accuracy and image decision on an authentic image."""
    prob = np.asarray(prob)
    return {
        "p_acc": float(np.count_nonzero(prob < THRESHOLD) / prob.size),
        "i_pred": "forged" if image_score >= THRESHOLD else "authentic",
    }


def item_metrics(prob: np.ndarray, gt: np.ndarray) -> Dict[str, float]:
    """All localization metrics for one forged item."""
    out = localization_metrics(confusion_counts(np.asarray(prob) >= THRESHOLD, gt))
    out["auc"] = auc(prob, gt)
    return out


@dataclass
class MetricReport:
    rows: List[dict] = field(default_factory=list)
    authentic: List[dict] = field(default_factory=list)
    failed: List[dict] = field(default_factory=list)

    def aggregates(self) -> "OrderedDict[str, dict]":
        """Arithmetic means per method tag, then over all forged items.

        Undefined AUC values are skipped and counted in ``auc_undefined``.
        """
        groups: "OrderedDict[str, List[dict]]" = OrderedDict()
        for row in self.rows:
            groups.setdefault(row["method"], []).append(row)
        out: "OrderedDict[str, dict]" = OrderedDict()
        for method in sorted(groups):
            out[method] = _mean_rows(groups[method])
        if self.rows:
            out["overall"] = _mean_rows(self.rows)
        return out

    def authentic_summary(self) -> Optional[dict]:
        if not self.authentic:
            return None
        return {
            "p_acc": float(np.mean([r["p_acc"] for r in self.authentic])),
            "i_acc": sum(r["i_pred"] == "authentic" for r in self.authentic) / len(self.authentic),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ITEM_HEADER)
        for r in self.rows:
            w.writerow([r["item"], r["method"]] + [_fmt(r[k]) for k in ("f1", "iou", "acc", "auc")])
        for r in self.failed:
            w.writerow([r["item"], r["method"], "failed", "failed", "failed", "failed"])
        for method, agg in self.aggregates().items():
            w.writerow([f"AGG:{method}", agg["n"]] + [_fmt(agg[k]) for k in ("f1", "iou", "acc", "auc")])
        w.writerow([])
        w.writerow(AUTH_HEADER)
        for r in self.authentic:
            w.writerow([r["item"], _fmt(r["p_acc"]), r["i_pred"]])
        summary = self.authentic_summary()
        if summary is not None:
            w.writerow(["AGG:authentic", _fmt(summary["p_acc"]), _fmt(summary["i_acc"])])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _mean_rows(rows: List[dict]) -> dict:
    aucs = [r["auc"] for r in rows if not math.isnan(r["auc"])]
    return {
        "n": len(rows),
        "f1": float(np.mean([r["f1"] for r in rows])),
        "iou": float(np.mean([r["iou"] for r in rows])),
        "acc": float(np.mean([r["acc"] for r in rows])),
        "auc": float(np.mean(aucs)) if aucs else math.nan,
        "auc_undefined": len(rows) - len(aucs),
    }


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.4f}"


def evaluate(records, predict_fn: Callable, report_path=None, image_size: int = 448) -> MetricReport:
    """Score every manifest record in order and optionally write the CSV report.

    ``predict_fn`` maps an image array to the dict returned by
    :func:`gifl.model.predict`. Records whose files cannot be read are listed
    as failed and the run continues.
    """
    from gifl.core_types import load_image, load_mask

    report = MetricReport()
    for rec in records:
        try:
            img = load_image(rec.image_path, image_size)
            gt = load_mask(rec.mask_path, image_size)
        except OSError as exc:
            report.failed.append({"item": rec.item_id, "method": rec.method_tag, "error": str(exc)})
            continue
        out = predict_fn(img)
        if rec.label == "authentic":
            report.authentic.append({"item": rec.item_id, **authenticity_metrics(out["prob"], out["image_score"])})
        else:
            report.rows.append({"item": rec.item_id, "method": rec.method_tag, **item_metrics(out["prob"], gt)})
    if report_path is not None:
        report.write(report_path)
    return report
