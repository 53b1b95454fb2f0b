"""Recognition metrics under the customer and management protocols.

* customer: a prediction is correct when the product id matches and its box
  intersects a ground-truth cluster box; each cluster is credited once and
  further hits on an already credited cluster are ignored.
* management: one-to-one matching with IoU above a threshold; duplicates are
  false positives.

mAP uses all-points interpolation (the precision envelope) and is averaged
over products that have at least one ground-truth box.  mAMCA is computed as
the per-image Jaccard index of predicted and ground-truth product sets.
"""
import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import IOFailure, UndefinedMetricError, ValidationError

TP, FP, IGNORED = "tp", "fp", "ignored"


@dataclass
class MatchProtocol:
    mode: str = "management"
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in ("customer", "management"):
            raise ValidationError(f"unknown protocol mode {self.mode!r}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValidationError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")


@dataclass
class Prediction:
    """An accepted recognition reduced to what scoring needs."""
    x: float
    y: float
    w: float
    h: float
    product_id: str
    confidence: float
    image: str = ""

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)


@dataclass
class Assignment:
    labels: list          # TP / FP / IGNORED per prediction, in input order
    gt_index: list        # matched ground-truth index or None
    matched: set


@dataclass
class EvalReport:
    map: float
    pr: float
    mamca: float
    per_image: list = field(default_factory=list)
    pr_curve: list = field(default_factory=list)
    per_product_ap: dict = field(default_factory=dict)
    protocol: str = "management"

    def to_dict(self):
        d = asdict(self)
        d["pr_curve"] = [list(p) for p in self.pr_curve]
        d["notes"] = {"ap_interpolation": "all-points precision envelope",
                      "mamca": "per-image Jaccard of product-id sets (stand-in definition)"}
        return d


def intersection(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    return max(iw, 0) * max(ih, 0)


def iou(a, b):
    inter = intersection(a, b)
    if inter == 0:
        return 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def _order(preds):
    return sorted(range(len(preds)), key=lambda i: -preds[i].confidence)


def match_detections(preds, gt, protocol=None):
    """Greedy one-to-one matching of one image's predictions, highest
    confidence first.  Among eligible unmatched boxes the highest IoU wins."""
    protocol = protocol or MatchProtocol()
    labels = [FP] * len(preds)
    gt_index = [None] * len(preds)
    matched = set()
    for i in _order(preds):
        p = preds[i]
        best, best_iou, hit_credited = None, -1.0, False
        for j, g in enumerate(gt):
            if g.product_id != p.product_id:
                continue
            ov = iou(p.box, g.box)
            if protocol.mode == "customer":
                ok = intersection(p.box, g.box) > 0
            else:
                ok = ov > protocol.iou_threshold
            if not ok:
                continue
            if j in matched:
                hit_credited = True
                continue
            if ov > best_iou:
                best, best_iou = j, ov
        if best is not None:
            labels[i], gt_index[i] = TP, best
            matched.add(best)
        elif protocol.mode == "customer" and hit_credited:
            labels[i] = IGNORED
    return Assignment(labels, gt_index, matched)


def average_precision(confidences, is_tp, n_gt):
    """Area under the precision envelope of the confidence-ranked list."""
    if n_gt <= 0:
        raise UndefinedMetricError("average precision needs at least one ground-truth instance")
    if len(confidences) == 0:
        return 0.0
    conf = np.asarray(confidences, dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def mean_average_precision(per_product_ap):
    if not per_product_ap:
        raise UndefinedMetricError("no product has ground truth; mAP is undefined")
    return float(np.mean(list(per_product_ap.values())))


def product_recall(per_image_recalls):
    vals = [r for r in per_image_recalls if r is not None]
    if not vals:
        raise UndefinedMetricError("no image has ground truth; product recall is undefined")
    return float(np.mean(vals))


def jaccard(pred_set, gt_set):
    p, g = set(pred_set), set(gt_set)
    if not p and not g:
        return 1.0
    return len(p & g) / len(p | g)


def mamca(pred_sets, gt_sets):
    if len(pred_sets) != len(gt_sets):
        raise ValidationError("pred_sets and gt_sets must have equal length")
    if not pred_sets:
        raise UndefinedMetricError("mAMCA over zero images is undefined")
    return float(np.mean([jaccard(p, g) for p, g in zip(pred_sets, gt_sets)]))


def pr_curve(confidences, is_tp, n_gt):
    """``(threshold, precision, recall)`` after each prediction in confidence
    order."""
    if len(confidences) == 0 or n_gt <= 0:
        return []
    conf = np.asarray(confidences, dtype=np.float64)
    order = np.argsort(-conf, kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    n = np.arange(1, len(tp) + 1)
    return [(float(conf[order][i]), float(ctp[i] / n[i]), float(ctp[i] / n_gt)) for i in range(len(tp))]


def evaluate(preds_by_image, gt_by_image, protocol=None):
    """Score predictions against ground truth over a set of images.

    Both arguments map image names to lists; images missing from
    ``preds_by_image`` count as having no predictions.
    """
    protocol = protocol or MatchProtocol()
    scored = defaultdict(list)          # product -> [(conf, is_tp)]
    n_gt = defaultdict(int)
    pooled = []
    recalls, pred_sets, gt_sets, per_image = [], [], [], []
    images = sorted(set(gt_by_image) | set(preds_by_image))
    for name in images:
        gt = gt_by_image.get(name, [])
        preds = preds_by_image.get(name, [])
        a = match_detections(preds, gt, protocol)
        for g in gt:
            n_gt[g.product_id] += 1
        for p, lab in zip(preds, a.labels):
            if lab != IGNORED:
                scored[p.product_id].append((p.confidence, lab == TP))
                pooled.append((p.confidence, lab == TP))
        gt_products = {g.product_id for g in gt}
        if protocol.mode == "customer":
            found = {gt[j].product_id for j in a.matched}
            recall = len(found) / len(gt_products) if gt_products else None
        else:
            recall = len(a.matched) / len(gt) if gt else None
        recalls.append(recall)
        pset = {p.product_id for p in preds}
        pred_sets.append(pset)
        gt_sets.append(gt_products)
        per_image.append({"image": name, "n_gt": len(gt), "n_pred": len(preds),
                          "tp": a.labels.count(TP), "fp": a.labels.count(FP),
                          "ignored": a.labels.count(IGNORED), "recall": recall,
                          "amca": jaccard(pset, gt_products)})
    aps = {}
    for pid in sorted(n_gt):
        rows = scored.get(pid, [])
        aps[pid] = average_precision([c for c, _ in rows], [t for _, t in rows], n_gt[pid])
    total_gt = sum(n_gt.values())
    curve = pr_curve([c for c, _ in pooled], [t for _, t in pooled], total_gt)
    return EvalReport(map=mean_average_precision(aps), pr=product_recall(recalls),
                      mamca=mamca(pred_sets, gt_sets) if images else 0.0,
                      per_image=per_image, pr_curve=curve, per_product_ap=aps,
                      protocol=protocol.mode)


def write_report(report, path, curve_path=None):
    try:
        Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        if curve_path is not None:
            with open(curve_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["threshold", "precision", "recall"])
                for t, p, r in report.pr_curve:
                    w.writerow([repr(t), repr(p), repr(r)])
    except OSError as exc:
        raise IOFailure(f"cannot write report: {exc}") from exc
