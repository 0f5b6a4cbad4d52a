"""IoU, VOC all-point average precision and class-averaged mAP."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .voc import CLASSES, GroundTruthBox

DETECTION_FIELDS = ("path", "class", "conf", "xmin", "ymin", "xmax", "ymax")


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    if not (ax1 > ax0 and ay1 > ay0 and bx1 > bx0 and by1 > by0):
        raise ValueError(f"degenerate box in iou({a}, {b})")
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def _sort_key(det):
    image, conf, box = det[0], det[1], det[2]
    return (-conf, str(image), tuple(box))


def match_detections(dets, gts, iou_thr=0.5):
    """Greedy matching for one class.

    dets: iterable of (image, confidence, box); gts: iterable of (image, box)
    or (image, box, difficult). Detections are visited by descending
    confidence; each takes the highest-IoU unmatched non-difficult GT of its
    image if that IoU reaches ``iou_thr``. A detection that only overlaps a
    difficult GT is ignored. Returns (confidences, tp flags) for the counted
    detections in visiting order and the number of non-difficult GTs.
    """
    by_image: dict = {}
    npos = 0
    for g in gts:
        image, box = g[0], g[1]
        difficult = bool(g[2]) if len(g) > 2 else False
        by_image.setdefault(image, []).append([box, difficult, False])
        npos += not difficult
    confs, flags = [], []
    for image, conf, box in sorted(dets, key=_sort_key):
        cands = by_image.get(image, [])
        best, best_iou = None, -1.0
        for g in cands:
            if g[1] or g[2]:
                continue
            o = iou(box, g[0])
            if o > best_iou:
                best, best_iou = g, o
        if best is not None and best_iou >= iou_thr:
            best[2] = True
            confs.append(conf)
            flags.append(True)
            continue
        if any(g[1] and iou(box, g[0]) >= iou_thr for g in cands):
            continue
        confs.append(conf)
        flags.append(False)
    return np.asarray(confs, dtype=np.float64), np.asarray(flags, dtype=bool), npos


def voc_ap(recall, precision) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def average_precision(dets, gts, iou_thr=0.5):
    """AP for one class; NaN when there is no (non-difficult) ground truth.

    Returns (ap, tp, fp, npos).
    """
    _, flags, npos = match_detections(dets, gts, iou_thr)
    tp = int(flags.sum())
    fp = int(len(flags) - tp)
    if npos == 0:
        return float("nan"), tp, fp, npos
    if len(flags) == 0:
        return 0.0, 0, 0, npos
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    recall = tp_cum / npos
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return voc_ap(recall, precision), tp, fp, npos


@dataclass
class EvalReport:
    classes: tuple
    ap: dict
    gt: dict
    tp: dict
    fp: dict
    iou_thr: float = 0.5
    mAP: float = field(init=False)

    def __post_init__(self):
        vals = [v for c, v in self.ap.items() if self.gt[c] > 0]
        self.mAP = float(np.mean(vals)) if vals else 0.0

    def to_dict(self) -> dict:
        return {
            "iou_thr": self.iou_thr,
            "mAP": self.mAP,
            "classes": {c: {"AP": None if np.isnan(self.ap[c]) else self.ap[c], "GT": self.gt[c],
                            "TP": self.tp[c], "FP": self.fp[c]} for c in self.classes},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"{'class':<10} {'GT':>5} {'TP':>5} {'FP':>5} {'AP@' + str(self.iou_thr):>8}"]
        for c in self.classes:
            ap = "-" if np.isnan(self.ap[c]) else f"{self.ap[c]:.4f}"
            lines.append(f"{c:<10} {self.gt[c]:>5} {self.tp[c]:>5} {self.fp[c]:>5} {ap:>8}")
        lines.append(f"{'mAP':<10} {'':>5} {'':>5} {'':>5} {self.mAP:>8.4f}")
        return "\n".join(lines)


def _group_by_class(per_image_dets, per_image_gts, k):
    unknown = set(per_image_dets) - set(per_image_gts)
    if unknown:
        raise ValueError(f"detections for images without ground truth: {sorted(map(str, unknown))[:5]}")
    dets = {c: [] for c in range(k)}
    gts = {c: [] for c in range(k)}
    for image, boxes in per_image_gts.items():
        for g in boxes:
            if not 0 <= g.class_id < k:
                raise ValueError(f"unknown class id {g.class_id} in ground truth of {image}")
            gts[g.class_id].append((image, tuple(g.box), g.difficult))
    for image, items in per_image_dets.items():
        for d in items:
            if not 0 <= d.class_id < k:
                raise ValueError(f"unknown class id {d.class_id} in detections of {image}")
            dets[d.class_id].append((image, d.confidence, tuple(d.box)))
    return dets, gts


def mean_ap(per_image_dets, per_image_gts, classes=CLASSES, iou_thr=0.5) -> EvalReport:
    """Class-averaged AP; classes without ground truth are left out of the mean.

    per_image_dets: {image: [Detection]}; per_image_gts: {image: [GroundTruthBox]}.
    """
    dets, gts = _group_by_class(per_image_dets, per_image_gts, len(classes))
    k = len(classes)
    ap, gt, tp, fp = {}, {}, {}, {}
    for c in range(k):
        a, t, f, n = average_precision(dets[c], gts[c], iou_thr)
        name = classes[c]
        ap[name], gt[name], tp[name], fp[name] = a, n, t, f
    return EvalReport(tuple(classes), ap, gt, tp, fp, iou_thr)


def pr_curve(dets, gts, iou_thr=0.5):
    """(recall, precision) arrays for one class."""
    _, flags, npos = match_detections(dets, gts, iou_thr)
    tp_cum = np.cumsum(flags)
    n = np.arange(1, len(flags) + 1)
    return tp_cum / max(npos, 1), tp_cum / np.maximum(n, 1)


def class_pr_curves(per_image_dets, per_image_gts, classes=CLASSES, iou_thr=0.5):
    """{class name: (recall, precision)} for classes with ground truth."""
    dets, gts = _group_by_class(per_image_dets, per_image_gts, len(classes))
    out = {}
    for c, name in enumerate(classes):
        if any(not d for *_, d in gts[c]):
            out[name] = pr_curve(dets[c], gts[c], iou_thr)
    return out


def write_detections(path, rows) -> None:
    """rows: iterable of (path, Detection). Class names, not ids, are written."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(DETECTION_FIELDS)
        for img, d in rows:
            wr.writerow([img, CLASSES[d.class_id], f"{d.confidence:.6f}", *(f"{v:.2f}" for v in d.box)])


def read_detections(path):
    from .detector import Detection
    from .voc import class_index

    out: dict = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh, delimiter="\t")
        if tuple(rd.fieldnames or ()) != DETECTION_FIELDS:
            raise ValueError(f"{path}: expected columns {DETECTION_FIELDS}, got {rd.fieldnames}")
        for rec in rd:
            box = tuple(float(rec[k]) for k in ("xmin", "ymin", "xmax", "ymax"))
            out.setdefault(rec["path"], []).append(Detection(class_index(rec["class"]), box, float(rec["conf"])))
    return out


__all__ = ["iou", "average_precision", "mean_ap", "EvalReport", "GroundTruthBox", "voc_ap",
           "match_detections", "pr_curve", "write_detections", "read_detections"]
