"""PASCAL-style detection evaluation and proposal-budget sweeps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .boxes import iou_matrix
from .proposals import AnnotationSet, ProposalSet


@dataclass
class MatchResult:
    """Detections of one class in descending score order (stable on ties)."""

    scores: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    ignored: np.ndarray
    gt_matched: dict[str, np.ndarray]
    n_gt: int
    iou_threshold: float = 0.5


@dataclass
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def match_detections(dets: Sequence, ann: AnnotationSet, cls: int, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy VOC matching for class ``cls``.

    In descending score order, each detection takes the highest-IoU unmatched
    GT box of its image if that IoU reaches the threshold (true positive),
    otherwise it is a false positive. Detections whose only qualifying match
    is a "difficult" box are ignored, as are the difficult boxes themselves.
    """
    dets = [d for d in dets if d.cls == cls]
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    index = ann.by_id()
    gt_boxes, difficult, matched = {}, {}, {}
    n_gt = 0
    for im in ann.images:
        objs = [o for o in im.objects if o.cls == cls]
        gt_boxes[im.id] = np.array([o.box.to_array() for o in objs]).reshape(-1, 4)
        difficult[im.id] = np.array([o.difficult for o in objs], dtype=bool)
        matched[im.id] = np.zeros(len(objs), dtype=bool)
        n_gt += int((~difficult[im.id]).sum())

    n = len(order)
    tp = np.zeros(n, dtype=bool)
    fp = np.zeros(n, dtype=bool)
    ignored = np.zeros(n, dtype=bool)
    scores = np.array([dets[i].score for i in order], dtype=np.float64)
    for rank, i in enumerate(order):
        d = dets[i]
        if d.image not in index:
            raise KeyError(f"detection for unknown image {d.image!r}")
        gts = gt_boxes[d.image]
        if len(gts) == 0:
            fp[rank] = True
            continue
        ov = iou_matrix(d.box.to_array(), gts)[0]
        open_ = ~matched[d.image] & ~difficult[d.image]
        cand = np.where(open_, ov, -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            tp[rank] = True
            matched[d.image][j] = True
        elif np.any(difficult[d.image] & (ov >= iou_threshold)):
            ignored[rank] = True
        else:
            fp[rank] = True
    return MatchResult(scores, tp, fp, ignored, matched, n_gt, iou_threshold)


def pr_curve(match: MatchResult, n_gt: int | None = None, mode: str = "voc07") -> PRCurve:
    n_gt = match.n_gt if n_gt is None else n_gt
    keep = ~match.ignored
    tp = np.cumsum(match.tp[keep])
    fp = np.cumsum(match.fp[keep])
    if n_gt == 0 or len(tp) == 0:
        return PRCurve(np.zeros(len(tp)), np.zeros(len(tp)), 0.0)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    if mode in ("voc07", "voc07-11point"):
        anchors = []
        for k in range(11):
            hit = precision[recall >= k / 10]
            anchors.append(float(hit.max()) if hit.size else 0.0)
        ap = sum(anchors) / 11
    elif mode == "continuous":
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        step = np.flatnonzero(mrec[1:] != mrec[:-1])
        ap = float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))
    else:
        raise ValueError(f"unknown AP mode {mode!r}")
    return PRCurve(precision, recall, ap)


def average_precision(match: MatchResult, n_gt: int | None = None, mode: str = "voc07") -> float:
    """AP of a match sequence; ``voc07`` is the 11-point interpolated variant,
    ``continuous`` the area under the monotone precision envelope."""
    return pr_curve(match, n_gt, mode).ap


def mean_ap(per_class_ap) -> float:
    values = list(per_class_ap.values()) if isinstance(per_class_ap, Mapping) else list(per_class_ap)
    if not values:
        raise ValueError("no classes to average")
    return float(np.mean(values))


def evaluate(dets: Sequence, ann: AnnotationSet, iou_threshold: float = 0.5, mode: str = "voc07",
             classes: Sequence[int] | None = None) -> dict[int, float]:
    """Per-class AP. By default every class with at least one GT box is scored."""
    if classes is None:
        classes = sorted({o.cls for im in ann.images for o in im.objects if not o.difficult})
    return {c: average_precision(match_detections(dets, ann, c, iou_threshold), mode=mode) for c in classes}


def ap_table_csv(per_class: dict[int, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "AP"])
    for c, ap in per_class.items():
        w.writerow([c, f"{ap:.6f}"])
    w.writerow(["mAP", f"{mean_ap(per_class):.6f}"])
    return buf.getvalue()


@dataclass
class SweepRow:
    n: int
    method: str
    use_regression: bool
    mAP: float
    n_proposals: int


def sweep_proposal_budget(budgets: Sequence[int], generators: Mapping[str, Callable[[int], ProposalSet]],
                          detect: Callable[[ProposalSet, bool], list], ann: AnnotationSet,
                          regression_flags: Sequence[bool] = (False, True), iou_threshold: float = 0.5,
                          mode: str = "voc07") -> list[SweepRow]:
    """mAP as a function of the proposal budget, per method and regression flag.

    ``generators[method](n)`` builds the proposal set for budget ``n``;
    ``detect(proposals, use_regression)`` returns detections for every image
    of ``ann``.
    """
    if list(budgets) != sorted(budgets):
        raise ValueError("budgets must be sorted ascending")
    rows = []
    for n in budgets:
        for method, gen in generators.items():
            props = gen(n)
            for flag in regression_flags:
                dets = detect(props, flag)
                rows.append(SweepRow(n, method, flag, mean_ap(evaluate(dets, ann, iou_threshold, mode)),
                                     len(props)))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    lines = ["n,method,use_regression,mAP,n_proposals"]
    lines += [f"{r.n},{r.method},{int(r.use_regression)},{r.mAP:.6f},{r.n_proposals}" for r in rows]
    return "\n".join(lines) + "\n"
