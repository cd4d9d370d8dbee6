"""Detection scoring: center-distance matching, mAP, TP error means, and the
composite score.

The protocol is the standard center-distance one at desk scale: greedy
score-ordered matching, AP from a 101-point interpolated precision-recall
curve clipped at recall/precision 0.1, averaged over distance thresholds
{0.5, 1, 2, 4} m and over classes that have ground truth. Three TP errors
(translation, orientation, velocity) are averaged over matches at the 2 m
threshold. The composite is

    composite = (1/8) * (5 * mAP + sum_e (1 - min(1, e / bound_e)))

with bounds ATE/2 m, AOE/pi, AVE/2 m/s. Scale and attribute errors are
dropped: synthetic sizes are noiseless and attributes do not exist here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle

AP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
ERROR_BOUNDS = {"ate": 2.0, "aoe": math.pi, "ave": 2.0}
MIN_RECALL = 0.1
MIN_PRECISION = 0.1


@dataclass
class EvalResult:
    mAP: float
    ate: float
    aoe: float
    ave: float
    composite: float
    per_class_ap: dict
    thresholds: tuple = AP_THRESHOLDS
    n_frames: int = 0
    pr_curves: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "mAP": self.mAP,
            "ATE": self.ate,
            "AOE": self.aoe,
            "AVE": self.ave,
            "composite": self.composite,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "thresholds": list(self.thresholds),
            "n_frames": self.n_frames,
        }


def center_distance(a, b) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def match_by_center_distance(preds, gts, threshold):
    """Greedy one-to-one matching in descending score order.

    Each prediction takes the nearest unmatched ground-truth box of its own
    class within ``threshold`` meters. Returns (pred_index, gt_index,
    distance) triples.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = set()
    matches = []
    for i in order:
        p = preds[i]
        best = None
        for j, g in enumerate(gts):
            if j in taken or g.cls != p.box.cls:
                continue
            d = center_distance(p.box, g)
            if d <= threshold and (best is None or d < best[1]):
                best = (j, d)
        if best is not None:
            taken.add(best[0])
            matches.append((i, best[0], best[1]))
    return matches


def _pr_curve(frames, cls, threshold):
    """Pooled PR samples for one class at one distance threshold.

    Returns (recall array, precision array, n_gt); arrays follow descending
    score order.
    """
    scored = []
    n_gt = 0
    for preds, gts in frames:
        cls_preds = [p for p in preds if p.box.cls == cls]
        cls_gts = [g for g in gts if g.cls == cls]
        n_gt += len(cls_gts)
        matched = {i for i, _, _ in match_by_center_distance(cls_preds, cls_gts, threshold)}
        for i, p in enumerate(cls_preds):
            scored.append((p.score, 1 if i in matched else 0))
    if not scored or n_gt == 0:
        return np.zeros(0), np.zeros(0), n_gt
    scored.sort(key=lambda t: -t[0])
    tp = np.cumsum([s[1] for s in scored])
    fp = np.cumsum([1 - s[1] for s in scored])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision, n_gt


def _interp_precision(recall, precision):
    """Precision at 101 recall points; duplicate recalls keep the last
    (final cumulative) precision, flat extension on the left, zero beyond
    the maximum achieved recall."""
    points = np.linspace(0.0, 1.0, 101)
    if recall.size == 0:
        return np.zeros(101)
    dedup_r = []
    dedup_p = []
    for r, p in zip(recall, precision):
        if dedup_r and r == dedup_r[-1]:
            dedup_p[-1] = p
        else:
            dedup_r.append(r)
            dedup_p.append(p)
    return np.interp(points, np.array(dedup_r), np.array(dedup_p), left=dedup_p[0], right=0.0)


def compute_ap(frames, cls, threshold) -> float:
    """Clipped, normalized area under the interpolated PR curve."""
    recall, precision, n_gt = _pr_curve(frames, cls, threshold)
    if n_gt == 0:
        return float("nan")
    prec = _interp_precision(recall, precision)
    start = round(100 * MIN_RECALL) + 1
    clipped = np.clip(prec[start:] - MIN_PRECISION, 0.0, None)
    return float(clipped.mean() / (1.0 - MIN_PRECISION))


def compute_map(frames, classes=None) -> tuple:
    """mAP over thresholds and classes with ground truth.

    Returns (mAP, {cls: mean AP over thresholds}). Classes without any gt in
    ``frames`` are excluded from the mean.
    """
    if classes is None:
        classes = sorted({g.cls for _, gts in frames for g in gts})
    per_class = {}
    for cls in classes:
        aps = [compute_ap(frames, cls, thr) for thr in AP_THRESHOLDS]
        aps = [a for a in aps if not math.isnan(a)]
        if aps:
            per_class[cls] = float(np.mean(aps))
    if not per_class:
        return 0.0, {}
    return float(np.mean(list(per_class.values()))), per_class


def compute_tp_errors(frames, threshold=TP_THRESHOLD):
    """Mean (ATE, AOE, AVE) over all matches at ``threshold``.

    Orientation error is the minimal absolute yaw difference over the full
    2 pi period; velocity error is the L2 difference. Zero matches report
    the defined maxima (the normalization bounds).
    """
    dists = []
    yaw_errs = []
    vel_errs = []
    for preds, gts in frames:
        for i, j, d in match_by_center_distance(preds, gts, threshold):
            b, g = preds[i].box, gts[j]
            dists.append(d)
            yaw_errs.append(abs(float(wrap_angle(b.yaw - g.yaw))))
            vel_errs.append(math.hypot(b.vx - g.vx, b.vy - g.vy))
    if not dists:
        return ERROR_BOUNDS["ate"], ERROR_BOUNDS["aoe"], ERROR_BOUNDS["ave"]
    return float(np.mean(dists)), float(np.mean(yaw_errs)), float(np.mean(vel_errs))


def compute_composite(map_value, errors, bounds=None) -> float:
    bounds = bounds or ERROR_BOUNDS
    ate, aoe, ave = errors
    terms = [
        1.0 - min(1.0, ate / bounds["ate"]),
        1.0 - min(1.0, aoe / bounds["aoe"]),
        1.0 - min(1.0, ave / bounds["ave"]),
    ]
    return (5.0 * map_value + sum(terms)) / 8.0


def evaluate_detections(frames, classes=None, with_curves=False) -> EvalResult:
    """Full scoring of (predictions, ground truth) frame pairs."""
    map_value, per_class = compute_map(frames, classes=classes)
    errors = compute_tp_errors(frames)
    result = EvalResult(
        mAP=map_value,
        ate=errors[0],
        aoe=errors[1],
        ave=errors[2],
        composite=compute_composite(map_value, errors),
        per_class_ap=per_class,
        n_frames=len(frames),
    )
    if with_curves:
        curves = {}
        for cls in per_class:
            recall, precision, _ = _pr_curve(frames, cls, TP_THRESHOLD)
            curves[cls] = (recall.tolist(), precision.tolist())
        result.pr_curves = curves
    return result


def eval_result_csv(result: EvalResult) -> str:
    lines = ["metric,value"]
    d = result.to_dict()
    for key in ("mAP", "ATE", "AOE", "AVE", "composite"):
        lines.append(f"{key},{d[key]:.6f}")
    for cls, ap in sorted(result.per_class_ap.items()):
        lines.append(f"AP_class_{cls},{ap:.6f}")
    return "\n".join(lines) + "\n"
