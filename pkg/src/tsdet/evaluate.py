"""COCO-style detection evaluation and the paired t-test.

Per-class average precision from a global score ranking (101-point
interpolation, with the exact-area variant logged alongside), mAP at IoU
0.50 / 0.75 / 0.50:0.95, and area-banded mAP.  The t-test p-value comes from
the Student-t CDF evaluated through a continued-fraction regularized
incomplete beta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .geometry import Box, Detection, iou

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class EvalError(Exception):
    pass


@dataclass
class EvalConfig:
    # area bands scaled from the COCO 32^2/96^2 convention down to 96x96
    # images; restore (1024, 9216) when evaluating real-size data
    medium_band: Tuple[float, float] = (16.0 ** 2, 48.0 ** 2)
    large_min: float = 48.0 ** 2


@dataclass
class MatchLog:
    """Per-image greedy matching record at one IoU threshold."""

    iou_threshold: float
    entries: list                 # dicts: score, class_id, tp, ignored, matched_gt
    n_gt_per_class: dict          # class_id -> matchable ground-truth count


@dataclass
class EvalResult:
    per_class_ap: dict            # class_id -> {"ap50","ap75","ap50_95"}, None if undefined
    map50: float
    map75: float
    map50_95: float
    map_medium: float
    map_large: float
    map50_exact: float            # exact-area AP at IoU 0.5, for transparency
    match_log: list               # MatchLog per image at IoU 0.5, all areas
    undefined_classes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map50": self.map50, "map75": self.map75, "map50_95": self.map50_95,
            "map_medium": self.map_medium, "map_large": self.map_large,
            "map50_exact": self.map50_exact,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
        }


def match_detections(detections: Sequence[Detection], gt_boxes: Sequence[Box],
                     gt_classes: Sequence[int], iou_threshold: float,
                     ignore_boxes: Sequence[Box] = (),
                     ignore_classes: Sequence[int] = ()) -> MatchLog:
    """Greedy one-to-one matching for one image.

    Detections must arrive sorted by descending score.  Each detection takes
    the highest-IoU unmatched same-class ground truth at or above the
    threshold (TP); otherwise, if it overlaps an ignored ground truth of its
    class at the threshold it is excluded from scoring; otherwise it is a FP.
    Unmatched ground truth are the false negatives.
    """
    taken = [False] * len(gt_boxes)
    entries = []
    for d_idx, det in enumerate(detections):
        best_j = -1
        best_iou = -1.0
        for j, (gb, gc) in enumerate(zip(gt_boxes, gt_classes)):
            if taken[j] or gc != det.class_id:
                continue
            v = iou(det.box, gb)
            if v >= iou_threshold and v > best_iou:
                best_iou = v
                best_j = j
        entry = {"det_index": d_idx, "score": det.score, "class_id": det.class_id,
                 "tp": False, "ignored": False, "matched_gt": None}
        if best_j >= 0:
            taken[best_j] = True
            entry["tp"] = True
            entry["matched_gt"] = best_j
        else:
            for gb, gc in zip(ignore_boxes, ignore_classes):
                if gc == det.class_id and iou(det.box, gb) >= iou_threshold:
                    entry["ignored"] = True
                    break
        entries.append(entry)
    n_gt = {}
    for gc in gt_classes:
        n_gt[gc] = n_gt.get(gc, 0) + 1
    return MatchLog(iou_threshold=iou_threshold, entries=entries, n_gt_per_class=n_gt)


def _ranked_records(match_logs: Sequence[MatchLog], class_id: int):
    records = []
    for img_idx, log in enumerate(match_logs):
        for e in log.entries:
            if e["class_id"] == class_id and not e["ignored"]:
                records.append((-e["score"], img_idx, e["det_index"], e["tp"]))
    records.sort()
    return records


def average_precision(match_logs: Sequence[MatchLog], class_id: int,
                      iou_threshold: float) -> Optional[float]:
    """101-point interpolated AP for one class over the whole eval set.

    None when the class never appears in the ground truth (excluded from
    mAP).  ``iou_threshold`` must agree with the logs it is applied to.
    """
    ap, _ = _average_precision_both(match_logs, class_id, iou_threshold)
    return ap


def _average_precision_both(match_logs, class_id, iou_threshold):
    for log in match_logs:
        if abs(log.iou_threshold - iou_threshold) > 1e-9:
            raise EvalError(f"match log built at IoU {log.iou_threshold}, asked for {iou_threshold}")
    n_gt = sum(log.n_gt_per_class.get(class_id, 0) for log in match_logs)
    if n_gt == 0:
        return None, None
    records = _ranked_records(match_logs, class_id)
    if not records:
        return 0.0, 0.0
    tp = np.cumsum([1 if r[3] else 0 for r in records])
    fp = np.cumsum([0 if r[3] else 1 for r in records])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)

    # 101-point interpolation: precision at recall >= r
    ap101 = 0.0
    k = len(records)
    max_prec_from = np.empty(k)
    running = 0.0
    for i in range(k - 1, -1, -1):
        running = max(running, precision[i])
        max_prec_from[i] = running
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    for g, i in zip(grid, idx):
        if i < k:
            ap101 += max_prec_from[i]
    ap101 /= 101.0

    # exact area under the interpolated precision envelope
    ap_exact = 0.0
    prev_r = 0.0
    for i in range(k):
        r = recall[i]
        if r > prev_r:
            ap_exact += (r - prev_r) * max_prec_from[i]
            prev_r = r
    return float(ap101), float(ap_exact)


def _band_split(gts, band_lo, band_hi):
    keep_b, keep_c, ign_b, ign_c = [], [], [], []
    for box, c in gts:
        if band_lo <= box.area <= band_hi:
            keep_b.append(box)
            keep_c.append(c)
        else:
            ign_b.append(box)
            ign_c.append(c)
    return keep_b, keep_c, ign_b, ign_c


def _mean_ap_at(dets_per_image, gts_per_image, threshold, band, class_ids):
    logs = []
    for dets, gts in zip(dets_per_image, gts_per_image):
        kb, kc, ib, ic = _band_split(gts, band[0], band[1])
        dets = sorted(dets, key=lambda d: -d.score)
        logs.append(match_detections(dets, kb, kc, threshold, ib, ic))
    aps = {c: average_precision(logs, c, threshold) for c in class_ids}
    defined = [v for v in aps.values() if v is not None]
    mean_ap = float(np.mean(defined)) if defined else 0.0
    return mean_ap, aps, logs


def map_summary(dets_per_image: Sequence[Sequence[Detection]],
                gts_per_image: Sequence[Sequence],
                num_classes: int,
                config: Optional[EvalConfig] = None) -> EvalResult:
    """Evaluate a whole split.

    ``gts_per_image`` holds (Box, class_id) pairs per image.  Out-of-band
    ground truth is ignored rather than counted, so detections overlapping
    it are excluded instead of penalized.  A class absent from the ground
    truth of a regime is undefined there and excluded from that mean.
    """
    config = config or EvalConfig()
    if len(dets_per_image) == 0:
        raise EvalError("empty evaluation set")
    if len(dets_per_image) != len(gts_per_image):
        raise EvalError(f"{len(dets_per_image)} detection lists vs {len(gts_per_image)} ground-truth lists")
    class_ids = list(range(num_classes))
    all_band = (0.0, math.inf)
    med_band = config.medium_band
    # large means strictly greater than the medium band's upper bound
    large_band = (np.nextafter(config.large_min, math.inf), math.inf)

    per_threshold = {}
    per_class_at = {}
    main_logs = None
    for t in IOU_THRESHOLDS:
        mean_ap, aps, logs = _mean_ap_at(dets_per_image, gts_per_image, t, all_band, class_ids)
        per_threshold[t] = mean_ap
        per_class_at[t] = aps
        if t == 0.5:
            main_logs = logs
    map50 = per_threshold[0.5]
    map75 = per_threshold[0.75]
    map50_95 = float(np.mean([per_threshold[t] for t in IOU_THRESHOLDS]))

    med = [_mean_ap_at(dets_per_image, gts_per_image, t, med_band, class_ids)[0]
           for t in IOU_THRESHOLDS]
    large = [_mean_ap_at(dets_per_image, gts_per_image, t, large_band, class_ids)[0]
             for t in IOU_THRESHOLDS]

    per_class = {}
    undefined = {}
    for c in class_ids:
        spread = [per_class_at[t][c] for t in IOU_THRESHOLDS]
        defined = [v for v in spread if v is not None]
        per_class[c] = {
            "ap50": per_class_at[0.5][c],
            "ap75": per_class_at[0.75][c],
            "ap50_95": float(np.mean(defined)) if defined else None,
        }
        if per_class_at[0.5][c] is None:
            undefined[c] = "class absent from ground truth"

    exact50 = []
    for c in class_ids:
        _, e = _average_precision_both(main_logs, c, 0.5)
        if e is not None:
            exact50.append(e)
    return EvalResult(
        per_class_ap=per_class,
        map50=map50, map75=map75, map50_95=map50_95,
        map_medium=float(np.mean(med)), map_large=float(np.mean(large)),
        map50_exact=float(np.mean(exact50)) if exact50 else 0.0,
        match_log=main_logs,
        undefined_classes=undefined,
    )


# ---------------------------------------------------------------------------
# paired t-test


@dataclass
class SignificanceReport:
    t_statistic: float
    p_value: float
    n_pairs: int
    mean_difference: float
    degenerate_variance: bool = False


def _betacf(a: float, b: float, x: float) -> float:
    # Lentz continued fraction for the incomplete beta (Numerical Recipes form)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-15:
            return h
    raise EvalError(f"incomplete beta continued fraction failed to converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) to well below 1e-8 absolute error."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                     + a * math.log(x) + b * math.log(1.0 - x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t with ``df`` degrees."""
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> SignificanceReport:
    """Classical paired t-test on the differences a - b, two-sided p."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvalError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise EvalError(f"need at least 2 pairs, got {n}")
    d = a - b
    md = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if md == 0.0:
            return SignificanceReport(0.0, 1.0, n, 0.0, degenerate_variance=True)
        t = math.inf if md > 0 else -math.inf
        return SignificanceReport(t, 0.0, n, md, degenerate_variance=True)
    t = md / (sd / math.sqrt(n))
    p = student_t_sf2(t, n - 1)
    return SignificanceReport(float(t), float(p), n, md)
