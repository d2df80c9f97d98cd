"""Axis-aligned box arithmetic: IoU, delta coding, class-wise NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple


@dataclass(frozen=True)
class Box:
    """Pixel-coordinate box, origin top-left, x1 <= x2 and y1 <= y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"box coordinates must be finite: {self}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def clipped(self, width: float, height: float) -> "Box":
        return Box(min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height),
                   min(max(self.x2, 0.0), width), min(max(self.y2, 0.0), height))


@dataclass(frozen=True)
class Detection:
    """Scored class prediction; becomes a pseudo label once filtered."""

    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0,1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def encode_deltas(anchor: Box, target: Box) -> Tuple[float, float, float, float]:
    """Faster-RCNN style (tx, ty, tw, th) of ``target`` relative to ``anchor``."""
    wa, ha = anchor.width, anchor.height
    if wa <= 0 or ha <= 0:
        raise ValueError(f"anchor must have positive extent: {anchor}")
    wt, ht = target.width, target.height
    if wt <= 0 or ht <= 0:
        raise ValueError(f"target must have positive extent: {target}")
    cxa, cya = anchor.center
    cxt, cyt = target.center
    return ((cxt - cxa) / wa, (cyt - cya) / ha, math.log(wt / wa), math.log(ht / ha))


def decode_deltas(anchor: Box, deltas: Sequence[float],
                  clip_size: Optional[Tuple[float, float]] = None) -> Box:
    """Inverse of encode_deltas; optionally clipped to (width, height)."""
    wa, ha = anchor.width, anchor.height
    if wa <= 0 or ha <= 0:
        raise ValueError(f"anchor must have positive extent: {anchor}")
    tx, ty, tw, th = (float(v) for v in deltas)
    cxa, cya = anchor.center
    cx = cxa + tx * wa
    cy = cya + ty * ha
    w = wa * math.exp(tw)
    h = ha * math.exp(th)
    box = Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    if clip_size is not None:
        box = box.clipped(clip_size[0], clip_size[1])
    return box


def classwise_nms(dets: Iterable[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy score-descending suppression, independently per class.

    Ties break on the lower original index so results are reproducible; the
    output is a subset of the input sorted by descending score.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0,1), got {iou_threshold}")
    indexed = list(enumerate(dets))
    indexed.sort(key=lambda p: (-p[1].score, p[0]))
    kept: list[tuple[int, Detection]] = []
    for idx, det in indexed:
        suppressed = False
        for _, other in kept:
            if other.class_id == det.class_id and iou(other.box, det.box) >= iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append((idx, det))
    return [d for _, d in kept]
