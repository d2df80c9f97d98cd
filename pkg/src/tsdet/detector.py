"""Tiny two-stage detector.

Keeps the Faster-RCNN decomposition the training losses need: a strided
conv backbone, a single-anchor proposal head emitting per-cell objectness
and box deltas, and an ROI head classifying each proposal into C foreground
classes plus background while refining its box.  Proposal coordinates are
treated as fixed inputs to the ROI stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .geometry import Box, Detection, decode_deltas
from .params import ParameterSet
from .tensor import Tensor

REGRESSION_HEAD_PREFIXES = ("rpn.delta.", "roi.reg.")


@dataclass
class DetectorConfig:
    image_size: int = 96
    num_classes: int = 7
    channels: tuple = (16, 32, 32)      # backbone conv widths, last one is F
    roi_hidden: int = 64
    anchor_size: float = 24.0
    k_proposals: int = 28               # RPN keep count before target injection
    max_proposals: int = 32
    proposal_nms_iou: float = 0.7
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    roi_pos_iou: float = 0.5

    @property
    def stride(self) -> int:
        return 8  # three stride-2 convs

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    def validate(self) -> None:
        if self.image_size % 8 != 0:
            raise ValueError(f"detector.image_size must be a multiple of 8, got {self.image_size}")
        if self.k_proposals > self.grid * self.grid:
            raise ValueError(f"detector.k_proposals {self.k_proposals} exceeds anchor count {self.grid ** 2}")
        if self.k_proposals > self.max_proposals:
            raise ValueError("detector.k_proposals must not exceed max_proposals")


@dataclass
class ProposalBatch:
    boxes: list            # Box, clipped to the image
    scores: np.ndarray     # objectness probabilities
    cells: list            # source anchor index per proposal, -1 for injected

    def __len__(self):
        return len(self.boxes)


@dataclass
class MatchAssignment:
    """Per-box training labels.

    ``positive`` boxes take the class of their matched ground truth;
    ``negative`` means background (for RPN, anchors that are neither are
    ignored).  Forced best-anchor positives may sit below the IoU threshold;
    they exist so every object gets at least one positive.
    """

    positive: np.ndarray
    negative: np.ndarray
    matched_gt: np.ndarray
    gt_boxes: tuple
    gt_classes: tuple

    def positive_classes(self) -> np.ndarray:
        idx = np.flatnonzero(self.positive)
        return np.array([self.gt_classes[self.matched_gt[i]] for i in idx], dtype=np.int64)


@dataclass
class DetectorOutputs:
    features: Tensor
    rpn_obj: Tensor        # (G, G)
    rpn_deltas: Tensor     # (G, G, 4)
    proposals: ProposalBatch
    roi_logits: Tensor     # (n, C+1)
    roi_deltas: Tensor     # (n, 4)
    anchors: list


def init_detector_params(config: DetectorConfig, seed: int) -> ParameterSet:
    """Uniform [-r, r) init with r = 1/sqrt(fan_in), deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    c1, c2, f = config.channels

    def uniform(name, shape, fan_in):
        r = 1.0 / np.sqrt(fan_in)
        params.add(name, rng.uniform(-r, r, size=shape).astype(np.float32))

    uniform("backbone.conv1.w", (c1, 3, 3, 3), 3 * 9)
    uniform("backbone.conv1.b", (c1,), 3 * 9)
    uniform("backbone.conv2.w", (c2, c1, 3, 3), c1 * 9)
    uniform("backbone.conv2.b", (c2,), c1 * 9)
    uniform("backbone.conv3.w", (f, c2, 3, 3), c2 * 9)
    uniform("backbone.conv3.b", (f,), c2 * 9)
    uniform("rpn.trunk.w", (f, f, 3, 3), f * 9)
    uniform("rpn.trunk.b", (f,), f * 9)
    uniform("rpn.obj.w", (1, f, 1, 1), f)
    uniform("rpn.obj.b", (1,), f)
    uniform("rpn.delta.w", (4, f, 1, 1), f)
    uniform("rpn.delta.b", (4,), f)
    uniform("roi.fc1.w", (9 * f, config.roi_hidden), 9 * f)
    uniform("roi.fc1.b", (config.roi_hidden,), 9 * f)
    uniform("roi.cls.w", (config.roi_hidden, config.num_classes + 1), config.roi_hidden)
    uniform("roi.cls.b", (config.num_classes + 1,), config.roi_hidden)
    uniform("roi.reg.w", (config.roi_hidden, 4), config.roi_hidden)
    uniform("roi.reg.b", (4,), config.roi_hidden)
    return params


def is_regression_param(name: str) -> bool:
    return name.startswith(REGRESSION_HEAD_PREFIXES)


def image_to_tensor(image: np.ndarray) -> Tensor:
    """[0,1] HxWx3 image -> centered (1,3,H,W) tensor for the backbone."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise T.ShapeMismatch(f"expected HxWx3 image, got shape {image.shape}")
    centered = (image.astype(np.float32) - np.float32(0.5)) * np.float32(2.0)
    return Tensor(np.ascontiguousarray(centered.transpose(2, 0, 1))[None])


def images_to_tensor(images: Sequence[np.ndarray]) -> Tensor:
    """Stack a batch of HxWx3 images into one centered (N,3,H,W) tensor."""
    if not images:
        raise T.ShapeMismatch("empty image batch")
    for im in images:
        if im.ndim != 3 or im.shape[2] != 3:
            raise T.ShapeMismatch(f"expected HxWx3 images, got shape {im.shape}")
    stacked = np.stack([im.transpose(2, 0, 1) for im in images]).astype(np.float32)
    return Tensor((stacked - np.float32(0.5)) * np.float32(2.0))


def _conv_block(x, w, b, stride, padding):
    y = T.conv2d(x, w, stride=stride, padding=padding)
    return T.add(y, T.reshape(b, (1, b.shape[0], 1, 1)))


def backbone_forward(params: ParameterSet, image: Tensor, config: DetectorConfig) -> Tensor:
    """Three stride-2 3x3 conv+relu stages: (N,3,S,S) -> (N,F,S/8,S/8)."""
    s = config.image_size
    if image.data.ndim != 4 or image.shape[1:] != (3, s, s):
        raise T.ShapeMismatch(f"backbone expects (N,3,{s},{s}), got {image.shape}")
    x = T.relu(_conv_block(image, params["backbone.conv1.w"], params["backbone.conv1.b"], 2, 1))
    x = T.relu(_conv_block(x, params["backbone.conv2.w"], params["backbone.conv2.b"], 2, 1))
    x = T.relu(_conv_block(x, params["backbone.conv3.w"], params["backbone.conv3.b"], 2, 1))
    return x


def rpn_forward_batch(params: ParameterSet, features: Tensor, config: DetectorConfig):
    """Raw head outputs on a feature batch: (N,1,G,G) and (N,4,G,G)."""
    t = T.relu(_conv_block(features, params["rpn.trunk.w"], params["rpn.trunk.b"], 1, 1))
    obj = _conv_block(t, params["rpn.obj.w"], params["rpn.obj.b"], 1, 0)
    deltas = _conv_block(t, params["rpn.delta.w"], params["rpn.delta.b"], 1, 0)
    return obj, deltas


def rpn_forward(params: ParameterSet, features: Tensor, config: DetectorConfig):
    """Per-cell objectness logits (G,G) and anchor deltas (G,G,4)."""
    g = config.grid
    obj, deltas = rpn_forward_batch(params, features, config)
    obj = T.reshape(obj, (g, g))
    deltas = T.reshape(T.permute(deltas, (0, 2, 3, 1)), (g, g, 4))
    return obj, deltas


_ANCHOR_CACHE: dict = {}


def anchor_boxes(config: DetectorConfig) -> list:
    """One anchor per cell: anchor_size box centered on the cell, row-major."""
    key = (config.grid, config.stride, config.anchor_size)
    cached = _ANCHOR_CACHE.get(key)
    if cached is None:
        half = 0.5 * config.anchor_size
        cached = []
        for i in range(config.grid):
            for j in range(config.grid):
                cx = (j + 0.5) * config.stride
                cy = (i + 0.5) * config.stride
                cached.append(Box(cx - half, cy - half, cx + half, cy + half))
        _ANCHOR_CACHE[key] = cached
    return cached


def _anchor_array(config: DetectorConfig) -> np.ndarray:
    key = ("arr", config.grid, config.stride, config.anchor_size)
    cached = _ANCHOR_CACHE.get(key)
    if cached is None:
        cached = np.array([[b.x1, b.y1, b.x2, b.y2] for b in anchor_boxes(config)])
        _ANCHOR_CACHE[key] = cached
    return cached


def _sigmoid_np(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def select_proposals(rpn_obj: Tensor, rpn_deltas: Tensor, config: DetectorConfig,
                     k: Optional[int] = None, nms_iou: Optional[float] = None) -> ProposalBatch:
    """Decode, clip, suppress and keep the top-k proposals by objectness.

    Works on detached values; gradients never flow through proposal
    coordinates.  Ties in score resolve by cell index.
    """
    k = config.k_proposals if k is None else k
    nms_iou = config.proposal_nms_iou if nms_iou is None else nms_iou
    if k > config.grid * config.grid:
        raise ValueError(f"k={k} exceeds anchor count {config.grid ** 2}")
    anchors = _anchor_array(config)
    scores = _sigmoid_np(np.asarray(rpn_obj.data, dtype=np.float64).reshape(-1))
    deltas = np.asarray(rpn_deltas.data, dtype=np.float64).reshape(-1, 4)
    size = float(config.image_size)

    # vectorized decode + clip of every anchor
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    cx = 0.5 * (anchors[:, 0] + anchors[:, 2]) + deltas[:, 0] * wa
    cy = 0.5 * (anchors[:, 1] + anchors[:, 3]) + deltas[:, 1] * ha
    w = wa * np.exp(deltas[:, 2])
    h = ha * np.exp(deltas[:, 3])
    x1 = np.clip(cx - 0.5 * w, 0.0, size)
    y1 = np.clip(cy - 0.5 * h, 0.0, size)
    x2 = np.clip(cx + 0.5 * w, 0.0, size)
    y2 = np.clip(cy + 0.5 * h, 0.0, size)
    valid = (x2 - x1 >= 1.0) & (y2 - y1 >= 1.0)
    area = (x2 - x1) * (y2 - y1)

    cand = np.flatnonzero(valid)
    # stable sort on (-score, cell index); greedy suppression on a
    # precomputed IoU matrix is equivalent to checking against the kept set
    cand = cand[np.lexsort((cand, -scores[cand]))]
    iw = np.minimum(x2[cand][:, None], x2[cand][None, :]) - \
        np.maximum(x1[cand][:, None], x1[cand][None, :])
    ih = np.minimum(y2[cand][:, None], y2[cand][None, :]) - \
        np.maximum(y1[cand][:, None], y1[cand][None, :])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area[cand][:, None] + area[cand][None, :] - inter
    iou_m = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    suppressed = np.zeros(len(cand), dtype=bool)
    kept: list = []
    for pos in range(len(cand)):
        if suppressed[pos]:
            continue
        kept.append(int(cand[pos]))
        if len(kept) == k:
            break
        suppressed |= iou_m[pos] >= nms_iou
    boxes = [Box(x1[a], y1[a], x2[a], y2[a]) for a in kept]
    return ProposalBatch(boxes=boxes, scores=scores[kept], cells=kept)


def _roi_cell_indices(proposals: Sequence[Box], config: DetectorConfig):
    g = config.grid
    stride = config.stride
    b = np.array([[p.x1, p.y1, p.x2, p.y2] for p in proposals])
    offsets = (np.arange(3) + 0.5) / 3.0
    px = b[:, 0, None] + offsets[None, :] * (b[:, 2] - b[:, 0])[:, None]   # (n, 3)
    py = b[:, 1, None] + offsets[None, :] * (b[:, 3] - b[:, 1])[:, None]
    cx = np.clip(np.floor_divide(px, stride).astype(np.int64), 0, g - 1)
    cy = np.clip(np.floor_divide(py, stride).astype(np.int64), 0, g - 1)
    iy = np.repeat(cy[:, :, None], 3, axis=2)          # rows vary with y
    ix = np.repeat(cx[:, None, :], 3, axis=1)          # cols vary with x
    return iy, ix


def roi_forward(params: ParameterSet, features: Tensor, proposals: ProposalBatch,
                config: DetectorConfig):
    """3x3 nearest-neighbor feature crop -> 2-layer MLP -> (logits, deltas)."""
    if len(proposals) == 0:
        raise ValueError("roi_forward requires a non-empty proposal batch")
    iy, ix = _roi_cell_indices(proposals.boxes, config)
    crop = T.gather_cells(features, iy, ix)                    # (n, F, 3, 3)
    flat = T.reshape(crop, (len(proposals), -1))
    hidden = T.relu(T.add(T.matmul(flat, params["roi.fc1.w"]), params["roi.fc1.b"]))
    logits = T.add(T.matmul(hidden, params["roi.cls.w"]), params["roi.cls.b"])
    deltas = T.add(T.matmul(hidden, params["roi.reg.w"]), params["roi.reg.b"])
    return logits, deltas


def _iou_matrix(boxes: Sequence[Box], gts: Sequence[Box]) -> np.ndarray:
    if not boxes or not gts:
        return np.zeros((len(boxes), len(gts)))
    b = np.array([[x.x1, x.y1, x.x2, x.y2] for x in boxes])
    g = np.array([[x.x1, x.y1, x.x2, x.y2] for x in gts])
    ix = np.minimum(b[:, None, 2], g[None, :, 2]) - np.maximum(b[:, None, 0], g[None, :, 0])
    iy = np.minimum(b[:, None, 3], g[None, :, 3]) - np.maximum(b[:, None, 1], g[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    area_g = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    union = area_b[:, None] + area_g[None, :] - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def match_boxes(boxes: Sequence[Box], gt_boxes: Sequence[Box], gt_classes: Sequence[int],
                mode: str, config: DetectorConfig) -> MatchAssignment:
    """IoU matching with forced best-anchor positives.

    RPN mode: positive at IoU >= rpn_pos_iou, negative below rpn_neg_iou,
    ignored in between.  ROI mode: positive at IoU >= roi_pos_iou with the
    class of the best-IoU ground truth, background otherwise.
    """
    n = len(boxes)
    positive = np.zeros(n, dtype=bool)
    matched = np.full(n, -1, dtype=np.int64)
    if not gt_boxes:
        negative = np.ones(n, dtype=bool)
        return MatchAssignment(positive, negative, matched, tuple(), tuple())
    m = _iou_matrix(boxes, gt_boxes)
    best_gt = m.argmax(axis=1)
    best_iou = m[np.arange(n), best_gt] if n else np.zeros(0)
    if mode == "rpn":
        positive = best_iou >= config.rpn_pos_iou
        negative = best_iou < config.rpn_neg_iou
    elif mode == "roi":
        positive = best_iou >= config.roi_pos_iou
        negative = ~positive
    else:
        raise ValueError(f"unknown match mode {mode!r}")
    matched[positive] = best_gt[positive]
    # every ground truth claims its best box, tie to the lowest index
    for j in range(len(gt_boxes)):
        i = int(m[:, j].argmax())
        if m[i, j] > 0.0:
            positive[i] = True
            negative[i] = False
            matched[i] = j
    if mode == "roi":
        negative = ~positive
    return MatchAssignment(positive, negative, matched, tuple(gt_boxes), tuple(gt_classes))


def _finish_image_outputs(params, features_i, rpn_obj, rpn_deltas, config, inject_boxes,
                          anchors) -> DetectorOutputs:
    room = config.max_proposals - config.k_proposals
    inject = list(inject_boxes or [])[:room]
    proposals = select_proposals(rpn_obj, rpn_deltas, config)
    for box in inject:
        proposals.boxes.append(box.clipped(config.image_size, config.image_size))
        proposals.cells.append(-1)
    proposals.scores = np.concatenate([proposals.scores, np.ones(len(inject))]) \
        if len(inject) else proposals.scores
    roi_logits, roi_deltas = roi_forward(params, features_i, proposals, config)
    return DetectorOutputs(features=features_i, rpn_obj=rpn_obj, rpn_deltas=rpn_deltas,
                           proposals=proposals, roi_logits=roi_logits,
                           roi_deltas=roi_deltas, anchors=anchors)


def forward_full(params: ParameterSet, image: np.ndarray, config: DetectorConfig,
                 inject_boxes: Optional[Sequence[Box]] = None) -> DetectorOutputs:
    """Full differentiable pass used by training.

    ``inject_boxes`` (ground-truth or pseudo boxes) are appended to the
    proposal set so the ROI head always sees well-aligned positives; the
    total stays within max_proposals.
    """
    x = image_to_tensor(image)
    features = backbone_forward(params, x, config)
    rpn_obj, rpn_deltas = rpn_forward(params, features, config)
    return _finish_image_outputs(params, features, rpn_obj, rpn_deltas, config,
                                 inject_boxes, anchor_boxes(config))


def forward_batch_full(params: ParameterSet, images: Sequence[np.ndarray],
                       config: DetectorConfig,
                       inject_boxes_per_image: Optional[Sequence] = None) -> list:
    """Batched variant of forward_full: one backbone/proposal-head pass for
    the whole batch, then per-image proposal selection and ROI heads."""
    n = len(images)
    inject_boxes_per_image = inject_boxes_per_image or [None] * n
    g = config.grid
    x = images_to_tensor(images)
    features = backbone_forward(params, x, config)
    obj_b, deltas_b = rpn_forward_batch(params, features, config)
    anchors = anchor_boxes(config)
    outs = []
    for i in range(n):
        features_i = T.slice_(features, (slice(i, i + 1),))
        obj_i = T.reshape(T.slice_(obj_b, (slice(i, i + 1),)), (g, g))
        deltas_i = T.reshape(T.permute(T.slice_(deltas_b, (slice(i, i + 1),)), (0, 2, 3, 1)),
                             (g, g, 4))
        outs.append(_finish_image_outputs(params, features_i, obj_i, deltas_i, config,
                                          inject_boxes_per_image[i], anchors))
    return outs


def predict(params: ParameterSet, image: np.ndarray, score_floor: float,
            config: DetectorConfig) -> list:
    """Pure inference: backbone -> proposals -> ROI scores and refined boxes.

    Per proposal the class is the softmax argmax; background wins drop the
    proposal, and survivors below ``score_floor`` are dropped.  Results come
    back sorted by descending score (ties by proposal index).
    """
    x = image_to_tensor(image)
    features = backbone_forward(params, x, config)
    rpn_obj, rpn_deltas = rpn_forward(params, features, config)
    proposals = select_proposals(rpn_obj, rpn_deltas, config, k=config.max_proposals)
    if len(proposals) == 0:
        return []
    logits, deltas = roi_forward(params, features, proposals, config)
    z = np.asarray(logits.data, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    size = float(config.image_size)
    c_bg = config.num_classes
    dets = []
    for row in range(len(proposals)):
        c = int(probs[row].argmax())
        if c == c_bg:
            continue
        score = float(probs[row, c])
        if score < score_floor:
            continue
        box = decode_deltas(proposals.boxes[row], np.asarray(deltas.data[row], dtype=np.float64),
                            clip_size=(size, size))
        if box.width <= 0 or box.height <= 0:
            continue
        dets.append((row, Detection(box=box, class_id=c, score=min(score, 1.0))))
    dets.sort(key=lambda p: (-p[1].score, p[0]))
    return [d for _, d in dets]
