"""Training objectives.

The supervised objective sums four detector terms (proposal-head
classification and regression, ROI classification and regression); the
unsupervised objective keeps only the two classification terms, so pseudo
boxes never drive box regression.  Three interchangeable ROI classifiers are
provided: cross-entropy, focal, and a margin loss that separates aggregate
foreground confidence from aggregate background confidence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .detector import DetectorConfig, DetectorOutputs, MatchAssignment, match_boxes
from .geometry import Box, encode_deltas
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class MarginLossConfig:
    s: float = 5.0        # smoothness
    sigma: float = 0.5    # margin
    w_l: float = 1.0      # loss weight

    def validate(self) -> None:
        if self.s <= 0:
            raise ValueError(f"margin.s must be positive, got {self.s}")
        if self.sigma < 0:
            raise ValueError(f"margin.sigma must be non-negative, got {self.sigma}")
        if self.w_l <= 0:
            raise ValueError(f"margin.w_l must be positive, got {self.w_l}")


@dataclass
class LossBreakdown:
    rpn_cls: Tensor
    rpn_reg: Tensor
    roi_cls: Tensor
    roi_reg: Tensor
    total: Tensor
    n_rpn_pos: int = 0
    n_rpn_neg: int = 0
    n_roi_fg: int = 0
    n_roi_bg: int = 0
    margin_skipped: bool = False

    def values(self) -> dict:
        return {"rpn_cls": self.rpn_cls.item(), "rpn_reg": self.rpn_reg.item(),
                "roi_cls": self.roi_cls.item(), "roi_reg": self.roi_reg.item(),
                "total": self.total.item()}


def _zero(dtype=np.float32) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def _sample_indices(idx: np.ndarray, count: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    if len(idx) <= count:
        return idx
    if rng is None:
        return idx[:count]
    return np.sort(rng.choice(idx, size=count, replace=False))


def rpn_cls_loss(obj_logits: Tensor, assign: MatchAssignment,
                 rng: Optional[np.random.Generator] = None,
                 max_samples: int = 32, pos_fraction: float = 0.5):
    """Mean binary cross-entropy over a sampled positive/negative subset.

    Ignored anchors never contribute.  Returns (loss, n_pos, n_neg).
    """
    pos_idx = np.flatnonzero(assign.positive)
    neg_idx = np.flatnonzero(assign.negative)
    pos_idx = _sample_indices(pos_idx, int(max_samples * pos_fraction), rng)
    neg_idx = _sample_indices(neg_idx, max_samples - len(pos_idx), rng)
    if len(pos_idx) == 0 and len(neg_idx) == 0:
        log.warning("rpn_cls_loss: no positives and no negatives, returning 0")
        return _zero(obj_logits.dtype), 0, 0
    sel = np.concatenate([pos_idx, neg_idx]).astype(np.int64)
    targets = np.concatenate([np.ones(len(pos_idx)), np.zeros(len(neg_idx))])
    flat = T.reshape(obj_logits, (-1,))
    picked = T.take(flat, sel)
    loss = T.tmean(T.bce_with_logits(picked, Tensor(targets, dtype=picked.dtype)))
    return loss, len(pos_idx), len(neg_idx)


def _delta_targets(assign: MatchAssignment, ref_boxes: Sequence[Box], idx: np.ndarray) -> np.ndarray:
    out = np.empty((len(idx), 4), dtype=np.float64)
    for row, i in enumerate(idx):
        gt = assign.gt_boxes[assign.matched_gt[i]]
        out[row] = encode_deltas(ref_boxes[i], gt)
    return out


def regression_loss(pred_deltas: Tensor, assign: MatchAssignment, ref_boxes: Sequence[Box]):
    """Mean elementwise smooth-L1 on positive rows only; 0 with no positives."""
    pos_idx = np.flatnonzero(assign.positive)
    if len(pos_idx) == 0:
        return _zero(pred_deltas.dtype)
    flat = T.reshape(pred_deltas, (-1, 4))
    rows = T.take(flat, pos_idx)
    targets = _delta_targets(assign, ref_boxes, pos_idx)
    return T.tmean(T.smooth_l1(rows, Tensor(targets, dtype=rows.dtype)))


def _roi_targets(assign: MatchAssignment, num_classes: int) -> np.ndarray:
    n = len(assign.positive)
    targets = np.full(n, num_classes, dtype=np.int64)  # background index
    idx = np.flatnonzero(assign.positive)
    for i in idx:
        targets[i] = assign.gt_classes[assign.matched_gt[i]]
    return targets


def _log_softmax_rows(logits: Tensor) -> Tensor:
    n = logits.shape[0]
    m = T.max_lastdim(logits)
    shifted = T.sub(logits, T.reshape(m, (n, 1)))
    lse = T.add(T.log(T.tsum(T.exp(shifted), axis=-1)), m)
    return T.sub(logits, T.reshape(lse, (n, 1)))


def cross_entropy_roi_loss(logits: Tensor, assign: MatchAssignment, num_classes: int) -> Tensor:
    """Mean negative log-likelihood over all proposals, background included."""
    targets = _roi_targets(assign, num_classes)
    ls = _log_softmax_rows(logits)
    return T.tmean(T.mul(T.gather_lastdim(ls, targets), -1.0))


def focal_roi_loss(logits: Tensor, assign: MatchAssignment, num_classes: int,
                   gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """alpha * (1 - p_t)^gamma * CE, averaged over proposals.

    gamma=0, alpha=1 reduces exactly to cross-entropy.
    """
    targets = _roi_targets(assign, num_classes)
    ls = _log_softmax_rows(logits)
    picked = T.gather_lastdim(ls, targets)
    ce_rows = T.mul(picked, -1.0)
    pt = T.exp(picked)
    mod = T.powc(T.sub(1.0, pt), gamma)
    return T.tmean(T.mul(T.mul(mod, ce_rows), alpha))


def margin_penalty(rho, beta, cfg: MarginLossConfig) -> Tensor:
    """w_l * log(1 + exp(s*(beta - rho + sigma)) / s) on scalar tensors.

    The log argument is always >= 1 (exp > 0, s > 0) so the penalty is
    non-negative; it is strictly increasing in beta - rho.
    """
    gap = T.add(T.sub(beta, rho), cfg.sigma)
    return T.mul(T.log(T.add(1.0, T.mul(T.exp(T.mul(gap, cfg.s)), 1.0 / cfg.s))), cfg.w_l)


def margin_roi_loss(logits: Tensor, assign: MatchAssignment, num_classes: int,
                    cfg: MarginLossConfig):
    """Margin loss separating aggregate foreground and background confidence.

    Each logit row is squashed elementwise by a sigmoid and then normalized
    by a softmax over the C+1 entries.  rho averages the normalized mass at
    the assigned class over foreground rows; beta averages the mass at the
    background index over background rows.  The loss is
    ``w_l * log(1 + exp(s*(beta - rho + sigma)) / s)``, strictly increasing
    in beta - rho.  With an empty foreground or background set the batch is
    skipped (returns 0) and flagged.
    """
    cfg.validate()
    fg_idx = np.flatnonzero(assign.positive)
    bg_idx = np.flatnonzero(~assign.positive)
    if len(fg_idx) == 0 or len(bg_idx) == 0:
        log.debug("margin_roi_loss skipped: %d fg, %d bg rows", len(fg_idx), len(bg_idx))
        return _zero(logits.dtype), True
    squashed = T.sigmoid(logits)
    norm = T.softmax_lastdim(squashed)
    fg_classes = np.array([assign.gt_classes[assign.matched_gt[i]] for i in fg_idx], dtype=np.int64)
    rho = T.tmean(T.gather_lastdim(T.take(norm, fg_idx), fg_classes))
    bg_col = np.full(len(bg_idx), num_classes, dtype=np.int64)
    beta = T.tmean(T.gather_lastdim(T.take(norm, bg_idx), bg_col))
    return margin_penalty(rho, beta, cfg), False


def _roi_cls_by_kind(kind: str, logits: Tensor, assign: MatchAssignment,
                     num_classes: int, margin_cfg: MarginLossConfig):
    if kind == "margin":
        return margin_roi_loss(logits, assign, num_classes, margin_cfg)
    if kind == "ce":
        return cross_entropy_roi_loss(logits, assign, num_classes), False
    if kind == "focal":
        return focal_roi_loss(logits, assign, num_classes), False
    raise ValueError(f"unknown roi_cls_kind {kind!r}; expected margin, ce or focal")


def supervised_loss(outputs: DetectorOutputs, gt_boxes: Sequence[Box],
                    gt_classes: Sequence[int], config: DetectorConfig,
                    roi_cls_kind: str = "margin",
                    margin_cfg: Optional[MarginLossConfig] = None,
                    rng: Optional[np.random.Generator] = None) -> LossBreakdown:
    """Four-term supervised objective with unit term weights."""
    margin_cfg = margin_cfg or MarginLossConfig()
    rpn_assign = match_boxes(outputs.anchors, gt_boxes, gt_classes, "rpn", config)
    roi_assign = match_boxes(outputs.proposals.boxes, gt_boxes, gt_classes, "roi", config)
    rpn_cls, n_pos, n_neg = rpn_cls_loss(outputs.rpn_obj, rpn_assign, rng)
    rpn_reg = regression_loss(outputs.rpn_deltas, rpn_assign, outputs.anchors)
    roi_cls, skipped = _roi_cls_by_kind(roi_cls_kind, outputs.roi_logits, roi_assign,
                                        config.num_classes, margin_cfg)
    roi_reg = regression_loss(outputs.roi_deltas, roi_assign, outputs.proposals.boxes)
    total = T.add(T.add(T.add(rpn_cls, rpn_reg), roi_cls), roi_reg)
    return LossBreakdown(rpn_cls=rpn_cls, rpn_reg=rpn_reg, roi_cls=roi_cls, roi_reg=roi_reg,
                         total=total, n_rpn_pos=n_pos, n_rpn_neg=n_neg,
                         n_roi_fg=int(roi_assign.positive.sum()),
                         n_roi_bg=int((~roi_assign.positive).sum()),
                         margin_skipped=skipped)


def unsupervised_loss(outputs: DetectorOutputs, pseudo_boxes: Sequence[Box],
                      pseudo_classes: Sequence[int], config: DetectorConfig,
                      roi_cls_kind: str = "margin",
                      margin_cfg: Optional[MarginLossConfig] = None,
                      rng: Optional[np.random.Generator] = None) -> LossBreakdown:
    """Classification-only objective against pseudo labels.

    Both regression components are identically zero, so pseudo boxes can
    never move any regressor weight.  An empty pseudo set gives total 0.
    """
    margin_cfg = margin_cfg or MarginLossConfig()
    if len(pseudo_boxes) == 0:
        z = _zero()
        return LossBreakdown(rpn_cls=_zero(), rpn_reg=_zero(), roi_cls=_zero(),
                             roi_reg=_zero(), total=z)
    rpn_assign = match_boxes(outputs.anchors, pseudo_boxes, pseudo_classes, "rpn", config)
    roi_assign = match_boxes(outputs.proposals.boxes, pseudo_boxes, pseudo_classes, "roi", config)
    rpn_cls, n_pos, n_neg = rpn_cls_loss(outputs.rpn_obj, rpn_assign, rng)
    roi_cls, skipped = _roi_cls_by_kind(roi_cls_kind, outputs.roi_logits, roi_assign,
                                        config.num_classes, margin_cfg)
    total = T.add(rpn_cls, roi_cls)
    return LossBreakdown(rpn_cls=rpn_cls, rpn_reg=_zero(), roi_cls=roi_cls, roi_reg=_zero(),
                         total=total, n_rpn_pos=n_pos, n_rpn_neg=n_neg,
                         n_roi_fg=int(roi_assign.positive.sum()),
                         n_roi_bg=int((~roi_assign.positive).sum()),
                         margin_skipped=skipped)


def mean_breakdowns(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    """Average component-wise over a batch; total is recomputed from the
    averaged components so it stays their exact sum."""
    if not parts:
        raise ValueError("cannot average an empty batch of loss breakdowns")
    inv = 1.0 / len(parts)

    def avg(field):
        acc = getattr(parts[0], field)
        for p in parts[1:]:
            acc = T.add(acc, getattr(p, field))
        return T.mul(acc, inv)

    rpn_cls = avg("rpn_cls")
    rpn_reg = avg("rpn_reg")
    roi_cls = avg("roi_cls")
    roi_reg = avg("roi_reg")
    total = T.add(T.add(T.add(rpn_cls, rpn_reg), roi_cls), roi_reg)
    return LossBreakdown(
        rpn_cls=rpn_cls, rpn_reg=rpn_reg, roi_cls=roi_cls, roi_reg=roi_reg, total=total,
        n_rpn_pos=sum(p.n_rpn_pos for p in parts), n_rpn_neg=sum(p.n_rpn_neg for p in parts),
        n_roi_fg=sum(p.n_roi_fg for p in parts), n_roi_bg=sum(p.n_roi_bg for p in parts),
        margin_skipped=any(p.margin_skipped for p in parts))
