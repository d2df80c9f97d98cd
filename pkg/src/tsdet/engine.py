"""Two-stage training pipeline.

Burn-in trains a detector on strongly augmented labeled data; the result
seeds bit-identical teacher and student copies.  Mutual learning then loops:
the teacher predicts on weakly augmented unlabeled images, class-wise NMS
plus confidence thresholding turns those predictions into pseudo labels, the
student takes one SGD step on the supervised plus weighted unsupervised
objective, and the teacher follows the student through an exponential moving
average.  The teacher itself is never touched by gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .augment import AugmentConfig, strong_augment, weak_augment
from .detector import (DetectorConfig, forward_batch_full, init_detector_params,
                       is_regression_param, predict)
from .geometry import classwise_nms
from .losses import (LossBreakdown, MarginLossConfig, mean_breakdowns,
                     supervised_loss, unsupervised_loss)
from .params import ParameterSet
from .tensor import Tape, backward

log = logging.getLogger(__name__)

_ROI_CLS_KINDS = ("margin", "ce", "focal")


class EngineError(Exception):
    pass


class NumericAbort(EngineError):
    """Raised when a loss or gradient goes non-finite."""

    def __init__(self, iteration: int, detail: str):
        self.iteration = iteration
        super().__init__(f"non-finite value at iteration {iteration}: {detail}")


@dataclass
class TrainConfig:
    tau: float = 0.7
    lambda_u: float = 0.2
    alpha_ema: float = 0.9996
    gamma: float = 0.01
    nms_iou: float = 0.5
    margin: MarginLossConfig = field(default_factory=MarginLossConfig)
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    burn_in_iters: int = 500
    mutual_iters: int = 1500
    roi_cls_kind: str = "margin"
    seed: int = 0
    warmup_fraction: float = 0.1
    eval_cadence: int = 100
    checkpoint_cadence: int = 500
    eval_score_floor: float = 0.05
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise EngineError(f"train.tau must be in (0,1), got {self.tau}")
        if not 0.0 <= self.alpha_ema < 1.0:
            raise EngineError(f"train.alpha_ema must be in [0,1), got {self.alpha_ema}")
        if self.lambda_u < 0:
            raise EngineError(f"train.lambda_u must be >= 0, got {self.lambda_u}")
        if self.gamma <= 0:
            raise EngineError(f"train.gamma must be positive, got {self.gamma}")
        if not 0.0 < self.nms_iou < 1.0:
            raise EngineError(f"train.nms_iou must be in (0,1), got {self.nms_iou}")
        if self.roi_cls_kind not in _ROI_CLS_KINDS:
            raise EngineError(f"train.roi_cls_kind must be one of {_ROI_CLS_KINDS}, got {self.roi_cls_kind!r}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 0:
            raise EngineError("train.batch sizes must be positive (unlabeled may be 0)")
        if self.burn_in_iters < 0 or self.mutual_iters < 0:
            raise EngineError("train iteration counts must be non-negative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise EngineError(f"train.warmup_fraction must be in [0,1], got {self.warmup_fraction}")
        if self.eval_cadence < 1 or self.checkpoint_cadence < 1:
            raise EngineError("train cadences must be >= 1")
        self.margin.validate()
        self.detector.validate()
        self.augment.validate()


@dataclass
class PseudoLabelSet:
    """Per-image pseudo labels: (Box, class_id) pairs that scored at least
    tau and survived class-wise NMS.  Scores are stripped; downstream code
    treats these as hard labels."""

    labels: list
    teacher_iteration: int = 0

    def __len__(self):
        return len(self.labels)


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def sgd_step(params: ParameterSet, lr: float) -> None:
    f = np.float32(lr)
    for t in params.tensors():
        t.data -= f * t.grad


def warmup_lr(config: TrainConfig, iteration: int, total: int) -> float:
    """Linear warmup over the first warmup_fraction of iterations, then the
    constant rate gamma.  ``iteration`` is 0-based."""
    warm = int(round(config.warmup_fraction * total))
    if warm <= 0 or iteration >= warm:
        return config.gamma
    return config.gamma * (iteration + 1) / warm


def _batch_supervised(params, items, config, loss_rng) -> LossBreakdown:
    outs = forward_batch_full(params, [image for image, _, _ in items], config.detector,
                              inject_boxes_per_image=[boxes for _, boxes, _ in items])
    parts = []
    for out, (_, boxes, classes) in zip(outs, items):
        parts.append(supervised_loss(out, boxes, classes, config.detector,
                                     config.roi_cls_kind, config.margin, loss_rng))
    return mean_breakdowns(parts)


def _scene_items(scenes, aug_rng, config):
    items = []
    for s in scenes:
        a = strong_augment(s.image, s.annotations, aug_rng, config.augment)
        items.append((a.image, [b for b, _ in a.annotations], [c for _, c in a.annotations]))
    return items


def burn_in(labeled: Sequence, config: TrainConfig, iters: Optional[int] = None,
            init: Optional[ParameterSet] = None,
            callback: Optional[Callable] = None) -> ParameterSet:
    """Supervised initialization on strongly augmented labeled batches.

    With ``iters`` = 0 the (seeded) initialization is returned unchanged.
    Raises NumericAbort with the iteration number on divergence.
    """
    config.validate()
    iters = config.burn_in_iters if iters is None else iters
    if not labeled:
        raise EngineError("burn_in requires a non-empty labeled set")
    params = init if init is not None else init_detector_params(config.detector, config.seed)
    batch_rng = _stream(config.seed, 1)
    aug_rng = _stream(config.seed, 2)
    loss_rng = _stream(config.seed, 3)
    for i in range(iters):
        idx = batch_rng.integers(0, len(labeled), size=config.batch_labeled)
        items = _scene_items([labeled[j] for j in idx], aug_rng, config)
        params.zero_grads()
        with Tape():
            bd = _batch_supervised(params, items, config, loss_rng)
            total = bd.total.item()
            if not np.isfinite(total):
                raise NumericAbort(i, f"burn-in loss {bd.values()}")
            backward(bd.total)
        sgd_step(params, warmup_lr(config, i, iters))
        if callback is not None:
            callback(i + 1, params, bd)
    return params


def clone_to_teacher_student(params: ParameterSet):
    """Two deep copies of the initialized detector, bit-identical to it."""
    return params.clone(), params.clone()


def generate_pseudo_labels(teacher: ParameterSet, image: np.ndarray,
                           config: TrainConfig, iteration: int = 0) -> PseudoLabelSet:
    """Teacher inference -> class-wise NMS -> confidence threshold -> strip scores."""
    dets = predict(teacher, image, 0.0, config.detector)
    dets = classwise_nms(dets, config.nms_iou)
    labels = [(d.box, d.class_id) for d in dets if d.score >= config.tau]
    return PseudoLabelSet(labels=labels, teacher_iteration=iteration)


def _grad_snapshot(params: ParameterSet) -> dict:
    return {name: t.grad.copy() for name, t in params.items()}


def student_step(student: ParameterSet, labeled_items, unlabeled_items,
                 config: TrainConfig, lr: Optional[float] = None,
                 loss_rng: Optional[np.random.Generator] = None,
                 iteration: int = 0) -> dict:
    """One SGD descent step on L_sup + lambda_u * L_unsup.

    The unsupervised term is computed and backpropagated separately and its
    regression-head gradients are audited to be exactly zero on every call;
    with lambda_u = 0 or no pseudo labels the update is bit-identical to a
    supervised-only step because the unsupervised pass is skipped entirely.
    """
    lr = config.gamma if lr is None else lr
    stats = {"unsup_rpn_cls": 0.0, "unsup_roi_cls": 0.0, "n_pseudo": 0}
    has_pseudo = any(len(boxes) > 0 for _, boxes, _ in unlabeled_items)
    unsup_grads = None
    if config.lambda_u > 0 and has_pseudo:
        student.zero_grads()
        with Tape():
            outs = forward_batch_full(student, [im for im, _, _ in unlabeled_items],
                                      config.detector,
                                      inject_boxes_per_image=[b for _, b, _ in unlabeled_items])
            parts = []
            for out, (_, boxes, classes) in zip(outs, unlabeled_items):
                parts.append(unsupervised_loss(out, boxes, classes, config.detector,
                                               config.roi_cls_kind, config.margin, loss_rng))
            u_bd = mean_breakdowns(parts)
            if not np.isfinite(u_bd.total.item()):
                raise NumericAbort(iteration, f"unsupervised loss {u_bd.values()}")
            backward(u_bd.total)
        for name, t in student.items():
            if is_regression_param(name) and np.any(t.grad != 0):
                raise EngineError(f"unsupervised loss leaked gradient into {name}")
        unsup_grads = _grad_snapshot(student)
        stats["unsup_rpn_cls"] = u_bd.rpn_cls.item()
        stats["unsup_roi_cls"] = u_bd.roi_cls.item()
    stats["n_pseudo"] = sum(len(boxes) for _, boxes, _ in unlabeled_items)

    student.zero_grads()
    with Tape():
        s_bd = _batch_supervised(student, labeled_items, config, loss_rng)
        if not np.isfinite(s_bd.total.item()):
            raise NumericAbort(iteration, f"supervised loss {s_bd.values()}")
        backward(s_bd.total)
    if unsup_grads is not None:
        lam = np.float32(config.lambda_u)
        for name, t in student.items():
            t.grad += lam * unsup_grads[name]
    sgd_step(student, lr)
    stats.update(s_bd.values())
    return stats


def ema_update(teacher: ParameterSet, student: ParameterSet, alpha_ema: float) -> None:
    """theta_T <- alpha * theta_T + (1 - alpha) * theta_S, elementwise."""
    if not teacher.shapes_match(student):
        raise EngineError("teacher/student parameter sets are not shape-congruent")
    a = np.float32(alpha_ema)
    b = np.float32(1.0) - a
    for name, t in teacher.items():
        t.data[...] = a * t.data + b * student[name].data


def mutual_learning(teacher: ParameterSet, student: ParameterSet, split,
                    config: TrainConfig,
                    eval_fn: Optional[Callable] = None,
                    checkpoint_fn: Optional[Callable] = None,
                    start_iteration: int = 0):
    """Teacher-student joint loop.

    Per iteration: sample labeled and unlabeled scenes, weak-augment the
    unlabeled stream for the teacher, generate pseudo labels, strong-augment
    both streams for the student (pseudo boxes follow the geometric part),
    take a student step, then refresh the teacher by EMA.  ``eval_fn`` runs
    every eval_cadence iterations and after the last one.
    """
    config.validate()
    if not teacher.shapes_match(student):
        raise EngineError("teacher/student parameter sets are not shape-congruent")
    labeled = list(split.labeled)
    unlabeled = list(split.unlabeled)
    if not labeled:
        raise EngineError("mutual_learning requires labeled scenes")
    batch_rng = _stream(config.seed, 11)
    teacher_aug_rng = _stream(config.seed, 12)
    student_aug_rng = _stream(config.seed, 13)
    loss_rng = _stream(config.seed, 14)
    history = []
    for i in range(config.mutual_iters):
        iteration = start_iteration + i + 1
        idx = batch_rng.integers(0, len(labeled), size=config.batch_labeled)
        labeled_items = _scene_items([labeled[j] for j in idx], student_aug_rng, config)

        unlabeled_items = []
        n_pseudo = 0
        if unlabeled and config.batch_unlabeled > 0:
            uidx = batch_rng.integers(0, len(unlabeled), size=config.batch_unlabeled)
            for j in uidx:
                scene = unlabeled[j]
                weak = weak_augment(scene.image, [], teacher_aug_rng, config.augment)
                pseudo = generate_pseudo_labels(teacher, weak.image, config, iteration)
                n_pseudo += len(pseudo)
                strong = strong_augment(weak.image, pseudo.labels, student_aug_rng, config.augment)
                unlabeled_items.append((strong.image,
                                        [b for b, _ in strong.annotations],
                                        [c for _, c in strong.annotations]))
        stats = student_step(student, labeled_items, unlabeled_items, config,
                             lr=config.gamma, loss_rng=loss_rng, iteration=iteration)
        ema_update(teacher, student, config.alpha_ema)
        stats["iteration"] = iteration
        stats["n_pseudo_raw"] = n_pseudo
        history.append(stats)
        last = i == config.mutual_iters - 1
        if eval_fn is not None and (iteration % config.eval_cadence == 0 or last):
            eval_fn(iteration, teacher, student, stats)
        if checkpoint_fn is not None and (iteration % config.checkpoint_cadence == 0 or last):
            checkpoint_fn(iteration, teacher, student)
    return teacher, student, history
