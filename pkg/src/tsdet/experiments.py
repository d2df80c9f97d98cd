"""Experiment runs binding the pipeline together.

Provides split evaluation, metrics-CSV-producing training runs for both the
supervised baseline and the SSL pipeline, and one-axis ablation sweeps with
paired t-tests between settings.  Everything is deterministic given the
config seed: two runs with the same config produce byte-identical CSVs.
"""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .detector import predict
from .engine import (NumericAbort, TrainConfig, burn_in, clone_to_teacher_student,
                     mutual_learning)
from .evaluate import EvalConfig, EvalResult, map_summary, paired_t_test
from .geometry import classwise_nms
from .params import ParameterSet, save_checkpoint
from .synth import Scene

log = logging.getLogger(__name__)


def detect_scene(params: ParameterSet, image: np.ndarray, config: TrainConfig):
    """Evaluation-time detections: thresholded predict then class-wise NMS."""
    dets = predict(params, image, config.eval_score_floor, config.detector)
    return classwise_nms(dets, config.nms_iou)


def evaluate_params(params: ParameterSet, scenes: Sequence[Scene], config: TrainConfig,
                    eval_config: Optional[EvalConfig] = None) -> EvalResult:
    dets = [detect_scene(params, s.image, config) for s in scenes]
    gts = [s.annotations for s in scenes]
    return map_summary(dets, gts, config.detector.num_classes, eval_config)


def metric_columns(num_classes: int) -> list:
    cols = ["iteration", "role", "map50", "map75", "map50_95", "map_medium", "map_large"]
    cols += [f"ap50_{c}" for c in range(num_classes)]
    cols += ["loss_total", "loss_rpn_cls", "loss_rpn_reg", "loss_roi_cls", "loss_roi_reg",
             "unsup_rpn_cls", "unsup_roi_cls", "pseudo_per_image"]
    return cols


def _metrics_row(iteration: int, role: str, ev: EvalResult, stats: dict, num_classes: int) -> dict:
    row = {"iteration": iteration, "role": role,
           "map50": ev.map50, "map75": ev.map75, "map50_95": ev.map50_95,
           "map_medium": ev.map_medium, "map_large": ev.map_large}
    for c in range(num_classes):
        ap = ev.per_class_ap[c]["ap50"]
        row[f"ap50_{c}"] = -1.0 if ap is None else ap
    row["loss_total"] = stats.get("total", 0.0)
    row["loss_rpn_cls"] = stats.get("rpn_cls", 0.0)
    row["loss_rpn_reg"] = stats.get("rpn_reg", 0.0)
    row["loss_roi_cls"] = stats.get("roi_cls", 0.0)
    row["loss_roi_reg"] = stats.get("roi_reg", 0.0)
    row["unsup_rpn_cls"] = stats.get("unsup_rpn_cls", 0.0)
    row["unsup_roi_cls"] = stats.get("unsup_roi_cls", 0.0)
    row["pseudo_per_image"] = stats.get("pseudo_per_image", 0.0)
    return row


def _format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(rows: Sequence[dict], num_classes: int, path) -> None:
    cols = metric_columns(num_classes)
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(row[c]) for c in cols) + "\n")


@dataclass
class TrainRunResult:
    mode: str
    rows: list
    final: dict                       # role -> ParameterSet
    final_eval: dict                  # role -> EvalResult on the eval split
    history: list = field(default_factory=list)
    pseudo_per_image_mean: float = 0.0


def run_train(config: TrainConfig, split, mode: str,
              out_dir: Optional[str] = None,
              eval_scenes: Optional[Sequence[Scene]] = None) -> TrainRunResult:
    """Train in one of two modes and log metrics at the eval cadence.

    ``supervised_only`` spends the whole burn_in + mutual budget on labeled
    data; ``ssl`` runs burn-in then teacher-student mutual learning.  Both
    emit the same CSV schema (the role column tells rows apart).
    """
    config.validate()
    if mode not in ("supervised_only", "ssl"):
        raise ValueError(f"unknown train mode {mode!r}")
    eval_scenes = split.val if eval_scenes is None else eval_scenes
    num_classes = config.detector.num_classes
    rows = []
    ckpt_dir = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)

    def log_eval(iteration, role, params, stats):
        ev = evaluate_params(params, eval_scenes, config)
        rows.append(_metrics_row(iteration, role, ev, stats, num_classes))
        return ev

    def save(role, tag, params):
        if ckpt_dir is not None:
            save_checkpoint(params, os.path.join(ckpt_dir, f"{role}_{tag}.ckpt"))

    total_budget = config.burn_in_iters + config.mutual_iters
    if mode == "supervised_only":
        from .detector import init_detector_params
        init = init_detector_params(config.detector, config.seed)
        log_eval(0, "supervised", init, {})

        def cb(iteration, params, bd):
            if iteration % config.eval_cadence == 0 or iteration == total_budget:
                log_eval(iteration, "supervised", params, bd.values())
            if iteration % config.checkpoint_cadence == 0:
                save("supervised", f"{iteration:06d}", params)

        params = burn_in(split.labeled, config, iters=total_budget, init=init, callback=cb)
        save("supervised", "final", params)
        final_eval = evaluate_params(params, eval_scenes, config)
        result = TrainRunResult(mode=mode, rows=rows, final={"supervised": params},
                                final_eval={"supervised": final_eval})
    else:
        from .detector import init_detector_params
        init = init_detector_params(config.detector, config.seed)
        log_eval(0, "burn_in", init, {})

        def cb(iteration, params, bd):
            if iteration % config.eval_cadence == 0 or iteration == config.burn_in_iters:
                log_eval(iteration, "burn_in", params, bd.values())
            if iteration % config.checkpoint_cadence == 0:
                save("burn_in", f"{iteration:06d}", params)

        theta = burn_in(split.labeled, config, init=init,
                        callback=cb if config.burn_in_iters > 0 else None)
        teacher, student = clone_to_teacher_student(theta)
        save("burn_in", "final", theta)

        batch_u = max(config.batch_unlabeled, 1)

        def eval_fn(iteration, t, s, stats):
            st = dict(stats)
            st["pseudo_per_image"] = stats.get("n_pseudo_raw", 0) / batch_u
            log_eval(iteration, "teacher", t, st)
            log_eval(iteration, "student", s, st)

        def checkpoint_fn(iteration, t, s):
            save("teacher", f"{iteration:06d}", t)
            save("student", f"{iteration:06d}", s)

        teacher, student, history = mutual_learning(
            teacher, student, split, config, eval_fn=eval_fn,
            checkpoint_fn=checkpoint_fn if ckpt_dir is not None else None,
            start_iteration=config.burn_in_iters)
        save("teacher", "final", teacher)
        save("student", "final", student)
        pseudo_mean = (float(np.mean([h["n_pseudo_raw"] for h in history])) / batch_u
                       if history else 0.0)
        result = TrainRunResult(
            mode=mode, rows=rows,
            final={"teacher": teacher, "student": student},
            final_eval={"teacher": evaluate_params(teacher, eval_scenes, config),
                        "student": evaluate_params(student, eval_scenes, config)},
            history=history, pseudo_per_image_mean=pseudo_mean)

    if out_dir is not None:
        write_metrics_csv(rows, num_classes, os.path.join(out_dir, "metrics.csv"))
    return result


# ---------------------------------------------------------------------------
# ablation sweeps

ABLATION_AXES = {
    "tau": (0.6, 0.7, 0.8, 0.9),
    "alpha_ema": (0.5, 0.99, 0.999, 0.9996, 0.9999),
    "s": (3, 4, 5, 6),
    "init": ("with", "without"),
    "loss": ("margin", "ce", "focal"),
}


def apply_ablation_setting(config: TrainConfig, axis: str, value) -> TrainConfig:
    cfg = copy.deepcopy(config)
    if axis == "tau":
        cfg.tau = float(value)
    elif axis == "alpha_ema":
        cfg.alpha_ema = float(value)
    elif axis == "s":
        cfg.margin.s = float(value)
    elif axis == "init":
        if value not in ("with", "without"):
            raise ValueError(f"init setting must be 'with' or 'without', got {value!r}")
        if value == "without":
            cfg.burn_in_iters = 0
    elif axis == "loss":
        cfg.roi_cls_kind = str(value)
    else:
        raise ValueError(f"unknown ablation axis {axis!r}; known: {sorted(ABLATION_AXES)}")
    return cfg


@dataclass
class AblationResult:
    axis: str
    rows: list             # one dict per (setting, seed)
    summary: list          # one dict per setting: mean/stdev of final test map50
    t_tests: list          # one dict per setting pair


def run_ablation(config: TrainConfig, axis: str, split_builder: Callable,
                 values: Optional[Sequence] = None,
                 seeds: Optional[Sequence[int]] = None,
                 out_dir: Optional[str] = None) -> AblationResult:
    """Sweep one axis across a seed list.

    ``split_builder(seed)`` supplies the dataset for each seed.  A failing
    setting is recorded and skipped; the rest of the sweep proceeds.  The
    report pairs every two settings with a t-test on final test mAP50.
    """
    values = ABLATION_AXES[axis] if values is None else list(values)
    seeds = [0, 1, 2] if seeds is None else list(seeds)
    rows = []
    per_setting: dict = {}
    for value in values:
        scores = []
        for seed in seeds:
            cfg = apply_ablation_setting(config, axis, value)
            cfg.seed = int(seed)
            row = {"axis": axis, "value": value, "seed": seed, "status": "ok",
                   "map50_test": float("nan"), "map50_95_test": float("nan"),
                   "pseudo_per_image": float("nan")}
            try:
                split = split_builder(seed)
                res = run_train(cfg, split, "ssl", out_dir=None, eval_scenes=split.val)
                role = "teacher"
                ev = evaluate_params(res.final[role], split.test, cfg)
                row["map50_test"] = ev.map50
                row["map50_95_test"] = ev.map50_95
                row["pseudo_per_image"] = res.pseudo_per_image_mean
                scores.append(ev.map50)
            except (NumericAbort, Exception) as e:  # noqa: BLE001 (isolation by design)
                log.error("ablation %s=%r seed %d failed: %s", axis, value, seed, e)
                row["status"] = f"failed: {e}"
            rows.append(row)
        per_setting[value] = scores
    summary = []
    for value in values:
        scores = per_setting[value]
        summary.append({"axis": axis, "value": value, "n_ok": len(scores),
                        "mean_map50": float(np.mean(scores)) if scores else float("nan"),
                        "stdev_map50": float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0})
    t_tests = []
    for i in range(len(values)):
        for j in range(i + 1, len(values)):
            a, b = per_setting[values[i]], per_setting[values[j]]
            entry = {"a": values[i], "b": values[j]}
            if len(a) == len(b) and len(a) >= 2:
                rep = paired_t_test(a, b)
                entry.update({"t": rep.t_statistic, "p": rep.p_value,
                              "mean_difference": rep.mean_difference,
                              "degenerate_variance": rep.degenerate_variance})
            else:
                entry["error"] = "insufficient paired runs"
            t_tests.append(entry)
    result = AblationResult(axis=axis, rows=rows, summary=summary, t_tests=t_tests)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_ablation_csv(result, os.path.join(out_dir, f"ablation_{axis}.csv"))
    return result


def _write_ablation_csv(result: AblationResult, path) -> None:
    cols = ["axis", "value", "seed", "status", "map50_test", "map50_95_test", "pseudo_per_image"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in result.rows:
            fh.write(",".join(_format_cell(row[c]) for c in cols) + "\n")
        fh.write("# summary\n")
        for s in result.summary:
            fh.write(f"# {s['axis']}={s['value']}: mean={s['mean_map50']} "
                     f"stdev={s['stdev_map50']} n={s['n_ok']}\n")
        for t in result.t_tests:
            if "p" in t:
                fh.write(f"# t-test {t['a']} vs {t['b']}: t={t['t']} p={t['p']}\n")
            else:
                fh.write(f"# t-test {t['a']} vs {t['b']}: {t['error']}\n")
