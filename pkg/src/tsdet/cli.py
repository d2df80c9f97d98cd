"""Experiment runner CLI.

Subcommands: generate-data, train, evaluate, ablate, grad-check.  Every
command takes ``--config PATH`` plus repeatable ``--set key.path=value``
overrides; ``--seed`` and ``--out`` are shortcuts for the corresponding
config fields.  Exit codes: 0 success, 2 config error, 3 numeric abort or
failed gradient check.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .checks import battery_passed, run_grad_battery
from .config import (ConfigError, ExperimentConfig, load_experiment_config,
                     write_manifest)
from .engine import NumericAbort
from .evaluate import EvalError
from .experiments import (ABLATION_AXES, evaluate_params, run_ablation, run_train)
from .params import CheckpointError, load_checkpoint
from .synth import (DatasetError, DatasetSplit, UnlabeledScene, make_splits,
                    read_coco_json, write_coco_json)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_split(cfg: ExperimentConfig, seed=None) -> DatasetSplit:
    """Dataset from the configured directory, or synthesized in memory."""
    seed = cfg.seed if seed is None else seed
    if cfg.data_dir:
        return load_split_dir(cfg.data_dir)
    return make_splits(cfg.data.n_scenes, cfg.data.labeled_fraction, seed,
                       cfg.data.scene_config())


def load_split_dir(data_dir: str) -> DatasetSplit:
    image_dir = os.path.join(data_dir, "images")
    parts = {}
    for name in ("labeled", "unlabeled", "val", "test"):
        path = os.path.join(data_dir, f"{name}.json")
        if not os.path.exists(path):
            raise DatasetError(f"dataset directory {data_dir} is missing {name}.json")
        parts[name] = read_coco_json(path, image_dir)
    manifest_path = os.path.join(data_dir, "manifest.json")
    seed = 0
    fraction = 0.0
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            m = json.load(fh)
        seed = m.get("seed", 0)
        fraction = m.get("labeled_fraction", 0.0)
    unlabeled = [UnlabeledScene(image=s.image, id=s.id) for s in parts["unlabeled"]]
    return DatasetSplit(labeled=parts["labeled"], unlabeled=unlabeled,
                        val=parts["val"], test=parts["test"],
                        seed=seed, labeled_fraction=fraction, hidden={})


def cmd_generate_data(cfg: ExperimentConfig) -> int:
    if not cfg.out_dir:
        raise ConfigError("generate-data needs --out or out_dir in the config")
    split = make_splits(cfg.data.n_scenes, cfg.data.labeled_fraction, cfg.seed,
                        cfg.data.scene_config())
    out = cfg.out_dir
    image_dir = os.path.join(out, "images")
    os.makedirs(image_dir, exist_ok=True)
    write_coco_json(split.labeled, os.path.join(out, "labeled.json"), image_dir)
    write_coco_json(split.unlabeled, os.path.join(out, "unlabeled.json"), image_dir,
                    withhold_annotations=True)
    write_coco_json(split.val, os.path.join(out, "val.json"), image_dir)
    write_coco_json(split.test, os.path.join(out, "test.json"), image_dir)
    write_manifest(cfg, out, extra={
        "seed": cfg.seed,
        "labeled_fraction": cfg.data.labeled_fraction,
        "split_sizes": {"labeled": len(split.labeled), "unlabeled": len(split.unlabeled),
                        "val": len(split.val), "test": len(split.test)},
    })
    print(f"wrote dataset to {out}: {len(split.labeled)} labeled / "
          f"{len(split.unlabeled)} unlabeled / {len(split.val)} val / {len(split.test)} test")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, mode: str) -> int:
    split = build_split(cfg)
    out_dir = cfg.out_dir
    if out_dir:
        write_manifest(cfg, out_dir, extra={"mode": mode})
    result = run_train(cfg.train, split, mode, out_dir=out_dir)
    for role, ev in sorted(result.final_eval.items()):
        print(f"{role}: mAP50={ev.map50:.4f} mAP75={ev.map75:.4f} "
              f"mAP50:95={ev.map50_95:.4f} mAPm={ev.map_medium:.4f} mAPl={ev.map_large:.4f}")
    if out_dir:
        print(f"metrics: {os.path.join(out_dir, 'metrics.csv')}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str, split_name: str) -> int:
    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    params = load_checkpoint(checkpoint)
    from .detector import init_detector_params
    expected = init_detector_params(cfg.train.detector, 0)
    if params.names() != expected.names():
        missing = set(expected.names()) ^ set(params.names())
        raise ConfigError(f"checkpoint does not match the configured architecture: {sorted(missing)}")
    for name in expected.names():
        if params[name].shape != expected[name].shape:
            raise ConfigError(f"checkpoint parameter {name} has shape {params[name].shape}, "
                              f"configured architecture needs {expected[name].shape}")
    split = build_split(cfg)
    scenes = {"val": split.val, "test": split.test, "labeled": split.labeled}[split_name]
    ev = evaluate_params(params, scenes, cfg.train)
    doc = ev.to_dict()
    print(json.dumps(doc, indent=2, sort_keys=True))
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        path = os.path.join(cfg.out_dir, "eval.json")
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, axis: str, values) -> int:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; known: {sorted(ABLATION_AXES)}")

    def split_builder(seed):
        return build_split(cfg, seed=seed)

    result = run_ablation(cfg.train, axis, split_builder, values=values,
                          seeds=list(cfg.seeds), out_dir=cfg.out_dir)
    for s in result.summary:
        print(f"{axis}={s['value']}: mean mAP50={s['mean_map50']:.4f} "
              f"stdev={s['stdev_map50']:.4f} (n={s['n_ok']})")
    for t in result.t_tests:
        if "p" in t:
            print(f"t-test {t['a']} vs {t['b']}: t={t['t']:.4f} p={t['p']:.4g}")
        else:
            print(f"t-test {t['a']} vs {t['b']}: {t['error']}")
    if cfg.out_dir:
        path = os.path.join(cfg.out_dir, f"ablation_{axis}_ttests.json")
        with open(path, "w") as fh:
            json.dump(result.t_tests, fh, indent=2)
    failed = [r for r in result.rows if r["status"] != "ok"]
    if failed:
        print(f"{len(failed)} run(s) failed; see log", file=sys.stderr)
    return EXIT_OK


def cmd_grad_check(seeds) -> int:
    results = run_grad_battery(seeds=seeds)
    by_name = {}
    for name, seed, rep in results:
        by_name.setdefault(name, []).append(rep)
    for name in sorted(by_name):
        reps = by_name[name]
        worst = max(r.max_rel_err for r in reps)
        ok = all(r.passed for r in reps)
        print(f"{'PASS' if ok else 'FAIL'} {name:<20} runs={len(reps)} max_rel_err={worst:.3e}")
    if not battery_passed(results):
        return EXIT_NUMERIC
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsdet", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dot-path config override (repeatable)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("generate-data", help="materialize synthetic splits as COCO JSON + PNGs")
    common(sp)
    sp = sub.add_parser("train", help="train supervised baseline or the SSL pipeline")
    common(sp)
    sp.add_argument("--mode", choices=("supervised_only", "ssl"), default="ssl")
    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("val", "test", "labeled"), default="test")
    sp = sub.add_parser("ablate", help="sweep one config axis across the seed list")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    sp.add_argument("--values", default=None,
                    help="JSON list overriding the default sweep values")
    sp = sub.add_parser("grad-check", help="finite-difference checks over ops and losses")
    common(sp)
    sp.add_argument("--n-seeds", type=int, default=10)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "grad-check":
            return cmd_grad_check(range(args.n_seeds))
        cfg = load_experiment_config(args.config, args.overrides, seed=args.seed,
                                     out_dir=args.out)
        if args.command == "generate-data":
            return cmd_generate_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.mode)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint, args.split)
        if args.command == "ablate":
            values = json.loads(args.values) if args.values else None
            return cmd_ablate(cfg, args.axis, values)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DatasetError, CheckpointError, EvalError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
