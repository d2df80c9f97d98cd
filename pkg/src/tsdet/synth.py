"""Synthetic detection scenes with a long-tailed class mix.

Seven visually distinct primitives stand in for object classes; scenes are
rendered from analytic masks so the recorded bounding boxes are exact.  The
module also builds labeled/unlabeled/val/test splits and speaks COCO-style
JSON so real data can be substituted.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import Box, iou

CLASS_NAMES = ("square", "circle", "triangle", "ring", "cross", "stripes", "diamond")

# one saturated base color per class, chosen to stay distinct after jitter
_BASE_COLORS = np.array([
    [0.85, 0.25, 0.25],
    [0.25, 0.55, 0.90],
    [0.30, 0.80, 0.35],
    [0.90, 0.80, 0.25],
    [0.80, 0.35, 0.85],
    [0.95, 0.55, 0.20],
    [0.30, 0.85, 0.80],
], dtype=np.float32)


class DatasetError(Exception):
    pass


@dataclass
class SceneConfig:
    num_classes: int = 7
    image_size: int = 96
    class_weights: Tuple[float, ...] = (0.30, 0.17, 0.25, 0.04, 0.06, 0.08, 0.10)
    min_instances: int = 1
    max_instances: int = 4
    min_size: float = 16.0
    max_size: float = 44.0
    overlap_limit: float = 0.30
    noise_level: float = 0.02

    def validate(self) -> None:
        w = np.asarray(self.class_weights, dtype=np.float64)
        if len(w) != self.num_classes:
            raise DatasetError(f"class_weights has {len(w)} entries for {self.num_classes} classes")
        if np.any(w < 0) or w.sum() <= 0:
            raise DatasetError("class_weights must be non-negative and sum to a positive value")
        if not (1 <= self.min_instances <= self.max_instances):
            raise DatasetError("instance bounds must satisfy 1 <= min <= max")


@dataclass
class Scene:
    image: np.ndarray                     # (H, W, 3) float32 in [0, 1]
    annotations: list  # list of (Box, class_id)
    id: int


@dataclass
class UnlabeledScene:
    """Image-only view of a scene; ground truth is withheld by construction."""

    image: np.ndarray
    id: int


@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    val: list
    test: list
    seed: int
    labeled_fraction: float
    hidden: dict = field(default_factory=dict, repr=False)

    def hidden_annotations(self, scene_id: int):
        """Withheld ground truth of an unlabeled scene.

        Diagnostics only: nothing on any training path may call this, and a
        test enforces that by poisoning the map.
        """
        return self.hidden[scene_id]


def _rot(px, py, cx, cy, angle):
    ca, sa = math.cos(angle), math.sin(angle)
    dx, dy = px - cx, py - cy
    return ca * dx + sa * dy, -sa * dx + ca * dy


def _shape_mask(class_id, xs, ys, cx, cy, half, angle):
    u, v = _rot(xs, ys, cx, cy, angle)
    if class_id == 0:    # square
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if class_id == 1:    # circle
        return u * u + v * v <= half * half
    if class_id == 2:    # triangle, apex up
        inside = v >= -half
        inside &= v <= half
        # sides from apex (0,-half) to base corners (+-half, half)
        inside &= (half - (-half)) * (u - 0.0) - (half - 0.0) * (v - (-half)) <= 0
        inside &= (half - (-half)) * (u - 0.0) - (-half - 0.0) * (v - (-half)) >= 0
        return inside
    if class_id == 3:    # ring
        d2 = u * u + v * v
        return (d2 <= half * half) & (d2 >= (0.55 * half) ** 2)
    if class_id == 4:    # cross
        arm = 0.34 * half
        return ((np.abs(u) <= arm) & (np.abs(v) <= half)) | ((np.abs(u) <= half) & (np.abs(v) <= arm))
    if class_id == 5:    # striped square
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if class_id == 6:    # diamond
        return np.abs(u) + np.abs(v) <= half
    raise DatasetError(f"no renderer for class {class_id}")


def _paint(image, mask, class_id, color, u_coord):
    if class_id == 5:
        stripes = np.sin(u_coord * (2 * math.pi / 6.0)) >= 0
        dark = np.clip(color * 0.35, 0, 1)
        image[mask & stripes] = color
        image[mask & ~stripes] = dark
    elif class_id == 3:
        image[mask] = color
    else:
        image[mask] = color


def generate_scene(rng_seed: int, config: Optional[SceneConfig] = None) -> Scene:
    """Render one scene deterministically from its seed."""
    config = config or SceneConfig()
    config.validate()
    rng = np.random.default_rng(rng_seed)
    size = config.image_size
    ys, xs = np.mgrid[0:size, 0:size]
    xs = xs + 0.5
    ys = ys + 0.5

    # smooth background: base tone plus a linear gradient plus mild noise
    base = rng.uniform(0.08, 0.30, size=3)
    gx, gy = rng.uniform(-0.10, 0.10, size=2)
    image = np.empty((size, size, 3), dtype=np.float32)
    ramp = (gx * xs + gy * ys) / size
    for ch in range(3):
        image[:, :, ch] = base[ch] + ramp
    image += rng.normal(0.0, config.noise_level, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    weights = np.asarray(config.class_weights, dtype=np.float64)
    weights = weights / weights.sum()
    n_instances = int(rng.integers(config.min_instances, config.max_instances + 1))
    annotations = []
    for _ in range(n_instances):
        class_id = int(rng.choice(config.num_classes, p=weights))
        placed = False
        for attempt in range(20):
            half = 0.5 * rng.uniform(config.min_size, config.max_size)
            # centers may sit close to the border so shapes clip partially
            cx = rng.uniform(0.5 * half, size - 0.5 * half)
            cy = rng.uniform(0.5 * half, size - 0.5 * half)
            angle = rng.uniform(-0.35, 0.35) if class_id in (0, 2, 4, 5, 6) else 0.0
            mask = _shape_mask(class_id, xs, ys, cx, cy, half, angle)
            if mask.sum() < 12:
                continue
            rows = np.any(mask, axis=1)
            cols = np.any(mask, axis=0)
            y0, y1 = np.argmax(rows), size - np.argmax(rows[::-1])
            x0, x1 = np.argmax(cols), size - np.argmax(cols[::-1])
            if x1 - x0 < 3 or y1 - y0 < 3:
                continue
            box = Box(float(x0), float(y0), float(x1), float(y1))
            if attempt < 15 and any(iou(box, b) > config.overlap_limit for b, _ in annotations):
                continue
            color = np.clip(_BASE_COLORS[class_id] + rng.uniform(-0.08, 0.08, size=3), 0, 1).astype(np.float32)
            u_coord, _ = _rot(xs, ys, cx, cy, angle)
            _paint(image, mask, class_id, color, u_coord)
            annotations.append((box, class_id))
            placed = True
            break
        if not placed:
            continue
    if not annotations:
        # pathological config; fall back to one centered instance of class 0
        half = 0.5 * config.min_size
        c = size / 2
        mask = _shape_mask(0, xs, ys, c, c, half, 0.0)
        image[mask] = _BASE_COLORS[0]
        annotations.append((Box(c - half, c - half, c + half, c + half).clipped(size, size), 0))
    return Scene(image=image, annotations=annotations, id=int(rng_seed))


def scene_seeds(seed: int, n: int) -> np.ndarray:
    """Per-scene integer seeds derived from one master seed."""
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)


def make_splits(n_scenes: int, labeled_fraction: float, seed: int,
                config: Optional[SceneConfig] = None) -> DatasetSplit:
    """80/10/10 train/val/test partition, with the labeled fraction applied
    inside train.  Fixed seed gives bit-identical splits and scenes."""
    if n_scenes < 100:
        raise DatasetError(f"need at least 100 scenes, got {n_scenes}")
    if not 0.0 < labeled_fraction <= 1.0:
        raise DatasetError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    config = config or SceneConfig()
    seeds = scene_seeds(seed, n_scenes)
    scenes = []
    for i in range(n_scenes):
        s = generate_scene(int(seeds[i]), config)
        s.id = i
        scenes.append(s)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    perm = rng.permutation(n_scenes)
    n_val = int(round(0.1 * n_scenes))
    n_test = int(round(0.1 * n_scenes))
    n_train = n_scenes - n_val - n_test
    train_ids = perm[:n_train]
    val_ids = perm[n_train:n_train + n_val]
    test_ids = perm[n_train + n_val:]

    n_labeled = int(round(labeled_fraction * n_train))
    if n_labeled == 0:
        raise DatasetError(
            f"labeled_fraction {labeled_fraction} keeps zero of {n_train} train scenes; "
            "use a larger n_scenes")
    labeled = [scenes[i] for i in train_ids[:n_labeled]]
    hidden = {}
    unlabeled = []
    for i in train_ids[n_labeled:]:
        s = scenes[i]
        hidden[s.id] = s.annotations
        unlabeled.append(UnlabeledScene(image=s.image, id=s.id))
    return DatasetSplit(
        labeled=labeled,
        unlabeled=unlabeled,
        val=[scenes[i] for i in val_ids],
        test=[scenes[i] for i in test_ids],
        seed=seed,
        labeled_fraction=labeled_fraction,
        hidden=hidden,
    )


def dataset_mean_color(scenes: Sequence) -> np.ndarray:
    if not scenes:
        return np.full(3, 0.5, dtype=np.float32)
    acc = np.zeros(3, dtype=np.float64)
    for s in scenes:
        acc += s.image.reshape(-1, 3).mean(axis=0)
    return (acc / len(scenes)).astype(np.float32)


# ---------------------------------------------------------------------------
# COCO-style JSON interchange


def _scene_file_name(scene_id: int) -> str:
    return f"scene_{scene_id:06d}.png"


def write_coco_json(scenes: Sequence, path, image_dir=None,
                    class_names: Sequence[str] = CLASS_NAMES,
                    withhold_annotations: bool = False) -> None:
    """Write scenes as COCO detection JSON; images go to ``image_dir`` as PNG.

    ``withhold_annotations`` emits an images-only file for unlabeled splits.
    """
    images = []
    annotations = []
    ann_id = 1
    for s in scenes:
        h, w = s.image.shape[:2]
        images.append({"id": int(s.id), "width": int(w), "height": int(h),
                       "file_name": _scene_file_name(s.id)})
        if image_dir is not None:
            os.makedirs(image_dir, exist_ok=True)
            arr = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, "RGB").save(os.path.join(image_dir, _scene_file_name(s.id)))
        if withhold_annotations or isinstance(s, UnlabeledScene):
            continue
        for box, class_id in s.annotations:
            annotations.append({
                "id": ann_id,
                "image_id": int(s.id),
                "category_id": int(class_id) + 1,
                "bbox": [box.x1, box.y1, box.width, box.height],
                "area": box.area,
                "iscrowd": 0,
            })
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(class_names)],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def read_coco_json(path, image_dir) -> list[Scene]:
    """Load scenes back from COCO detection JSON.

    Boxes use the COCO [x, y, w, h] convention and are validated against the
    declared image size; malformed structure raises DatasetError naming the
    offending id.
    """
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: malformed JSON at offset {e.pos}: {e.msg}") from e
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise DatasetError(f"{path}: missing top-level key {key!r}")
    cats = sorted(doc["categories"], key=lambda c: c["id"])
    cat_to_class = {c["id"]: i for i, c in enumerate(cats)}

    scenes = {}
    sizes = {}
    for im in doc["images"]:
        for key in ("id", "width", "height", "file_name"):
            if key not in im:
                raise DatasetError(f"{path}: image entry missing key {key!r}: {im}")
        img_path = os.path.join(image_dir, im["file_name"])
        if not os.path.exists(img_path):
            raise DatasetError(f"missing image file {img_path}")
        arr = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        if arr.shape[0] != im["height"] or arr.shape[1] != im["width"]:
            raise DatasetError(f"{img_path}: size {arr.shape[:2]} != declared "
                               f"({im['height']}, {im['width']})")
        scenes[im["id"]] = Scene(image=arr, annotations=[], id=int(im["id"]))
        sizes[im["id"]] = (im["width"], im["height"])

    for ann in doc["annotations"]:
        aid = ann.get("id", "?")
        if "image_id" not in ann or "bbox" not in ann or "category_id" not in ann:
            raise DatasetError(f"{path}: annotation {aid} missing image_id/bbox/category_id")
        if ann["image_id"] not in scenes:
            raise DatasetError(f"{path}: annotation {aid} references missing image id {ann['image_id']}")
        if ann["category_id"] not in cat_to_class:
            raise DatasetError(f"{path}: annotation {aid} has unknown category id {ann['category_id']}")
        bbox = ann["bbox"]
        if len(bbox) != 4:
            raise DatasetError(f"{path}: annotation {aid} bbox must have 4 entries, got {bbox}")
        x, y, w, h = (float(v) for v in bbox)
        iw, ih = sizes[ann["image_id"]]
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > iw or y + h > ih:
            raise DatasetError(f"{path}: annotation {aid} bbox {bbox} leaves image bounds {iw}x{ih}")
        scenes[ann["image_id"]].annotations.append((Box(x, y, x + w, y + h), cat_to_class[ann["category_id"]]))

    return [scenes[k] for k in sorted(scenes)]
