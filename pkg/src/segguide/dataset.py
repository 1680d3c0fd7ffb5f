"""Shapes world: a deterministic synthetic segmentation dataset.

Scenes are a sky/grass backdrop with colored objects drawn on top.  Two
class groups are deliberately confusable so a frozen backbone plateaus
below ceiling and guiding has measurable headroom:

* sky / cloud / water share a blue palette.  Water is drawn with the
  exact sky color but only below the horizon, so no local color cue can
  separate the two — only spatial context can.
* sand / mud / clay are ground patches drawn in one identical color.
  Their class is determined solely by how deep below the horizon they
  sit, and the three depth bands overlap: inside the shared band no
  visual or positional cue can decide between them, so a model can only
  tie — while an oracle hint that names the true class resolves it.
  Suppressing the predicted class still leaves a tie among the
  remaining two, which is exactly the regime where naming beats
  removing.

Layout on disk: images/{split}/{index}.png (RGB),
labels/{split}/{index}.png (single channel, class index, 255 = ignore),
manifest.json.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

IGNORE_LABEL = 255

# order matters: the first num_classes entries are used, and a
# confusable group shrinks to the members inside that prefix
CLASS_NAMES = ["sky", "grass", "cloud", "sand", "mud",
               "ball", "clay", "tree", "wall", "water"]

CONFUSABLE_GROUPS = [("sky", "cloud", "water"), ("sand", "mud", "clay")]

# base RGB per class.  water repeats the sky color exactly — it is
# separable by position (always below the horizon), never by
# appearance.  The three ground patches share one color on purpose;
# only their depth band (below) hints at the class.
CLASS_COLORS = {
    "sky": (132, 185, 232),
    "grass": (88, 158, 70),
    "cloud": (158, 208, 248),
    "sand": (190, 166, 112),
    "mud": (190, 166, 112),
    "ball": (210, 60, 50),
    "clay": (190, 166, 112),
    "tree": (24, 96, 40),
    "wall": (152, 150, 148),
    "water": (132, 185, 232),
}

NOISE_SIGMA = 13.0

# Vertical placement band for each ground patch, as a fraction of the
# strip between the horizon and the bottom edge.  The bands overlap
# three ways in the middle of the strip: a patch there is genuinely
# ambiguous, which is the headroom interactive guidance is meant to
# close.
GROUND_BANDS = {"clay": (0.00, 0.70), "mud": (0.15, 0.85),
                "sand": (0.30, 1.00)}


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 10
    objects_per_scene: tuple[int, int] = (2, 5)
    min_object_pixels: int = 20
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError("image_size must be at least 16x16")
        if self.num_classes < 4 or self.num_classes > len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [4, {len(CLASS_NAMES)}]")
        lo, hi = self.objects_per_scene
        if lo < 0 or hi < lo:
            raise ValueError("objects_per_scene must be a (lo, hi) range")

    @property
    def class_names(self) -> list[str]:
        return CLASS_NAMES[: self.num_classes]

    @property
    def confusable_pairs(self) -> list[tuple[str, str]]:
        """All within-group pairs whose classes are both in use."""
        names = set(self.class_names)
        pairs = []
        for group in CONFUSABLE_GROUPS:
            present = [n for n in group if n in names]
            pairs.extend((a, b) for i, a in enumerate(present)
                         for b in present[i + 1:])
        return pairs

    def to_json(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "num_classes": self.num_classes,
            "objects_per_scene": list(self.objects_per_scene),
            "min_object_pixels": self.min_object_pixels,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneConfig":
        return cls(
            image_size=tuple(obj["image_size"]),
            num_classes=obj["num_classes"],
            objects_per_scene=tuple(obj["objects_per_scene"]),
            min_object_pixels=obj["min_object_pixels"],
            seed=obj["seed"],
        )


def _draw_object(draw: ImageDraw.ImageDraw, name: str, box: tuple[int, int, int, int],
                 class_id: int) -> None:
    x0, y0, x1, y1 = box
    if name in ("ball", "cloud", "sand", "mud", "clay", "water"):
        draw.ellipse(box, fill=class_id, outline=IGNORE_LABEL, width=1)
    elif name == "wall":
        draw.rectangle(box, fill=class_id, outline=IGNORE_LABEL, width=1)
    elif name == "tree":
        apex = ((x0 + x1) // 2, y0)
        draw.polygon([apex, (x0, y1), (x1, y1)], fill=class_id,
                     outline=IGNORE_LABEL)
    else:
        draw.rectangle(box, fill=class_id, outline=IGNORE_LABEL, width=1)


def _object_box(rng: np.random.Generator, name: str, h: int, w: int,
                horizon: int) -> tuple[int, int, int, int] | None:
    """Pick a bounding box for the object, respecting its stratum."""
    def span(lo, hi):
        return int(rng.integers(lo, hi + 1))

    if name == "cloud":
        bw, bh = span(12, 22), span(6, 10)
        y_max = horizon - bh - 2
        if y_max <= 1:
            return None
        x0 = span(1, w - bw - 2)
        y0 = span(1, y_max)
    elif name in ("sand", "mud", "clay"):
        bw, bh = span(12, 22), span(7, 12)
        strip = h - horizon
        d_lo, d_hi = GROUND_BANDS[name]
        y_min = max(horizon + 1, horizon + int(d_lo * strip))
        y_max = min(h - bh - 2, horizon + int(d_hi * strip) - bh)
        if y_max < y_min:
            return None
        x0 = span(1, w - bw - 2)
        y0 = span(y_min, y_max)
    elif name == "water":
        # ponds: wide, flat, and strictly below the horizon
        bw, bh = span(14, 26), span(5, 9)
        y_min = horizon + 2
        y_max = h - bh - 2
        if y_max <= y_min:
            return None
        x0 = span(1, w - bw - 2)
        y0 = span(y_min, y_max)
    elif name == "wall":
        bw, bh = span(16, 26), span(8, 12)
        y_min = max(1, horizon - bh // 2)
        y_max = h - bh - 2
        if y_max <= y_min:
            return None
        x0 = span(1, w - bw - 2)
        y0 = span(y_min, y_max)
    else:  # ball, tree
        side = span(9, 16)
        bw = bh = side
        y_min = max(1, horizon - 2)
        y_max = h - bh - 2
        if y_max <= y_min:
            return None
        x0 = span(1, w - bw - 2)
        y0 = span(y_min, y_max)
    return (x0, y0, x0 + bw, y0 + bh)


def _boxes_overlap(a, b, pad: int = 1) -> bool:
    return not (a[2] + pad < b[0] or b[2] + pad < a[0]
                or a[3] + pad < b[1] or b[3] + pad < a[1])


def generate_scene(cfg: SceneConfig, index: int, return_log: bool = False):
    """Render scene ``index``: (image uint8 HxWx3, labels uint8 HxW).

    Deterministic in (cfg.seed, index).  Object outlines are a 1-pixel
    ignore ring; every placed object keeps at least min_object_pixels
    visible (objects are placed without overlap, so occlusion cannot
    shrink them).
    """
    if index < 0:
        raise ValueError("index must be >= 0")
    rng = np.random.default_rng((cfg.seed, index))
    h, w = cfg.image_size
    names = cfg.class_names
    ids = {n: i for i, n in enumerate(names)}

    horizon = int(rng.integers(int(h * 0.30), int(h * 0.55)))
    canvas = Image.new("L", (w, h), color=ids["sky"])
    draw = ImageDraw.Draw(canvas)
    draw.rectangle((0, horizon, w - 1, h - 1), fill=ids["grass"])

    object_names = [n for n in names if n not in ("sky", "grass")]
    # Ground patches appear twice as often: they carry the three-way
    # ambiguity that guiding is meant to resolve, so they should
    # dominate the error mass.  Clouds also get a double share — their
    # color sits close to the sky's, and at a single draw per pool
    # pass they cover too few pixels for the network to pick the
    # contrast up.  (Heavier ground weighting starves the rare
    # singleton classes below the point where the 40-epoch reference
    # backbone learns them at all, which wastes every hint that lands
    # on them.)
    pool = [n for n in object_names
            for _ in range(2 if n in GROUND_BANDS or n == "cloud" else 1)]
    lo, hi = cfg.objects_per_scene
    n_objects = int(rng.integers(lo, hi + 1)) if hi > 0 else 0

    placed: list[tuple[str, tuple[int, int, int, int]]] = []
    for _ in range(n_objects):
        name = pool[int(rng.integers(len(pool)))]
        for _attempt in range(20):
            box = _object_box(rng, name, h, w, horizon)
            if box is None:
                break
            if all(not _boxes_overlap(box, other) for _, other in placed):
                placed.append((name, box))
                break

    for name, box in placed:
        _draw_object(draw, name, box, ids[name])

    labels = np.asarray(canvas, dtype=np.uint8).copy()

    # render RGB from labels, then add pixel noise
    image = np.zeros((h, w, 3), dtype=np.float64)
    color_table = np.zeros((256, 3), dtype=np.float64)
    for n in names:
        color_table[ids[n]] = CLASS_COLORS[n]
    # ignore ring pixels take the color of their object: repaint rings by
    # nearest fill using the owning class stored during drawing
    owner = labels.copy()
    ring = owner == IGNORE_LABEL
    if ring.any():
        # fill ring pixels from the majority of their 4-neighborhood
        padded = np.pad(owner, 1, mode="edge")
        neighbors = np.stack([padded[:-2, 1:-1], padded[2:, 1:-1],
                              padded[1:-1, :-2], padded[1:-1, 2:]])
        pick = neighbors[0].copy()
        for k in range(1, 4):
            pick = np.where(pick == IGNORE_LABEL, neighbors[k], pick)
        pick = np.where(pick == IGNORE_LABEL, ids["grass"], pick)
        owner[ring] = pick[ring]
    image = color_table[owner]
    image += rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    if not return_log:
        return image, labels

    objects = []
    for name, box in placed:
        obj = Image.new("L", (w, h), color=0)
        _draw_object(ImageDraw.Draw(obj), name, box, 1)
        mask = np.asarray(obj) == 1
        visible = int((mask & (labels == ids[name])).sum())
        objects.append({"class": name, "class_id": ids[name],
                        "box": list(box), "visible_pixels": visible})
    return image, labels, {"horizon": horizon, "objects": objects}


@dataclass
class ShapesData:
    """In-memory dataset: uint8 arrays plus the manifest."""

    images: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    manifest: dict

    @property
    def class_names(self) -> list[str]:
        return self.manifest["class_names"]

    @property
    def confusable_pairs(self) -> list[list[str]]:
        return self.manifest["confusable_pairs"]

    def half_indices(self, half: str) -> list[int]:
        return self.manifest["splits"]["halves"][half]

    def tensors(self, split: str, indices=None):
        """(images float32 (N,3,H,W) in [0,1], labels int64 (N,H,W))."""
        import torch

        imgs = self.images[split]
        labs = self.labels[split]
        if indices is not None:
            imgs = imgs[indices]
            labs = labs[indices]
        x = torch.from_numpy(imgs.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
        y = torch.from_numpy(labs.astype(np.int64))
        return x.contiguous(), y


def write_dataset(cfg: SceneConfig, n_train: int, n_test: int,
                  out_dir: str | Path) -> dict:
    """Generate and persist a dataset; returns the manifest.

    Train scene indices are [0, n_train), test indices continue at
    n_train so the two splits never share a scene.  The train split is
    pre-partitioned into disjoint halves A (backbone pre-training) and B
    (guide training).
    """
    out = Path(out_dir)
    manifest = {
        "class_names": cfg.class_names,
        "confusable_pairs": [list(p) for p in cfg.confusable_pairs],
        "ignore_label": IGNORE_LABEL,
        "scene_config": cfg.to_json(),
        "seed": cfg.seed,
        "splits": {
            "train": n_train,
            "test": n_test,
            "halves": {
                "A": list(range(0, n_train // 2)),
                "B": list(range(n_train // 2, n_train)),
            },
        },
    }
    specs = [("train", 0, n_train), ("test", n_train, n_test)]
    for split, base, count in specs:
        (out / "images" / split).mkdir(parents=True, exist_ok=True)
        (out / "labels" / split).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            image, labels = generate_scene(cfg, base + i)
            Image.fromarray(image, mode="RGB").save(
                out / "images" / split / f"{i:05d}.png")
            Image.fromarray(labels, mode="L").save(
                out / "labels" / split / f"{i:05d}.png")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def read_dataset(data_dir: str | Path) -> ShapesData:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {data_dir}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt manifest: {e}") from e

    images: dict[str, np.ndarray] = {}
    labels: dict[str, np.ndarray] = {}
    for split, count in (("train", manifest["splits"]["train"]),
                         ("test", manifest["splits"]["test"])):
        imgs, labs = [], []
        for i in range(count):
            img_path = data_dir / "images" / split / f"{i:05d}.png"
            lab_path = data_dir / "labels" / split / f"{i:05d}.png"
            if not img_path.exists() or not lab_path.exists():
                raise FileNotFoundError(f"missing file for {split}/{i:05d}")
            imgs.append(np.asarray(Image.open(img_path).convert("RGB")))
            labs.append(np.asarray(Image.open(lab_path)))
        images[split] = np.stack(imgs) if imgs else np.zeros((0, 0, 0, 3), np.uint8)
        labels[split] = np.stack(labs) if labs else np.zeros((0, 0, 0), np.uint8)
    return ShapesData(images, labels, manifest)
