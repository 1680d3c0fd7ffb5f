"""Automatic query synthesis: the stand-in for the human during training.

Prediction and ground truth are compared on an N x N grid; every fixable
(operation, class) error becomes a candidate weighted by how many pixels
fixing it would correct.  One candidate is sampled per example and
rendered as a short natural-language hint with a spatial phrase.  The
module also builds the {1, 0.5, 0} loss re-weighting map used to train
the language guide.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FIND = "find"
REMOVE = "remove"

DEFAULT_TEMPLATES = {
    FIND: [
        "find the {c} {loc}",
        "the {c} is missing {loc}",
        "there is a {c} {loc}",
    ],
    REMOVE: [
        "remove the {c} {loc}",
        "there is no {c} {loc}",
        "the {c} is wrong {loc}",
    ],
}

WHOLE_IMAGE_PHRASE = "in the image"

_ROW_PHRASES = ("on the top", "in the vertical middle", "on the bottom")
_COL_PHRASES = ("on the left", "in the horizontal middle", "on the right")
_CELL_PHRASES = {
    (0, 0): "on the top left", (0, 1): "on the top", (0, 2): "on the top right",
    (1, 0): "on the left", (1, 1): "in the middle", (1, 2): "on the right",
    (2, 0): "on the bottom left", (2, 1): "on the bottom",
    (2, 2): "on the bottom right",
}


@dataclass
class QueryGenConfig:
    grid_n: int = 3
    min_region_pixels: int | None = None  # None: max(20, 0.1% of pixels)
    templates: dict = field(default_factory=lambda: {k: list(v) for k, v in
                                                     DEFAULT_TEMPLATES.items()})
    class_names: list[str] = field(default_factory=list)
    seed: int = 0
    ignore_label: int = 255

    def __post_init__(self):
        if self.grid_n < 1:
            raise ValueError("grid_n must be >= 1")
        if self.min_region_pixels is not None and self.min_region_pixels < 0:
            raise ValueError("min_region_pixels must be >= 0")
        for op in (FIND, REMOVE):
            if not self.templates.get(op):
                raise ValueError(f"need at least one template for {op!r}")

    def region_threshold(self, shape: tuple[int, int]) -> int:
        if self.min_region_pixels is not None:
            return self.min_region_pixels
        return max(20, (shape[0] * shape[1]) // 1000)

    def class_name(self, class_id: int) -> str:
        if 0 <= class_id < len(self.class_names):
            return self.class_names[class_id]
        return f"class {class_id}"

    def to_json(self) -> dict:
        return {"grid_n": self.grid_n, "min_region_pixels": self.min_region_pixels,
                "templates": self.templates, "class_names": self.class_names,
                "seed": self.seed, "ignore_label": self.ignore_label}

    @classmethod
    def from_json(cls, obj: dict) -> "QueryGenConfig":
        return cls(**obj)

    @classmethod
    def from_file(cls, path: str | Path) -> "QueryGenConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class QuerySpec:
    """One fixable error: operation, class, grid cells, and the pixel
    count that fixing it would correct."""

    operation: str
    class_id: int
    class_name: str
    cells: frozenset
    improvement: int
    cell_improvements: dict = field(default_factory=dict)

    def key(self):
        return (self.operation, self.class_id, self.cells, self.improvement)

    def to_json(self) -> dict:
        return {
            "operation": self.operation,
            "class_id": self.class_id,
            "class_name": self.class_name,
            "cells": sorted(list(c) for c in self.cells),
            "improvement": self.improvement,
        }


def _cell_bounds(shape: tuple[int, int], n: int, r: int, c: int):
    h, w = shape
    return (h * r // n, h * (r + 1) // n, w * c // n, w * (c + 1) // n)


def enumerate_errors(pred: np.ndarray, gt: np.ndarray,
                     cfg: QueryGenConfig) -> list[QuerySpec]:
    """All (operation, class) error candidates, cells unioned across the
    grid and improvements summed.

    Per cell and class k: a find candidate where gt == k but pred != k,
    a remove candidate where pred == k but gt is a different real class.
    Counts below the region threshold are spurious and dropped.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    n = cfg.grid_n
    threshold = cfg.region_threshold(pred.shape)
    ignore = cfg.ignore_label

    merged: dict[tuple[str, int], dict] = {}
    classes = np.unique(np.concatenate([pred.ravel(), gt.ravel()]))
    classes = [int(k) for k in classes if k != ignore]
    valid = gt != ignore

    for r in range(n):
        for c in range(n):
            r0, r1, c0, c1 = _cell_bounds(pred.shape, n, r, c)
            p = pred[r0:r1, c0:c1]
            g = gt[r0:r1, c0:c1]
            v = valid[r0:r1, c0:c1]
            for k in classes:
                find_count = int(((g == k) & (p != k)).sum())
                remove_count = int(((p == k) & (g != k) & v).sum())
                for op, count in ((FIND, find_count), (REMOVE, remove_count)):
                    if count >= threshold:
                        entry = merged.setdefault(
                            (op, k), {"cells": set(), "by_cell": {}, "total": 0})
                        entry["cells"].add((r, c))
                        entry["by_cell"][(r, c)] = count
                        entry["total"] += count

    specs = []
    for (op, k), entry in sorted(merged.items()):
        specs.append(QuerySpec(
            operation=op, class_id=k, class_name=cfg.class_name(k),
            cells=frozenset(entry["cells"]), improvement=entry["total"],
            cell_improvements=dict(entry["by_cell"])))
    return specs


def sample_query(candidates: list[QuerySpec], rng: np.random.Generator) -> QuerySpec:
    """Draw one candidate with probability proportional to improvement."""
    if not candidates:
        raise ValueError("no query candidates to sample from")
    weights = np.array([c.improvement for c in candidates], dtype=np.float64)
    probs = weights / weights.sum()
    return candidates[int(rng.choice(len(candidates), p=probs))]


REGIMES = ("find", "remove", "find_or_remove")


def sample_regime_query(pred: np.ndarray, gt: np.ndarray, cfg: QueryGenConfig,
                        rng: np.random.Generator,
                        regime: str = "find_or_remove"):
    """Enumerate, filter by regime, sample, render.

    Returns (spec, text); (None, "") when the regime leaves no
    candidates, which downstream code treats as a no-op hint.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; have {REGIMES}")
    candidates = enumerate_errors(pred, gt, cfg)
    if regime != "find_or_remove":
        candidates = [c for c in candidates if c.operation == regime]
    if not candidates:
        return None, ""
    spec = sample_query(candidates, rng)
    return spec, render_text(spec, cfg, rng)


def _band(i: int, n: int) -> int:
    """Map a grid index to a top/middle/bottom (or left/middle/right) third."""
    return min(i * 3 // n, 2)


def spatial_phrase(cells: frozenset, grid_n: int,
                   cell_improvements: dict | None = None) -> str:
    """Cells -> phrase: whole grid, a full row, a full column, a single
    cell, or (fallback) the cell with the largest improvement."""
    n = grid_n
    if len(cells) == n * n:
        return WHOLE_IMAGE_PHRASE
    rows = {r for r, _ in cells}
    cols = {c for _, c in cells}
    if len(rows) == 1 and len(cols) == n:
        return _ROW_PHRASES[_band(next(iter(rows)), n)]
    if len(cols) == 1 and len(rows) == n:
        return _COL_PHRASES[_band(next(iter(cols)), n)]
    if len(cells) == 1:
        r, c = next(iter(cells))
        return _CELL_PHRASES[(_band(r, n), _band(c, n))]
    if cell_improvements:
        best = max(sorted(cell_improvements), key=lambda rc: cell_improvements[rc])
    else:
        best = min(cells)
    return _CELL_PHRASES[(_band(best[0], n), _band(best[1], n))]


def render_text(spec: QuerySpec, cfg: QueryGenConfig,
                rng: np.random.Generator) -> str:
    """Fill a randomly chosen template with the class name and the
    spatial phrase for the spec's cells."""
    templates = cfg.templates.get(spec.operation)
    if not templates:
        raise KeyError(f"no templates for operation {spec.operation!r}")
    template = templates[int(rng.integers(len(templates)))]
    loc = spatial_phrase(spec.cells, cfg.grid_n, spec.cell_improvements)
    return template.format(c=spec.class_name, loc=loc).strip()


_ALL_PHRASES = ([WHOLE_IMAGE_PHRASE] + list(_ROW_PHRASES) + list(_COL_PHRASES)
                + sorted(set(_CELL_PHRASES.values())))


def parse_hint(text: str, cfg: QueryGenConfig):
    """Recover (operation, class_name) from rendered hint text, or None.

    Round-trip counterpart of render_text; the UI uses it to echo what a
    hint was understood as.
    """
    loc_pattern = "|".join(re.escape(p) for p in
                           sorted(_ALL_PHRASES, key=len, reverse=True))
    text = text.strip().lower()
    for op, templates in cfg.templates.items():
        for template in templates:
            pattern = re.escape(template.strip())
            pattern = pattern.replace(re.escape("{c}"), r"(?P<c>.+?)")
            pattern = pattern.replace(re.escape("{loc}"), f"(?:{loc_pattern})")
            m = re.fullmatch(pattern, text)
            if m:
                return op, m.group("c").strip()
    return None


def build_weight_map(pred: np.ndarray, gt: np.ndarray,
                     spec: QuerySpec | None,
                     ignore_label: int = 255) -> np.ndarray:
    """Per-pixel loss weights.

    Correct pixels weigh 0.5; wrong pixels of the queried class weigh 1
    (gt == class for find, pred == class for remove); all other wrong
    pixels and everything under the ignore label weigh 0.  With no spec
    (the no-op query) every non-ignore pixel weighs 0.5.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    weights = np.zeros(pred.shape, dtype=np.float32)
    valid = gt != ignore_label
    if spec is None:
        weights[valid] = 0.5
        return weights
    correct = (pred == gt) & valid
    weights[correct] = 0.5
    if spec.operation == FIND:
        mentioned = gt == spec.class_id
    else:
        mentioned = pred == spec.class_id
    weights[mentioned & ~correct & valid] = 1.0
    return weights
