"""Segmentation metrics, guided-evaluation loops, ablation sweeps,
guidance heatmaps, and per-class gamma export.

mIoU convention: classes absent from both ground truth and prediction
are excluded from the class mean.  Every report states this in its
header.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneModel
from .guiding import apply_guidance
from .language import EmbeddingTable, GuideModel
from .queries import QueryGenConfig, sample_regime_query

MIOU_CONVENTION = ("classes absent from both ground truth and prediction "
                   "are excluded from the mIoU mean")


def new_confusion(num_classes: int) -> np.ndarray:
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, pred: np.ndarray, gt: np.ndarray,
               ignore_label: int = 255) -> np.ndarray:
    """Add one (pred, gt) pair into cm in place; rows are ground truth,
    columns prediction.  Ignore-labeled pixels do not count."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    k = cm.shape[0]
    keep = gt != ignore_label
    p, g = pred[keep].ravel(), gt[keep].ravel()
    if p.size and (p.min() < 0 or p.max() >= k or g.min() < 0 or g.max() >= k):
        raise ValueError(f"class id outside [0, {k})")
    np.add.at(cm, (g, p), 1)
    return cm


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN for classes absent from both gt and prediction."""
    diag = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = diag / union
    iou[union == 0] = np.nan
    return iou


def miou(cm: np.ndarray) -> float:
    if cm.sum() == 0:
        raise ValueError("empty confusion matrix has no defined mIoU")
    iou = per_class_iou(cm)
    return float(np.nanmean(iou))


def pixel_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix has no defined accuracy")
    return float(np.trace(cm) / total)


@dataclass
class EvalResult:
    miou: float
    pixel_accuracy: float
    per_class_iou: list[float]
    confusion: np.ndarray

    def to_json(self) -> dict:
        return {
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "per_class_iou": [None if np.isnan(v) else float(v)
                              for v in self.per_class_iou],
            "miou_convention": MIOU_CONVENTION,
        }


def _result(cm: np.ndarray) -> EvalResult:
    return EvalResult(miou=miou(cm), pixel_accuracy=pixel_accuracy(cm),
                      per_class_iou=per_class_iou(cm).tolist(), confusion=cm)


def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def evaluate_unguided(backbone: BackboneModel, images: torch.Tensor,
                      labels: torch.Tensor, batch_size: int = 16,
                      ignore_label: int = 255) -> EvalResult:
    cm = new_confusion(backbone.config.num_classes)
    for lo, hi in _batches(images.shape[0], batch_size):
        pred, _ = backbone.predict(images[lo:hi])
        accumulate(cm, pred.numpy(), labels[lo:hi].numpy(), ignore_label)
    return _result(cm)


def evaluate_guided(backbone: BackboneModel, guide: GuideModel,
                    table: EmbeddingTable, images: torch.Tensor,
                    labels: torch.Tensor, qcfg: QueryGenConfig,
                    regime: str = "find", seed: int = 0,
                    batch_size: int = 16, num_hints: int = 1,
                    stacked: bool = False, queries_per_image: int = 1,
                    ignore_label: int = 255) -> EvalResult:
    """Guided mIoU under sampled queries.

    Per image: predict, sample a query from the errors, re-run with
    text guidance.  num_hints > 1 repeats the loop, re-deriving the
    query from the newest prediction; by default each turn's params
    replace the previous ones on the same base features (stacked=True
    applies them to the already-guided features instead).  num_hints=0
    reduces to the unguided evaluation.

    queries_per_image > 1 repeats the whole query draw per image and
    pools every guided prediction into one confusion matrix: the same
    quantity in expectation, estimated with less query-sampling noise.
    """
    if queries_per_image < 1:
        raise ValueError(
            f"queries_per_image must be >= 1, got {queries_per_image}")
    rng = np.random.default_rng(seed)
    cm = new_confusion(backbone.config.num_classes)
    for lo, hi in _batches(images.shape[0], batch_size):
        x = images[lo:hi]
        gt = labels[lo:hi].numpy()
        with torch.no_grad():
            a_base = backbone.forward_head(x, guide.split)
            logits = backbone.forward_tail(a_base, guide.split)
            pred_base = logits.argmax(dim=-3).numpy()
        for _ in range(queries_per_image):
            pred = pred_base
            a = a_base
            for _ in range(num_hints):
                texts = [sample_regime_query(pred[i], gt[i], qcfg, rng,
                                             regime)[1]
                         for i in range(pred.shape[0])]
                with torch.no_grad():
                    params = guide.params_from_texts(texts, table)
                    source = a if stacked else a_base
                    a = apply_guidance(source, params, guide.mode,
                                       guide.block)
                    pred = backbone.forward_tail(a, guide.split).argmax(
                        -3).numpy()
            accumulate(cm, pred, gt, ignore_label)
    return _result(cm)


@dataclass
class AblationReport:
    """Mean/std guided mIoU per setting along one ablation axis."""

    axis: str
    rows: list[dict]
    num_seeds: int
    miou_convention: str = MIOU_CONVENTION

    def to_json(self) -> dict:
        return {"axis": self.axis, "num_seeds": self.num_seeds,
                "miou_convention": self.miou_convention, "rows": self.rows}

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.with_suffix(".json").write_text(json.dumps(self.to_json(), indent=2))
        with path.with_suffix(".csv").open("w", newline="") as f:
            f.write(f"# axis={self.axis} num_seeds={self.num_seeds}\n")
            f.write(f"# {self.miou_convention}\n")
            writer = csv.writer(f)
            writer.writerow(["setting", "mean_miou", "std_miou"])
            for row in self.rows:
                std = "" if row["std_miou"] is None else f"{row['std_miou']:.6f}"
                writer.writerow([row["setting"], f"{row['mean_miou']:.6f}", std])
        return path.with_suffix(".csv")

    def means(self) -> dict[str, float]:
        return {r["setting"]: r["mean_miou"] for r in self.rows}


ABLATION_AXES = ("guide_mode", "split_location", "hint_regime", "num_hints")


def run_ablation(axis: str, settings: list[dict], backbone: BackboneModel,
                 table: EmbeddingTable, images: torch.Tensor,
                 labels: torch.Tensor, qcfg: QueryGenConfig,
                 num_seeds: int = 5, ignore_label: int = 255) -> AblationReport:
    """Evaluate guided mIoU per setting, averaged over query seeds.

    Each setting dict carries name, guide (a GuideModel or a checkpoint
    path loaded against table), and optionally regime (default find),
    num_hints (default 1; the swept value on the num_hints axis), and
    stacked.
    """
    from .language import load_guide

    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown axis {axis!r}; have {ABLATION_AXES}")
    if num_seeds < 1:
        raise ValueError(f"num_seeds must be >= 1, got {num_seeds}")
    rows = []
    for setting in settings:
        guide = setting["guide"]
        if not isinstance(guide, GuideModel):
            guide = load_guide(guide, table)
        scores = []
        for seed in range(num_seeds):
            result = evaluate_guided(
                backbone, guide, table, images, labels, qcfg,
                regime=setting.get("regime", "find"), seed=seed,
                num_hints=setting.get("num_hints", 1),
                stacked=setting.get("stacked", False),
                ignore_label=ignore_label)
            scores.append(result.miou)
        rows.append({
            "setting": setting["name"],
            "mean_miou": float(np.mean(scores)),
            "std_miou": float(np.std(scores)) if num_seeds > 1 else None,
            "seed_mious": scores,
        })
    return AblationReport(axis=axis, rows=rows, num_seeds=num_seeds)


def guidance_heatmap(a: torch.Tensor, a_guided: torch.Tensor,
                     out_size: tuple[int, int]) -> np.ndarray:
    """Where guidance changed the features: per-position channel L2 of
    the difference, upsampled to out_size, min-max normalized to [0, 1].
    An unchanged feature map yields an all-zero map."""
    if a.shape != a_guided.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs "
                         f"{tuple(a_guided.shape)}")
    diff = (a_guided - a).detach()
    if diff.dim() == 3:
        diff = diff.unsqueeze(0)
    if diff.shape[0] != 1:
        raise ValueError("heatmap is defined for a single image")
    mag = diff.pow(2).sum(dim=-3, keepdim=True).sqrt()
    up = F.interpolate(mag, size=out_size, mode="bilinear",
                       align_corners=False).squeeze(0).squeeze(0)
    up = up.numpy()
    lo, hi = float(up.min()), float(up.max())
    if hi == 0.0:
        return np.zeros_like(up)
    if hi == lo:
        return np.ones_like(up)
    return (up - lo) / (hi - lo)


def export_gamma_vectors(guide: GuideModel, table: EmbeddingTable,
                         class_names: list[str], path: str | Path | None = None,
                         template: str = "find the {c}") -> list[dict]:
    """Per-class semantic scale vector from the canonical find query
    (no location phrase), one CSV row per class."""
    rows = []
    for class_id, name in enumerate(class_names):
        params = guide.params_from_text(template.format(c=name), table)
        rows.append({"class_id": class_id, "class_name": name,
                     "gamma_s": params.gamma_s.tolist()})
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class_id", "class_name"]
                            + [f"g{i}" for i in range(guide.guide_c)])
            for row in rows:
                writer.writerow([row["class_id"], row["class_name"]]
                                + [f"{v:.8f}" for v in row["gamma_s"]])
    return rows


def save_heatmap_png(heatmap: np.ndarray, path: str | Path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray((np.clip(heatmap, 0, 1) * 255).astype(np.uint8), "L")
    img.save(path)
    return path
