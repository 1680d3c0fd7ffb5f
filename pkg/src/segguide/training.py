"""Training loops: backbone pretraining on one half of the training
data, and guide training on the other half against the frozen backbone
with automatically generated queries and re-weighted cross-entropy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneModel, ModelConfig, build_model
from .dataset import IGNORE_LABEL, ShapesData
from .evaluation import accumulate, miou, new_confusion
from .guiding import GuideMode, apply_guidance
from .language import EmbeddingTable, GuideModel, load_embeddings, save_guide
from .queries import (REGIMES, QueryGenConfig, build_weight_map,
                      sample_regime_query)


def reweighted_loss(logits: torch.Tensor, targets: torch.Tensor,
                    weights: torch.Tensor,
                    ignore_label: int = IGNORE_LABEL) -> torch.Tensor:
    """Mean over all pixels of weight-scaled per-pixel cross-entropy.

    Ignore-labeled pixels carry weight zero; their targets are clamped
    only so the gather is in range.
    """
    valid = targets != ignore_label
    safe = torch.where(valid, targets, torch.zeros_like(targets))
    ce = F.cross_entropy(logits, safe, reduction="none")
    return (ce * weights * valid).mean()


def _epoch_order(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n)


def train_backbone(data: ShapesData, config: ModelConfig | None = None,
                   half: str = "A", epochs: int = 30, batch_size: int = 16,
                   lr: float = 1e-3, seed: int = 0,
                   log_path: str | Path | None = None) -> BackboneModel:
    """Pretrain the segmentation network on one half of the training
    split, then freeze it.  The other half stays unseen for guide
    training."""
    if config is None:
        config = ModelConfig(num_classes=len(data.class_names))
    indices = data.half_indices(half)
    x_all, y_all = data.tensors("train", indices)
    model = build_model(config, seed, data.class_names)
    model.net.train()
    for p in model.net.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    log: list[dict] = []
    step = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for epoch in range(epochs):
            order = _epoch_order(len(indices), rng)
            for lo in range(0, len(order), batch_size):
                idx = torch.from_numpy(order[lo:lo + batch_size])
                logits = model.net(x_all[idx])
                loss = F.cross_entropy(logits, y_all[idx],
                                       ignore_index=IGNORE_LABEL)
                opt.zero_grad()
                loss.backward()
                opt.step()
                log.append({"step": step, "epoch": epoch,
                            "loss": float(loss.detach())})
                step += 1
    model.freeze()
    model.train_half = half
    cm = new_confusion(config.num_classes)
    with torch.no_grad():
        for lo in range(0, min(len(indices), 256), 32):
            pred, _ = model.predict(x_all[lo:lo + 32])
            accumulate(cm, pred.numpy(), y_all[lo:lo + 32].numpy())
    model.train_miou = miou(cm)
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with log_path.open("w") as f:
            for row in log:
                f.write(json.dumps(row) + "\n")
    return model


@dataclass(frozen=True)
class TrainConfig:
    """Guide-training settings.

    dataset_half must be the half the backbone never saw; train_guide
    enforces that when the backbone records its own half.
    """

    hint_regime: str = "find"
    split: str = "s4"
    mode: GuideMode = field(default_factory=GuideMode)
    gru_hidden: int = 128
    embedding_source: str = "hashed"
    embedding_dim: int = 50
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    dataset_half: str = "B"
    grid_n: int = 3
    min_region_pixels: int | None = None

    def __post_init__(self):
        if self.hint_regime not in REGIMES:
            raise ValueError(
                f"unknown regime {self.hint_regime!r}; have {REGIMES}")
        if self.dataset_half not in ("A", "B"):
            raise ValueError(f"dataset_half must be A or B, got "
                             f"{self.dataset_half!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_json(self) -> dict:
        return {
            "hint_regime": self.hint_regime, "split": self.split,
            "mode": self.mode.to_json(), "gru_hidden": self.gru_hidden,
            "embedding_source": self.embedding_source,
            "embedding_dim": self.embedding_dim, "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "seed": self.seed,
            "dataset_half": self.dataset_half, "grid_n": self.grid_n,
            "min_region_pixels": self.min_region_pixels,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "mode" in obj:
            obj["mode"] = GuideMode.from_json(obj["mode"])
        return cls(**obj)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def query_config_for(cfg: TrainConfig, class_names: list[str]) -> QueryGenConfig:
    return QueryGenConfig(grid_n=cfg.grid_n,
                          min_region_pixels=cfg.min_region_pixels,
                          class_names=tuple(class_names))


def train_step(x: torch.Tensor, gt: torch.Tensor, guide: GuideModel,
               backbone: BackboneModel, table: EmbeddingTable,
               qcfg: QueryGenConfig, regime: str,
               rng: np.random.Generator,
               ignore_label: int = IGNORE_LABEL):
    """One batch: predict unguided, sample a query per example, forward
    with text guidance, return the re-weighted cross-entropy.

    Examples without candidates contribute a no-op query (empty text,
    uniform 0.5 weights).  Returns (loss, texts, specs); the caller
    steps the optimizer.
    """
    with torch.no_grad():
        a = backbone.forward_head(x, guide.split)
        pred = backbone.forward_tail(a, guide.split).argmax(dim=-3).numpy()
    gt_np = gt.numpy()
    texts, specs = [], []
    for i in range(x.shape[0]):
        spec, text = sample_regime_query(pred[i], gt_np[i], qcfg, rng, regime)
        specs.append(spec)
        texts.append(text)
    weights = np.stack([
        build_weight_map(pred[i], gt_np[i], specs[i], ignore_label)
        for i in range(x.shape[0])])
    params = guide.params_from_texts(texts, table)
    guided = apply_guidance(a, params, guide.mode, guide.block)
    logits = backbone.forward_tail(guided, guide.split)
    loss = reweighted_loss(logits, gt, torch.from_numpy(weights), ignore_label)
    return loss, texts, specs


def train_guide(backbone: BackboneModel, data: ShapesData, cfg: TrainConfig,
                table: EmbeddingTable | None = None,
                out_path: str | Path | None = None,
                log_path: str | Path | None = None,
                eval_images: torch.Tensor | None = None,
                eval_labels: torch.Tensor | None = None,
                eval_every: int = 0):
    """Train the language guide against the frozen backbone.

    Returns (guide, table, log rows).  Aborts with a diagnostic on a
    non-finite loss.  The backbone and the embedding table are
    checksummed before and after; any drift is a bug and raises.
    """
    if backbone.train_half is not None and backbone.train_half == cfg.dataset_half:
        raise ValueError(
            f"guide half {cfg.dataset_half!r} must differ from the backbone "
            f"pretraining half {backbone.train_half!r}")
    if table is None:
        table = load_embeddings(cfg.embedding_source, cfg.embedding_dim)
    qcfg = query_config_for(cfg, data.class_names)
    indices = data.half_indices(cfg.dataset_half)
    x_all, y_all = data.tensors("train", indices)
    feature_shape = backbone.split_shapes[cfg.split]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        guide = GuideModel(feature_shape, cfg.split, cfg.mode,
                           cfg.gru_hidden, cfg.embedding_dim)
    opt = torch.optim.Adam(guide.trainable_parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    backbone_sum = backbone.parameters_checksum()
    table_sum = table.checksum()

    log: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(len(indices), rng)
        for lo in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[lo:lo + cfg.batch_size])
            loss, texts, _ = train_step(x_all[idx], y_all[idx], guide,
                                        backbone, table, qcfg,
                                        cfg.hint_regime, rng)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"training diverged: loss {value} at step {step} "
                    f"(epoch {epoch}, regime {cfg.hint_regime})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            row = {"step": step, "loss": value, "regime": cfg.hint_regime,
                   "query_text": texts[0]}
            if (eval_every and eval_images is not None
                    and (step + 1) % eval_every == 0):
                row["miou_eval"] = _quick_guided_miou(
                    backbone, guide, table, eval_images, eval_labels,
                    qcfg, cfg.hint_regime)
            log.append(row)
            step += 1
    guide.eval()
    if backbone.parameters_checksum() != backbone_sum:
        raise RuntimeError("backbone weights changed during guide training")
    if table.checksum() != table_sum:
        raise RuntimeError("embedding table changed during guide training")
    if out_path is not None:
        save_guide(guide, table, out_path)
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with log_path.open("w") as f:
            for row in log:
                f.write(json.dumps(row) + "\n")
    return guide, table, log


def _quick_guided_miou(backbone, guide, table, images, labels, qcfg,
                       regime) -> float:
    from .evaluation import evaluate_guided

    with torch.no_grad():
        result = evaluate_guided(backbone, guide, table, images, labels,
                                 qcfg, regime=regime, seed=0)
    return result.miou


def iterative_guide(backbone: BackboneModel, guide: GuideModel,
                    table: EmbeddingTable, x: torch.Tensor, gt: np.ndarray,
                    k: int, qcfg: QueryGenConfig,
                    regime: str = "find_or_remove", seed: int = 0,
                    stacked: bool = False,
                    ignore_label: int = IGNORE_LABEL) -> list[dict]:
    """Guide one image k times, re-deriving the query from the newest
    prediction each turn.

    Default composition swaps each turn's params in on the same base
    features; stacked=True modulates the already-guided features
    instead.  Stops early when no error candidates remain.  Returns
    step dicts {step, text, miou}; step 0 is the unguided prediction.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)

    def score(pred: np.ndarray) -> float:
        cm = new_confusion(backbone.config.num_classes)
        accumulate(cm, pred, gt, ignore_label)
        return miou(cm)

    with torch.no_grad():
        a_base = backbone.forward_head(x, guide.split)
        pred = backbone.forward_tail(a_base, guide.split)
        pred = pred.argmax(dim=-3).squeeze(0).numpy()
    trace = [{"step": 0, "text": None, "miou": score(pred)}]
    a = a_base
    for step in range(1, k + 1):
        spec, text = sample_regime_query(pred, gt, qcfg, rng, regime)
        if spec is None:
            break
        with torch.no_grad():
            params = guide.params_from_text(text, table)
            source = a if stacked else a_base
            a = apply_guidance(source, params, guide.mode, guide.block)
            pred = backbone.forward_tail(a, guide.split)
            pred = pred.argmax(dim=-3).squeeze(0).numpy()
        trace.append({"step": step, "text": text, "miou": score(pred)})
    return trace
