"""Hint-driven guiding by gradient descent.

The network stays frozen; only the guiding parameters move.  The loss
is the mean per-pixel cross-entropy over the hinted pixels, optimized
with momentum SGD from zeros (or from a warm start when hints
accumulate across turns).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneModel
from .guiding import GuideMode, GuidingParams, ResidualGuideBlock, apply_guidance

# Pixel hints default to channel-only modulation: the spatial row and
# column terms would spread a single pixel's correction across its whole
# row and column, flipping unrelated regions.
DEFAULT_HINT_MODE = GuideMode(variant="channel_only")


@dataclass
class PixelHint:
    """Ground-truth class labels at chosen pixel positions.

    positions: (N, 2) int array of (row, col); classes: (N,) int array.
    """

    positions: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError(f"positions must be (N, 2), got {self.positions.shape}")
        if self.classes.shape != (self.positions.shape[0],):
            raise ValueError(
                f"classes must be ({self.positions.shape[0]},), "
                f"got {self.classes.shape}")
        if len(self) and (self.positions < 0).any():
            raise ValueError("negative pixel position")
        if len(self) and (self.classes < 0).any():
            raise ValueError("negative class id")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "PixelHint":
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))

    def merged(self, other: "PixelHint") -> "PixelHint":
        """Combine two hint sets; at a repeated pixel the newer class wins."""
        seen: dict[tuple[int, int], int] = {}
        for pos, cls in zip(self.positions, self.classes):
            seen[(int(pos[0]), int(pos[1]))] = int(cls)
        for pos, cls in zip(other.positions, other.classes):
            seen[(int(pos[0]), int(pos[1]))] = int(cls)
        if not seen:
            return PixelHint.empty()
        return PixelHint(np.array(list(seen), dtype=np.int64),
                         np.array(list(seen.values()), dtype=np.int64))

    def to_json(self) -> dict:
        return {"positions": self.positions.tolist(),
                "classes": self.classes.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "PixelHint":
        return cls(np.array(data["positions"], dtype=np.int64).reshape(-1, 2),
                   np.array(data["classes"], dtype=np.int64))


@dataclass(frozen=True)
class GuideOptConfig:
    """Momentum-SGD settings for hint optimization.

    stop_loss is per hinted pixel; iteration stops early once the mean
    hint cross-entropy falls below it.  The defaults take few, small
    steps so the parameters stay near zero: a hinted pixel is nudged
    toward its class without redrawing distant regions.

    iterations_growth scales the budget with the evidence: each hint
    beyond the first grows the iteration cap by that fraction of
    max_iterations (rounded).  A lone hint should not redraw the
    picture, so it gets the small base budget; a dozen corroborating
    hints can safely be fit harder.
    """

    lr: float = 0.01
    momentum: float = 0.9
    max_iterations: int = 6
    stop_loss: float = 0.3
    iterations_growth: float = 0.16

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.max_iterations < 0:
            raise ValueError(
                f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.stop_loss < 0:
            raise ValueError(f"stop_loss must be >= 0, got {self.stop_loss}")
        if self.iterations_growth < 0:
            raise ValueError(
                f"iterations_growth must be >= 0, got {self.iterations_growth}")

    def iteration_budget(self, num_hints: int) -> int:
        """Iteration cap when fitting num_hints pixel hints."""
        scale = 1.0 + self.iterations_growth * max(0, num_hints - 1)
        return int(round(self.max_iterations * scale))

    def to_json(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum,
                "max_iterations": self.max_iterations,
                "stop_loss": self.stop_loss,
                "iterations_growth": self.iterations_growth}

    @classmethod
    def from_json(cls, data: dict) -> "GuideOptConfig":
        return cls(**data)


@dataclass
class OptimizeResult:
    params: GuidingParams
    loss_trace: list[float]
    iterations: int
    converged: bool


def hint_loss(logits: torch.Tensor, hints: PixelHint) -> torch.Tensor:
    """Mean cross-entropy over the hinted pixels of a (K, H, W) logit map."""
    if logits.dim() == 4:
        logits = logits.squeeze(0)
    rows = torch.from_numpy(hints.positions[:, 0])
    cols = torch.from_numpy(hints.positions[:, 1])
    picked = logits[:, rows, cols].transpose(0, 1)
    target = torch.from_numpy(hints.classes)
    return F.cross_entropy(picked, target)


def optimize_guidance(backbone: BackboneModel, split: str, x: torch.Tensor,
                      hints: PixelHint, cfg: GuideOptConfig | None = None,
                      mode: GuideMode | None = None,
                      block: ResidualGuideBlock | None = None,
                      init: GuidingParams | None = None) -> OptimizeResult:
    """Fit guiding parameters to pixel hints for one image.

    Returns the best iterate seen (by hint loss), with the full loss
    trace.  The feature map is computed once and detached; gradients
    flow only through the guiding parameters.
    """
    if cfg is None:
        cfg = GuideOptConfig()
    if mode is None:
        mode = DEFAULT_HINT_MODE
    if len(hints) == 0:
        raise ValueError("need at least one pixel hint")
    h, w = x.shape[-2:]
    if (hints.positions[:, 0] >= h).any() or (hints.positions[:, 1] >= w).any():
        raise ValueError("pixel hint outside the image")
    if (hints.classes >= backbone.config.num_classes).any():
        raise ValueError("hint class outside the model's label set")

    with torch.no_grad():
        a = backbone.forward_head(x, split)
    c = mode.guided_channels(a.shape[-3])
    ph, pw = (a.shape[-2], a.shape[-1])
    if init is None:
        params = GuidingParams.zeros(ph, pw, c, requires_grad=True)
    else:
        params = GuidingParams(
            *[t.detach().clone().requires_grad_(True) for t in init.tensors()])
    opt = torch.optim.SGD(params.tensors(), lr=cfg.lr, momentum=cfg.momentum)

    def evaluate() -> torch.Tensor:
        guided = apply_guidance(a, params, mode, block)
        return hint_loss(backbone.forward_tail(guided, split), hints)

    trace: list[float] = []
    best_loss = float("inf")
    best = params.detach()
    converged = False
    steps = 0
    budget = cfg.iteration_budget(len(hints))
    for it in range(budget + 1):
        loss = evaluate()
        value = float(loss.detach())
        if not np.isfinite(value):
            raise FloatingPointError(
                f"non-finite hint loss at iteration {it}")
        trace.append(value)
        if value < best_loss:
            best_loss = value
            best = params.detach()
        if value < cfg.stop_loss:
            converged = True
            break
        if it == budget:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        steps += 1
    return OptimizeResult(params=best, loss_trace=trace, iterations=steps,
                          converged=converged)


def select_query_pixel(posteriors: np.ndarray | torch.Tensor,
                       asked: set[tuple[int, int]] | None = None
                       ) -> tuple[int, int]:
    """Pixel with the smallest top-1 vs top-2 posterior margin.

    Already-asked pixels are excluded; ties break row-major.
    """
    if isinstance(posteriors, torch.Tensor):
        posteriors = posteriors.detach().cpu().numpy()
    if posteriors.ndim == 4:
        posteriors = posteriors[0]
    k, h, w = posteriors.shape
    if k < 2:
        raise ValueError("need at least two classes to compute a margin")
    part = np.partition(posteriors, k - 2, axis=0)
    margin = part[k - 1] - part[k - 2]
    if asked:
        for r, c in asked:
            margin[r, c] = np.inf
    if not np.isfinite(margin).any():
        raise ValueError("every pixel has already been asked")
    flat = int(np.argmin(margin))
    return (flat // w, flat % w)


@dataclass
class ProtocolStep:
    question: int
    pixel: tuple[int, int] | None
    answer: int | None
    miou: float
    loss_trace: list[float] = field(default_factory=list)


@dataclass
class ProtocolTrace:
    steps: list[ProtocolStep]

    def mious(self) -> list[float]:
        return [s.miou for s in self.steps]

    def write_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as f:
            for s in self.steps:
                f.write(json.dumps({
                    "q": s.question,
                    "pixel": list(s.pixel) if s.pixel else None,
                    "answer": s.answer,
                    "miou": s.miou,
                    "loss_trace": s.loss_trace,
                }) + "\n")


def run_question_protocol(backbone: BackboneModel, split: str,
                          x: torch.Tensor, gt: np.ndarray, q_max: int,
                          cfg: GuideOptConfig | None = None,
                          mode: GuideMode | None = None,
                          ignore_label: int = 255) -> ProtocolTrace:
    """Ask q_max uncertainty-picked pixel questions, answered from gt.

    Hints accumulate and each round warm-starts from the previous
    parameters.  Step 0 records the unguided prediction.  A question
    landing on an ignore-labeled pixel has no true class, so the oracle
    declines: the question is spent, no hint is added, the prediction
    stands.
    """
    from .evaluation import accumulate, miou, new_confusion

    if cfg is None:
        cfg = GuideOptConfig()
    if mode is None:
        mode = DEFAULT_HINT_MODE

    def score(labels: np.ndarray) -> float:
        cm = new_confusion(backbone.config.num_classes)
        accumulate(cm, labels, gt, ignore_label)
        return miou(cm)

    with torch.no_grad():
        labels_t, posteriors_t = backbone.predict(x)
    labels = labels_t.squeeze(0).numpy()
    steps = [ProtocolStep(question=0, pixel=None, answer=None,
                          miou=score(labels))]
    hints = PixelHint.empty()
    asked: set[tuple[int, int]] = set()
    params: GuidingParams | None = None
    posteriors = posteriors_t.squeeze(0).numpy()
    for q in range(1, q_max + 1):
        pixel = select_query_pixel(posteriors, asked)
        asked.add(pixel)
        answer = int(gt[pixel])
        if answer == ignore_label:
            steps.append(ProtocolStep(question=q, pixel=pixel, answer=None,
                                      miou=steps[-1].miou))
            continue
        hints = hints.merged(PixelHint(np.array([pixel]), np.array([answer])))
        result = optimize_guidance(backbone, split, x, hints, cfg, mode,
                                   init=params)
        params = result.params
        with torch.no_grad():
            labels_t, posteriors_t = backbone.guided_predict(
                x, split, params, mode)
        labels = labels_t.squeeze(0).numpy()
        posteriors = posteriors_t.squeeze(0).numpy()
        steps.append(ProtocolStep(question=q, pixel=pixel, answer=answer,
                                  miou=score(labels),
                                  loss_trace=result.loss_trace))
    return ProtocolTrace(steps)
