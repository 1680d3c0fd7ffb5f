"""Encoder-decoder segmentation backbone with named split points.

The network is a plain chain of stages so that it decomposes losslessly
into a head and a tail at every split point: forward(x) and
forward_tail(forward_head(x, s), s) run the identical op sequence and
therefore agree bit-exactly.  Weights are frozen after pre-training; all
guiding happens on activations, never on these parameters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .guiding import GuideMode, GuidingParams, ResidualGuideBlock, apply_guidance


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    num_classes: int = 10
    channel_widths: tuple[int, ...] = (32, 64, 128, 128)
    decoder_widths: tuple[int, ...] = (64, 32, 16, 16)
    split_points: tuple[str, ...] = ("s1", "s2", "s3", "s4")

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.split_points) < 3:
            raise ValueError("need at least 3 split points")
        if len(set(self.split_points)) != len(self.split_points):
            raise ValueError("split point names must be unique")
        if any(not name for name in self.split_points):
            raise ValueError("split point names must be non-empty")
        if len(self.split_points) != len(self.channel_widths):
            raise ValueError(
                f"{len(self.channel_widths)} channel widths but "
                f"{len(self.split_points)} split points; one split sits after "
                "each encoder stage")
        if len(self.decoder_widths) != len(self.channel_widths):
            raise ValueError("decoder_widths must match encoder stage count")
        h, w = self.split_shapes()[self.split_points[-1]][1:]
        if h < 4 or w < 4:
            raise ValueError(
                f"deepest split would be {h}x{w}; every split needs H, W >= 4")

    def split_shapes(self) -> dict[str, tuple[int, int, int]]:
        """(C, H, W) of the activation volume at each split point."""
        h, w = self.input_size
        shapes = {}
        for name, c in zip(self.split_points, self.channel_widths):
            h, w = (h + 1) // 2, (w + 1) // 2
            shapes[name] = (c, h, w)
        return shapes

    def to_json(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "num_classes": self.num_classes,
            "channel_widths": list(self.channel_widths),
            "decoder_widths": list(self.decoder_widths),
            "split_points": list(self.split_points),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(
            input_size=tuple(obj["input_size"]),
            num_classes=obj["num_classes"],
            channel_widths=tuple(obj["channel_widths"]),
            decoder_widths=tuple(obj["decoder_widths"]),
            split_points=tuple(obj["split_points"]),
        )


def _encoder_stage(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(),
        nn.Conv2d(c_out, c_out, 3, stride=2, padding=1), nn.ReLU(),
    )


class _Decoder(nn.Module):
    def __init__(self, c_in: int, widths: tuple[int, ...], num_classes: int,
                 out_size: tuple[int, int]):
        super().__init__()
        self.out_size = out_size
        layers = []
        c = c_in
        for c_out in widths:
            layers += [
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(c, c_out, 3, padding=1), nn.ReLU(),
            ]
            c = c_out
        self.body = nn.Sequential(*layers)
        self.classifier = nn.Conv2d(c, num_classes, 1)

    def forward(self, x):
        x = self.body(x)
        if x.shape[-2:] != self.out_size:
            x = F.interpolate(x, size=self.out_size, mode="bilinear",
                              align_corners=False)
        return self.classifier(x)


class _Net(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = config.channel_widths
        stages = []
        c = 3
        for c_out in widths:
            stages.append(_encoder_stage(c, c_out))
            c = c_out
        self.stages = nn.ModuleList(stages)
        self.decoder = _Decoder(c, config.decoder_widths, config.num_classes,
                                config.input_size)

    def forward(self, x, start: int = 0):
        for stage in list(self.stages)[start:]:
            x = stage(x)
        return self.decoder(x)


class BackboneModel:
    """Frozen segmentation network plus its head/tail split machinery."""

    def __init__(self, config: ModelConfig, net: _Net,
                 class_names: list[str] | None = None):
        if class_names is None:
            class_names = [f"class_{i}" for i in range(config.num_classes)]
        if len(class_names) != config.num_classes:
            raise ValueError("class_names length must equal num_classes")
        self.config = config
        self.net = net
        self.class_names = list(class_names)
        self.split_shapes = config.split_shapes()
        self.train_miou: float | None = None
        self.train_half: str | None = None
        self.net.eval()

    # -- split plumbing ------------------------------------------------

    def _split_index(self, split: str) -> int:
        try:
            return self.config.split_points.index(split)
        except ValueError:
            raise KeyError(
                f"unknown split point {split!r}; "
                f"have {list(self.config.split_points)}") from None

    def freeze(self) -> None:
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()

    def parameters_checksum(self) -> str:
        digest = hashlib.blake2b(digest_size=16)
        state = self.net.state_dict()
        for key in sorted(state):
            digest.update(key.encode())
            digest.update(state[key].detach().cpu().numpy().tobytes())
        return digest.hexdigest()

    # -- forward passes ------------------------------------------------

    def _check_input(self, x: torch.Tensor) -> tuple[torch.Tensor, bool]:
        batched = x.dim() == 4
        if not batched:
            x = x.unsqueeze(0)
        h, w = self.config.input_size
        if x.shape[-3:] != (3, h, w):
            raise ValueError(
                f"expected input of shape (3, {h}, {w}), got {tuple(x.shape[-3:])}")
        return x, batched

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Full pass: class logits at input resolution."""
        x, batched = self._check_input(x)
        out = self.net(x)
        return out if batched else out.squeeze(0)

    def forward_head(self, x: torch.Tensor, split: str) -> torch.Tensor:
        idx = self._split_index(split)
        x, batched = self._check_input(x)
        for stage in list(self.net.stages)[: idx + 1]:
            x = stage(x)
        return x if batched else x.squeeze(0)

    def forward_tail(self, a: torch.Tensor, split: str) -> torch.Tensor:
        idx = self._split_index(split)
        batched = a.dim() == 4
        if not batched:
            a = a.unsqueeze(0)
        expected = self.split_shapes[split]
        if tuple(a.shape[-3:]) != expected:
            raise ValueError(
                f"feature map shape {tuple(a.shape[-3:])} does not match "
                f"split {split!r} which produces {expected}")
        out = self.net(a, start=idx + 1)
        return out if batched else out.squeeze(0)

    def predict(self, x: torch.Tensor):
        """(label map, posteriors).  Posteriors are per-pixel softmax."""
        with torch.no_grad():
            logits = self.forward(x)
            post = torch.softmax(logits, dim=-3)
            labels = post.argmax(dim=-3)
        return labels, post

    def guided_forward(self, x: torch.Tensor, split: str, params: GuidingParams,
                       mode: GuideMode | None = None,
                       block: ResidualGuideBlock | None = None) -> torch.Tensor:
        """head -> guiding block -> tail, returning logits."""
        if mode is None:
            mode = GuideMode()
        a = self.forward_head(x, split)
        return self.forward_tail(apply_guidance(a, params, mode, block), split)

    def guided_predict(self, x: torch.Tensor, split: str, params: GuidingParams,
                       mode: GuideMode | None = None,
                       block: ResidualGuideBlock | None = None):
        with torch.no_grad():
            logits = self.guided_forward(x, split, params, mode, block)
            post = torch.softmax(logits, dim=-3)
            labels = post.argmax(dim=-3)
        return labels, post


def build_model(config: ModelConfig, seed: int,
                class_names: list[str] | None = None) -> BackboneModel:
    """Deterministically initialized model; same (config, seed) gives
    bit-identical weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _Net(config)
    return BackboneModel(config, net, class_names)


def save_checkpoint(model: BackboneModel, path: str | Path) -> Path:
    """Weights file plus a JSON sidecar carrying the compatibility
    contract (config, class names, split shapes, train mIoU)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.net.state_dict(), path)
    sidecar = {
        "config": model.config.to_json(),
        "class_names": model.class_names,
        "split_shapes": {k: list(v) for k, v in model.split_shapes.items()},
        "train_miou": model.train_miou,
        "train_half": model.train_half,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_checkpoint(path: str | Path) -> BackboneModel:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    config = ModelConfig.from_json(sidecar["config"])
    net = _Net(config)
    net.load_state_dict(torch.load(path, weights_only=True))
    model = BackboneModel(config, net, sidecar["class_names"])
    model.train_miou = sidecar.get("train_miou")
    model.train_half = sidecar.get("train_half")
    model.freeze()
    return model
