"""Guiding block: feature-wise affine modulation of activation volumes.

The block multiplies a feature map A of shape (C, H, W) by
``1 + alpha_h + beta_w + gamma_s_c`` and adds a per-channel bias
``gamma_b_c``.  ``alpha``/``beta`` carry spatial attention along rows and
columns, ``gamma_s``/``gamma_b`` carry semantic (per-channel) attention.
The all-zeros parameter value is the exact identity.

Everything here is a pure, differentiable function of its tensor inputs,
so the same code path serves the energy-minimization guider and the
trained language guide.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn

VARIANTS = ("channel_only", "spatio_semantic")
WRAPPINGS = ("direct", "residual_block")


@dataclass
class GuidingParams:
    """The guide's full control surface: alpha (rows), beta (columns),
    gamma_s (channel scale), gamma_b (channel bias).

    Vectors may carry a leading batch dimension; all application code
    broadcasts accordingly.
    """

    alpha: torch.Tensor
    beta: torch.Tensor
    gamma_s: torch.Tensor
    gamma_b: torch.Tensor

    @classmethod
    def zeros(cls, h: int, w: int, c: int, dtype=torch.float32,
              requires_grad: bool = False) -> "GuidingParams":
        def z(n):
            return torch.zeros(n, dtype=dtype, requires_grad=requires_grad)

        return cls(z(h), z(w), z(c), z(c))

    @classmethod
    def from_flat(cls, flat: torch.Tensor, h: int, w: int, c: int) -> "GuidingParams":
        """Split a flat vector (or batch of vectors) laid out as
        alpha ++ beta ++ gamma_s ++ gamma_b."""
        if flat.shape[-1] != h + w + 2 * c:
            raise ValueError(
                f"flat parameter vector has length {flat.shape[-1]}, "
                f"expected {h + w + 2 * c} (h={h}, w={w}, c={c})")
        alpha, beta, gamma_s, gamma_b = torch.split(flat, [h, w, c, c], dim=-1)
        return cls(alpha, beta, gamma_s, gamma_b)

    def tensors(self) -> list[torch.Tensor]:
        return [self.alpha, self.beta, self.gamma_s, self.gamma_b]

    def detach(self) -> "GuidingParams":
        return GuidingParams(*[t.detach() for t in self.tensors()])

    def clone(self) -> "GuidingParams":
        return GuidingParams(*[t.detach().clone() for t in self.tensors()])

    def is_zero(self) -> bool:
        return all(not t.detach().abs().any() for t in self.tensors())

    def norms(self) -> dict[str, float]:
        return {
            "alpha": float(self.alpha.detach().norm()),
            "beta": float(self.beta.detach().norm()),
            "gamma_s": float(self.gamma_s.detach().norm()),
            "gamma_b": float(self.gamma_b.detach().norm()),
        }

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha.detach().flatten().tolist(),
            "beta": self.beta.detach().flatten().tolist(),
            "gamma_s": self.gamma_s.detach().flatten().tolist(),
            "gamma_b": self.gamma_b.detach().flatten().tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GuidingParams":
        return cls(*[torch.tensor(obj[k], dtype=torch.float32)
                     for k in ("alpha", "beta", "gamma_s", "gamma_b")])

    def dumps(self) -> str:
        return json.dumps(self.to_json())


@dataclass(frozen=True)
class GuideMode:
    """How guidance is applied: which affine rule and whether it runs
    inside a residual bottleneck block."""

    variant: str = "spatio_semantic"
    wrapping: str = "direct"
    residual_channels: int = 256

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.wrapping not in WRAPPINGS:
            raise ValueError(f"unknown wrapping {self.wrapping!r}, expected one of {WRAPPINGS}")
        if self.residual_channels <= 0:
            raise ValueError("residual_channels must be positive")

    def guided_channels(self, feature_channels: int) -> int:
        """Channel count the gamma vectors must match under this mode."""
        if self.wrapping == "residual_block":
            return self.residual_channels
        return feature_channels

    def to_json(self) -> dict:
        return {"variant": self.variant, "wrapping": self.wrapping,
                "residual_channels": self.residual_channels}

    @classmethod
    def from_json(cls, obj: dict) -> "GuideMode":
        return cls(**obj)


def _resample_1d(v: torch.Tensor, n: int) -> torch.Tensor:
    """Endpoint-aligned linear resampling along the last dimension.

    First and last source entries map exactly onto the first and last
    target positions.  When lengths already match, the input is returned
    unchanged (bit-identical).  Differentiable in v.
    """
    src = v.shape[-1]
    if src == 0:
        raise ValueError("cannot resample a zero-length vector")
    if n < 1:
        raise ValueError("target length must be >= 1")
    if src == n:
        return v
    if src == 1:
        return v.expand(*v.shape[:-1], n)
    if n == 1:
        return v[..., :1]
    pos = torch.arange(n, dtype=v.dtype) * (src - 1) / (n - 1)
    lo = pos.floor().long().clamp(max=src - 2)
    frac = (pos - lo.to(v.dtype)).to(v.dtype)
    left = v[..., lo]
    right = v[..., lo + 1]
    # lerp keeps constants exact and both endpoints bit-exact
    return torch.lerp(left, right, frac)


def resample_spatial_vectors(alpha: torch.Tensor, beta: torch.Tensor,
                             h_target: int, w_target: int):
    """Resize alpha/beta to a feature map's spatial extent by
    endpoint-aligned linear interpolation."""
    return _resample_1d(alpha, h_target), _resample_1d(beta, w_target)


def _check_finite(params: GuidingParams) -> None:
    for name, t in zip(("alpha", "beta", "gamma_s", "gamma_b"), params.tensors()):
        if not torch.isfinite(t).all():
            raise ValueError(f"guiding parameter {name} contains non-finite values")


def apply_channel_guidance(a: torch.Tensor, gamma_s: torch.Tensor,
                           gamma_b: torch.Tensor) -> torch.Tensor:
    """Per-channel affine rule: A'_c = (1 + gamma_s_c) * A_c + gamma_b_c.

    ``a`` has shape (..., C, H, W); gamma vectors have length C (with an
    optional leading batch dimension).
    """
    c = a.shape[-3]
    if gamma_s.shape[-1] != c or gamma_b.shape[-1] != c:
        raise ValueError(
            f"gamma length mismatch: feature map has {c} channels, "
            f"got gamma_s={gamma_s.shape[-1]}, gamma_b={gamma_b.shape[-1]}")
    gs = gamma_s[..., :, None, None]
    gb = gamma_b[..., :, None, None]
    return (1 + gs) * a + gb


def apply_full_guidance(a: torch.Tensor, params: GuidingParams) -> torch.Tensor:
    """Spatio-semantic rule:
    A'_{h,w,c} = (1 + alpha_h + beta_w + gamma_s_c) * A_{h,w,c} + gamma_b_c.

    alpha/beta are resampled to the feature map's H and W first, so the
    same parameter vectors drive maps of any spatial resolution.
    """
    _check_finite(params)
    c, h, w = a.shape[-3:]
    if params.gamma_s.shape[-1] != c or params.gamma_b.shape[-1] != c:
        raise ValueError(
            f"gamma length mismatch: feature map has {c} channels, "
            f"got gamma_s={params.gamma_s.shape[-1]}, gamma_b={params.gamma_b.shape[-1]}")
    alpha, beta = resample_spatial_vectors(params.alpha, params.beta, h, w)
    al = alpha[..., None, :, None]
    be = beta[..., None, None, :]
    gs = params.gamma_s[..., :, None, None]
    gb = params.gamma_b[..., :, None, None]
    return (1 + al + be + gs) * a + gb


class ResidualGuideBlock(nn.Module):
    """Residual wrapper around the modulation: 1x1 conv in, modulate,
    ReLU, 1x1 conv out, plus skip.

    The output projection is zero-initialized so that zero guiding
    parameters leave the wrapped feature map exactly unchanged.
    """

    def __init__(self, channels: int, residual_channels: int = 256):
        super().__init__()
        self.channels = channels
        self.residual_channels = residual_channels
        self.conv_in = nn.Conv2d(channels, residual_channels, kernel_size=1)
        self.conv_out = nn.Conv2d(residual_channels, channels, kernel_size=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)


def apply_guidance(a: torch.Tensor, params: GuidingParams, mode: GuideMode,
                   block: ResidualGuideBlock | None = None) -> torch.Tensor:
    """Dispatch the configured guiding rule onto a feature map.

    direct: the affine rule hits A itself.
    residual_block: A + conv_out(relu(modulate(conv_in(A)))); the gamma
    vectors then size to ``mode.residual_channels``.
    """
    batched = a.dim() == 4
    if not batched:
        a = a.unsqueeze(0)

    def modulate(x):
        if mode.variant == "channel_only":
            _check_finite(params)
            return apply_channel_guidance(x, params.gamma_s, params.gamma_b)
        return apply_full_guidance(x, params)

    if mode.wrapping == "direct":
        out = modulate(a)
    else:
        if block is None:
            raise ValueError("residual_block wrapping requires block weights")
        if block.channels != a.shape[-3]:
            raise ValueError(
                f"residual block projects {block.channels} channels, "
                f"feature map has {a.shape[-3]}")
        inner = block.conv_in(a)
        out = a + block.conv_out(torch.relu(modulate(inner)))

    return out if batched else out.squeeze(0)
