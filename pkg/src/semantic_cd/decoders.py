"""SimpleFPN pyramids and the BCD / SCD decode heads."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import FeatureMap
from .errors import GridMismatch, LevelMismatch


def _log2_exact(x: float) -> int:
    n = round(math.log2(x))
    if not math.isclose(2.0**n, x):
        raise ValueError(f"stride ratio {x} is not a power of two")
    return n


class SimpleFPN(nn.Module):
    """Four-level pyramid built from one single-scale map.

    Each level rescales the base map (2x transposed convs up, max-pooling
    down, identity at the base stride) and then applies a 1x1 and a 3x3
    convolution to the shared pyramid width.
    """

    def __init__(self, in_ch: int, width: int, base_stride: int, strides=(4, 8, 16, 32)):
        super().__init__()
        self.strides = list(strides)
        self.levels = nn.ModuleList()
        for s in self.strides:
            n = _log2_exact(base_stride / s)
            ops: list[nn.Module] = []
            ch = in_ch
            if n > 0:
                for k in range(n):
                    out = max(ch // 2, width // 2, 1)
                    ops.append(nn.ConvTranspose2d(ch, out, 2, stride=2))
                    if k < n - 1:
                        ops.append(nn.GELU())
                    ch = out
            elif n < 0:
                ops.append(nn.MaxPool2d(2 ** (-n)))
            ops += [nn.Conv2d(ch, width, 1), nn.GELU(), nn.Conv2d(width, width, 3, padding=1)]
            self.levels.append(nn.Sequential(*ops))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [level(x) for level in self.levels]


class FusionHead(nn.Module):
    """Per-level 3x3 conv, bilinear resize to the finest level, concat, 1x1 projection."""

    def __init__(self, width: int, n_levels: int, out_ch: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Sequential(nn.Conv2d(width, width, 3, padding=1), nn.GELU()) for _ in range(n_levels)
        )
        self.proj = nn.Conv2d(width * n_levels, out_ch, 1)

    def forward(self, levels: list[torch.Tensor], out_size: tuple[int, int]) -> torch.Tensor:
        if len(levels) != len(self.convs):
            raise LevelMismatch(f"expected {len(self.convs)} levels, got {len(levels)}")
        size = levels[0].shape[-2:]
        feats = [
            F.interpolate(conv(x), size=size, mode="bilinear", align_corners=False) if x.shape[-2:] != size else conv(x)
            for conv, x in zip(self.convs, levels)
        ]
        logits = self.proj(torch.cat(feats, dim=1))
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


class BCDDecoder(nn.Module):
    def __init__(self, dim: int, width: int, patch_size: int, strides=(4, 8, 16, 32)):
        super().__init__()
        self.fpn = SimpleFPN(2 * dim, width, patch_size, strides)
        self.head = FusionHead(width, len(strides), 1)

    def pyramid(self, f1: FeatureMap, f2: FeatureMap) -> list[torch.Tensor]:
        if f1.grid != f2.grid:
            raise GridMismatch(f"grids differ: {f1.grid} vs {f2.grid}")
        return self.fpn(torch.cat([f1.to_map(), f2.to_map()], dim=1))

    def decode(self, levels: list[torch.Tensor], out_size) -> torch.Tensor:
        """(B, H, W) change logits."""
        return self.head(levels, out_size)[:, 0]

    def forward(self, f1: FeatureMap, f2: FeatureMap, out_size=None) -> torch.Tensor:
        if out_size is None:
            out_size = (f1.grid[0] * f1.patch_size, f1.grid[1] * f1.patch_size)
        return self.decode(self.pyramid(f1, f2), out_size)


def build_bcd_pyramid(f1: FeatureMap, f2: FeatureMap, decoder: BCDDecoder) -> list[torch.Tensor]:
    return decoder.pyramid(f1, f2)


def decode_bcd(levels: list[torch.Tensor], decoder: BCDDecoder, out_size) -> torch.Tensor:
    return decoder.decode(levels, out_size)


class SCDDecoder(nn.Module):
    """Shared visual pyramid + separate cost pyramid, fused by addition per level."""

    def __init__(self, dim: int, num_classes: int, width: int, patch_size: int, strides=(4, 8, 16, 32)):
        super().__init__()
        self.feature_fpn = SimpleFPN(dim, width, patch_size, strides)
        self.cost_fpn = SimpleFPN(num_classes, width, patch_size, strides)
        self.head = FusionHead(width, len(strides), num_classes)

    def feature_pyramid(self, feat: FeatureMap) -> list[torch.Tensor]:
        return self.feature_fpn(feat.to_map())

    def cost_pyramid(self, cost: torch.Tensor) -> list[torch.Tensor]:
        return self.cost_fpn(cost)

    def fuse_and_decode(self, feat_pyr, cost_pyr, out_size) -> torch.Tensor:
        """(B, C, H, W) semantic logits; a ``None`` cost pyramid means no cost input."""
        if cost_pyr is None:
            return self.head(feat_pyr, out_size)
        if len(feat_pyr) != len(cost_pyr) or any(a.shape != b.shape for a, b in zip(feat_pyr, cost_pyr)):
            raise LevelMismatch("feature and cost pyramids are not level-aligned")
        return self.head([a + b for a, b in zip(feat_pyr, cost_pyr)], out_size)

    def forward(self, feat: FeatureMap, cost: torch.Tensor | None, out_size=None) -> torch.Tensor:
        if out_size is None:
            out_size = (feat.grid[0] * feat.patch_size, feat.grid[1] * feat.patch_size)
        if cost is not None and tuple(cost.shape[-2:]) != feat.grid:
            raise GridMismatch(f"cost volume grid {tuple(cost.shape[-2:])} vs features {feat.grid}")
        cost_pyr = self.cost_pyramid(cost) if cost is not None else None
        return self.fuse_and_decode(self.feature_pyramid(feat), cost_pyr, out_size)


def build_feature_pyramid(feat: FeatureMap, decoder: SCDDecoder):
    return decoder.feature_pyramid(feat)


def build_cost_pyramid(cost: torch.Tensor, decoder: SCDDecoder):
    return decoder.cost_pyramid(cost)


def fuse_and_decode(feat_pyr, cost_pyr, decoder: SCDDecoder, out_size):
    return decoder.fuse_and_decode(feat_pyr, cost_pyr, out_size)


def combine_predictions(bcd_logits: torch.Tensor, scd1: torch.Tensor, scd2: torch.Tensor, threshold: float = 0.5):
    """Gate semantic argmaxes by the binary mask.

    Unchanged pixels get class 0 at both epochs. Changed pixels take the
    argmax over classes 1..C-1; ties go to the lowest index.
    """
    changed = torch.sigmoid(bcd_logits) >= threshold
    out = []
    for logits in (scd1, scd2):
        label = logits[:, 1:].argmax(dim=1) + 1
        out.append(torch.where(changed, label, torch.zeros_like(label)))
    return out[0], out[1]
