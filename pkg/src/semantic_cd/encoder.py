"""Bi-temporal ViT encoder with change-semantic filter (BCSF) adapters.

Both images run through one shared backbone. After each configured block the
two token streams meet in a BCSF adapter, which gates every stream by the
cross-temporal difference and adds the result back through a zero-initialised
projection. Adapters are the only trainable part of the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig
from .errors import CheckpointMismatch, ShapeError, ShapeMismatch

ADAPTER_PREFIX = "adapters."
BACKBONE_PREFIX = "backbone."

# CLIP image statistics
_MEAN = (0.48145466, 0.4578275, 0.40821073)
_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class FeatureMap:
    """Token grid ``tokens`` of shape (B, N, D) with ``N == grid[0] * grid[1]``."""

    tokens: torch.Tensor
    grid: tuple[int, int]
    patch_size: int

    @property
    def N(self) -> int:
        return self.tokens.shape[1]

    @property
    def D(self) -> int:
        return self.tokens.shape[2]

    def to_map(self) -> torch.Tensor:
        """(B, D, h', w') layout for convolutional heads."""
        B, N, D = self.tokens.shape
        h, w = self.grid
        return self.tokens.transpose(1, 2).reshape(B, D, h, w)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, causal=False):
        B, N, D = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        return self.out(y.transpose(1, 2).reshape(B, N, D))


class Block(nn.Module):
    """Pre-norm transformer block with global self-attention."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, causal=False):
        x = x + self.attn(self.norm1(x), causal)
        return x + self.mlp(self.norm2(x))


def interpolate_pos_embed(pos: torch.Tensor, old_grid: tuple[int, int], new_grid: tuple[int, int]) -> torch.Tensor:
    if tuple(old_grid) == tuple(new_grid):
        return pos
    D = pos.shape[-1]
    grid = pos.reshape(1, old_grid[0], old_grid[1], D).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=new_grid, mode="bicubic", align_corners=False)
    return grid.permute(0, 2, 3, 1).reshape(1, new_grid[0] * new_grid[1], D)


class ViTBackbone(nn.Module):
    """Plain ViT without a class token; every output token is spatial."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        g = cfg.image_size // cfg.patch_size
        self.pos_grid = (g, g)
        self.patch_embed = nn.Conv2d(3, cfg.dim, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, g * g, cfg.dim) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim)
        self.register_buffer("mean", torch.tensor(_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(_STD).view(1, 3, 1, 1), persistent=False)

    def embed(self, img: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        H, W = img.shape[-2:]
        if H % self.patch_size or W % self.patch_size:
            raise ShapeError(f"image {H}x{W} not divisible by patch size {self.patch_size}")
        x = self.patch_embed((img - self.mean.to(img.dtype)) / self.std.to(img.dtype))
        grid = (x.shape[-2], x.shape[-1])
        x = x.flatten(2).transpose(1, 2)
        return x + interpolate_pos_embed(self.pos_embed, self.pos_grid, grid), grid


class BCSFAdapter(nn.Module):
    """Difference-gated spatial + channel filter shared by both temporal streams.

    With ``d = |T1 - T2|`` the spatial gate is ``sigmoid(spatial(d))`` per token
    and the channel gate is ``sigmoid(channel(mean_tokens(d)))`` per channel.
    Each stream is multiplied by both gates, projected, and added back.
    """

    def __init__(self, dim):
        super().__init__()
        self.spatial = nn.Linear(dim, 1)
        self.channel = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, t1: torch.Tensor, t2: torch.Tensor):
        if t1.shape != t2.shape:
            raise ShapeMismatch(f"token blocks differ: {tuple(t1.shape)} vs {tuple(t2.shape)}")
        diff = (t1 - t2).abs()
        s = torch.sigmoid(self.spatial(diff))  # B, N, 1
        c = torch.sigmoid(self.channel(diff.mean(dim=1, keepdim=True)))  # B, 1, D
        gate = s * c
        return t1 + self.proj(gate * t1), t2 + self.proj(gate * t2)


def apply_bcsf(t1: torch.Tensor, t2: torch.Tensor, adapter: BCSFAdapter):
    return adapter(t1, t2)


class BiTemporalEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ViTBackbone(cfg)
        self.adapters = nn.ModuleDict({str(s): BCSFAdapter(cfg.dim) for s in cfg.adapter_sites})

    @property
    def patch_size(self) -> int:
        return self.cfg.patch_size

    def forward(self, img1: torch.Tensor, img2: torch.Tensor, use_adapters: bool = True):
        if img1.shape != img2.shape:
            raise ShapeMismatch(f"images differ: {tuple(img1.shape)} vs {tuple(img2.shape)}")
        bb = self.backbone
        x1, grid = bb.embed(img1)
        x2, _ = bb.embed(img2)
        # streams run separately through shared weights so identical inputs give bit-identical outputs
        for i, blk in enumerate(bb.blocks):
            x1, x2 = blk(x1), blk(x2)
            key = str(i)
            if use_adapters and key in self.adapters:
                x1, x2 = self.adapters[key](x1, x2)
        f1 = FeatureMap(bb.norm(x1), grid, self.patch_size)
        f2 = FeatureMap(bb.norm(x2), grid, self.patch_size)
        return f1, f2

    def load_pretrained(self, path) -> None:
        """Load backbone weights from a checkpoint file, resizing the positional grid if needed."""
        from .checkpoint import read_checkpoint

        params, header = read_checkpoint(path)
        state = {k[len(BACKBONE_PREFIX):]: v for k, v in params.items() if k.startswith(BACKBONE_PREFIX)}
        if not state:
            state = {k: v for k, v in params.items() if not k.startswith(ADAPTER_PREFIX)}
        own = self.backbone.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointMismatch(f"{path}: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for k, v in state.items():
            if k == "pos_embed" and v.shape != own[k].shape:
                n = int(round(math.sqrt(v.shape[1])))
                if n * n != v.shape[1] or v.shape[2] != own[k].shape[2]:
                    raise CheckpointMismatch(f"{path}: pos_embed {tuple(v.shape)} incompatible")
                state[k] = interpolate_pos_embed(v, (n, n), self.backbone.pos_grid)
            elif v.shape != own[k].shape:
                raise CheckpointMismatch(f"{path}: {k} has shape {tuple(v.shape)}, expected {tuple(own[k].shape)}")
        self.backbone.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items()})


def encode_bitemporal(img1: torch.Tensor, img2: torch.Tensor, encoder: BiTemporalEncoder):
    return encoder(img1, img2)


def backbone_parameter_partition(encoder: BiTemporalEncoder) -> dict[str, set[str]]:
    """Split encoder parameter names into frozen backbone and trainable adapter sets."""
    names = [n for n, _ in encoder.named_parameters()]
    trainable = {n for n in names if n.startswith(ADAPTER_PREFIX)}
    return {"frozen": set(names) - trainable, "trainable": trainable}
