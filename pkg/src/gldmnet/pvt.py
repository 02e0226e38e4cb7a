"""Resolution-preserving pyramid vision transformer stages.

Both variants keep the input's spatial size: the patch embedding runs at
stride 1.  ``v2`` uses a 3×3 overlapping embedding and a depthwise conv in
the MLP; ``v1`` uses a 1×1 (non-overlapping) embedding with a learned
position embedding resized to the input grid.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

# B2 profile, indexed by stage 0..3
PVT_B2 = {
    "dims": (64, 128, 320, 512),
    "heads": (1, 2, 5, 8),
    "mlp_ratios": (8, 8, 4, 4),
    "depths": (3, 4, 6, 3),
    "sr_ratios": (8, 4, 2, 1),
}


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class SRAttention(nn.Module):
    """Multi-head attention with keys/values from a spatially reduced grid."""

    def __init__(self, dim, heads, sr_ratio):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def forward(self, x, h, w):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        if self.sr_ratio > 1:
            grid = x.transpose(1, 2).reshape(b, c, h, w)
            if h < self.sr_ratio or w < self.sr_ratio:
                raise ValueError(f"{h}x{w} grid is smaller than the reduction ratio {self.sr_ratio}")
            x = self.norm(self.sr(grid).flatten(2).transpose(1, 2))
        kv = self.kv(x).reshape(b, -1, 2, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class MLP(nn.Module):
    def __init__(self, dim, hidden, depthwise=True):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden) if depthwise else None
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        x = self.fc1(x)
        if self.dwconv is not None:
            b, n, c = x.shape
            x = self.dwconv(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, sr_ratio, depthwise=True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SRAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, depthwise)

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x), h, w)


class PVTStage(nn.Module):
    """One transformer stage mapping ``B×C×H×W`` to ``B×C×H×W``."""

    def __init__(self, dim, heads, mlp_ratio, depth, sr_ratio, version="v2", pos_grid=8):
        super().__init__()
        self.dim, self.version = dim, version
        if version == "v2":
            self.patch_embed = nn.Conv2d(dim, dim, 3, stride=1, padding=1)
        elif version == "v1":
            self.patch_embed = nn.Conv2d(dim, dim, 1, stride=1)
            self.pos_embed = nn.Parameter(torch.zeros(1, dim, pos_grid, pos_grid))
        else:
            raise ValueError(f"unknown transformer version {version!r}")
        self.embed_norm = nn.LayerNorm(dim)
        self.blocks = nn.ModuleList(
            Block(dim, heads, mlp_ratio, sr_ratio, depthwise=version == "v2") for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.apply(_init_weights)
        if version == "v1":
            nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, x):
        if x.shape[1] != self.dim:
            raise ValueError(f"stage expects {self.dim} channels, got {x.shape[1]}")
        b, _, h, w = x.shape
        x = self.patch_embed(x)
        if self.version == "v1":
            x = x + F.interpolate(self.pos_embed, size=(h, w), mode="bilinear", align_corners=False)
        x = self.embed_norm(x.flatten(2).transpose(1, 2))
        for blk in self.blocks:
            x = blk(x, h, w)
        return self.norm(x).transpose(1, 2).reshape(b, self.dim, h, w)


def make_stage(index: int, version: str = "v2", dim: int | None = None) -> PVTStage:
    """Stage ``index`` (0-based) of the B2 profile, optionally at a different width."""
    p = PVT_B2
    dim = dim or p["dims"][index]
    heads = p["heads"][index]
    if dim % heads:
        heads = 1
    return PVTStage(dim, heads, p["mlp_ratios"][index], p["depths"][index],
                    p["sr_ratios"][index], version)
