"""Dual mutual fusion of RGB and depth stage features.

Layout conventions: every tensor is ``B×C×H×W``; attention products work on
the flattened ``B×C×N`` view with ``N = H·W``.  Position attention maps are
``N×N`` and channel attention maps are ``C×C``.
"""
from __future__ import annotations

import torch
from torch import nn

from .config import FUSION_MODES

EPS = 1e-6


class AttentionSizeError(ValueError):
    pass


def moment_normalize(x: torch.Tensor, exponent: float = -0.5, eps: float = EPS) -> torch.Tensor:
    """Signed power scaling ``sign(x) * (|x| + eps) ** exponent``; zero maps to zero."""
    return torch.sign(x) * (x.abs() + eps).pow(exponent)


def l2_normalize(x: torch.Tensor, dim: int = -1, power: int = 2, eps: float = EPS) -> torch.Tensor:
    """``x / (||x||**power + eps)`` along ``dim``.

    ``power=2`` divides by the squared norm, which makes the map homogeneous
    of degree -1; ``power=1`` is the usual unit-norm scaling.
    """
    sq = x.pow(2).sum(dim, keepdim=True)
    denom = sq if power == 2 else sq.clamp_min(eps * eps).sqrt()
    return x / (denom + eps)


def position_attention(f_rgb, f_d, f_sp, exponent=-0.5, power=2):
    """Position mutual attention products.

    Returns a dict with the ``B×N×N`` maps ``ms_rgb, ms_d, ms_fu`` and the
    ``B×C×H×W`` refined features ``p_rgb, p_d, p_fu``.
    """
    shape = f_sp.shape
    rgb, d, sp = (t.flatten(2) for t in (f_rgb, f_d, f_sp))
    sp_t = sp.transpose(1, 2)
    ms_rgb = moment_normalize(sp_t @ rgb, exponent)
    ms_d = moment_normalize(sp_t @ d, exponent)
    ms_fu = ms_rgb + ms_d
    p_rgb = l2_normalize(rgb @ ms_rgb, 2, power)
    p_d = l2_normalize(d @ ms_d, 2, power)
    p_fu = l2_normalize(sp @ ms_fu, 2, power)
    return {
        "ms_rgb": ms_rgb, "ms_d": ms_d, "ms_fu": ms_fu,
        "p_rgb": p_rgb.view(shape), "p_d": p_d.view(shape), "p_fu": p_fu.view(shape),
    }


def channel_attention(f_rgb, f_d, f_ch, exponent=-0.5, power=2):
    """Channel mutual attention products (``B×C×C`` maps ``mc_*``, features ``c_*``)."""
    shape = f_ch.shape
    rgb, d, ch = (t.flatten(2) for t in (f_rgb, f_d, f_ch))
    ch_t = ch.transpose(1, 2)
    mc_rgb = moment_normalize(rgb @ ch_t, exponent)
    mc_d = moment_normalize(d @ ch_t, exponent)
    mc_fu = mc_rgb + mc_d
    c_rgb = l2_normalize(mc_rgb @ rgb, 2, power)
    c_d = l2_normalize(mc_d @ d, 2, power)
    c_fu = l2_normalize(mc_fu @ ch, 2, power)
    return {
        "mc_rgb": mc_rgb, "mc_d": mc_d, "mc_fu": mc_fu,
        "c_rgb": c_rgb.view(shape), "c_d": c_d.view(shape), "c_fu": c_fu.view(shape),
    }


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


def conv1_conv3(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(ConvBNReLU(in_channels, out_channels, 1),
                         ConvBNReLU(out_channels, out_channels, 3))


class ReduceChannels(nn.Module):
    def __init__(self, in_channels: int, width: int):
        super().__init__()
        if width <= 0:
            raise ValueError(f"fusion width must be positive, got {width}")
        self.body = conv1_conv3(in_channels, width)

    def forward(self, x):
        return self.body(x)


class SpatialFuse(nn.Module):
    """Additive pre-fusion gated by a 7×7 spatial weight map."""

    def __init__(self, width: int):
        super().__init__()
        self.weight_conv = ConvBNReLU(2, 1, 7)
        self.out_conv = ConvBNReLU(width, width, 1)

    def weight_map(self, f_a):
        pooled = torch.cat([f_a.amax(1, keepdim=True), f_a.mean(1, keepdim=True)], 1)
        return self.weight_conv(pooled)

    def forward(self, f_rgb, f_d):
        if f_rgb.shape != f_d.shape:
            raise ValueError(f"shape mismatch {tuple(f_rgb.shape)} vs {tuple(f_d.shape)}")
        f_a = f_rgb + f_d
        return self.out_conv(f_a * self.weight_map(f_a) + f_a)


class ChannelFuse(nn.Module):
    """Concatenation pre-fusion gated by a squeeze-excite style channel vector."""

    def __init__(self, width: int, ratio: int = 16):
        super().__init__()
        hidden = max(2 * width // ratio, 1)
        self.fc = nn.Sequential(nn.Linear(2 * width, hidden), nn.ReLU(inplace=True),
                                nn.Linear(hidden, 2 * width))
        self.out_conv = ConvBNReLU(2 * width, width, 1)

    def weight_vector(self, f_c):
        return self.fc(f_c.amax((2, 3))) + self.fc(f_c.mean((2, 3)))

    def forward(self, f_rgb, f_d):
        if f_rgb.shape != f_d.shape:
            raise ValueError(f"shape mismatch {tuple(f_rgb.shape)} vs {tuple(f_d.shape)}")
        f_c = torch.cat([f_rgb, f_d], 1)
        w = self.weight_vector(f_c)
        return self.out_conv(f_c * w[:, :, None, None])


class PositionMutualFusion(nn.Module):
    def __init__(self, width: int, exponent: float = -0.5, power: int = 2,
                 max_attention_pixels: int = 4096):
        super().__init__()
        self.exponent, self.power = exponent, power
        self.max_attention_pixels = max_attention_pixels
        self.head = conv1_conv3(3 * width, width)

    def attention(self, f_rgb, f_d, f_sp):
        if not f_rgb.shape == f_d.shape == f_sp.shape:
            raise ValueError("position fusion inputs must share B×C×H×W")
        n = f_sp.shape[-1] * f_sp.shape[-2]
        if n > self.max_attention_pixels:
            raise AttentionSizeError(
                f"position attention over {n} pixels exceeds fusion.max_attention_pixels="
                f"{self.max_attention_pixels}; lower the input resolution or raise the cap")
        return position_attention(f_rgb, f_d, f_sp, self.exponent, self.power)

    def forward(self, f_rgb, f_d, f_sp):
        a = self.attention(f_rgb, f_d, f_sp)
        return self.head(torch.cat([a["p_rgb"], a["p_d"], a["p_fu"]], 1))


class ChannelMutualFusion(nn.Module):
    def __init__(self, width: int, exponent: float = -0.5, power: int = 2):
        super().__init__()
        self.exponent, self.power = exponent, power
        self.head = conv1_conv3(3 * width, width)

    def attention(self, f_rgb, f_d, f_ch):
        if not f_rgb.shape == f_d.shape == f_ch.shape:
            raise ValueError("channel fusion inputs must share B×C×H×W")
        return channel_attention(f_rgb, f_d, f_ch, self.exponent, self.power)

    def forward(self, f_rgb, f_d, f_ch):
        a = self.attention(f_rgb, f_d, f_ch)
        return self.head(torch.cat([a["c_rgb"], a["c_d"], a["c_fu"]], 1))


class DualMutualFusion(nn.Module):
    """Fuse one stage of RGB and depth encoder features.

    ``mode`` selects the wiring:

    - ``parallel``: PMF and CMF side by side, outputs summed (the full model)
    - ``serial``: the PMF output replaces the channel pre-fusion as CMF input
    - ``pmf-only`` / ``cmf-only``: a single mutual fusion branch
    - ``concat-only``: concatenation and a 1×1 conv, no mutual attention
    """

    def __init__(self, in_channels: int, width: int, mode: str = "parallel",
                 exponent: float = -0.5, power: int = 2, max_attention_pixels: int = 4096):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; choose from {FUSION_MODES}")
        self.mode, self.width = mode, width
        self.reduce_rgb = ReduceChannels(in_channels, width)
        self.reduce_d = ReduceChannels(in_channels, width)
        if mode in ("parallel", "serial", "pmf-only"):
            self.spatial = SpatialFuse(width)
            self.pmf = PositionMutualFusion(width, exponent, power, max_attention_pixels)
        if mode in ("parallel", "cmf-only"):
            self.channel = ChannelFuse(width)
        if mode in ("parallel", "serial", "cmf-only"):
            self.cmf = ChannelMutualFusion(width, exponent, power)
        if mode == "concat-only":
            self.concat = ConvBNReLU(2 * width, width, 1)

    def branches(self, F_rgb, F_d) -> dict[str, torch.Tensor]:
        """Intermediate fused features keyed ``f_pmf``/``f_cmf`` (those present for the mode)."""
        f_rgb, f_d = self.reduce_rgb(F_rgb), self.reduce_d(F_d)
        out = {}
        if self.mode == "concat-only":
            out["f_concat"] = self.concat(torch.cat([f_rgb, f_d], 1))
            return out
        if hasattr(self, "pmf"):
            out["f_pmf"] = self.pmf(f_rgb, f_d, self.spatial(f_rgb, f_d))
        if self.mode == "serial":
            out["f_cmf"] = self.cmf(f_rgb, f_d, out["f_pmf"])
        elif hasattr(self, "cmf"):
            out["f_cmf"] = self.cmf(f_rgb, f_d, self.channel(f_rgb, f_d))
        return out

    def forward(self, F_rgb, F_d):
        parts = self.branches(F_rgb, F_d)
        if self.mode == "parallel":
            return parts["f_pmf"] + parts["f_cmf"]
        key = {"serial": "f_cmf", "pmf-only": "f_pmf", "cmf-only": "f_cmf",
               "concat-only": "f_concat"}[self.mode]
        return parts[key]
