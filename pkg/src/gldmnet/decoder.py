"""Cascade transformer-infused reconstruction decoder.

Per stage ``i`` (1 = finest, 4 = coarsest):

1. ``f_t = Trans_i(F_fus)``, then the cascade refinement
   ``f_t = Conv3(Conv1(Cat(f_t, F_fus)))``
2. for ``i < 4``: ``f_att = Conv3(Conv1(CA(Cat(up(f_t[i+1]), ..., up(f_t[4])))))``
   and ``f_res = f_att * f_t + f_t``; stage 4 passes ``f_t`` through
3. top-down: ``f_out[4] = Conv3(Conv1(f_res[4]))`` and
   ``f_out[i] = Conv3(Conv1(Cat(f_res[i], up(f_out[i+1]))))``
4. heads: ``logits[i] = up_ori(Conv1(Conv3(f_out[i])))``
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import TRANSFORMER_MODES
from .fusion import ConvBNReLU, conv1_conv3
from .pvt import make_stage


def up(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize with half-pixel sampling."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class ChannelAttention(nn.Module):
    """Squeeze-excite gate from avg- and max-pooled descriptors through a shared bottleneck."""

    def __init__(self, channels: int, ratio: int = 16):
        super().__init__()
        hidden = max(channels // ratio, 1)
        self.fc = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.ReLU(inplace=True),
                                nn.Conv2d(hidden, channels, 1))

    def forward(self, x):
        gate = self.fc(F.adaptive_avg_pool2d(x, 1)) + self.fc(F.adaptive_max_pool2d(x, 1))
        return x * torch.sigmoid(gate)


class CascadeRefine(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = conv1_conv3(2 * width, width)

    def forward(self, f_t, F_fus):
        if f_t.shape != F_fus.shape:
            raise ValueError(f"shape mismatch {tuple(f_t.shape)} vs {tuple(F_fus.shape)}")
        return self.body(torch.cat([f_t, F_fus], 1))


class DenseAggregate(nn.Module):
    """Upsample every coarser refined feature to this stage, concatenate, gate, project."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.ca = ChannelAttention(in_channels)
        self.body = conv1_conv3(in_channels, width)

    def forward(self, higher: Sequence[torch.Tensor], size) -> torch.Tensor:
        if not higher:
            raise ValueError("dense aggregation needs at least one coarser stage")
        return self.body(self.ca(torch.cat([up(h, size) for h in higher], 1)))


def residual_modulate(f_att: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
    if f_att.shape != f_t.shape:
        raise ValueError(f"shape mismatch {tuple(f_att.shape)} vs {tuple(f_t.shape)}")
    return f_att * f_t + f_t


class ProgressiveDecode(nn.Module):
    def __init__(self, widths: Sequence[int]):
        super().__init__()
        w = list(widths)
        self.stages = nn.ModuleList(
            [conv1_conv3(w[i] + w[i + 1], w[i]) for i in range(3)] + [conv1_conv3(w[3], w[3])])

    def forward(self, f_res: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        outs = [None] * 4
        outs[3] = self.stages[3](f_res[3])
        for i in (2, 1, 0):
            prev = up(outs[i + 1], f_res[i].shape[-2:])
            outs[i] = self.stages[i](torch.cat([f_res[i], prev], 1))
        return outs


class SaliencyHead(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv3 = ConvBNReLU(width, width, 3)
        self.conv1 = nn.Conv2d(width, 1, 1)

    def forward(self, x, size):
        """Single-channel logits resized to ``size``."""
        return up(self.conv1(self.conv3(x)), size)


class CTRDecoder(nn.Module):
    """Decoder over four fused stages.

    ``transformer`` picks the per-stage transformer (``pvtv2``, ``pvtv1`` or
    ``off``); with ``off`` the fused features go straight to reconstruction.
    ``reconstruction="off"`` attaches the heads to the refined features.
    """

    def __init__(self, widths: Sequence[int] = (64, 128, 320, 512),
                 transformer: str = "pvtv2", reconstruction: str = "on"):
        super().__init__()
        if transformer not in TRANSFORMER_MODES:
            raise ValueError(f"unknown transformer mode {transformer!r}")
        self.widths = tuple(widths)
        self.transformer = transformer
        self.reconstruction = reconstruction == "on"
        if transformer != "off":
            version = "v2" if transformer == "pvtv2" else "v1"
            self.trans = nn.ModuleList(make_stage(i, version, w) for i, w in enumerate(widths))
            self.refine = nn.ModuleList(CascadeRefine(w) for w in widths)
        if self.reconstruction:
            self.aggregate = nn.ModuleList(
                DenseAggregate(sum(widths[i + 1:]), widths[i]) for i in range(3))
            self.decode = ProgressiveDecode(widths)
        self.heads = nn.ModuleList(SaliencyHead(w) for w in widths)

    def transformer_stage(self, F_fus: torch.Tensor, i: int) -> torch.Tensor:
        """Stage ``i`` (0-based) transformer; spatial size is preserved."""
        return self.trans[i](F_fus)

    def features(self, fused: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        """The per-stage maps the heads read."""
        if len(fused) != 4:
            raise ValueError(f"expected four fused stages, got {len(fused)}")
        for f, w in zip(fused, self.widths):
            if f.shape[1] != w:
                raise ValueError(f"fused stage has {f.shape[1]} channels, decoder expects {w}")
        if self.transformer != "off":
            f_t = [self.refine[i](self.transformer_stage(f, i), f) for i, f in enumerate(fused)]
        else:
            f_t = list(fused)
        if not self.reconstruction:
            return f_t
        f_res = []
        for i in range(3):
            f_att = self.aggregate[i](f_t[i + 1:], f_t[i].shape[-2:])
            f_res.append(residual_modulate(f_att, f_t[i]))
        f_res.append(f_t[3])
        return self.decode(f_res)

    def forward(self, fused: Sequence[torch.Tensor], size) -> list[torch.Tensor]:
        """Four logit maps at ``size``, finest stage first."""
        return [head(f, size) for head, f in zip(self.heads, self.features(fused))]
