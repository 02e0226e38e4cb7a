"""Full RGB-D saliency network: dual encoders, per-stage fusion, decoder."""
from __future__ import annotations

from typing import Any, Mapping, NamedTuple

import torch
from torch import nn

from . import config as config_mod
from .backbones import EncoderConfig, make_dual_encoder
from .decoder import CTRDecoder
from .fusion import DualMutualFusion


class SaliencyOutput(NamedTuple):
    maps: list[torch.Tensor]    # four B×1×H×W maps in [0, 1], finest first
    logits: list[torch.Tensor]


class GLDMNet(nn.Module):
    def __init__(self, family="resnet50", weights=None, widths=(64, 128, 320, 512),
                 fusion_mode="parallel", moment_exponent=-0.5, l2_power=2,
                 max_attention_pixels=4096, transformer="pvtv2", reconstruction="on"):
        super().__init__()
        self.rgb_encoder, self.depth_encoder = make_dual_encoder(EncoderConfig(family, weights))
        self.fusion = nn.ModuleList(
            DualMutualFusion(c, w, fusion_mode, moment_exponent, l2_power, max_attention_pixels)
            for c, w in zip(self.rgb_encoder.channels, widths))
        self.decoder = CTRDecoder(widths, transformer, reconstruction)

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "GLDMNet":
        return cls(
            family=cfg["backbone.family"],
            weights=cfg["backbone.weights"] or None,
            widths=tuple(cfg["fusion.widths"]),
            fusion_mode=cfg["fusion.mode"],
            moment_exponent=cfg["fusion.moment_exponent"],
            l2_power=cfg["fusion.l2_power"],
            max_attention_pixels=cfg["fusion.max_attention_pixels"],
            transformer=cfg["decoder.transformer"],
            reconstruction=cfg["decoder.reconstruction"],
        )

    def fused_stages(self, rgb, depth) -> list[torch.Tensor]:
        F_rgb, F_d = self.rgb_encoder(rgb), self.depth_encoder(depth)
        return [fuse(a, b) for fuse, a, b in zip(self.fusion, F_rgb, F_d)]

    def forward(self, rgb: torch.Tensor, depth: torch.Tensor) -> SaliencyOutput:
        logits = self.decoder(self.fused_stages(rgb, depth), rgb.shape[-2:])
        return SaliencyOutput([torch.sigmoid(z) for z in logits], logits)

    @torch.no_grad()
    def predict(self, rgb: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        """Final saliency map (finest head only), B×1×H×W in [0, 1]."""
        return self(rgb, depth).maps[0]

    def cnn_parameters(self):
        yield from self.rgb_encoder.parameters()
        yield from self.depth_encoder.parameters()

    def transformer_parameters(self):
        if hasattr(self.decoder, "trans"):
            yield from self.decoder.trans.parameters()


def build(cfg: Mapping[str, Any] | None = None, **overrides) -> GLDMNet:
    """Model from a resolved config; keyword overrides use dotted keys with ``__``."""
    cfg = dict(cfg or config_mod.DEFAULTS)
    cfg.update({k.replace("__", "."): v for k, v in overrides.items()})
    return GLDMNet.from_config(config_mod.resolve(cfg))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
