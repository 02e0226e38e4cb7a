"""CNN encoders for the RGB and depth branches.

Each encoder emits four stage features at strides 4/8/16/32.  Parameter
names inside an encoder follow torchvision's ResNet naming
(``conv1.weight``, ``layer3.2.bn1.running_var`` ...), so a torchvision
checkpoint or a ``state_dict`` saved from an :class:`Encoder` loads
directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import torch
from torch import nn
from torchvision.models import resnet

STRIDES = (4, 8, 16, 32)

# family -> (torchvision constructor, per-stage channels)
FAMILIES = {
    "resnet50": (resnet.resnet50, (256, 512, 1024, 2048)),
    "resnet34": (resnet.resnet34, (64, 128, 256, 512)),
    "resnet18": (resnet.resnet18, (64, 128, 256, 512)),
}


class DimensionError(ValueError):
    pass


class WeightsError(RuntimeError):
    pass


class StageFeatures(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor


@dataclass(frozen=True)
class EncoderConfig:
    family: str = "resnet50"
    weights: str | None = None


def _family(name: str):
    key = name.removesuffix("-profile")
    if key not in FAMILIES:
        raise ValueError(f"unknown encoder family {name!r}; known: {sorted(FAMILIES)}")
    return FAMILIES[key]


class Encoder(nn.Module):
    """ResNet trunk without the classification head."""

    strides = STRIDES

    def __init__(self, family: str = "resnet50"):
        super().__init__()
        ctor, channels = _family(family)
        net = ctor(weights=None)
        self.family = family
        self.channels = channels
        self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = (
            net.layer1, net.layer2, net.layer3, net.layer4)

    def forward(self, x: torch.Tensor) -> StageFeatures:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise DimensionError(f"input size {h}x{w} is not a multiple of 32")
        if x.shape[-3] != 3:
            raise DimensionError(f"expected 3 input channels, got {x.shape[-3]}")
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        f4 = self.layer4(f3)
        return StageFeatures(f1, f2, f3, f4)

    def load_weights(self, path: str | Path) -> None:
        state = read_weights(path)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        try:
            self.load_state_dict(state, strict=True)
        except RuntimeError as err:
            raise WeightsError(f"{path}: {err}") from None


def read_weights(path: str | Path) -> dict[str, torch.Tensor]:
    path = Path(path)
    if not path.is_file():
        raise WeightsError(f"weights file not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:  # torch raises a zoo of types for bad archives
        raise WeightsError(f"cannot read weights file {path}: {err}") from None
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if not isinstance(state, dict) or not all(isinstance(v, torch.Tensor) for v in state.values()):
        raise WeightsError(f"{path} is not a name -> tensor archive")
    return state


def extract_stages(encoder: Encoder, image: torch.Tensor) -> StageFeatures:
    """Run ``encoder`` on a C×H×W or B×C×H×W image.

    Unbatched input gives unbatched stage features.
    """
    if any(p.is_meta for p in encoder.parameters()):
        raise WeightsError("encoder parameters are not initialized")
    if image.dim() == 3:
        return StageFeatures(*(f.squeeze(0) for f in encoder(image.unsqueeze(0))))
    return encoder(image)


def make_dual_encoder(config: EncoderConfig) -> tuple[Encoder, Encoder]:
    """Two independent encoders, optionally both loaded from one weights file."""
    rgb, depth = Encoder(config.family), Encoder(config.family)
    if config.weights:
        rgb.load_weights(config.weights)
        depth.load_weights(config.weights)
    return rgb, depth
