"""Deeply-supervised saliency losses.

Per-image losses are summed over pixels (BCE) or computed over the whole
image (IoU, Dice, SSIM), then averaged over the batch.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F

from .config import LOSS_VARIANTS

PROB_EPS = 1e-7
LAMBDAS = (0.8, 0.6, 0.4, 0.2)


class LossBreakdown(NamedTuple):
    per_level: list[tuple[torch.Tensor, torch.Tensor]]  # (bce, second term) per head
    total: torch.Tensor
    second_term: str = "iou"


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    return x


def _check_pair(S, G):
    if S.shape != G.shape:
        raise ValueError(f"prediction {tuple(S.shape)} and ground truth {tuple(G.shape)} differ")


def _check_binary(G):
    if not torch.all((G == 0) | (G == 1)):
        raise ValueError("ground truth must be binary {0, 1}")


def bce_loss(S: torch.Tensor, G: torch.Tensor, logits: bool = False,
             reduction: str = "sum") -> torch.Tensor:
    """Binary cross-entropy; ``reduction`` is the per-image pixel reduction."""
    S, G = _as_batch(S), _as_batch(G)
    _check_pair(S, G)
    _check_binary(G)
    G = G.to(S.dtype)
    if logits:
        per_pixel = F.binary_cross_entropy_with_logits(S, G, reduction="none")
    else:
        S = S.clamp(PROB_EPS, 1 - PROB_EPS)
        per_pixel = -(G * torch.log(S) + (1 - G) * torch.log(1 - S))
    per_image = per_pixel.flatten(1)
    per_image = per_image.sum(1) if reduction == "sum" else per_image.mean(1)
    return per_image.mean()


def iou_loss(S: torch.Tensor, G: torch.Tensor) -> torch.Tensor:
    S, G = _as_batch(S), _as_batch(G).to(S.dtype)
    _check_pair(S, G)
    inter = (S * G).flatten(1).sum(1)
    union = (S + G - S * G).flatten(1).sum(1)
    union = torch.where(union > 0, union, torch.full_like(union, PROB_EPS))
    return (1 - inter / union).mean()


def dice_loss(S: torch.Tensor, G: torch.Tensor) -> torch.Tensor:
    S, G = _as_batch(S), _as_batch(G).to(S.dtype)
    _check_pair(S, G)
    inter = (S * G).flatten(1).sum(1)
    total = S.flatten(1).sum(1) + G.flatten(1).sum(1)
    return (1 - 2 * inter / (total + PROB_EPS)).mean()


def _gaussian_window(size=11, sigma=1.5, dtype=torch.float32, device=None):
    x = torch.arange(size, dtype=dtype, device=device) - size // 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim(S: torch.Tensor, G: torch.Tensor, size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean SSIM per image with a Gaussian window (zero padded), B-vector."""
    S, G = _as_batch(S), _as_batch(G).to(S.dtype)
    _check_pair(S, G)
    w = _gaussian_window(size, sigma, S.dtype, S.device)
    pad = size // 2
    mu_s, mu_g = F.conv2d(S, w, padding=pad), F.conv2d(G, w, padding=pad)
    var_s = F.conv2d(S * S, w, padding=pad) - mu_s ** 2
    var_g = F.conv2d(G * G, w, padding=pad) - mu_g ** 2
    cov = F.conv2d(S * G, w, padding=pad) - mu_s * mu_g
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    num = (2 * mu_s * mu_g + c1) * (2 * cov + c2)
    den = (mu_s ** 2 + mu_g ** 2 + c1) * (var_s + var_g + c2)
    return (num / den).flatten(1).mean(1)


def ssim_loss(S: torch.Tensor, G: torch.Tensor) -> torch.Tensor:
    return (1 - ssim(S, G)).mean()


_SECOND = {"bce+iou": ("iou", iou_loss), "bce+dice": ("dice", dice_loss),
           "bce+ssim": ("ssim", ssim_loss), "bce": ("none", None)}


def total_loss(outputs, G: torch.Tensor, lambdas: Sequence[float] = LAMBDAS,
               variant: str = "bce+iou", reduction: str = "sum") -> LossBreakdown:
    """Weighted sum over the four heads.

    ``outputs`` is either a :class:`~gldmnet.model.SaliencyOutput` (BCE uses
    the logits) or a sequence of four probability maps.
    """
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    if hasattr(outputs, "logits"):
        maps, bce_inputs, from_logits = outputs.maps, outputs.logits, True
    else:
        maps = bce_inputs = list(outputs)
        from_logits = False
    if len(maps) != 4 or len(lambdas) != 4:
        raise ValueError(f"expected four maps and four weights, got {len(maps)} and {len(lambdas)}")
    name, second = _SECOND[variant]
    per_level = []
    total = 0
    for lam, s, b in zip(lambdas, maps, bce_inputs):
        l_bce = bce_loss(b, G, logits=from_logits, reduction=reduction)
        l_2 = second(s, G) if second else torch.zeros_like(l_bce)
        per_level.append((l_bce, l_2))
        total = total + lam * (l_bce + l_2)
    return LossBreakdown(per_level, total, name)
