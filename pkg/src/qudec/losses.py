"""Confidence-weighted training objective.

    total = L_r + L_cs - lambda1 * L_c + lambda2 * L_p

All reductions are per-element means within a scale (or over patch cells)
and sums across scales, so the weights do not depend on image size.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
FALLBACK_SEED = 1234
CSV_FIELDS = ("step", "L_r", "L_c", "L_cs", "L_p", "total", "lambda1", "lambda2", "lambda_cs", "mean_c")


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda_cs: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda_cs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossBreakdown:
    L_r: Tensor
    L_c: Tensor
    L_cs: Tensor
    L_p: Tensor
    total: Tensor
    weights: LossWeights
    mean_c: float = float("nan")
    labels_masked: bool = False
    extras: dict = field(default_factory=dict)

    @property
    def L_u(self) -> Tensor:
        return self.L_r + self.L_cs - self.weights.lambda1 * self.L_c

    def as_dict(self) -> dict[str, float]:
        def num(t) -> float:
            return float(t.detach()) if isinstance(t, Tensor) else float(t)

        return {
            "L_r": num(self.L_r), "L_c": num(self.L_c), "L_cs": num(self.L_cs),
            "L_p": num(self.L_p), "total": num(self.total),
            "lambda1": self.weights.lambda1, "lambda2": self.weights.lambda2,
            "lambda_cs": self.weights.lambda_cs, "mean_c": self.mean_c,
        }

    def csv_row(self, step: int) -> dict[str, float]:
        return {"step": step, **self.as_dict()}


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def residual_fidelity_loss(x_hats: Sequence[Tensor], xs: Sequence[Tensor],
                           confidences: Sequence[Tensor]) -> Tensor:
    """sum over scales of mean((c * (x_hat - x))**2)."""
    if not (len(x_hats) == len(xs) == len(confidences)):
        raise ValueError("L_r: need one estimate, target and confidence per scale")
    total = x_hats[0].new_zeros(())
    for x_hat, x, c in zip(x_hats, xs, confidences):
        _check_same(x_hat, x, "L_r")
        _check_same(x_hat, c, "L_r confidence")
        total = total + (c * (x_hat - x)).pow(2).mean()
    return total


def confidence_regularizer(confidences: Sequence[Tensor]) -> Tensor:
    """sum over scales of mean(log c); nonpositive, zero iff every c is 1."""
    total = confidences[0].new_zeros(())
    for c in confidences:
        if bool((c <= 0).any()):
            raise ValueError("L_c: confidence values must be strictly positive")
        total = total + torch.log(c).mean()
    return total


def cross_entropy_cells(probs: Tensor, targets: Tensor) -> Tensor:
    """Per-cell binary-form cross entropy averaged over the three classes.

    probs, targets: (N, 3, gh, gw). Returns (N, gh, gw).
    """
    _check_same(probs, targets, "L_CE")
    p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    ce = -(targets * torch.log(p) + (1.0 - targets) * torch.log(1.0 - p))
    return ce.mean(dim=1)


def label_confidence_loss(probs: Tensor, targets: Tensor, c_s: Tensor,
                          lambda_cs: float = 0.1, mask: Tensor | None = None) -> Tensor:
    """mean over unmasked cells of c_s * L_CE - lambda_cs * log(c_s)."""
    ce = cross_entropy_cells(probs, targets)
    _check_same(ce, c_s, "L_cs confidence")
    if bool((c_s <= 0).any()):
        raise ValueError("L_cs: label confidences must be strictly positive")
    per_cell = c_s * ce - lambda_cs * torch.log(c_s)
    if mask is None:
        return per_cell.mean()
    mask = mask.to(per_cell.dtype)
    _check_same(mask, per_cell, "L_cs mask")
    n = mask.sum()
    if float(n) == 0:
        warnings.warn("L_cs: every label cell is masked; term set to 0", RuntimeWarning)
        return per_cell.sum() * 0.0
    return (per_cell * mask).sum() / n


class RandomFeatureExtractor(nn.Module):
    """Two fixed random 3x3 conv + ReLU layers; stands in for VGG-16 relu1_2."""

    def __init__(self, channels: int = 16, seed: int = FALLBACK_SEED) -> None:
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.conv1 = nn.Conv2d(3, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / math.sqrt(fan_in))
                conv.bias.zero_()
        self.requires_grad_(False)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class VGGRelu12(nn.Module):
    """First block of VGG-16 (conv1_1, relu, conv1_2, relu) on [-1,1] inputs."""

    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, state_dict: dict[str, Tensor]) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, 3, padding=1)
        self.conv2 = nn.Conv2d(64, 64, 3, padding=1)
        prefix = "features." if "features.0.weight" in state_dict else ""
        self.conv1.weight.data.copy_(state_dict[f"{prefix}0.weight"])
        self.conv1.bias.data.copy_(state_dict[f"{prefix}0.bias"])
        self.conv2.weight.data.copy_(state_dict[f"{prefix}2.weight"])
        self.conv2.bias.data.copy_(state_dict[f"{prefix}2.bias"])
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1))
        self.requires_grad_(False)

    def forward(self, x: Tensor) -> Tensor:
        x = ((x + 1.0) / 2.0 - self.mean) / self.std
        return F.relu(self.conv2(F.relu(self.conv1(x))))


def build_extractor(weights_path: str | Path | None = None) -> nn.Module:
    """VGG-16 relu1_2 from a torchvision state-dict file, else the random fallback."""
    if weights_path is not None and Path(weights_path).exists():
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        extractor = VGGRelu12(state)
    else:
        if weights_path is not None:
            log.warning("VGG-16 weights %s not found; using random feature extractor (seed %d)",
                        weights_path, FALLBACK_SEED)
        else:
            log.info("no VGG-16 weights given; using random feature extractor (seed %d)", FALLBACK_SEED)
        extractor = RandomFeatureExtractor()
    return extractor.eval()


def perceptual_loss(x_hat: Tensor, x: Tensor, extractor: nn.Module) -> Tensor:
    """Mean squared feature difference, normalized by the feature map size."""
    _check_same(x_hat, x, "L_p")
    return (extractor(x_hat) - extractor(x)).pow(2).mean()


def total_loss(L_r: Tensor, L_c: Tensor, L_cs: Tensor, L_p: Tensor,
               weights: LossWeights, **info) -> LossBreakdown:
    for name, value in (("L_r", L_r), ("L_c", L_c), ("L_cs", L_cs), ("L_p", L_p)):
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"loss component {name} is not finite ({float(value.detach())})")
    total = L_r + L_cs - weights.lambda1 * L_c + weights.lambda2 * L_p
    return LossBreakdown(L_r, L_c, L_cs, L_p, total, weights, **info)


def qudec_loss(outputs: dict[str, Tensor], targets: dict[str, Tensor], weights: LossWeights,
               extractor: nn.Module | None) -> LossBreakdown:
    """Assemble every term from a forward-pass bundle.

    ``targets`` holds x1/x2/x4 (network space), ``onehot`` (N,3,gh,gw) and
    ``mask`` (N,gh,gw). Scale x1 uses the refined output; x2/x4 use y - r.
    """
    confs = [outputs["c1"], outputs["c2"], outputs["c4"]]
    L_r = residual_fidelity_loss([outputs["x_hat"], outputs["x_hat2"], outputs["x_hat4"]],
                                 [targets["x1"], targets["x2"], targets["x4"]], confs)
    L_c = confidence_regularizer(confs)
    mask = targets.get("mask")
    masked = mask is not None and float(mask.sum()) == 0
    L_cs = label_confidence_loss(outputs["probs"], targets["onehot"], outputs["c_s"],
                                 weights.lambda_cs, mask)
    if extractor is None or weights.lambda2 == 0:
        L_p = L_r.new_zeros(())
    else:
        L_p = perceptual_loss(outputs["x_hat"], targets["x1"], extractor)
    with torch.no_grad():
        mean_c = float(torch.cat([c.reshape(-1) for c in confs]).mean())
    return total_loss(L_r, L_c, L_cs, L_p, weights, mean_c=mean_c, labels_masked=masked)
