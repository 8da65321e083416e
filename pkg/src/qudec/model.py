"""QuDeC networks: shared encoder, residual decoder D1 with ReCoN taps,
label decoder D2 with LCN, the refinement network and the stand-alone GLN.

All modules take batched NCHW tensors in network space ([-1, 1]).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

PATCH = 128
CONF_FLOOR = 1e-3
NUM_CLASSES = 3


class ContractError(ValueError):
    """Raised when a tensor violates a layer's shape contract."""


@dataclass(frozen=True)
class ModelConfig:
    """Channel widths. ``width=32`` gives the published architecture."""

    width: int = 32
    rfn_hidden: int = 16
    lcn_out: int = 8
    gln_width: int = 32
    gln_blocks: int = 8

    @property
    def fine(self) -> int:
        # channel count of the full-resolution decoder stages (16 at width 32)
        return self.width // 2

    def to_dict(self) -> dict:
        return asdict(self)


def floor_confidence(x: Tensor) -> Tensor:
    """Map a sigmoid output from (0, 1) into [CONF_FLOOR, 1)."""
    return CONF_FLOOR + (1.0 - CONF_FLOOR) * x


def _check_channels(x: Tensor, expected: int, where: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise ContractError(
            f"{where}: expected {expected} input channels, got shape {tuple(x.shape)}"
        )


class ConvBlock(nn.Module):
    """Conv3x3 -> (BatchNorm) -> activation, spatial size preserved."""

    ACTIVATIONS = ("relu", "identity", "sigmoid")

    def __init__(self, in_channels: int, out_channels: int, activation: str = "relu",
                 normalize: bool = True, name: str = "ConvBlock") -> None:
        super().__init__()
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.activation = activation
        self.normalize = normalize
        self.name = name
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.bn = nn.BatchNorm2d(out_channels) if normalize else nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.in_channels, f"{self.name}({self.in_channels},{self.out_channels})")
        x = self.bn(self.conv(x))
        if self.activation == "relu":
            return F.relu(x)
        if self.activation == "sigmoid":
            return torch.sigmoid(x)
        return x


class UpSample(nn.Module):
    """2x nearest-neighbour up-sampling followed by a 3x3 convolution."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    """Four ConvBlock-AvgPool stages; returns all four pooled feature maps."""

    def __init__(self, width: int = 32) -> None:
        super().__init__()
        self.blocks = nn.ModuleList(
            [ConvBlock(3 if i == 0 else width, width, name=f"encoder.{i}") for i in range(4)]
        )

    def forward(self, y: Tensor) -> list[Tensor]:
        h, w = y.shape[-2:]
        if h % 16 or w % 16:
            raise ContractError(f"encoder input must be divisible by 16, got {h}x{w}")
        feats = []
        x = y
        for block in self.blocks:
            x = F.avg_pool2d(block(x), 2)
            feats.append(x)
        return feats


class ResidualNet(nn.Module):
    """RN: 2C -> C -> C -> 3, signed output."""

    def __init__(self, width: int = 32) -> None:
        super().__init__()
        self.in_channels = 2 * width
        self.body = nn.Sequential(
            ConvBlock(2 * width, width, name="rn.0"),
            ConvBlock(width, width, name="rn.1"),
            ConvBlock(width, 3, activation="identity", normalize=False, name="rn.2"),
        )

    def forward(self, fused: Tensor) -> Tensor:
        _check_channels(fused, self.in_channels, "RN")
        return self.body(fused)


class ConfidenceNet(nn.Module):
    """CN: (2C + 3) -> C/2 -> C/2 -> 3, sigmoid head with floor."""

    def __init__(self, width: int = 32) -> None:
        super().__init__()
        self.in_channels = 2 * width + 3
        hidden = width // 2
        self.body = nn.Sequential(
            ConvBlock(2 * width + 3, hidden, name="cn.0"),
            ConvBlock(hidden, hidden, name="cn.1"),
            ConvBlock(hidden, 3, activation="sigmoid", normalize=False, name="cn.2"),
        )

    def forward(self, fused: Tensor, residual: Tensor) -> Tensor:
        x = torch.cat([fused, residual], dim=1)
        _check_channels(x, self.in_channels, "CN")
        return floor_confidence(self.body(x))


class ReCoN(nn.Module):
    """Paired RN + CN tap. Returns the residual, its confidence and c * r."""

    def __init__(self, width: int = 32) -> None:
        super().__init__()
        self.rn = ResidualNet(width)
        self.cn = ConfidenceNet(width)

    def forward(self, fused: Tensor, conf_override: Tensor | None = None):
        r = self.rn(fused)
        c = self.cn(fused, r)
        if conf_override is not None:
            c = conf_override.expand_as(c)
        return r, c, c * r


class DecoderTrunk(nn.Module):
    """Shared stage layout of D1 and D2.

    ConvBlock(C,C)-Up-ConvBlock(2C,C)-Up-ConvBlock(2C+3,C)-Up-ConvBlock(2C+3,C/2)-Up-ConvBlock(C/2,C/2)

    The two 2C+3 stages take three extra channels: the confidence-weighted
    residual feedback from the x4 and x2 ReCoN taps of D1.
    """

    def __init__(self, width: int = 32, prefix: str = "decoder") -> None:
        super().__init__()
        c, f = width, width // 2
        self.width = width
        self.block1 = ConvBlock(c, c, name=f"{prefix}.block1")
        self.up1 = UpSample(c)
        self.block2 = ConvBlock(2 * c, c, name=f"{prefix}.block2")
        self.up2 = UpSample(c)
        self.block3 = ConvBlock(2 * c + 3, c, name=f"{prefix}.block3")
        self.up3 = UpSample(c)
        self.block4 = ConvBlock(2 * c + 3, f, name=f"{prefix}.block4")
        self.up4 = UpSample(f)
        self.block5 = ConvBlock(f, f, name=f"{prefix}.block5")

    def concat_sites(self) -> tuple[int, int, int]:
        return (self.block2.in_channels, self.block3.in_channels, self.block4.in_channels)


class DecoderD1(DecoderTrunk):
    """Residual decoder with ReCoN taps at x4 and x2 and an x1 head."""

    def __init__(self, width: int = 32) -> None:
        super().__init__(width, prefix="d1")
        f = width // 2
        self.recon4 = ReCoN(width)
        self.recon2 = ReCoN(width)
        self.head = nn.Conv2d(f, 3, 3, padding=1)
        # lifts the f-channel final features to the 2C slots the CN expects
        self.expand = nn.Conv2d(f, 2 * width, 1)
        self.cn1 = ConfidenceNet(width)

    def forward(self, feats: list[Tensor], zero_lower_confidence: bool = False) -> dict[str, Tensor]:
        f1, f2, f3, f4 = feats
        override = f4.new_zeros(()) if zero_lower_confidence else None

        x = self.up1(self.block1(f4))
        x = self.up2(self.block2(torch.cat([x, f3], 1)))
        fused4 = torch.cat([x, f2], 1)
        r4, c4, fb4 = self.recon4(fused4, override)

        x = self.up3(self.block3(torch.cat([fused4, fb4], 1)))
        fused2 = torch.cat([x, f1], 1)
        r2, c2, fb2 = self.recon2(fused2, override)

        x = self.up4(self.block4(torch.cat([fused2, fb2], 1)))
        final = self.block5(x)
        r1 = self.head(final)
        c1 = self.cn1(self.expand(final), r1)
        return {"r4": r4, "c4": c4, "fb4": fb4, "r2": r2, "c2": c2, "fb2": fb2,
                "r1": r1, "c1": c1}


class DecoderD2(DecoderTrunk):
    """Label decoder: trunk features pooled per 128x128 patch, then a shared
    linear map to three logits (equivalent to per-patch GAP + FC)."""

    def __init__(self, width: int = 32) -> None:
        super().__init__(width, prefix="d2")
        self.fc = nn.Conv2d(width // 2, NUM_CLASSES, 1)

    def forward(self, feats: list[Tensor], fb4: Tensor, fb2: Tensor) -> tuple[Tensor, Tensor]:
        f1, f2, f3, f4 = feats
        x = self.up1(self.block1(f4))
        x = self.up2(self.block2(torch.cat([x, f3], 1)))
        x = self.up3(self.block3(torch.cat([x, f2, fb4], 1)))
        x = self.up4(self.block4(torch.cat([x, f1, fb2], 1)))
        d2_features = self.block5(x)
        logits = self.fc(patch_pool(d2_features))
        return logits, d2_features


def patch_pool(x: Tensor, patch: int = PATCH) -> Tensor:
    h, w = x.shape[-2:]
    if h % patch or w % patch:
        raise ContractError(f"patch pooling needs multiples of {patch}, got {h}x{w}")
    return F.avg_pool2d(x, patch)


def grid_to_pixels(grid: Tensor, patch: int = PATCH) -> Tensor:
    """Nearest up-sampling of a per-patch grid to pixel resolution."""
    return grid.repeat_interleave(patch, dim=-2).repeat_interleave(patch, dim=-1)


class LabelConfidenceNet(nn.Module):
    """LCN: ConvBlock(f+3,16)-ConvBlock(16,16)-ConvBlock(16,8), per-patch GAP, FC(8->1), sigmoid."""

    def __init__(self, width: int = 32, out: int = 8) -> None:
        super().__init__()
        f = width // 2
        self.in_channels = f + NUM_CLASSES
        self.body = nn.Sequential(
            ConvBlock(f + NUM_CLASSES, 16, name="lcn.0"),
            ConvBlock(16, 16, name="lcn.1"),
            ConvBlock(16, out, name="lcn.2"),
        )
        self.fc = nn.Conv2d(out, 1, 1)

    def forward(self, d2_features: Tensor, probs: Tensor) -> Tensor:
        gh, gw = probs.shape[-2:]
        if d2_features.shape[-2:] != (gh * PATCH, gw * PATCH):
            raise ContractError(
                f"LCN: feature map {tuple(d2_features.shape[-2:])} does not match grid {gh}x{gw}"
            )
        x = torch.cat([d2_features, grid_to_pixels(probs)], 1)
        _check_channels(x, self.in_channels, "LCN")
        x = self.fc(patch_pool(self.body(x)))
        return floor_confidence(torch.sigmoid(x))[:, 0]


class RefinementNet(nn.Module):
    """RFN: Conv7x7 -> Conv3x3 -> tanh on (y - r_x1) stacked with the label prior."""

    def __init__(self, hidden: int = 16) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(3 + NUM_CLASSES, hidden, 7, padding=3)
        self.conv2 = nn.Conv2d(hidden, 3, 3, padding=1)

    def forward(self, coarse: Tensor, label_prior: Tensor) -> Tensor:
        if coarse.shape != label_prior.shape:
            raise ContractError(
                f"RFN: coarse {tuple(coarse.shape)} vs prior {tuple(label_prior.shape)}"
            )
        return torch.tanh(self.conv2(self.conv1(torch.cat([coarse, label_prior], 1))))


class ResBlock(nn.Module):
    """GLN block: relu(x + dil3x3(conv3x3(conv1x1(x))))."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, 3, padding=2, dilation=2)

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.conv1(x))
        out = F.relu(self.conv2(out))
        return F.relu(x + self.conv3(out))


class GLN(nn.Module):
    """Generation-of-Labels network: one 128x128 patch in, three logits out."""

    def __init__(self, width: int = 32, blocks: int = 8) -> None:
        super().__init__()
        self.stem = nn.Conv2d(3, width, 3, padding=1)
        self.blocks = nn.Sequential(*[ResBlock(width) for _ in range(blocks)])
        self.fc = nn.Linear(2 * width, NUM_CLASSES)

    def forward(self, patch: Tensor) -> Tensor:
        if patch.dim() != 4 or tuple(patch.shape[1:]) != (3, PATCH, PATCH):
            raise ContractError(f"GLN expects (N,3,{PATCH},{PATCH}), got {tuple(patch.shape)}")
        x = self.blocks(F.relu(self.stem(patch)))
        # max pooling keeps sparse streak evidence that a plain mean washes out
        pooled = torch.cat([x.mean(dim=(-2, -1)), x.amax(dim=(-2, -1))], dim=1)
        return self.fc(pooled)

    def predict_proba(self, patch: Tensor) -> Tensor:
        return torch.softmax(self(patch), dim=1)


def pad_to_multiple(x: Tensor, multiple: int = PATCH) -> tuple[Tensor, tuple[int, int]]:
    """Reflection-pad the bottom/right edges up to the next multiple."""
    h, w = x.shape[-2:]
    ph = -h % multiple
    pw = -w % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    # reflect needs pad < size; fall back to edge replication for tiny inputs
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


def downsample(x: Tensor, factor: int) -> Tensor:
    """Antialiased bilinear down-sampling by an integer factor."""
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    return F.interpolate(x, size=(h // factor, w // factor), mode="bilinear",
                         align_corners=False, antialias=True)


class QuDeC(nn.Module):
    """Full network. ``forward`` returns the output bundle as a dict."""

    def __init__(self, config: ModelConfig | None = None) -> None:
        super().__init__()
        self.config = config or ModelConfig()
        w = self.config.width
        self.encoder = Encoder(w)
        self.decoder_d1 = DecoderD1(w)
        self.decoder_d2 = DecoderD2(w)
        self.lcn = LabelConfidenceNet(w, self.config.lcn_out)
        self.rfn = RefinementNet(self.config.rfn_hidden)
        self.check_architecture()

    def check_architecture(self) -> None:
        """Assert every concatenation site against the width-derived counts."""
        w = self.config.width
        expected = (2 * w, 2 * w + 3, 2 * w + 3)
        for name, dec in (("D1", self.decoder_d1), ("D2", self.decoder_d2)):
            if dec.concat_sites() != expected:
                raise ContractError(f"{name} concat sites {dec.concat_sites()} != {expected}")
        if self.encoder.blocks[0].in_channels != 3 or self.encoder.blocks[0].out_channels != w:
            raise ContractError("encoder stem must map 3 -> width channels")
        for tap in (self.decoder_d1.recon4, self.decoder_d1.recon2):
            if tap.rn.in_channels != 2 * w or tap.cn.in_channels != 2 * w + 3:
                raise ContractError("ReCoN channel counts do not match the decoder")
        if self.decoder_d1.cn1.in_channels != 2 * w + 3:
            raise ContractError("x1 confidence network must take 2*width+3 channels")

    def forward(self, y: Tensor, zero_lower_confidence: bool = False) -> dict[str, Tensor]:
        if y.dim() != 4 or y.shape[1] != 3:
            raise ContractError(f"expected (N,3,H,W) input, got {tuple(y.shape)}")
        yp, (h, w) = pad_to_multiple(y)
        feats = self.encoder(yp)
        d1 = self.decoder_d1(feats, zero_lower_confidence=zero_lower_confidence)
        logits, d2_features = self.decoder_d2(feats, d1["fb4"], d1["fb2"])
        probs = torch.softmax(logits, dim=1)
        c_s = self.lcn(d2_features, probs)

        onehot = F.one_hot(probs.argmax(1), NUM_CLASSES).permute(0, 3, 1, 2).to(yp.dtype)
        prior = grid_to_pixels(onehot * c_s.unsqueeze(1))
        x_hat = self.rfn(yp - d1["r1"], prior)

        h2, w2 = math.ceil(h / 2), math.ceil(w / 2)
        h4, w4 = math.ceil(h / 4), math.ceil(w / 4)
        y2 = downsample(yp, 2)
        y4 = downsample(yp, 4)
        return {
            "x_hat": x_hat[..., :h, :w],
            "r1": d1["r1"][..., :h, :w],
            "c1": d1["c1"][..., :h, :w],
            "r2": d1["r2"][..., :h2, :w2],
            "c2": d1["c2"][..., :h2, :w2],
            "x_hat2": (y2 - d1["r2"])[..., :h2, :w2],
            "r4": d1["r4"][..., :h4, :w4],
            "c4": d1["c4"][..., :h4, :w4],
            "x_hat4": (y4 - d1["r4"])[..., :h4, :w4],
            "logits": logits,
            "probs": probs,
            "c_s": c_s,
            "fb4": d1["fb4"],
            "fb2": d1["fb2"],
        }


def parameter_groups(model: QuDeC) -> dict[str, list[str]]:
    """Parameter names grouped by sub-network."""
    groups: dict[str, list[str]] = {}
    for name, _ in model.named_parameters():
        parts = name.split(".")
        key = parts[0]
        if key == "decoder_d1" and parts[1] in ("recon4", "recon2"):
            key = f"{parts[1]}.{parts[2]}"
        elif key == "decoder_d1" and parts[1] in ("cn1", "expand"):
            key = "cn1"
        groups.setdefault(key, []).append(name)
    return groups
