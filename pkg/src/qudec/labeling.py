"""Patch distortion labels from NIQE scores.

Three classes per 128x128 patch: green (low), blue (medium) and red (high
distortion). Scores within ``margin`` of a threshold are ``boundary`` and are
excluded from training targets.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import extract_patches
from .model import PATCH
from .niqe import PristineModel, niqe_score


class DistortionLabel(enum.IntEnum):
    BOUNDARY = -1
    GREEN = 0
    BLUE = 1
    RED = 2

    @property
    def char(self) -> str:
        return _CHARS[self]

    @classmethod
    def from_char(cls, ch: str) -> "DistortionLabel":
        try:
            return _FROM_CHAR[ch]
        except KeyError:
            raise ValueError(f"unknown label character {ch!r}") from None


_CHARS = {DistortionLabel.GREEN: "g", DistortionLabel.BLUE: "b", DistortionLabel.RED: "r",
          DistortionLabel.BOUNDARY: "x"}
_FROM_CHAR = {v: k for k, v in _CHARS.items()}

# RGB rendering colours, boundary cells in grey
LABEL_COLORS = {DistortionLabel.GREEN: (0, 176, 80), DistortionLabel.BLUE: (0, 64, 255),
                DistortionLabel.RED: (230, 0, 0), DistortionLabel.BOUNDARY: (128, 128, 128)}


@dataclass(frozen=True)
class ThresholdConfig:
    t1: float = 6.0
    t2: float = 9.0
    margin: float = 0.2

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if not self.t1 + self.margin < self.t2 - self.margin:
            raise ValueError(
                f"thresholds overlap: T1+margin={self.t1 + self.margin:.3f} >= "
                f"T2-margin={self.t2 - self.margin:.3f}; calibrate on a larger corpus"
            )


def calibrate_thresholds(scores, margin: float = 0.2, min_scores: int = 300) -> ThresholdConfig:
    """Tertile cut points (linear-interpolation percentiles)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size < min_scores:
        raise ValueError(f"calibration needs at least {min_scores} scores, got {scores.size}")
    t1, t2 = np.percentile(scores, [100.0 / 3.0, 200.0 / 3.0], method="linear")
    return ThresholdConfig(float(t1), float(t2), margin)


def label_patch(score, cfg: ThresholdConfig) -> DistortionLabel:
    s = float(score)
    if s <= cfg.t1 - cfg.margin:
        return DistortionLabel.GREEN
    if cfg.t1 + cfg.margin < s < cfg.t2 - cfg.margin:
        return DistortionLabel.BLUE
    if s >= cfg.t2 + cfg.margin:
        return DistortionLabel.RED
    return DistortionLabel.BOUNDARY


def snap_label(score, cfg: ThresholdConfig) -> DistortionLabel:
    """Hard label: boundary scores go to the nearer side of their threshold."""
    label = label_patch(score, cfg)
    if label is not DistortionLabel.BOUNDARY:
        return label
    s = float(score)
    midpoint = 0.5 * (cfg.t1 + cfg.t2)
    if s < midpoint:
        return DistortionLabel.GREEN if s <= cfg.t1 else DistortionLabel.BLUE
    return DistortionLabel.BLUE if s < cfg.t2 else DistortionLabel.RED


@dataclass
class LabelMap:
    grid: np.ndarray  # (gh, gw) ints, DistortionLabel values
    width: int
    height: int
    patch_size: int = PATCH
    source: str = "niqe_direct"
    scores: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64)
        expected = (-(-self.height // self.patch_size), -(-self.width // self.patch_size))
        if self.grid.shape != expected:
            raise ValueError(f"label grid {self.grid.shape} does not fit a "
                             f"{self.width}x{self.height} image (expected {expected})")

    @property
    def has_boundary(self) -> bool:
        return bool((self.grid == DistortionLabel.BOUNDARY).any())

    def to_text(self) -> str:
        lines = [f"{self.width} {self.height} {self.patch_size}"]
        lines += ["".join(DistortionLabel(v).char for v in row) for row in self.grid]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "niqe_direct") -> "LabelMap":
        lines = [ln.strip() for ln in text.strip().splitlines()]
        width, height, patch = (int(v) for v in lines[0].split())
        grid = [[DistortionLabel.from_char(ch) for ch in row] for row in lines[1:]]
        return cls(np.array(grid, dtype=np.int64).reshape(len(grid), -1), width, height, patch, source)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "LabelMap":
        return cls.from_text(Path(path).read_text())

    def render(self, image: np.ndarray | None = None, alpha: float = 0.45) -> np.ndarray:
        """(H, W, 3) uint8 colour map, optionally blended over a (3,H,W) image in [0,1]."""
        gh, gw = self.grid.shape
        colors = np.zeros((gh, gw, 3), dtype=np.float64)
        for label, rgb in LABEL_COLORS.items():
            colors[self.grid == label] = rgb
        canvas = np.repeat(np.repeat(colors, self.patch_size, 0), self.patch_size, 1)
        canvas = canvas[: self.height, : self.width]
        if image is not None:
            base = np.asarray(image, dtype=np.float64).transpose(1, 2, 0) * 255.0
            canvas = (1 - alpha) * base + alpha * canvas
        return np.clip(np.round(canvas), 0, 255).astype(np.uint8)

    def save_png(self, path: str | Path, image: np.ndarray | None = None) -> None:
        from PIL import Image

        Image.fromarray(self.render(image)).save(path)


def score_patches(image: np.ndarray, model: PristineModel) -> tuple[np.ndarray, tuple[int, int]]:
    patches, grid = extract_patches(image)
    scores = np.array([niqe_score(p, model).value for p in patches])
    return scores.reshape(grid), grid


def generate_label_map(image: np.ndarray, model: PristineModel, cfg: ThresholdConfig) -> LabelMap:
    """Label every 128x128 patch of a (3,H,W) image in [0,1], row-major."""
    scores, _ = score_patches(image, model)
    grid = np.vectorize(lambda s: int(label_patch(s, cfg)))(scores)
    h, w = image.shape[-2:]
    return LabelMap(grid, w, h, PATCH, "niqe_direct", scores)


def labels_from_scores(scores: np.ndarray, width: int, height: int, cfg: ThresholdConfig) -> LabelMap:
    grid = np.vectorize(lambda s: int(label_patch(s, cfg)))(np.asarray(scores))
    return LabelMap(grid, width, height, PATCH, "niqe_direct", np.asarray(scores))


@dataclass
class GlnDataset:
    patches: np.ndarray  # (n, 3, 128, 128) in [0,1]
    labels: np.ndarray  # (n,) in {0,1,2}
    seed: int
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def class_fractions(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=3) / max(len(self.labels), 1)


def build_gln_dataset(rainy_images, model: PristineModel | None, cfg: ThresholdConfig,
                      seed: int = 0, scores=None) -> GlnDataset:
    """(patch, label) pairs from rainy images, boundary patches dropped, shuffled.

    ``scores`` may supply precomputed per-patch scores (one array per image,
    row-major) in place of NIQE scoring with ``model``.
    """
    patches, labels, kept = [], [], []
    for k, image in enumerate(rainy_images):
        tiles, grid = extract_patches(image)
        if scores is None:
            img_scores = [niqe_score(t, model).value for t in tiles]
        else:
            img_scores = np.asarray(scores[k], dtype=np.float64).ravel()
        for tile, s in zip(tiles, img_scores):
            label = label_patch(s, cfg)
            if label is DistortionLabel.BOUNDARY:
                continue
            patches.append(tile)
            labels.append(int(label))
            kept.append(s)
    if not patches:
        raise ValueError("no labelled patches: every patch fell in a boundary band")
    order = np.random.default_rng(seed).permutation(len(labels))
    return GlnDataset(np.stack(patches)[order], np.array(labels, dtype=np.int64)[order], seed,
                      np.array(kept)[order])


def label_map_to_onehot(label_map: LabelMap) -> np.ndarray:
    """(3, gh, gw) one-hot targets; boundary cells are not allowed."""
    if label_map.has_boundary:
        raise ValueError("label map contains boundary cells; mask them before encoding")
    return np.eye(3)[label_map.grid].transpose(2, 0, 1)


def onehot_with_mask(label_map: LabelMap) -> tuple[np.ndarray, np.ndarray]:
    """One-hot targets plus a validity mask; boundary cells get a zero target and mask."""
    valid = label_map.grid != DistortionLabel.BOUNDARY
    safe = np.where(valid, label_map.grid, 0)
    onehot = np.eye(3)[safe].transpose(2, 0, 1) * valid[None]
    return onehot, valid
