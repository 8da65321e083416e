"""Rainy/clean pairs: file loading, synthetic rain, patch tiling, scale space.

Images are float arrays of shape (3, H, W) in [0, 1] ("file space");
8-bit quantization happens only when writing files.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image

from .model import PATCH
from .model import downsample as _downsample_tensor

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass
class RainPair:
    rainy: np.ndarray
    clean: np.ndarray
    identifier: str = ""
    raw_residual: np.ndarray | None = None  # pre-clip stamped rain, synthesis only

    def __post_init__(self):
        if self.rainy.shape != self.clean.shape:
            raise ValueError(
                f"pair {self.identifier!r}: rainy {self.rainy.shape} vs clean {self.clean.shape}"
            )

    @property
    def residual(self) -> np.ndarray:
        return self.rainy - self.clean


@dataclass
class SyntheticRainConfig:
    density: float = 200.0  # streaks per megapixel
    angle: float = 10.0  # degrees from vertical
    angle_jitter: float = 5.0
    length: float = 100.0
    width: float = 4.0
    intensity: float = 0.4
    seed: int = 0


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_image(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 3:
        image = image.transpose(1, 2, 0)
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _image_files(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def split_concatenated(image: np.ndarray, rainy_left: bool = True) -> tuple[np.ndarray, np.ndarray]:
    w = image.shape[-1]
    if w % 2:
        raise ValueError(f"concatenated image has odd width {w}")
    left, right = image[..., : w // 2], image[..., w // 2:]
    return (left, right) if rainy_left else (right, left)


def load_pair_directory(root: str | Path, layout: str = "paired_dirs",
                        rainy_left: bool = True) -> Iterator[RainPair]:
    """Yield pairs in sorted filename order.

    ``paired_dirs`` expects ``rainy/`` and ``clean/`` with matching names;
    ``concatenated`` expects side-by-side images split at the midpoint.
    A ``manifest.csv`` (id, rainy_path, clean_path) in ``root`` overrides discovery.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    manifest = root / "manifest.csv"
    if manifest.exists():
        yield from _load_manifest(manifest)
        return
    if layout == "concatenated":
        for path in _image_files(root):
            rainy, clean = split_concatenated(read_image(path), rainy_left)
            yield RainPair(rainy, clean, path.stem)
        return
    if layout != "paired_dirs":
        raise ValueError(f"unknown layout {layout!r}")
    rainy_dir, clean_dir = root / "rainy", root / "clean"
    for d in (rainy_dir, clean_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory {d}")
    rainy = {p.name: p for p in _image_files(rainy_dir)}
    clean = {p.name: p for p in _image_files(clean_dir)}
    orphans = sorted(
        [f"rainy/{n}" for n in rainy.keys() - clean.keys()]
        + [f"clean/{n}" for n in clean.keys() - rainy.keys()]
    )
    if orphans:
        raise FileNotFoundError("files without a counterpart: " + ", ".join(orphans))
    for name in sorted(rainy):
        yield RainPair(read_image(rainy[name]), read_image(clean[name]), Path(name).stem)


def _load_manifest(path: Path) -> Iterator[RainPair]:
    base = path.parent
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            yield RainPair(read_image(base / row["rainy_path"]), read_image(base / row["clean_path"]),
                           row["id"])


def _stamp_streak(canvas: np.ndarray, cx: float, cy: float, theta: float, length: float,
                  width: float, intensity: float) -> None:
    """Add one blurred segment: Gaussian across, raised-cosine taper along."""
    h, w = canvas.shape
    dx, dy = math.sin(theta), math.cos(theta)  # theta measured from vertical
    half = length / 2.0
    reach = half * max(abs(dx), abs(dy)) + 3 * width + 1
    x0, x1 = max(int(cx - reach), 0), min(int(cx + reach) + 1, w)
    y0, y1 = max(int(cy - reach), 0), min(int(cy + reach) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    rx, ry = xx - cx, yy - cy
    along = rx * dx + ry * dy
    across = -rx * dy + ry * dx
    taper = np.where(np.abs(along) <= half, 0.5 * (1 + np.cos(np.pi * along / half)), 0.0)
    profile = np.exp(-0.5 * (across / (width / 2.0)) ** 2)
    canvas[y0:y1, x0:x1] += intensity * taper * profile


def rain_layer(shape: tuple[int, int], cfg: SyntheticRainConfig) -> np.ndarray:
    """Non-negative single-channel streak layer."""
    h, w = shape
    canvas = np.zeros((h, w))
    n = int(round(cfg.density * h * w / 1e6))
    if n == 0 or cfg.intensity == 0:
        return canvas
    rng = np.random.default_rng(cfg.seed)
    for _ in range(n):
        theta = math.radians(cfg.angle + cfg.angle_jitter * rng.standard_normal())
        length = cfg.length * rng.uniform(0.6, 1.4)
        amp = cfg.intensity * rng.uniform(0.6, 1.0)
        _stamp_streak(canvas, rng.uniform(0, w), rng.uniform(0, h), theta, length, cfg.width, amp)
    return np.minimum(canvas, cfg.intensity)


def synthesize_rain(clean: np.ndarray, cfg: SyntheticRainConfig, identifier: str = "") -> RainPair:
    """Additive rain on a clean (3,H,W) image in [0,1]; rainy is clipped at 1."""
    layer = rain_layer(clean.shape[-2:], cfg)
    raw = np.broadcast_to(layer, clean.shape).copy()
    rainy = np.minimum(clean + raw, 1.0)
    return RainPair(rainy, clean.copy(), identifier, raw_residual=raw)


def _pad_np(img: np.ndarray, multiple: int) -> np.ndarray:
    h, w = img.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return img
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(img, [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)], mode=mode)


def extract_patches(img: np.ndarray, size: int = PATCH, stride: int = PATCH
                    ) -> tuple[list[np.ndarray], tuple[int, int]]:
    """Row-major non-overlapping tiles of the reflection-padded image."""
    if stride != size:
        raise ValueError("only non-overlapping tiling (stride == size) is supported")
    padded = _pad_np(img, size)
    gh, gw = padded.shape[-2] // size, padded.shape[-1] // size
    patches = [padded[..., i * size:(i + 1) * size, j * size:(j + 1) * size]
               for i in range(gh) for j in range(gw)]
    return patches, (gh, gw)


def assemble_patches(patches: list[np.ndarray], grid: tuple[int, int]) -> np.ndarray:
    gh, gw = grid
    rows = [np.concatenate(patches[i * gw:(i + 1) * gw], axis=-1) for i in range(gh)]
    return np.concatenate(rows, axis=-2)


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Antialiased bilinear down-sampling of a (3,H,W) array."""
    if factor not in (1, 2, 4):
        raise ValueError(f"factor must be 1, 2 or 4, got {factor}")
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64))[None]
    return _downsample_tensor(t, factor)[0].numpy()


def to_network(img: np.ndarray) -> torch.Tensor:
    """(3,H,W) in [0,1] -> (1,3,H,W) float32 tensor in [-1,1]."""
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None] * 2.0 - 1.0


def from_network(t: torch.Tensor) -> np.ndarray:
    """(1,3,H,W) or (3,H,W) tensor in [-1,1] -> numpy in [0,1]."""
    t = t.detach()
    if t.dim() == 4:
        t = t[0]
    return ((t.double().cpu().numpy() + 1.0) / 2.0).clip(0.0, 1.0)


SAMPLE_SOURCES = ("astronaut", "coffee", "chelsea", "rocket", "camera", "coins",
                  "immunohistochemistry", "brick", "grass", "gravel", "moon")


def sample_clean_images(n: int = 8, size: int = 256, seed: int = 0,
                        sources: tuple[str, ...] = SAMPLE_SOURCES) -> list[np.ndarray]:
    """Deterministic square crops of photographs bundled with scikit-image."""
    from skimage import data as skdata

    rng = np.random.default_rng(seed)
    pool = []
    for name in sources:
        img = np.asarray(getattr(skdata, name)(), dtype=np.float64) / 255.0
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        pool.append(img[..., :3].transpose(2, 0, 1))
    crops = []
    for k in range(n):
        img = pool[k % len(pool)]
        h, w = img.shape[-2:]
        i = int(rng.integers(0, h - size + 1))
        j = int(rng.integers(0, w - size + 1))
        crops.append(img[:, i:i + size, j:j + size].copy())
    return crops
