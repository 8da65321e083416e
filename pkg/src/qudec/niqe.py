"""No-reference NIQE scoring.

Natural-scene statistics on mean-subtracted contrast-normalized (MSCN)
luminance: an asymmetric generalized Gaussian (AGGD) is fitted to the MSCN
field and to its four neighbour products, at two scales, giving an 18-value
feature vector per scale (36 in total). A multivariate Gaussian fitted on
clean images (the pristine model) is compared against the statistics of the
image under test.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage
from scipy.special import gamma as gamma_fn

FORMAT_VERSION = 1
WINDOW_SIZE = 7
WINDOW_SIGMA = 7.0 / 6.0
STABILIZER = 1.0  # on the 0..255 luminance scale
BLOCK = 96
SUB_BLOCK_STRIDE = 16
FEATURES_PER_SCALE = 18
FEATURE_DIM = 2 * FEATURES_PER_SCALE
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

ALPHA_GRID = np.arange(0.2, 10.0 + 1e-9, 0.001)
_RHO_GRID = gamma_fn(2.0 / ALPHA_GRID) ** 2 / (gamma_fn(1.0 / ALPHA_GRID) * gamma_fn(3.0 / ALPHA_GRID))


@dataclass
class MscnField:
    coefficients: np.ndarray
    window: np.ndarray
    stabilizer: float


@dataclass
class AggdParams:
    """AGGD fit. ``left_scale``/``right_scale`` are one-sided standard deviations."""

    alpha: float
    left_scale: float
    right_scale: float
    mean_offset: float


@dataclass
class PristineModel:
    mean: np.ndarray
    cov: np.ndarray
    descriptor: str = ""
    format_version: int = FORMAT_VERSION

    @property
    def feature_dim(self) -> int:
        return int(self.mean.shape[0])

    def save(self, path: str | Path) -> None:
        d = self.feature_dim
        payload = {
            "format_version": self.format_version,
            "d": d,
            "mean": self.mean.tolist(),
            "cov": self.cov.reshape(d * d).tolist(),
            "descriptor": self.descriptor,
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "PristineModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_dict(cls, payload: dict) -> "PristineModel":
        version = payload.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported pristine model format version {version}")
        d = int(payload["d"])
        mean = np.asarray(payload["mean"], dtype=np.float64)
        cov = np.asarray(payload["cov"], dtype=np.float64)
        if mean.shape != (d,) or cov.size != d * d:
            raise ValueError(f"pristine model arrays do not match d={d}")
        return cls(mean=mean, cov=cov.reshape(d, d), descriptor=payload.get("descriptor", ""),
                   format_version=version)


@dataclass
class NiqeScore:
    value: float
    pseudo_inverse: bool = False
    metadata: dict = field(default_factory=dict)

    def __float__(self) -> float:
        return self.value


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def to_luminance(image: np.ndarray) -> np.ndarray:
    """(3,H,W) or (H,W,3) or (H,W) in [0,1] -> (H,W) luminance on 0..255."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[0] == 3:
            image = np.tensordot(LUMA_WEIGHTS, image, axes=(0, 0))
        elif image.shape[-1] == 3:
            image = image @ LUMA_WEIGHTS
        else:
            raise ValueError(f"cannot interpret image of shape {image.shape}")
    return image * 255.0


def compute_mscn(gray: np.ndarray, stabilizer: float = STABILIZER) -> MscnField:
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or min(gray.shape) < WINDOW_SIZE:
        raise ValueError(f"MSCN needs a 2-D image of at least {WINDOW_SIZE}x{WINDOW_SIZE}, got {gray.shape}")
    window = gaussian_window()
    mu = ndimage.correlate(gray, window, mode="reflect")
    second = ndimage.correlate(gray * gray, window, mode="reflect")
    sigma = np.sqrt(np.abs(second - mu * mu))
    return MscnField((gray - mu) / (sigma + stabilizer), window, stabilizer)


def fit_aggd(samples: np.ndarray) -> AggdParams:
    """Moment-matching AGGD fit over the alpha grid [0.2, 10] in steps of 0.001."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 100:
        raise ValueError(f"AGGD fit needs at least 100 samples, got {x.size}")
    if not np.var(x) > 0:
        raise ValueError("AGGD fit needs samples with nonzero variance")
    left = x[x < 0]
    right = x[x >= 0]
    sigma_l = np.sqrt(np.mean(left * left)) if left.size else 0.0
    sigma_r = np.sqrt(np.mean(right * right)) if right.size else 0.0
    if sigma_l == 0.0 or sigma_r == 0.0:
        # one-sided data: fall back to the symmetric estimate
        sigma_l = sigma_r = np.sqrt(np.mean(x * x))
    g = sigma_l / sigma_r
    r_hat = np.mean(np.abs(x)) ** 2 / np.mean(x * x)
    r_norm = r_hat * (g ** 3 + 1) * (g + 1) / (g ** 2 + 1) ** 2
    alpha = float(ALPHA_GRID[np.argmin((_RHO_GRID - r_norm) ** 2)])
    ratio = np.sqrt(gamma_fn(1.0 / alpha) / gamma_fn(3.0 / alpha))
    beta_l, beta_r = ratio * sigma_l, ratio * sigma_r
    eta = (beta_r - beta_l) * gamma_fn(2.0 / alpha) / gamma_fn(1.0 / alpha)
    return AggdParams(alpha=alpha, left_scale=float(sigma_l), right_scale=float(sigma_r),
                      mean_offset=float(eta))


def _safe_aggd(samples: np.ndarray) -> AggdParams:
    # degenerate (flat) blocks: report a Gaussian shape with zero spread
    try:
        return fit_aggd(samples)
    except ValueError:
        return AggdParams(alpha=2.0, left_scale=0.0, right_scale=0.0, mean_offset=0.0)


def neighbour_products(mscn: np.ndarray) -> list[np.ndarray]:
    """Horizontal, vertical, main-diagonal and anti-diagonal products."""
    return [
        mscn[:, :-1] * mscn[:, 1:],
        mscn[:-1, :] * mscn[1:, :],
        mscn[:-1, :-1] * mscn[1:, 1:],
        mscn[1:, :-1] * mscn[:-1, 1:],
    ]


def block_features(mscn: np.ndarray) -> np.ndarray:
    """18 features of one MSCN block."""
    p = _safe_aggd(mscn)
    feats = [p.alpha, (p.left_scale ** 2 + p.right_scale ** 2) / 2.0]
    for prod in neighbour_products(mscn):
        q = _safe_aggd(prod)
        feats.extend([q.alpha, q.mean_offset, q.left_scale ** 2, q.right_scale ** 2])
    return np.asarray(feats)


def _half_scale(gray: np.ndarray) -> np.ndarray:
    # 2x2 box average: a simple antialiased half-scale
    h, w = gray.shape
    g = gray[: h - h % 2, : w - w % 2]
    return 0.25 * (g[0::2, 0::2] + g[1::2, 0::2] + g[0::2, 1::2] + g[1::2, 1::2])


def _block_origins(size: int, block: int, stride: int) -> list[int]:
    if size < block:
        return []
    starts = list(range(0, size - block + 1, stride))
    if starts[-1] != size - block:
        starts.append(size - block)
    return starts


def image_block_features(gray: np.ndarray, block: int = BLOCK, stride: int | None = None) -> np.ndarray:
    """Feature matrix (n_blocks, 36) over ``block``-sized blocks of a luminance image.

    ``stride`` defaults to ``block`` (non-overlapping tiling). Scale-two features
    come from the same block location on the half-resolution image.
    """
    stride = stride or block
    gray = np.asarray(gray, dtype=np.float64)
    m1 = compute_mscn(gray).coefficients
    m2 = compute_mscn(_half_scale(gray)).coefficients
    rows = []
    hb = block // 2
    for i in _block_origins(gray.shape[0], block, stride):
        for j in _block_origins(gray.shape[1], block, stride):
            f1 = block_features(m1[i:i + block, j:j + block])
            f2 = block_features(m2[i // 2:i // 2 + hb, j // 2:j // 2 + hb])
            rows.append(np.concatenate([f1, f2]))
    if not rows:
        raise ValueError(f"image {gray.shape} is smaller than one {block}x{block} block")
    return np.vstack(rows)


def extract_patch_features(patch: np.ndarray) -> np.ndarray:
    """Mean feature vector of a 128x128 RGB patch (over its 96x96 sub-blocks)."""
    return patch_statistics(patch)[0]


def patch_statistics(patch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the sub-block features of one patch."""
    feats = image_block_features(to_luminance(patch), BLOCK, SUB_BLOCK_STRIDE)
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False) if feats.shape[0] > 1 else np.zeros((feats.shape[1],) * 2)
    return mu, cov


def regularize(cov: np.ndarray) -> np.ndarray:
    d = cov.shape[0]
    lam = max(1e-6 * float(np.trace(cov)) / d, 1e-12)
    return cov + lam * np.eye(d)


def fit_pristine_model(images: Iterable[np.ndarray], descriptor: str = "",
                       min_images: int = 20) -> PristineModel:
    """Fit the pristine multivariate Gaussian over 96x96 blocks of clean images in [0,1]."""
    blocks = []
    n_images = 0
    for image in images:
        blocks.append(image_block_features(to_luminance(image)))
        n_images += 1
    if n_images < min_images:
        raise ValueError(f"pristine fit needs at least {min_images} images, got {n_images}")
    feats = np.vstack(blocks)
    return pristine_from_features(feats, descriptor or f"{n_images} images, {feats.shape[0]} blocks")


def pristine_from_features(feats: np.ndarray, descriptor: str = "") -> PristineModel:
    n, d = feats.shape
    if n < d:
        raise ValueError(
            f"only {n} blocks for {d} features; use a larger corpus (at least {d} 96x96 blocks)"
        )
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / max(n - 1, 1)
    cov = regularize(0.5 * (cov + cov.T))
    desc = (f"{descriptor}; window={WINDOW_SIZE}x{WINDOW_SIZE} sigma={WINDOW_SIGMA:.6f} "
            f"C={STABILIZER} block={BLOCK} scales=2 luma=BT.601")
    return PristineModel(mean=mean, cov=cov, descriptor=desc)


def mahalanobis_score(mu_t: np.ndarray, cov_t: np.ndarray, model: PristineModel) -> NiqeScore:
    diff = model.mean - mu_t
    avg = 0.5 * (model.cov + cov_t)
    evals = np.linalg.eigvalsh(0.5 * (avg + avg.T))
    singular = evals.min() <= 1e-12 * max(evals.max(), 1e-300)
    if singular:
        inv = np.linalg.pinv(avg)
        q = float(diff @ inv @ diff)
    else:
        q = float(diff @ np.linalg.solve(avg, diff))
    return NiqeScore(value=float(np.sqrt(max(q, 0.0))), pseudo_inverse=bool(singular),
                     metadata={"min_eigenvalue": float(evals.min())})


def niqe_score(patch: np.ndarray, model: PristineModel) -> NiqeScore:
    """NIQE of one RGB patch (3,128,128) in [0,1]."""
    mu_t, cov_t = patch_statistics(patch)
    if mu_t.shape[0] != model.feature_dim:
        raise ValueError(f"feature dim {mu_t.shape[0]} != pristine model dim {model.feature_dim}")
    return mahalanobis_score(mu_t, cov_t, model)


def niqe_image(image: np.ndarray, model: PristineModel) -> NiqeScore:
    """Whole-image NIQE over non-overlapping 96x96 blocks."""
    feats = image_block_features(to_luminance(image))
    cov = np.cov(feats, rowvar=False) if feats.shape[0] > 1 else np.zeros((feats.shape[1],) * 2)
    return mahalanobis_score(feats.mean(axis=0), cov, model)


def default_pristine_model() -> PristineModel:
    """The pristine model shipped with the package."""
    text = resources.files("qudec.resources").joinpath("pristine_niqe.json").read_text()
    return PristineModel.from_dict(json.loads(text))
