"""Inference, cycle spinning, PSNR/SSIM and dataset reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .data import RainPair, from_network, to_network, write_image
from .labeling import LabelMap
from .model import PATCH, QuDeC

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# Reference PSNR|SSIM of the full-scale model; context only, not reproducible at desk scale.
PUBLISHED_TARGETS = {
    "Test-1": (30.43, 0.93),
    "Test-2": (26.72, 0.92),
    "Rain800": (24.61, 0.86),
    "Rain200H": (26.74, 0.93),
}


@dataclass
class InferenceOutput:
    x_hat: np.ndarray  # (3,H,W) in [0,1]
    r1: np.ndarray  # residual in file units (rainy - clean), signed
    c1: np.ndarray
    labels: np.ndarray  # (gh, gw) class indices
    c_s: np.ndarray  # (gh, gw)
    probs: np.ndarray  # (3, gh, gw)
    lower: dict[str, np.ndarray] = field(default_factory=dict)

    def label_map(self) -> LabelMap:
        h, w = self.x_hat.shape[-2:]
        return LabelMap(self.labels, w, h, PATCH, "network_d2")


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach()[0].double().cpu().numpy()


def derain(rainy: np.ndarray, model: QuDeC) -> InferenceOutput:
    """Run the network in inference mode on a (3,H,W) image in [0,1]."""
    model.eval()
    with torch.no_grad():
        out = model(to_network(rainy).to(next(model.parameters()).device))
    lower = {
        "x_hat2": from_network(out["x_hat2"]), "r2": _np(out["r2"]) / 2.0, "c2": _np(out["c2"]),
        "x_hat4": from_network(out["x_hat4"]), "r4": _np(out["r4"]) / 2.0, "c4": _np(out["c4"]),
    }
    probs = _np(out["probs"])
    return InferenceOutput(
        x_hat=from_network(out["x_hat"]),
        r1=_np(out["r1"]) / 2.0,  # network space spans 2 units per file unit
        c1=_np(out["c1"]),
        labels=probs.argmax(0),
        c_s=_np(out["c_s"]),
        probs=probs,
        lower=lower,
    )


@dataclass(frozen=True)
class CycleSpinConfig:
    shifts: tuple[tuple[int, int], ...] = tuple((dx, dy) for dy in (0, 8, 16, 24) for dx in (0, 8, 16, 24))

    def __post_init__(self):
        if (0, 0) not in self.shifts:
            raise ValueError("cycle spinning shifts must include (0, 0)")


def cycle_spin(rainy: np.ndarray, restore: Callable[[np.ndarray], np.ndarray],
               cfg: CycleSpinConfig | None = None) -> np.ndarray:
    """Average of unshifted restorations of circularly shifted inputs."""
    cfg = cfg or CycleSpinConfig()
    acc = np.zeros_like(rainy, dtype=np.float64)
    for dx, dy in cfg.shifts:
        shifted = np.roll(rainy, (dy, dx), axis=(-2, -1))
        acc += np.roll(restore(shifted), (-dy, -dx), axis=(-2, -1))
    return acc / len(cfg.shifts)


def cycle_spin_derain(rainy: np.ndarray, model: QuDeC, cfg: CycleSpinConfig | None = None) -> np.ndarray:
    return cycle_spin(rainy, lambda y: derain(y, model).x_hat, cfg)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.tensordot(LUMA, img, axes=(0, 0)) if img.ndim == 3 else img


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"PSNR: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def _ssim_window() -> np.ndarray:
    ax = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-0.5 * (ax / SSIM_SIGMA) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows, on luminance."""
    a, b = luminance(a), luminance(b)
    if a.shape != b.shape:
        raise ValueError(f"SSIM: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    w = _ssim_window()
    half = SSIM_WINDOW // 2
    valid = (slice(half, a.shape[0] - half), slice(half, a.shape[1] - half))

    def filt(x):
        return ndimage.correlate(x, w, mode="constant")[valid]

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a * mu_a
    s_bb = filt(b * b) - mu_b * mu_b
    s_ab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


@dataclass
class MetricRow:
    id: str
    psnr_db: float
    ssim: float
    used_cycle_spin: bool


@dataclass
class MetricsReport:
    rows: list[MetricRow]
    descriptor: str = ""
    quantized: bool = True
    channel: str = "rgb"

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "psnr_db", "ssim", "used_cycle_spin"])
        for r in self.rows:
            writer.writerow([r.id, format_psnr(r.psnr_db, 6), f"{r.ssim:.6f}", int(r.used_cycle_spin)])
        return buf.getvalue()

    def cell(self) -> str:
        return f"{format_psnr(self.mean_psnr)}|{self.mean_ssim:.2f}"

    def to_table(self) -> str:
        mode = "8-bit quantized" if self.quantized else "float"
        lines = [f"# {self.descriptor}".rstrip(), f"# PSNR on {self.channel.upper()} ({mode}); SSIM on luminance",
                 f"{'id':<24} PSNR|SSIM"]
        lines += [f"{r.id:<24} {format_psnr(r.psnr_db)}|{r.ssim:.2f}" for r in self.rows]
        lines.append(f"{'mean':<24} {self.cell()}")
        return "\n".join(lines) + "\n"

    def save(self, prefix: str | Path) -> tuple[Path, Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        csv_path = prefix.with_suffix(".csv")
        txt_path = prefix.with_suffix(".txt")
        csv_path.write_text(self.to_csv())
        txt_path.write_text(self.to_table())
        return csv_path, txt_path


def format_psnr(value: float, digits: int = 2) -> str:
    return "Inf" if math.isinf(value) else f"{value:.{digits}f}"


def evaluate_dataset(pairs: Iterable[RainPair], restore: Callable[[np.ndarray], np.ndarray] | QuDeC,
                     cycle_spin_cfg: CycleSpinConfig | None = None, quantized: bool = True,
                     channel: str = "rgb", descriptor: str = "") -> MetricsReport:
    """Per-image PSNR/SSIM of ``restore(rainy)`` against the clean image.

    ``restore`` is a model or any callable mapping a (3,H,W) array to its
    restoration. ``channel`` is ``"rgb"`` or ``"y"`` (luminance PSNR).
    """
    if channel not in ("rgb", "y"):
        raise ValueError(f"channel must be 'rgb' or 'y', got {channel!r}")
    if isinstance(restore, QuDeC):
        model = restore

        def restore(y):
            return derain(y, model).x_hat
    rows = []
    for pair in pairs:
        if cycle_spin_cfg is not None:
            out = cycle_spin(pair.rainy, restore, cycle_spin_cfg)
        else:
            out = restore(pair.rainy)
        if out.shape != pair.clean.shape:
            raise ValueError(f"{pair.identifier}: output {out.shape} != input {pair.clean.shape}")
        est, ref = (quantize(out), quantize(pair.clean)) if quantized else (out, pair.clean)
        p_est, p_ref = (luminance(est), luminance(ref)) if channel == "y" else (est, ref)
        rows.append(MetricRow(pair.identifier, psnr(p_est, p_ref), ssim(est, ref), cycle_spin_cfg is not None))
    if not rows:
        raise ValueError("evaluation dataset is empty")
    return MetricsReport(rows, descriptor, quantized, channel)


def export_maps(result: InferenceOutput, out_dir: str | Path, stem: str = "image") -> list[Path]:
    """Write x_hat, residual, confidence, label map and label confidence as PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = result.x_hat.shape[-2:]
    paths = {
        "derained": result.x_hat,
        "residual": np.clip(np.abs(result.r1), 0.0, 1.0),
        "confidence": np.clip(result.c1, 0.0, 1.0),
        "label_confidence": np.clip(
            np.repeat(np.repeat(result.c_s, PATCH, 0), PATCH, 1)[:h, :w], 0.0, 1.0),
    }
    written = []
    for name, img in paths.items():
        p = out_dir / f"{stem}_{name}.png"
        write_image(p, img)
        written.append(p)
    p = out_dir / f"{stem}_labels.png"
    result.label_map().save_png(p, result.x_hat)
    written.append(p)
    return written


def restore_pairs_identity(pairs: Sequence[RainPair]) -> MetricsReport:
    """Metrics of the rainy inputs themselves (the no-op baseline)."""
    return evaluate_dataset(pairs, lambda y: y, descriptor="rainy input")
