"""Training for QuDeC and GLN: schedules, multi-scale targets, checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .data import RainPair, to_network
from .labeling import GlnDataset, LabelMap, onehot_with_mask
from .losses import CSV_FIELDS, LossWeights, build_extractor, qudec_loss
from .model import GLN, PATCH, ContractError, ModelConfig, QuDeC, downsample

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LAMBDA1_INITIAL = 0.1
LAMBDA1_SWITCHED = 0.03
CONFIDENCE_SWITCH = 0.8
TRAIN_LOG_FIELDS = ("epoch", "lr") + CSV_FIELDS


@dataclass
class TrainConfig:
    batch_size: int = 1
    lr_initial: float = 2e-4
    lr_after_epoch_20: float = 1e-4
    lr_switch_epoch: int = 20
    epochs: int = 60
    gln_epochs: int = 40
    gln_lr: float = 2e-4
    gln_batch_size: int = 4
    lambda1: float = LAMBDA1_INITIAL
    lambda2: float = 1.0
    lambda_cs: float = 0.1
    seed: int = 0
    device: str = "cpu"
    width: int = 32
    grad_clip: float = 0.0  # 0 disables clipping
    bn_freeze_step: int = 0  # from this step on BatchNorm uses running statistics; 0 never
    augment: bool = True
    crop_size: int = 256
    use_gln_labels: bool = True
    vgg_weights: str = ""
    allow_batch_size: bool = False

    def __post_init__(self):
        if self.batch_size != 1 and not self.allow_batch_size:
            raise ValueError("batch_size other than 1 requires allow_batch_size=True")

    def save(self, path: str | Path) -> None:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _parse_value(value, types[key])
        return cls(**values)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale mode: gradient clipping on, and BatchNorm statistics frozen
        after a short warm-up so eval-mode outputs match training at batch size 1."""
        return cls(**{"grad_clip": 5.0, "bn_freeze_step": 240, **overrides})


def _parse_value(value: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


def learning_rate(epoch: int, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    return cfg.lr_initial if epoch <= cfg.lr_switch_epoch else cfg.lr_after_epoch_20


def lambda1_schedule(mean_confidence: float, latched: bool = False) -> float:
    """0.03 once the mean confidence exceeds 0.8 (or has before), else 0.1."""
    if latched or mean_confidence > CONFIDENCE_SWITCH:
        return LAMBDA1_SWITCHED
    return LAMBDA1_INITIAL


@dataclass
class ScheduleState:
    current_epoch: int = 1
    step: int = 0
    lambda1_active: float = LAMBDA1_INITIAL
    mean_confidence: float = 0.0
    latched: bool = False

    def update(self, mean_confidence: float) -> float:
        self.mean_confidence = mean_confidence
        self.lambda1_active = lambda1_schedule(mean_confidence, self.latched)
        self.latched = self.lambda1_active == LAMBDA1_SWITCHED
        return self.lambda1_active


def multi_scale_targets(x: Tensor, y: Tensor) -> dict[str, Tensor]:
    if x.shape != y.shape:
        raise ValueError(f"clean {tuple(x.shape)} and rainy {tuple(y.shape)} differ")
    return {"x1": x, "x2": downsample(x, 2), "x4": downsample(x, 4),
            "y2": downsample(y, 2), "y4": downsample(y, 4)}


@dataclass
class TrainingSample:
    pair: RainPair
    labels: LabelMap


def label_tensors(labels: LabelMap) -> tuple[Tensor, Tensor]:
    onehot, valid = onehot_with_mask(labels)
    return (torch.from_numpy(onehot).float()[None], torch.from_numpy(valid).float()[None])


def _prepare(sample: TrainingSample, rng: random.Random | None, crop: int) -> tuple[Tensor, ...]:
    """Network-space tensors; optional grid-aligned crop and horizontal flip."""
    y, x = to_network(sample.pair.rainy), to_network(sample.pair.clean)
    onehot, mask = label_tensors(sample.labels)
    h, w = y.shape[-2:]
    ph, pw = -h % PATCH, -w % PATCH
    if ph or pw:
        # reflect-pad images to the label grid so crops stay aligned
        y = F.pad(y, (0, pw, 0, ph), mode="reflect")
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    if rng is not None:
        gh, gw = onehot.shape[-2:]
        ch, cw = min(crop // PATCH, gh), min(crop // PATCH, gw)
        i, j = rng.randint(0, gh - ch), rng.randint(0, gw - cw)
        sl = (..., slice(i * PATCH, (i + ch) * PATCH), slice(j * PATCH, (j + cw) * PATCH))
        gsl = (..., slice(i, i + ch), slice(j, j + cw))
        y, x, onehot, mask = y[sl], x[sl], onehot[gsl], mask[gsl]
        if rng.random() < 0.5:
            y, x, onehot, mask = (t.flip(-1) for t in (y, x, onehot, mask))
    return y, x, onehot, mask


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


class Trainer:
    """Owns the model, optimizer, extractor and schedule state for QuDeC training."""

    def __init__(self, config: TrainConfig | None = None, model: QuDeC | None = None) -> None:
        self.config = config or TrainConfig()
        seed_everything(self.config.seed)
        self.device = torch.device(self.config.device)
        self.model = (model or QuDeC(ModelConfig(width=self.config.width))).to(self.device)
        self.extractor = build_extractor(self.config.vgg_weights or None).to(self.device)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.config.lr_initial,
                                          betas=(0.9, 0.999), eps=1e-8)
        self.state = ScheduleState(lambda1_active=self.config.lambda1)
        self.rng = random.Random(self.config.seed)
        self.history: list[dict] = []

    def weights(self) -> LossWeights:
        return LossWeights(self.state.lambda1_active, self.config.lambda2, self.config.lambda_cs)

    def set_epoch(self, epoch: int) -> None:
        self.state.current_epoch = epoch
        lr = learning_rate(epoch, self.config)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def train_mode(self) -> None:
        self.model.train()
        freeze = self.config.bn_freeze_step
        if freeze and self.state.step >= freeze:
            for m in self.model.modules():
                if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
                    m.eval()

    def train_step(self, y: Tensor, x: Tensor, onehot: Tensor, mask: Tensor):
        self.train_mode()
        y, x, onehot, mask = (t.to(self.device) for t in (y, x, onehot, mask))
        targets = multi_scale_targets(x, y)
        targets.update(onehot=onehot, mask=mask)
        outputs = self.model(y)
        try:
            breakdown = qudec_loss(outputs, targets, self.weights(), self.extractor)
        except FloatingPointError as exc:
            raise FloatingPointError(f"step {self.state.step}: {exc}") from exc
        if not torch.isfinite(breakdown.total):
            raise FloatingPointError(f"step {self.state.step}: non-finite loss {breakdown.as_dict()}")
        self.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.state.step += 1
        row = {"epoch": self.state.current_epoch, "lr": self.optimizer.param_groups[0]["lr"],
               **breakdown.csv_row(self.state.step)}
        self.state.update(breakdown.mean_c)
        self.history.append(row)
        return breakdown

    def train_sample(self, sample: TrainingSample):
        y, x, onehot, mask = _prepare(sample, self.rng if self.config.augment else None,
                                      self.config.crop_size)
        return self.train_step(y, x, onehot, mask)

    def run_epoch(self, samples: Sequence[TrainingSample], max_steps: int | None = None) -> None:
        order = list(range(len(samples)))
        self.rng.shuffle(order)
        for k in order:
            if max_steps is not None and self.state.step >= max_steps:
                return
            self.train_sample(samples[k])

    def save(self, path: str | Path) -> None:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "model_config": self.model.config.to_dict(),
            "state_dict": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "schedule": dataclasses.asdict(self.state),
            "train_config": dataclasses.asdict(self.config),
            "rng": self.rng.getstate(),
            "torch_rng": torch.get_rng_state(),
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)

    @classmethod
    def resume(cls, path: str | Path, config: TrainConfig | None = None) -> "Trainer":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        config = config or TrainConfig(**payload["train_config"])
        model = load_model(path)
        trainer = cls(config, model)
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.state = ScheduleState(**payload["schedule"])
        trainer.rng.setstate(payload["rng"])
        torch.set_rng_state(payload["torch_rng"])
        return trainer


def save_model(model: QuDeC, path: str | Path) -> None:
    torch.save({"schema_version": SCHEMA_VERSION, "model_config": model.config.to_dict(),
                "state_dict": model.state_dict()}, path)


def load_model(path: str | Path) -> QuDeC:
    """Load a QuDeC checkpoint, rejecting any parameter whose shape differs."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ContractError(f"unsupported checkpoint schema {payload.get('schema_version')}")
    model = QuDeC(ModelConfig(**payload["model_config"]))
    _load_checked(model, payload["state_dict"])
    return model.eval()


def _load_checked(model: torch.nn.Module, state: dict[str, Tensor]) -> None:
    expected = model.state_dict()
    missing = sorted(expected.keys() - state.keys())
    unexpected = sorted(state.keys() - expected.keys())
    bad = [f"{k}: {tuple(state[k].shape)} != {tuple(v.shape)}"
           for k, v in expected.items() if k in state and state[k].shape != v.shape]
    if missing or unexpected or bad:
        raise ContractError(f"checkpoint mismatch: missing={missing} unexpected={unexpected} shape={bad}")
    for k, v in state.items():
        if v.is_floating_point() and not torch.isfinite(v).all():
            raise ContractError(f"checkpoint parameter {k} has non-finite values")
    model.load_state_dict(state)


@dataclass
class TrainResult:
    model: QuDeC
    log: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    state: ScheduleState | None = None


def write_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAIN_LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in TRAIN_LOG_FIELDS})


def train_qudec(samples: Sequence[TrainingSample], config: TrainConfig | None = None,
                out_dir: str | Path | None = None, max_steps: int | None = None,
                resume_from: str | Path | None = None, checkpoint_every_epoch: bool = True
                ) -> TrainResult:
    """Epoch loop with per-epoch checkpoints; resumable from any checkpoint."""
    if not samples:
        raise ValueError("training dataset is empty")
    config = config or TrainConfig()
    trainer = Trainer.resume(resume_from, config) if resume_from else Trainer(config)
    start = trainer.state.current_epoch + 1 if resume_from else 1
    out = Path(out_dir) if out_dir else None
    ckpts = []
    for epoch in range(start, config.epochs + 1):
        trainer.set_epoch(epoch)
        trainer.run_epoch(samples, max_steps)
        last = trainer.history[-1] if trainer.history else {}
        log.info("epoch %d step %d lr %.1e total %.4f mean_c %.3f lambda1 %.2f", epoch,
                 trainer.state.step, learning_rate(epoch, config), last.get("total", float("nan")),
                 trainer.state.mean_confidence, trainer.state.lambda1_active)
        if out and checkpoint_every_epoch:
            path = out / f"epoch_{epoch:03d}.ckpt"
            trainer.save(path)
            ckpts.append(path)
        if max_steps is not None and trainer.state.step >= max_steps:
            break
    if out:
        out.mkdir(parents=True, exist_ok=True)
        write_log(trainer.history, out / "train_log.csv")
        save_model(trainer.model, out / "final.ckpt")
    trainer.model.eval()
    return TrainResult(trainer.model, trainer.history, ckpts, trainer.state)


@dataclass
class GlnResult:
    model: GLN
    log: list[dict]


def _gln_batches(patches: np.ndarray, labels: np.ndarray, batch: int, rng: np.random.Generator):
    order = rng.permutation(len(labels))
    for k in range(0, len(order), batch):
        idx = order[k:k + batch]
        yield (torch.from_numpy(patches[idx]).float() * 2 - 1, torch.from_numpy(labels[idx]))


def gln_accuracy(model: GLN, patches: np.ndarray, labels: np.ndarray, batch: int = 16) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for k in range(0, len(labels), batch):
            x = torch.from_numpy(patches[k:k + batch]).float() * 2 - 1
            correct += int((model(x).argmax(1).numpy() == labels[k:k + batch]).sum())
    return correct / max(len(labels), 1)


def train_gln(dataset: GlnDataset, config: TrainConfig | None = None, val_fraction: float = 0.1,
              out_path: str | Path | None = None, model: GLN | None = None) -> GlnResult:
    """Cross-entropy training with Adam at a fixed learning rate."""
    config = config or TrainConfig()
    seed_everything(config.seed)
    if len(np.unique(dataset.labels)) < 2:
        log.warning("GLN dataset has a single class; training proceeds")
    n_val = int(len(dataset) * val_fraction)
    train_p, train_l = dataset.patches[n_val:], dataset.labels[n_val:]
    val_p, val_l = dataset.patches[:n_val], dataset.labels[:n_val]
    model = model or GLN()
    opt = torch.optim.Adam(model.parameters(), lr=config.gln_lr)
    rng = np.random.default_rng(config.seed)
    rows = []
    for epoch in range(1, config.gln_epochs + 1):
        model.train()
        losses = []
        for x, t in _gln_batches(train_p, train_l, config.gln_batch_size, rng):
            loss = F.cross_entropy(model(x), t)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "loss": float(np.mean(losses)),
               "train_accuracy": gln_accuracy(model, train_p, train_l),
               "val_accuracy": gln_accuracy(model, val_p, val_l) if n_val else float("nan")}
        log.info("GLN epoch %d loss %.4f train acc %.3f val acc %.3f", epoch, row["loss"],
                 row["train_accuracy"], row["val_accuracy"])
        rows.append(row)
    model.eval()
    if out_path:
        save_gln(model, out_path)
    return GlnResult(model, rows)


def save_gln(model: GLN, path: str | Path) -> None:
    torch.save({"schema_version": SCHEMA_VERSION, "kind": "gln", "state_dict": model.state_dict()}, path)


def load_gln(path: str | Path) -> GLN:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != SCHEMA_VERSION or payload.get("kind") != "gln":
        raise ContractError(f"{path} is not a GLN checkpoint")
    model = GLN()
    _load_checked(model, payload["state_dict"])
    return model.eval()


def gln_label_map(model: GLN, image: np.ndarray) -> LabelMap:
    """Predict a label map for a (3,H,W) image in [0,1] with a trained GLN."""
    from .data import extract_patches

    patches, grid = extract_patches(image)
    x = torch.from_numpy(np.stack(patches)).float() * 2 - 1
    model.eval()
    with torch.no_grad():
        pred = model(x).argmax(1).numpy().reshape(grid)
    h, w = image.shape[-2:]
    return LabelMap(pred, w, h, PATCH, "gln_predicted")
