"""Training loops for the mask-conditioned denoiser and the auxiliary segmenter."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .ablation import ablate_label_batch, enumerate_patterns, pattern_index
from .checkpoint import ModelCheckpoint
from .diffusion import NoiseSchedule, forward_sample
from .metrics import batch_dice
from .optim import AdamW, ConfigError, lr_schedule
from .unet import Segmenter, UNet, UNetConfig, mask_channel_batch

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    def __init__(self, step: int, lr: float):
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3g})")
        self.step = step
        self.lr = lr


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    base_lr: float = 1e-4
    warmup_steps: int = 500
    weight_decay: float = 1e-2
    ablation_enabled: bool = True
    guidance_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.guidance_enabled:
            self.ablation_enabled = False
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def mode(self) -> str:
        if not self.guidance_enabled:
            return "unconditional"
        return "guided-ablated" if self.ablation_enabled else "guided"

    @classmethod
    def for_mode(cls, mode: str, **kw) -> TrainConfig:
        flags = {
            "guided": (True, False),
            "guided-ablated": (True, True),
            "unconditional": (False, False),
        }
        if mode not in flags:
            raise ConfigError(f"unknown training mode {mode!r}")
        guidance, ablation = flags[mode]
        return cls(guidance_enabled=guidance, ablation_enabled=ablation, **kw)


@dataclass
class LogRow:
    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    history: list[LogRow] = field(default_factory=list)
    pattern_counts: np.ndarray | None = None

    def epoch_means(self) -> np.ndarray:
        if not self.history:
            return np.zeros(0)
        epochs = np.array([r.epoch for r in self.history])
        losses = np.array([r.loss for r in self.history])
        return np.array([losses[epochs == e].mean() for e in np.unique(epochs)])


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


# probe(step, mask_labels_seen, mask_channel) is called before every update
Probe = Callable[[int, np.ndarray, np.ndarray], None]


def train_diffusion(
    images: np.ndarray,
    masks: np.ndarray,
    train_config: TrainConfig,
    unet_config: UNetConfig,
    schedule: NoiseSchedule,
    probe: Probe | None = None,
    steps: int | None = None,
) -> TrainResult:
    """Noise-prediction training with optional per-item mask ablation.

    ``images`` is (N, c, H, W) in [-1, 1], ``masks`` (N, H, W) integer labels.
    ``steps`` overrides the epoch-derived step budget (the epoch counter keeps
    cycling through shuffled passes of the data).
    """
    images = np.asarray(images, dtype=np.float32)
    masks = np.asarray(masks)
    n = len(images)
    if n == 0:
        raise ConfigError("training set is empty")
    if masks.shape != (n,) + images.shape[2:]:
        raise ConfigError(f"masks {masks.shape} do not match images {images.shape}")
    cfg = train_config
    C = unet_config.num_classes
    rng = np.random.default_rng(cfg.seed)
    net = UNet(unet_config, np.random.default_rng([cfg.seed, 1]))
    params = net.parameters()
    opt = AdamW(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    bs = min(cfg.batch_size, n)
    per_epoch = _steps_per_epoch(n, bs)
    total = steps if steps is not None else cfg.epochs * per_epoch
    warmup = min(cfg.warmup_steps, total)
    history: list[LogRow] = []
    pattern_counts = np.zeros(2 ** (C - 1), dtype=np.int64)

    step = 0
    epoch = 0
    while step < total:
        order = rng.permutation(n)
        for s in range(0, n, bs):
            if step >= total:
                break
            idx = order[s:s + bs]
            x0 = images[idx]
            lab = masks[idx]
            if cfg.ablation_enabled:
                lab, patterns = ablate_label_batch(lab, C, rng)
                for p in patterns:
                    pattern_counts[pattern_index(p)] += 1
            if cfg.guidance_enabled:
                mch = mask_channel_batch(lab, C)
            else:
                mch = np.zeros((len(idx), 1) + x0.shape[2:], dtype=np.float32)
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            x_t = forward_sample(x0, t, eps, schedule)
            if probe is not None:
                probe(step, lab, mch)

            lr = lr_schedule(step, total, warmup, cfg.base_lr)
            eps_hat = net.forward(x_t, mch, t)
            loss = ad.mse(eps_hat, ad.Tensor(eps))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(step, lr)
            ad.backward(loss)
            opt.step(lr)
            history.append(LogRow(step, epoch, lr, value))
            step += 1
        log.info("epoch %d: mean loss %.5f", epoch, np.mean([r.loss for r in history if r.epoch == epoch]))
        epoch += 1

    ckpt = ModelCheckpoint.from_model(net, schedule=schedule, step=step, kind="denoiser", mode=cfg.mode, seed=cfg.seed)
    return TrainResult(ckpt, history, pattern_counts if cfg.ablation_enabled else None)


# --------------------------------------------------------------------------
# segmenter


@dataclass
class SegmenterConfig:
    epochs: int = 40
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_steps: int = 0
    weight_decay: float = 1e-2
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    seed: int = 0


@dataclass
class SegmenterResult:
    checkpoint: ModelCheckpoint
    best_epoch: int
    best_step: int
    val_losses: list[float]
    val_steps: list[int] = field(default_factory=list)
    history: list[LogRow] = field(default_factory=list)

    def segmenter(self) -> Segmenter:
        return Segmenter(self.checkpoint.build())


def segmentation_loss(seg: Segmenter, images: np.ndarray, masks: np.ndarray, batch_size: int = 64) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for s in range(0, len(images), batch_size):
            ce = ad.cross_entropy_per_pixel(seg.logits(images[s:s + batch_size]), masks[s:s + batch_size])
            total += float(ce.data.astype(np.float64).sum())
            count += ce.data.size
    return total / count


def train_segmenter(
    images: np.ndarray,
    masks: np.ndarray,
    val_images: np.ndarray,
    val_masks: np.ndarray,
    num_classes: int,
    config: SegmenterConfig | None = None,
    steps: int | None = None,
    eval_every: int | None = None,
) -> SegmenterResult:
    """Per-pixel cross-entropy training; returns the parameters with the lowest validation loss.

    Validation runs at the end of every epoch (or every ``eval_every`` steps).
    """
    cfg = config or SegmenterConfig()
    images = np.asarray(images, dtype=np.float32)
    masks = np.asarray(masks)
    n = len(images)
    if n == 0:
        raise ConfigError("segmenter training set is empty")
    if len(val_images) == 0:
        raise ConfigError("segmenter validation split is empty")
    ucfg = UNetConfig.segmenter(num_classes, cfg.base_channels, cfg.channel_multipliers, images.shape[-1])
    rng = np.random.default_rng(cfg.seed)
    net = UNet(ucfg, np.random.default_rng([cfg.seed, 2]))
    seg = Segmenter(net)
    opt = AdamW(net.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    bs = min(cfg.batch_size, n)
    per_epoch = _steps_per_epoch(n, bs)
    total = steps if steps is not None else cfg.epochs * per_epoch
    warmup = min(cfg.warmup_steps, total)
    eval_every = eval_every or per_epoch

    best = (np.inf, -1, -1, None)
    val_losses: list[float] = []
    val_steps: list[int] = []
    history: list[LogRow] = []
    step = epoch = 0
    while step < total:
        order = rng.permutation(n)
        for s in range(0, n, bs):
            if step >= total:
                break
            idx = order[s:s + bs]
            lr = lr_schedule(step, total, warmup, cfg.base_lr)
            loss = ad.mean(ad.cross_entropy_per_pixel(seg.logits(images[idx]), masks[idx]))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(step, lr)
            ad.backward(loss)
            opt.step(lr)
            history.append(LogRow(step, epoch, lr, value))
            step += 1
            if step % eval_every == 0 or step == total:
                vl = segmentation_loss(seg, val_images, val_masks)
                val_losses.append(vl)
                val_steps.append(step)
                if vl < best[0]:
                    best = (vl, epoch, step, net.state_dict())
        epoch += 1

    _, best_epoch, best_step, state = best
    ckpt = ModelCheckpoint(state, ucfg, None, best_step, kind="segmenter", mode="segmenter", seed=cfg.seed)
    return SegmenterResult(ckpt, best_epoch, best_step, val_losses, val_steps, history)


def segmenter_dice(seg: Segmenter, images: np.ndarray, masks: np.ndarray, num_classes: int) -> float:
    return batch_dice(seg.predict(images), masks, num_classes)[0]


def write_loss_tsv(history: list[LogRow], path) -> None:
    lines = ["step\tepoch\tlr\tloss"] + [f"{r.step}\t{r.epoch}\t{r.lr!r}\t{r.loss!r}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_loss_tsv(path) -> list[LogRow]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    out = []
    for line in rows:
        step, epoch, lr, loss = line.split("\t")
        out.append(LogRow(int(step), int(epoch), float(lr), float(loss)))
    return out


def write_pattern_hist(counts: np.ndarray, num_classes: int, path) -> None:
    """One row per ablation pattern: index, removed classes, count."""
    lines = ["pattern\tremoved\tcount"]
    for i, p in enumerate(enumerate_patterns(num_classes)):
        removed = ",".join(str(c) for c in sorted(p.removed)) or "-"
        lines.append(f"{i}\t{removed}\t{int(counts[i])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
