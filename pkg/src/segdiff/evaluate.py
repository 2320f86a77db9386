"""Evaluation protocols: mask faithfulness, quality transfer and encoder-feature FID."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import ModelCheckpoint
from .diffusion import SamplerConfig, sample, sample_rngs
from .metrics import batch_dice, fid_from_features
from .train import SegmenterConfig, segmenter_dice, train_segmenter
from .unet import Segmenter, mask_channel_batch

FID_NOTE = "feature FID uses an encoder trained on this dataset; values are not comparable to Inception FID"


class EvaluationError(ValueError):
    pass


# --------------------------------------------------------------------------
# generators: labels (N, H, W) -> images (N, 1, H, W)


class DiffusionGenerator:
    """Samples one image per input mask from a denoiser checkpoint.

    Sample ``i`` draws from the stream ``(seed, i)`` and batches are fixed
    index ranges, so output does not depend on ``threads``.
    """

    def __init__(self, ckpt: ModelCheckpoint, sampler: SamplerConfig | None = None,
                 batch_size: int = 32, threads: int = 1):
        if ckpt.kind != "denoiser" or ckpt.schedule is None:
            raise EvaluationError("generator needs a denoiser checkpoint with a noise schedule")
        self.ckpt = ckpt
        self.net = ckpt.build()
        self.sampler = sampler or SamplerConfig()
        self.batch_size = batch_size
        self.threads = max(1, threads)

    @property
    def num_classes(self) -> int:
        return self.ckpt.config.num_classes

    def mask_channel(self, labels: np.ndarray) -> np.ndarray:
        if not self.ckpt.conditional:
            return np.zeros((len(labels), 1) + labels.shape[1:], dtype=np.float32)
        return mask_channel_batch(labels, self.num_classes)

    def __call__(self, labels: np.ndarray, seed: int | None = None) -> np.ndarray:
        labels = np.asarray(labels)
        seed = self.sampler.seed if seed is None else seed
        n = len(labels)
        if n == 0:
            size = self.ckpt.config.image_size
            return np.zeros((0, self.ckpt.config.image_channels, size, size), dtype=np.float32)
        mch = self.mask_channel(labels)
        chunks = [(s, min(s + self.batch_size, n)) for s in range(0, n, self.batch_size)]

        def run(bounds):
            a, b = bounds
            return sample(self.net.predict_eps, mch[a:b], self.ckpt.schedule, self.sampler,
                          sample_rngs(seed, range(a, b)), self.ckpt.config.image_channels)

        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(c) for c in chunks]
        return np.clip(np.concatenate(parts), -1.0, 1.0).astype(np.float32)


class OracleGenerator:
    """Returns the real images paired with the masks (identity generator)."""

    def __init__(self, images: np.ndarray):
        self.images = np.asarray(images, dtype=np.float32)

    def __call__(self, labels: np.ndarray, seed: int | None = None) -> np.ndarray:
        if len(labels) != len(self.images):
            raise EvaluationError(f"oracle holds {len(self.images)} images but got {len(labels)} masks")
        return self.images.copy()


class NoiseGenerator:
    """Pure noise images, ignoring the mask."""

    def __call__(self, labels: np.ndarray, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(0 if seed is None else seed)
        return rng.uniform(-1, 1, (len(labels), 1) + np.shape(labels)[1:]).astype(np.float32)


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    protocol: str
    metrics: dict[str, float] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def check(self) -> None:
        for k, v in self.metrics.items():
            if k.startswith("dice") and not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise EvaluationError(f"{k} = {v} outside [0, 1]")
            if k.startswith("fid") and v < -1e-6:
                raise EvaluationError(f"{k} = {v} is negative")

    def to_text(self) -> str:
        lines = [f"protocol = {self.protocol}"]
        lines += [f"{k} = {v:.6f}" if isinstance(v, float) else f"{k} = {v}" for k, v in self.metrics.items()]
        lines += [f"provenance.{k} = {v}" for k, v in self.provenance.items()]
        lines += [f"note = {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        rows = ["metric\tvalue"] + [f"{k}\t{v!r}" for k, v in self.metrics.items()]
        return "\n".join(rows) + "\n"

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(self.to_text(), encoding="utf-8")
        (out_dir / "report.tsv").write_text(self.to_tsv(), encoding="utf-8")


def _class_metrics(prefix: str, per_class: np.ndarray) -> dict[str, float]:
    return {f"{prefix}.class{c + 1}": float(v) for c, v in enumerate(per_class)}


# --------------------------------------------------------------------------
# protocols


def eval_faithfulness(generator, segmenter: Segmenter, test_images: np.ndarray | None,
                      test_masks: np.ndarray, num_classes: int, seed: int = 0,
                      provenance: dict | None = None) -> EvalReport:
    """Segment images generated from the test masks and compare against the masks and
    against the segmenter's prediction on the paired real images."""
    test_masks = np.asarray(test_masks)
    if test_images is None or len(test_images) != len(test_masks):
        raise EvaluationError("faithfulness needs one paired real image per test mask")
    generated = generator(test_masks, seed)
    pred_gen = segmenter.predict(generated)
    pred_real = segmenter.predict(np.asarray(test_images, dtype=np.float32))
    d_mask, pc_mask = batch_dice(pred_gen, test_masks, num_classes)
    d_real, pc_real = batch_dice(pred_gen, pred_real, num_classes)
    report = EvalReport("faithfulness", provenance=dict(provenance or {}))
    report.metrics["n"] = len(test_masks)
    report.metrics["dice_gen_vs_mask"] = d_mask
    report.metrics["dice_gen_vs_realpred"] = d_real
    report.metrics.update(_class_metrics("dice_gen_vs_mask", pc_mask))
    report.metrics.update(_class_metrics("dice_gen_vs_realpred", pc_real))
    report.check()
    return report


def _check_disjoint(named: dict[str, np.ndarray]) -> None:
    names = list(named)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            overlap = np.intersect1d(named[a], named[b])
            if overlap.size:
                raise EvaluationError(f"splits {a} and {b} overlap in {overlap.size} indices")


def eval_quality(dataset, generator, seg_config: SegmenterConfig | None = None,
                 generator_train_indices: np.ndarray | None = None, seed: int = 0,
                 provenance: dict | None = None, real_segmenter=None) -> EvalReport:
    """Train one segmenter on real held-out pairs and one on (generated image, input mask)
    pairs from the same masks; compare their test Dice.

    ``real_segmenter`` may supply an already trained real-data result to reuse.
    """
    splits = {name: dataset.indices(name) for name in ("heldout", "validation", "test")}
    if generator_train_indices is not None:
        splits["generator_train"] = np.asarray(generator_train_indices)
    _check_disjoint(splits)
    C = dataset.num_classes
    held_x, held_m = dataset.split("heldout")
    val_x, val_m = dataset.split("validation")
    test_x, test_m = dataset.split("test")

    if real_segmenter is None:
        real_segmenter = train_segmenter(held_x, held_m, val_x, val_m, C, seg_config)
    synthetic = generator(held_m, seed)
    synth_result = train_segmenter(synthetic, held_m, val_x, val_m, C, seg_config)

    d_real = segmenter_dice(real_segmenter.segmenter(), test_x, test_m, C)
    d_syn = segmenter_dice(synth_result.segmenter(), test_x, test_m, C)
    report = EvalReport("quality", provenance=dict(provenance or {}))
    report.metrics["n_train"] = len(held_m)
    report.metrics["n_test"] = len(test_m)
    report.metrics["dice_real_trained"] = d_real
    report.metrics["dice_synthetic_trained"] = d_syn
    report.metrics["gap"] = d_real - d_syn
    report.check()
    return report


class FeatureEncoder:
    """Pooled bottleneck of a segmenter trained on the target dataset."""

    def __init__(self, segmenter: Segmenter, max_dim: int = 64):
        self.segmenter = segmenter
        self.dim = segmenter.config.widths[-1]
        if self.dim > max_dim:
            raise EvaluationError(f"feature dimension {self.dim} exceeds {max_dim}")

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return self.segmenter.features(np.asarray(images, dtype=np.float32))


def train_encoder(images, masks, val_images, val_masks, num_classes: int,
                  config: SegmenterConfig | None = None) -> FeatureEncoder:
    result = train_segmenter(images, masks, val_images, val_masks, num_classes, config)
    return FeatureEncoder(result.segmenter())


def feature_fid(encoder: FeatureEncoder, set_a: np.ndarray, set_b: np.ndarray) -> float:
    return fid_from_features(encoder(set_a), encoder(set_b))


def organ_found_fraction(segmenter: Segmenter, images: np.ndarray, organ_class: int = 1) -> float:
    if len(images) == 0:
        return float("nan")
    pred = segmenter.predict(np.asarray(images, dtype=np.float32))
    return float(np.mean([(p == organ_class).any() for p in pred]))


def eval_empty_mask(gen_ablated, gen_unconditional, segmenter: Segmenter, real_test: np.ndarray,
                    n: int, image_shape: tuple[int, int], seed: int = 0,
                    provenance: dict | None = None) -> EvalReport:
    """Empty-mask samples from both models, scored by feature FID against real test images."""
    report = EvalReport("empty-mask", provenance=dict(provenance or {}), notes=[FID_NOTE])
    report.metrics["n"] = n
    if n == 0:
        return report
    empty = np.zeros((n,) + tuple(image_shape), dtype=np.uint8)
    encoder = FeatureEncoder(segmenter)
    real_feat = encoder(real_test)
    for name, gen in (("ablated", gen_ablated), ("unconditional", gen_unconditional)):
        images = gen(empty, seed)
        report.metrics[f"fid_{name}"] = fid_from_features(encoder(images), real_feat)
        report.metrics[f"organ_found_{name}"] = organ_found_fraction(segmenter, images)
    report.metrics["ablated_not_worse"] = float(report.metrics["fid_ablated"] <= report.metrics["fid_unconditional"])
    report.check()
    return report
