"""End-to-end phantom experiment with on-disk caching of every stage.

Each stage writes its artifact atomically and is skipped when the artifact
already exists, so an interrupted run resumes where it stopped.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .diffusion import SamplerConfig, desk_schedule
from .evaluate import (
    DiffusionGenerator, EvalReport, eval_empty_mask, eval_faithfulness,
)
from .phantom import PhantomConfig, PhantomDataset, gen_dataset, parse_key_values
from .train import (
    SegmenterConfig, TrainConfig, segmenter_dice, train_diffusion,
    train_segmenter, write_loss_tsv, write_pattern_hist,
)
from .unet import Segmenter, UNetConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    n_phantoms: int = 2858          # train split of 2000
    seed: int = 0
    epochs: int = 60
    batch_size: int = 32
    base_lr: float = 1e-3
    warmup_steps: int = 200
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 64
    seg_epochs: int = 40
    sampler_kind: str = "ddpm"      # 50-step DDIM drifts off the data manifold at this scale
    sampler_steps: int = 50         # DDIM only
    n_eval: int = 200

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            v = ",".join(map(str, v)) if isinstance(v, tuple) else v
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        items = parse_key_values(text)
        kw = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.name == "channel_multipliers":
                kw[f.name] = tuple(int(v) for v in raw.split(","))
            elif f.type in ("float", float):
                kw[f.name] = float(raw)
            elif f.type in ("str", str):
                kw[f.name] = raw
            else:
                kw[f.name] = int(raw)
        return cls(**kw)

    def unet(self) -> UNetConfig:
        return UNetConfig.denoiser(base_channels=self.base_channels,
                                   channel_multipliers=self.channel_multipliers,
                                   time_embed_dim=self.time_embed_dim)

    def train(self, mode: str) -> TrainConfig:
        return TrainConfig.for_mode(mode, epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
                                    warmup_steps=self.warmup_steps, seed=self.seed)

    def segmenter(self) -> SegmenterConfig:
        return SegmenterConfig(epochs=self.seg_epochs, seed=self.seed)

    def sampler(self) -> SamplerConfig:
        steps = self.sampler_steps if self.sampler_kind == "ddim" else None
        return SamplerConfig(self.sampler_kind, steps, self.seed)


class Experiment:
    """Cached stages of the phantom experiment rooted at ``work_dir``."""

    def __init__(self, work_dir, config: ExperimentConfig | None = None):
        self.root = Path(work_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        cfg_file = self.root / "experiment.txt"
        if cfg_file.exists():
            stored = ExperimentConfig.from_text(cfg_file.read_text(encoding="utf-8"))
            if config is not None and stored != config:
                raise ValueError(f"{self.root} holds a run with a different configuration; use a fresh directory")
            config = stored
        else:
            config = config or ExperimentConfig()
            cfg_file.write_text(config.to_text(), encoding="utf-8")
        self.config = config
        self._dataset: PhantomDataset | None = None

    # ---- stages

    def dataset(self) -> PhantomDataset:
        if self._dataset is None:
            data_dir = self.root / "data"
            if not (data_dir / "manifest.txt").exists():
                gen_dataset(PhantomConfig(seed=self.config.seed), self.config.n_phantoms, data_dir)
            self._dataset = PhantomDataset.load(data_dir)
        return self._dataset

    def denoiser(self, mode: str) -> ModelCheckpoint:
        out = self.root / mode
        ckpt_file = out / "model.sgdf"
        if not ckpt_file.exists():
            out.mkdir(exist_ok=True)
            ds = self.dataset()
            x, m = ds.split("train")
            start = time.time()
            result = train_diffusion(x, m, self.config.train(mode), self.config.unet(), desk_schedule())
            write_loss_tsv(result.history, out / "loss.tsv")
            if result.pattern_counts is not None:
                write_pattern_hist(result.pattern_counts, ds.num_classes, out / "ablation_hist.tsv")
            (out / "train_seconds.txt").write_text(f"{time.time() - start:.1f}\n")
            save_checkpoint(result.checkpoint, ckpt_file)
        return load_checkpoint(ckpt_file)

    def _segmenter(self, name: str, images_fn) -> Segmenter:
        ckpt_file = self.root / f"{name}.sgdf"
        if not ckpt_file.exists():
            ds = self.dataset()
            images, masks = images_fn()
            result = train_segmenter(images, masks, *ds.split("validation"), ds.num_classes, self.config.segmenter())
            save_checkpoint(result.checkpoint, ckpt_file)
        return Segmenter(load_checkpoint(ckpt_file).build())

    def real_segmenter(self) -> Segmenter:
        """Segmenter trained on real held-out pairs; also the FID feature encoder."""
        return self._segmenter("segmenter_real", lambda: self.dataset().split("heldout"))

    def synthetic_segmenter(self) -> Segmenter:
        """Segmenter trained on ablated-model samples generated from the held-out masks."""
        def data():
            held_m = self.dataset().split("heldout")[1]
            return self.generator("guided-ablated")(held_m, self.config.seed + 1), held_m
        return self._segmenter("segmenter_synthetic", data)

    def generator(self, mode: str) -> DiffusionGenerator:
        return DiffusionGenerator(self.denoiser(mode), self.config.sampler())

    def _report(self, name: str, build) -> EvalReport:
        out = self.root / "reports" / name
        tsv = out / "report.tsv"
        if tsv.exists():
            rows = tsv.read_text(encoding="utf-8").splitlines()[1:]
            metrics = {k: float(v) for k, v in (r.split("\t") for r in rows)}
            return EvalReport(name, metrics)
        report = build()
        report.write(out)
        return report

    def _eval_slice(self):
        test_x, test_m = self.dataset().split("test")
        n = min(self.config.n_eval, len(test_m))
        return test_x[:n], test_m[:n]

    def faithfulness(self, mode: str) -> EvalReport:
        def build():
            x, m = self._eval_slice()
            return eval_faithfulness(self.generator(mode), self.real_segmenter(), x, m,
                                     self.dataset().num_classes, self.config.seed, self.provenance(mode))
        return self._report(f"faithfulness_{mode}", build)

    def quality(self) -> EvalReport:
        def build():
            ds = self.dataset()
            test_x, test_m = ds.split("test")
            report = EvalReport("quality", provenance=self.provenance("guided-ablated"))
            real = segmenter_dice(self.real_segmenter(), test_x, test_m, ds.num_classes)
            synth = segmenter_dice(self.synthetic_segmenter(), test_x, test_m, ds.num_classes)
            report.metrics.update(n_train=len(ds.indices("heldout")), n_test=len(test_m),
                                  dice_real_trained=real, dice_synthetic_trained=synth, gap=real - synth)
            report.check()
            return report
        return self._report("quality", build)

    def empty_mask(self) -> EvalReport:
        def build():
            ds = self.dataset()
            test_x = ds.split("test")[0]
            size = ds.manifest.config.image_size
            return eval_empty_mask(self.generator("guided-ablated"), self.generator("unconditional"),
                                   self.real_segmenter(), test_x, self.config.n_eval, (size, size),
                                   self.config.seed + 2, self.provenance("guided-ablated"))
        return self._report("empty_mask", build)

    def provenance(self, mode: str) -> dict[str, str]:
        return {"mode": mode, "manifest_sha256": self.dataset().manifest_hash,
                "sampler": f"{self.config.sampler_kind}/{self.config.sampler().steps_for(desk_schedule().T)}", "seed": str(self.config.seed)}

    def run_all(self) -> dict[str, float]:
        results: dict[str, float] = {}
        for mode in ("guided-ablated", "unconditional"):
            t0 = time.time()
            self.denoiser(mode)
            log.info("denoiser %s ready (%.0fs)", mode, time.time() - t0)
        self.real_segmenter()
        for mode in ("guided-ablated", "unconditional"):
            for k, v in self.faithfulness(mode).metrics.items():
                results[f"faithfulness_{mode}.{k}"] = v
        for k, v in self.quality().metrics.items():
            results[f"quality.{k}"] = v
        for k, v in self.empty_mask().metrics.items():
            results[f"empty_mask.{k}"] = v
        lines = ["metric\tvalue"] + [f"{k}\t{v!r}" for k, v in results.items()]
        (self.root / "results.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        return results


def main(argv=None) -> int:
    import argparse
    parser = argparse.ArgumentParser(description="run the cached phantom experiment")
    parser.add_argument("work_dir")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--n-phantoms", type=int)
    parser.add_argument("--seg-epochs", type=int)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    overrides = {k: v for k, v in (("epochs", args.epochs), ("n_phantoms", args.n_phantoms),
                                   ("seg_epochs", args.seg_epochs)) if v is not None}
    cfg = ExperimentConfig(**overrides) if overrides else None
    if cfg is None and not (Path(args.work_dir) / "experiment.txt").exists():
        cfg = ExperimentConfig()
    results = Experiment(args.work_dir, cfg).run_all()
    for k, v in results.items():
        print(f"{k} = {v:.6f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
