"""Command-line entry point: ``segdiff <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .ablation import AblationPattern, Mask, apply_pattern
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .diffusion import SamplerConfig, linear_schedule
from .evaluate import (
    FID_NOTE, DiffusionGenerator, EvalReport, FeatureEncoder, OracleGenerator, eval_empty_mask,
    eval_faithfulness, eval_quality,
)
from .metrics import fid_from_features
from .optim import ConfigError
from .phantom import (
    DatasetConfigError, PhantomConfig, PhantomDataset, SampleIOError, bytes_to_image, gen_dataset,
    image_to_bytes, parse_key_values, read_pgm, split_sizes, write_pgm,
)
from .train import (
    SegmenterConfig, TrainConfig, TrainingDiverged, train_diffusion, train_segmenter, write_loss_tsv,
    write_pattern_hist,
)
from .unet import Segmenter, UNetConfig

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("segdiff")


class UsageError(ValueError):
    """Bad or missing command-line input."""


# --------------------------------------------------------------------------
# config plumbing


class RunConfig:
    """``key = value`` file contents overlaid with command-line flags."""

    def __init__(self, command: str, file_items: dict[str, str], flags: dict[str, object]):
        self.command = command
        self.items: dict[str, str] = dict(file_items)
        for key, value in flags.items():
            if value is not None:
                self.items[key] = _fmt(value)

    def get(self, key: str, default=None, cast=str):
        if key not in self.items:
            return default
        raw = self.items[key]
        try:
            return cast(raw)
        except ValueError:
            raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None

    def setdefault(self, key: str, value) -> None:
        self.items.setdefault(key, _fmt(value))

    def echo(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = [f"command = {self.command}"] + [f"{k} = {v}" for k, v in sorted(self.items.items())]
        (out_dir / "effective_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.replace(",", " ").split())


def load_run_config(args: argparse.Namespace, flag_keys: dict[str, str]) -> RunConfig:
    file_items: dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise SampleIOError(f"{path}: cannot read config ({exc})") from exc
        file_items = parse_key_values(text)
    flags = {key: getattr(args, attr) for attr, key in flag_keys.items()}
    return RunConfig(args.command, file_items, flags)


def default_threads() -> int:
    raw = os.environ.get("SEGDIFF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"SEGDIFF_THREADS must be an integer, got {raw!r}") from None


def _require(args, **named) -> None:
    missing = [flag for flag, value in named.items() if value in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required input(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")


# --------------------------------------------------------------------------
# raster helpers


def read_image_dir(directory) -> np.ndarray:
    """All generated (``gen_*``) or real (``img_*``) PGMs of a directory as (N, 1, H, W)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise SampleIOError(f"{directory}: not a directory")
    files = sorted(directory.glob("gen_*.pgm")) or sorted(directory.glob("img_*.pgm"))
    if not files:
        raise SampleIOError(f"{directory}: no gen_*.pgm or img_*.pgm images")
    return np.stack([bytes_to_image(read_pgm(f)) for f in files])[:, None]


def read_mask_dir(directory, num_classes: int) -> np.ndarray:
    directory = Path(directory)
    files = sorted(directory.glob("msk_*.pgm")) if directory.is_dir() else []
    if not files:
        raise SampleIOError(f"{directory}: no msk_*.pgm masks")
    labels = np.stack([read_pgm(f) for f in files])
    if labels.max(initial=0) >= num_classes:
        raise SampleIOError(f"{directory}: mask label {labels.max()} outside [0, {num_classes - 1}]")
    return labels


def contact_sheet(masks: np.ndarray, images: np.ndarray, num_classes: int, columns: int = 8, gap: int = 2) -> np.ndarray:
    """Tiles mask rows above the matching sample rows, ``columns`` pairs per band."""
    n, h, w = masks.shape
    columns = max(1, min(columns, n))
    bands = -(-n // columns)
    sheet = np.full((bands * (2 * h + 2 * gap) + gap, columns * (w + gap) + gap), 255, dtype=np.uint8)
    mask_px = (masks.astype(np.float64) * (255.0 / max(1, num_classes - 1))).round().astype(np.uint8)
    img_px = image_to_bytes(images[:, 0])
    for i in range(n):
        band, col = divmod(i, columns)
        y = gap + band * (2 * h + 2 * gap)
        x = gap + col * (w + gap)
        sheet[y:y + h, x:x + w] = mask_px[i]
        sheet[y + h + gap:y + 2 * h + gap, x:x + w] = img_px[i]
    return sheet


def parse_pattern(text: str, num_classes: int) -> AblationPattern:
    removed = set()
    for token in text.replace(" ", "").split(","):
        if not token:
            continue
        try:
            removed.add(int(token))
        except ValueError:
            raise UsageError(f"--pattern: {token!r} is not a class index") from None
    try:
        return AblationPattern(num_classes, frozenset(removed))
    except ValueError as exc:
        raise UsageError(f"--pattern: {exc}") from None


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    rc = load_run_config(args, {"n": "n", "seed": "seed", "threads": "threads"})
    _require(args, out=args.out)
    rc.setdefault("n", 100)
    rc.setdefault("seed", 0)
    out = Path(args.out)
    phantom_items = {k: v for k, v in rc.items.items() if k not in ("n", "threads")}
    known = set(PhantomConfig().to_items())
    unknown = sorted(set(phantom_items) - known)
    if unknown:
        raise UsageError(f"unknown gen-data config key(s): {', '.join(unknown)}")
    try:
        cfg = PhantomConfig.from_items(phantom_items)
    except (TypeError, ValueError) as exc:
        raise DatasetConfigError(f"phantom config: {exc}") from exc
    n = rc.get("n", cast=int)
    threads = rc.get("threads", default_threads(), int)
    split_sizes(n)  # configuration errors before anything touches disk
    manifest = gen_dataset(cfg, n, out, threads=threads)
    rc.items.pop("threads", None)
    rc.echo(out)
    log.info("wrote %d samples to %s (splits %s)", manifest.n, out, manifest.splits)
    return EXIT_OK


TRAIN_KEYS = {
    "mode": "mode", "epochs": "epochs", "seed": "seed", "batch_size": "batch_size", "lr": "base_lr",
    "warmup": "warmup_steps", "steps": "steps", "base_channels": "base_channels",
}


def cmd_train(args) -> int:
    rc = load_run_config(args, TRAIN_KEYS)
    _require(args, data=args.data, out=args.out)
    out = Path(args.out)
    ds = PhantomDataset.load(args.data)
    C = ds.num_classes
    size = ds.manifest.config.image_size
    mode = rc.get("mode", "guided-ablated")
    tcfg = TrainConfig.for_mode(
        mode,
        epochs=rc.get("epochs", 60, int),
        batch_size=rc.get("batch_size", 32, int),
        base_lr=rc.get("base_lr", 1e-3, float),
        warmup_steps=rc.get("warmup_steps", 200, int),
        weight_decay=rc.get("weight_decay", 1e-2, float),
        seed=rc.get("seed", 0, int),
    )
    ucfg = UNetConfig.denoiser(
        num_classes=C, image_size=size,
        base_channels=rc.get("base_channels", 16, int),
        channel_multipliers=rc.get("channel_multipliers", (1, 2, 4), _int_tuple),
        time_embed_dim=rc.get("time_embed_dim", 64, int),
    )
    schedule = linear_schedule(rc.get("T", 200, int), rc.get("beta_start", 5e-4, float), rc.get("beta_end", 0.1, float))
    for key, value in (("mode", mode), ("epochs", tcfg.epochs), ("seed", tcfg.seed), ("base_lr", tcfg.base_lr),
                       ("batch_size", tcfg.batch_size), ("warmup_steps", tcfg.warmup_steps),
                       ("base_channels", ucfg.base_channels), ("channel_multipliers", ucfg.channel_multipliers),
                       ("T", schedule.T)):
        rc.setdefault(key, value)
    rc.setdefault("manifest_sha256", ds.manifest_hash)
    rc.echo(out)

    probe_rows = ["step\tnonzero_pixels\tmax_value"]

    def probe(step, labels, mask_channel):
        probe_rows.append(f"{step}\t{int(np.count_nonzero(mask_channel))}\t{float(mask_channel.max())!r}")

    x, m = ds.split("train")
    try:
        result = train_diffusion(x, m, tcfg, ucfg, schedule, probe=probe, steps=rc.get("steps", None, int))
    finally:
        (out / "mask_probe.tsv").write_text("\n".join(probe_rows) + "\n", encoding="utf-8")
    write_loss_tsv(result.history, out / "loss.tsv")
    if result.pattern_counts is not None:
        write_pattern_hist(result.pattern_counts, C, out / "ablation_hist.tsv")
    save_checkpoint(result.checkpoint, out / "model.sgdf")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    rc = load_run_config(args, {"epochs": "epochs", "seed": "seed", "split": "split"})
    _require(args, data=args.data, out=args.out)
    out = Path(args.out)
    ds = PhantomDataset.load(args.data)
    split = rc.get("split", "heldout")
    if split not in ds.manifest.splits:
        raise UsageError(f"unknown split {split!r}")
    cfg = SegmenterConfig(epochs=rc.get("epochs", 40, int), seed=rc.get("seed", 0, int),
                          base_lr=rc.get("base_lr", 1e-3, float), batch_size=rc.get("batch_size", 8, int))
    rc.setdefault("split", split)
    rc.setdefault("manifest_sha256", ds.manifest_hash)
    rc.echo(out)
    result = train_segmenter(*ds.split(split), *ds.split("validation"), ds.num_classes, cfg)
    write_loss_tsv(result.history, out / "loss.tsv")
    rows = ["step\tval_loss"] + [f"{s}\t{v!r}" for s, v in zip(result.val_steps, result.val_losses)]
    (out / "val_loss.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    save_checkpoint(result.checkpoint, out / "segmenter.sgdf")
    return EXIT_OK


def _sampler(rc: RunConfig) -> SamplerConfig:
    return SamplerConfig(rc.get("sampler", "ddim"), rc.get("steps", None, int), rc.get("seed", 0, int))


def cmd_sample(args) -> int:
    rc = load_run_config(args, {"sampler": "sampler", "steps": "steps", "n": "n", "seed": "seed",
                                "masks": "masks", "pattern": "pattern", "threads": "threads"})
    _require(args, ckpt=args.ckpt, out=args.out, masks=rc.get("masks"))
    ckpt = load_checkpoint(args.ckpt)
    C, size = ckpt.config.num_classes, ckpt.config.image_size
    pattern = parse_pattern(rc.get("pattern", ""), C)
    n = rc.get("n", None, int)
    if rc.get("masks") == "empty":
        labels = np.zeros((n if n is not None else 16, size, size), dtype=np.uint8)
    else:
        labels = read_mask_dir(rc.get("masks"), C)
        if n is not None:
            if n > len(labels):
                raise UsageError(f"--n {n} exceeds the {len(labels)} masks in {rc.get('masks')}")
            labels = labels[:n]
    labels = np.stack([apply_pattern(Mask(lab, C), pattern).labels for lab in labels])
    sampler = _sampler(rc)
    sampler.steps_for(ckpt.schedule.T)
    threads = rc.get("threads", default_threads(), int)
    out = Path(args.out)
    rc.items.pop("threads", None)
    rc.echo(out)
    images = DiffusionGenerator(ckpt, sampler, threads=threads)(labels)
    for i, img in enumerate(images):
        write_pgm(out / f"gen_{i:06d}.pgm", image_to_bytes(img[0]))
        write_pgm(out / f"msk_{i:06d}.pgm", labels[i])
    write_pgm(out / "contact_sheet.pgm", contact_sheet(labels, images, C))
    return EXIT_OK


def _load_segmenter(path) -> Segmenter:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "segmenter":
        raise UsageError(f"{path}: expected a segmenter checkpoint, found {ckpt.kind}")
    return Segmenter(ckpt.build())


def _generator(source: str, rc: RunConfig, real_images: np.ndarray | None = None):
    if source == "oracle":
        if real_images is None:
            raise UsageError("the oracle generator needs paired real images")
        return OracleGenerator(real_images)
    return DiffusionGenerator(load_checkpoint(source), _sampler(rc), threads=rc.get("threads", default_threads(), int))


def cmd_evaluate(args) -> int:
    rc = load_run_config(args, {"protocol": "protocol", "sampler": "sampler", "steps": "steps", "seed": "seed",
                                "n": "n", "split": "split", "threads": "threads"})
    protocol = rc.get("protocol")
    _require(args, protocol=protocol, out=args.out)
    out = Path(args.out)
    seed = rc.get("seed", 0, int)
    split = rc.get("split", "test")

    if protocol == "faithfulness":
        _require(args, gen_ckpt=args.gen_ckpt, seg_ckpt=args.seg_ckpt, data=args.data)
        ds = PhantomDataset.load(args.data)
        x, m = ds.split(split)
        n = rc.get("n", len(m), int)
        x, m = x[:n], m[:n]
        report = eval_faithfulness(_generator(args.gen_ckpt, rc, x), _load_segmenter(args.seg_ckpt), x, m,
                                   ds.num_classes, seed, {"gen_ckpt": args.gen_ckpt, "seg_ckpt": args.seg_ckpt,
                                                          "manifest_sha256": ds.manifest_hash})
    elif protocol == "quality":
        _require(args, gen_ckpt=args.gen_ckpt, data=args.data)
        ds = PhantomDataset.load(args.data)
        held_x = ds.split("heldout")[0]
        cfg = SegmenterConfig(epochs=rc.get("seg_epochs", 40, int), seed=seed)
        report = eval_quality(ds, _generator(args.gen_ckpt, rc, held_x), cfg, ds.indices("train"), seed,
                              {"gen_ckpt": args.gen_ckpt, "manifest_sha256": ds.manifest_hash})
    elif protocol == "fid":
        _require(args, seg_ckpt=args.seg_ckpt, images=args.images)
        if not args.reference and not args.data:
            raise UsageError("evaluate: missing required input(s): --reference or --data")
        encoder = FeatureEncoder(_load_segmenter(args.seg_ckpt))
        set_a = read_image_dir(args.images)
        set_b = read_image_dir(args.reference) if args.reference else PhantomDataset.load(args.data).split(split)[0]
        report = EvalReport("fid", provenance={"images": args.images, "reference": args.reference or f"{args.data}:{split}"},
                            notes=[FID_NOTE])
        report.metrics["n_a"] = len(set_a)
        report.metrics["n_b"] = len(set_b)
        report.metrics["fid"] = fid_from_features(encoder(set_a), encoder(set_b))
    elif protocol == "empty-mask":
        _require(args, gen_ckpt=args.gen_ckpt, gen_ckpt_b=args.gen_ckpt_b, seg_ckpt=args.seg_ckpt, data=args.data)
        ds = PhantomDataset.load(args.data)
        size = ds.manifest.config.image_size
        report = eval_empty_mask(_generator(args.gen_ckpt, rc), _generator(args.gen_ckpt_b, rc),
                                 _load_segmenter(args.seg_ckpt), ds.split(split)[0], rc.get("n", 200, int),
                                 (size, size), seed, {"ablated": args.gen_ckpt, "unconditional": args.gen_ckpt_b})
    else:
        raise UsageError(f"unknown protocol {protocol!r}")
    rc.items.pop("threads", None)
    rc.echo(out)
    report.write(out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segdiff", description="mask-conditioned diffusion on synthetic phantoms")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=False):
        p.add_argument("--config", help="flat key = value file; flags take precedence")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        if threads:
            p.add_argument("--threads", type=int, help="worker count (default $SEGDIFF_THREADS or 1)")
        return p

    p = common(sub.add_parser("gen-data", help="write a phantom dataset"), threads=True)
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train a denoiser"))
    p.add_argument("--data")
    p.add_argument("--mode", choices=("guided", "guided-ablated", "unconditional"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="override the epoch-derived step budget")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--base-channels", type=int)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("train-seg", help="train a segmenter on one split"))
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--split")
    p.set_defaults(func=cmd_train_seg)

    p = common(sub.add_parser("sample", help="generate images from masks"), threads=True)
    p.add_argument("--ckpt")
    p.add_argument("--masks", help="directory of msk_*.pgm files, or 'empty'")
    p.add_argument("--pattern", help="comma list of classes to remove from every mask")
    p.add_argument("--sampler", choices=("ddpm", "ddim"))
    p.add_argument("--steps", type=int)
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_sample)

    p = common(sub.add_parser("evaluate", help="run an evaluation protocol"), threads=True)
    p.add_argument("--protocol", choices=("faithfulness", "quality", "fid", "empty-mask"))
    p.add_argument("--gen-ckpt", help="denoiser checkpoint, or 'oracle' to use the real images")
    p.add_argument("--gen-ckpt-b", help="unconditional denoiser for the empty-mask protocol")
    p.add_argument("--seg-ckpt")
    p.add_argument("--data")
    p.add_argument("--images", help="image directory for the fid protocol")
    p.add_argument("--reference", help="reference image directory for the fid protocol")
    p.add_argument("--split")
    p.add_argument("--sampler", choices=("ddpm", "ddim"))
    p.add_argument("--steps", type=int)
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"segdiff: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"segdiff: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, DatasetConfigError, ValueError, KeyError) as exc:
        print(f"segdiff: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
