"""Procedural "anatomy phantom" image + mask pairs and their on-disk format.

Classes: 0 background, 1 organ (ellipse), 2 vessel (thin random walks),
3 dense tissue (blobs).  Vessels and dense tissue are clipped to the organ;
overlaps resolve as dense > vessel > organ > background.

Intensities are specified in file units [0, 1] and rendered to the network
range [-1, 1] through x = 2 v - 1.  Files store v * 255 as 8-bit PGM.
"""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .ablation import Mask

CLASS_NAMES = ("background", "organ", "vessel", "dense")
SPLIT_NAMES = ("train", "heldout", "validation", "test")
DEFAULT_SPLIT_RATIOS = (0.7, 0.15, 0.075, 0.075)
MAX_RETRIES = 100


class PhantomError(RuntimeError):
    pass


class DatasetConfigError(ValueError):
    pass


class SampleIOError(OSError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 32
    num_classes: int = 4
    band_means: tuple[float, ...] = (0.10, 0.38, 0.90, 0.64)
    band_spreads: tuple[float, ...] = (0.10, 0.10, 0.10, 0.10)
    noise_sigma: float = 0.03
    illumination_amplitude: float = 0.1
    vessel_count: tuple[int, int] = (1, 3)
    vessel_length: tuple[int, int] = (8, 20)
    blob_count: tuple[int, int] = (1, 3)
    blob_radius: tuple[float, float] = (1.5, 3.5)
    organ_fraction: tuple[float, float] = (0.15, 0.6)
    seed: int = 0

    def __post_init__(self):
        for name in ("band_means", "band_spreads", "vessel_count", "vessel_length",
                     "blob_count", "blob_radius", "organ_fraction"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise DatasetConfigError(f"num_classes must lie in [2, {len(CLASS_NAMES)}], got {self.num_classes}")
        if len(self.band_means) != self.num_classes or len(self.band_spreads) != self.num_classes:
            raise DatasetConfigError("need one intensity band (mean, spread) per class")
        if self.image_size < 8:
            raise DatasetConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.noise_sigma < 0 or self.illumination_amplitude < 0:
            raise DatasetConfigError("noise_sigma and illumination_amplitude must be non-negative")
        for m, s in zip(self.band_means, self.band_spreads):
            if not (0.0 <= m - s and m + s <= 1.0):
                raise DatasetConfigError(f"band {m}±{s} leaves [0, 1]")
            if s < self.illumination_amplitude:
                raise DatasetConfigError(f"band spread {s} narrower than illumination amplitude")
        bands = sorted(zip(self.band_means, self.band_spreads))
        for (m0, s0), (m1, s1) in zip(bands, bands[1:]):
            gap = (m1 - s1) - (m0 + s0)
            if gap < 2 * self.noise_sigma - 1e-12:
                raise DatasetConfigError(
                    f"bands {m0}±{s0} and {m1}±{s1} separated by {gap:.3f} < 2*noise_sigma"
                )
        lo, hi = self.organ_fraction
        if not 0 < lo < hi <= 1:
            raise DatasetConfigError(f"organ_fraction range invalid: {self.organ_fraction}")
        for name in ("vessel_count", "blob_count", "vessel_length"):
            a, b = getattr(self, name)
            if a < 0 or b < a:
                raise DatasetConfigError(f"{name} range invalid: {(a, b)}")

    def to_items(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = " ".join(repr(x) for x in v) if isinstance(v, tuple) else repr(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> PhantomConfig:
        kwargs = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name].split()
            default = f.default
            if isinstance(default, tuple):
                cast = type(default[0])
                kwargs[f.name] = tuple(cast(float(x)) if cast is int else cast(x) for x in raw)
            else:
                cast = type(default)
                kwargs[f.name] = cast(float(raw[0])) if cast is int else cast(raw[0])
        return cls(**kwargs)


@dataclass(eq=False)
class LabeledSample:
    image: np.ndarray  # (H, W) float32 in [-1, 1]
    mask: Mask
    seed: tuple[int, int] = field(default=(0, 0))


# --------------------------------------------------------------------------
# geometry


def _ellipse(size, cx, cy, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    return u * u + v * v <= 1.0


def _random_point_in(region: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
    ys, xs = np.nonzero(region)
    k = rng.integers(len(ys))
    return float(xs[k]), float(ys[k])


def _vessels(organ, cfg: PhantomConfig, rng) -> np.ndarray:
    size = cfg.image_size
    out = np.zeros_like(organ)
    for _ in range(rng.integers(cfg.vessel_count[0], cfg.vessel_count[1] + 1)):
        x, y = _random_point_in(organ, rng)
        heading = rng.uniform(0.0, 2 * np.pi)
        for _ in range(rng.integers(cfg.vessel_length[0], cfg.vessel_length[1] + 1)):
            ix, iy = int(round(x)), int(round(y))
            if 0 <= ix < size and 0 <= iy < size:
                out[iy, ix] = True
            heading += rng.normal(0.0, 0.35)
            x += np.cos(heading)
            y += np.sin(heading)
    return out & organ


def _blobs(organ, cfg: PhantomConfig, rng) -> np.ndarray:
    size = cfg.image_size
    out = np.zeros_like(organ)
    for _ in range(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1)):
        cx, cy = _random_point_in(organ, rng)
        r = rng.uniform(*cfg.blob_radius)
        aspect = rng.uniform(0.6, 1.0)
        out |= _ellipse(size, cx, cy, r, r * aspect, rng.uniform(0, np.pi))
    return out & organ


def _illumination(cfg: PhantomConfig, rng) -> np.ndarray:
    size = cfg.image_size
    if cfg.illumination_amplitude == 0:
        return np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2.0 - 1.0
    fx, fy = rng.uniform(-0.5, 0.5, 2)
    phase = rng.uniform(0, 2 * np.pi)
    gx, gy = rng.uniform(-1, 1, 2) / np.sqrt(2)
    field_ = 0.6 * np.cos(np.pi * (fx * xx + fy * yy) + phase) + 0.4 * (gx * xx + gy * yy)
    return cfg.illumination_amplitude * field_


def gen_sample(cfg: PhantomConfig, index: int) -> LabeledSample:
    """Deterministic function of (cfg.seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    lo, hi = cfg.organ_fraction
    for _ in range(MAX_RETRIES):
        a = rng.uniform(0.25, 0.47) * size
        b = rng.uniform(0.25, 0.47) * size
        cx = size / 2 - 0.5 + rng.uniform(-3, 3)
        cy = size / 2 - 0.5 + rng.uniform(-3, 3)
        organ = _ellipse(size, cx, cy, a, b, rng.uniform(0, np.pi))
        if lo <= organ.mean() <= hi:
            break
    else:
        raise PhantomError(f"sample {index}: no valid organ after {MAX_RETRIES} attempts")

    labels = np.zeros((size, size), dtype=np.uint8)
    labels[organ] = 1
    if cfg.num_classes > 2:
        labels[_vessels(organ, cfg, rng)] = 2
    if cfg.num_classes > 3:
        labels[_blobs(organ, cfg, rng)] = 3

    means = np.asarray(cfg.band_means)
    v = means[labels] + _illumination(cfg, rng)
    if cfg.noise_sigma > 0:
        v = v + rng.normal(0.0, cfg.noise_sigma, v.shape)
    image = np.clip(2.0 * v - 1.0, -1.0, 1.0).astype(np.float32)
    return LabeledSample(image, Mask(labels, cfg.num_classes), (cfg.seed, index))


# --------------------------------------------------------------------------
# PGM I/O


def image_to_bytes(image: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255] via round((x + 1) * 127.5)."""
    return np.clip(np.floor((np.asarray(image, dtype=np.float64) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def bytes_to_image(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"PGM payload must be 2-D uint8, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    _atomic_write(Path(path), header + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise SampleIOError(f"{path}: cannot read ({exc})") from exc
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SampleIOError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise SampleIOError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise SampleIOError(f"{path}: corrupt PGM header") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise SampleIOError(f"{path}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    payload = blob[pos:]
    if len(payload) != w * h:
        raise SampleIOError(f"{path}: expected {w * h} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def image_path(directory, index: int) -> Path:
    return Path(directory) / f"img_{index:06d}.pgm"


def mask_path(directory, index: int) -> Path:
    return Path(directory) / f"msk_{index:06d}.pgm"


def save_sample(directory, index: int, sample: LabeledSample) -> None:
    write_pgm(image_path(directory, index), image_to_bytes(sample.image))
    write_pgm(mask_path(directory, index), sample.mask.labels.astype(np.uint8))


def load_sample(directory, index: int, num_classes: int) -> LabeledSample:
    img = read_pgm(image_path(directory, index))
    lab = read_pgm(mask_path(directory, index))
    if img.shape != lab.shape:
        raise SampleIOError(f"{mask_path(directory, index)}: size {lab.shape} differs from image {img.shape}")
    if lab.max(initial=0) >= num_classes:
        raise SampleIOError(f"{mask_path(directory, index)}: label {lab.max()} outside [0, {num_classes - 1}]")
    return LabeledSample(bytes_to_image(img), Mask(lab, num_classes), (0, index))


# --------------------------------------------------------------------------
# datasets


def split_sizes(n: int, ratios=DEFAULT_SPLIT_RATIOS, names=SPLIT_NAMES) -> list[int]:
    """Largest-remainder rounding; ties go to the earlier split."""
    ratios = [float(r) for r in ratios]
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise DatasetConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    quotas = [n * r for r in ratios]
    sizes = [int(np.floor(q)) for q in quotas]
    remainders = [q - s for q, s in zip(quotas, sizes)]
    for k in sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))[: n - sum(sizes)]:
        sizes[k] += 1
    empty = [name for name, s in zip(names, sizes) if s == 0]
    if empty:
        raise DatasetConfigError(f"n = {n} leaves split(s) empty: {', '.join(empty)}")
    return sizes


@dataclass
class Manifest:
    config: PhantomConfig
    n: int
    splits: dict[str, tuple[int, int]]

    def to_text(self) -> str:
        lines = [
            "format = segdiff-phantom-v1",
            "source = procedural anatomy phantom (synthetic substitute, not clinical data)",
            f"n = {self.n}",
            f"image_size = {self.config.image_size}",
            f"C = {self.config.num_classes}",
            f"seed = {self.config.seed}",
            f"class_names = {' '.join(CLASS_NAMES[:self.config.num_classes])}",
        ]
        for name, (start, stop) in self.splits.items():
            lines.append(f"split.{name} = {start} {stop}")
        for key, value in self.config.to_items().items():
            lines.append(f"config.{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> Manifest:
        items = parse_key_values(text)
        config = PhantomConfig.from_items({k[7:]: v for k, v in items.items() if k.startswith("config.")})
        splits = {}
        for k, v in items.items():
            if k.startswith("split."):
                a, b = v.split()
                splits[k[6:]] = (int(a), int(b))
        return cls(config, int(items["n"]), splits)


def parse_key_values(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment line."""
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def gen_dataset(cfg: PhantomConfig, n: int, out_dir, split_ratios=DEFAULT_SPLIT_RATIOS, threads: int = 1) -> Manifest:
    sizes = split_sizes(n, split_ratios)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    splits = {name: (int(bounds[i]), int(bounds[i + 1])) for i, name in enumerate(SPLIT_NAMES)}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(i):
        save_sample(out_dir, i, gen_sample(cfg, i))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, range(n)))
    else:
        for i in range(n):
            work(i)
    manifest = Manifest(cfg, n, splits)
    _atomic_write(out_dir / "manifest.txt", manifest.to_text().encode("utf-8"))
    return manifest


@dataclass
class PhantomDataset:
    """Whole dataset in memory: images (N, 1, H, W) in [-1, 1], masks (N, H, W)."""

    images: np.ndarray
    masks: np.ndarray
    manifest: Manifest
    manifest_hash: str = ""
    root: Path | None = None

    @property
    def num_classes(self) -> int:
        return self.manifest.config.num_classes

    def indices(self, split: str) -> np.ndarray:
        start, stop = self.manifest.splits[split]
        return np.arange(start, stop)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(name)
        return self.images[idx], self.masks[idx]

    @classmethod
    def load(cls, directory) -> PhantomDataset:
        directory = Path(directory)
        manifest_file = directory / "manifest.txt"
        try:
            raw = manifest_file.read_bytes()
        except OSError as exc:
            raise SampleIOError(f"{manifest_file}: cannot read ({exc})") from exc
        manifest = Manifest.from_text(raw.decode("utf-8"))
        c = manifest.config.num_classes
        images, masks = [], []
        for i in range(manifest.n):
            s = load_sample(directory, i, c)
            images.append(s.image)
            masks.append(s.mask.labels)
        return cls(
            np.stack(images)[:, None].astype(np.float32),
            np.stack(masks).astype(np.uint8),
            manifest,
            hashlib.sha256(raw).hexdigest(),
            directory,
        )

    @classmethod
    def from_config(cls, cfg: PhantomConfig, n: int, split_ratios=DEFAULT_SPLIT_RATIOS) -> PhantomDataset:
        """In-memory dataset without touching disk (images are quantized as if round-tripped)."""
        sizes = split_sizes(n, split_ratios)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        splits = {name: (int(bounds[i]), int(bounds[i + 1])) for i, name in enumerate(SPLIT_NAMES)}
        samples = [gen_sample(cfg, i) for i in range(n)]
        images = np.stack([bytes_to_image(image_to_bytes(s.image)) for s in samples])[:, None]
        masks = np.stack([s.mask.labels for s in samples]).astype(np.uint8)
        manifest = Manifest(cfg, n, splits)
        return cls(images, masks, manifest, hashlib.sha256(manifest.to_text().encode()).hexdigest())


__all__ = [
    "PhantomConfig", "LabeledSample", "Manifest", "PhantomDataset", "gen_sample", "gen_dataset",
    "split_sizes", "save_sample", "load_sample", "read_pgm", "write_pgm", "image_to_bytes",
    "bytes_to_image", "parse_key_values",
]
