"""Small convolutional UNet used both as the mask-conditioned noise predictor and as the segmenter.

Layout for channel multipliers (m_0, ..., m_{L-1}) and widths ch_i = base * m_i::

    conv_in -> [res_i -> (down_i)]_{i<L} -> mid
            -> [concat skip_i -> up_res_i -> (upsample + up_conv_i)]_{i=L-1..0}
            -> norm_out -> silu -> conv_out

``up_res_i`` maps to ch_{i-1} before upsampling so the expensive convolutions
at high resolution stay narrow.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .ablation import Mask
from .autodiff import Tensor

GROUPS = 4
NORM_EPS = 1e-5


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 64
    num_classes: int = 4
    image_size: int = 32
    image_channels: int = 1
    in_channels: int = 2
    out_channels: int = 1
    zero_init_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        levels = len(self.channel_multipliers)
        if levels < 1:
            raise ValueError("need at least one resolution level")
        if self.image_size % (2 ** (levels - 1)):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{levels - 1}")
        for ch in self.widths:
            if ch % GROUPS:
                raise ValueError(f"channel width {ch} not divisible by {GROUPS} norm groups")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def conditional_time(self) -> bool:
        return self.time_embed_dim > 0

    @classmethod
    def denoiser(cls, num_classes: int = 4, image_channels: int = 1, **kw) -> UNetConfig:
        return cls(num_classes=num_classes, image_channels=image_channels,
                   in_channels=image_channels + 1, out_channels=image_channels, **kw)

    @classmethod
    def segmenter(cls, num_classes: int = 4, base_channels: int = 16,
                  channel_multipliers=(1, 2, 2), image_size: int = 32) -> UNetConfig:
        return cls(base_channels=base_channels, channel_multipliers=channel_multipliers,
                   time_embed_dim=0, num_classes=num_classes, image_size=image_size,
                   image_channels=1, in_channels=1, out_channels=num_classes, zero_init_output=False)

    def to_vector(self) -> list[float]:
        return [self.base_channels, self.time_embed_dim, self.num_classes, self.image_size,
                self.image_channels, self.in_channels, self.out_channels, int(self.zero_init_output),
                *self.channel_multipliers]

    @classmethod
    def from_vector(cls, v) -> UNetConfig:
        v = [int(round(float(x))) for x in v]
        return cls(base_channels=v[0], time_embed_dim=v[1], num_classes=v[2], image_size=v[3],
                   image_channels=v[4], in_channels=v[5], out_channels=v[6], zero_init_output=bool(v[7]),
                   channel_multipliers=tuple(v[8:]))


def timestep_embedding(t, dim: int) -> np.ndarray:
    """(sin(t w_1..w_k), cos(t w_1..w_k)) with geometric frequencies w_j = 10000^(-j/k), k = dim/2."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def encode_mask(mask, num_classes: int) -> np.ndarray:
    """Map labels c -> c / (C - 1) (all zeros when C = 1); accepts a Mask, (H, W) or (N, H, W) labels."""
    labels = mask.labels if isinstance(mask, Mask) else np.asarray(mask)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"mask labels must lie in [0, {num_classes - 1}]")
    if num_classes == 1:
        return np.zeros(labels.shape, dtype=np.float32)
    return (labels.astype(np.float32) / np.float32(num_classes - 1))


def mask_channel_batch(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(N, H, W) labels -> (N, 1, H, W) encoded channel."""
    return encode_mask(labels, num_classes)[:, None, :, :]


class UNet:
    """Parameters live in ``self.params`` (ordered name -> Tensor)."""

    def __init__(self, config: UNetConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self._build(rng if rng is not None else np.random.default_rng(0))

    # -- construction --------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)

    def _conv(self, rng, name, cin, cout, k, zero=False):
        fan_in = cin * k * k
        bound = 1.0 / np.sqrt(fan_in)
        w = np.zeros((cout, cin, k, k)) if zero else rng.uniform(-bound, bound, (cout, cin, k, k))
        self._add(f"{name}.weight", w)
        self._add(f"{name}.bias", np.zeros(cout))

    def _linear(self, rng, name, fin, fout):
        bound = 1.0 / np.sqrt(fin)
        self._add(f"{name}.weight", rng.uniform(-bound, bound, (fout, fin)))
        self._add(f"{name}.bias", np.zeros(fout))

    def _norm(self, name, ch):
        self._add(f"{name}.gamma", np.ones(ch))
        self._add(f"{name}.beta", np.zeros(ch))

    def _res(self, rng, name, cin, cout):
        self._norm(f"{name}.norm1", cin)
        self._conv(rng, f"{name}.conv1", cin, cout, 3)
        if self.config.conditional_time:
            self._linear(rng, f"{name}.time", self.config.time_embed_dim, cout)
        self._norm(f"{name}.norm2", cout)
        self._conv(rng, f"{name}.conv2", cout, cout, 3)
        if cin != cout:
            self._conv(rng, f"{name}.skip", cin, cout, 1)

    def _build(self, rng):
        cfg = self.config
        widths = cfg.widths
        levels = len(widths)
        if cfg.conditional_time:
            d = cfg.time_embed_dim
            self._linear(rng, "time.fc1", d, d)
            self._linear(rng, "time.fc2", d, d)
        self._conv(rng, "conv_in", cfg.in_channels, widths[0], 3)
        prev = widths[0]
        for i, ch in enumerate(widths):
            self._res(rng, f"down{i}.res", prev, ch)
            if i < levels - 1:
                self._conv(rng, f"down{i}.down", ch, ch, 3)
            prev = ch
        self._res(rng, "mid.res", prev, prev)
        for i in reversed(range(levels)):
            out = widths[i - 1] if i > 0 else widths[0]
            self._res(rng, f"up{i}.res", prev + widths[i], out)
            if i > 0:
                self._conv(rng, f"up{i}.up", out, out, 3)
            prev = out
        self._norm("norm_out", prev)
        self._conv(rng, "conv_out", prev, cfg.out_channels, 3, zero=cfg.zero_init_output)

    # -- forward -------------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _conv_apply(self, name, x, stride=1):
        w = self.params[f"{name}.weight"]
        k = w.shape[-1]
        return ad.conv2d(x, w, self.params[f"{name}.bias"], stride=stride, padding=(k - 1) // 2)

    def _norm_apply(self, name, x):
        return ad.group_norm(x, GROUPS, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], NORM_EPS)

    def _res_apply(self, name, x, temb):
        h = self._conv_apply(f"{name}.conv1", ad.silu(self._norm_apply(f"{name}.norm1", x)))
        if temb is not None:
            proj = ad.linear(temb, self.params[f"{name}.time.weight"], self.params[f"{name}.time.bias"])
            h = h + ad.reshape(proj, proj.shape + (1, 1))
        h = self._conv_apply(f"{name}.conv2", ad.silu(self._norm_apply(f"{name}.norm2", h)))
        skip = self._conv_apply(f"{name}.skip", x) if f"{name}.skip.weight" in self.params else x
        return skip + h

    def _time(self, t, n):
        cfg = self.config
        if not cfg.conditional_time:
            return None
        t = np.asarray(t).reshape(-1)
        if t.size == 1 and n > 1:
            t = np.full(n, t[0])
        if t.shape != (n,):
            raise ValueError(f"need one timestep per batch item ({n}), got {t.shape}")
        emb = Tensor(timestep_embedding(t, cfg.time_embed_dim).astype(self.dtype))
        h = ad.linear(emb, self._p("time.fc1.weight"), self._p("time.fc1.bias"))
        h = ad.linear(ad.silu(h), self._p("time.fc2.weight"), self._p("time.fc2.bias"))
        return ad.silu(h)

    def _check_input(self, x: Tensor, expected_channels: int):
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != expected_channels:
            raise ValueError(f"expected input (N, {expected_channels}, H, W), got {x.shape}")
        if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise ValueError(f"spatial size {x.shape[2:]} does not match configured image_size {cfg.image_size}")

    def run(self, x: Tensor, t=None, return_bottleneck: bool = False):
        """Forward pass on an already-assembled input of ``in_channels`` channels."""
        cfg = self.config
        self._check_input(x, cfg.in_channels)
        temb = self._time(t, x.shape[0]) if cfg.conditional_time else None
        widths = cfg.widths
        levels = len(widths)
        h = self._conv_apply("conv_in", x)
        skips = []
        for i in range(levels):
            h = self._res_apply(f"down{i}.res", h, temb)
            skips.append(h)
            if i < levels - 1:
                h = self._conv_apply(f"down{i}.down", h, stride=2)
        h = self._res_apply("mid.res", h, temb)
        bottleneck = h
        for i in reversed(range(levels)):
            h = ad.concat_channels([h, skips[i]])
            h = self._res_apply(f"up{i}.res", h, temb)
            if i > 0:
                h = self._conv_apply(f"up{i}.up", ad.upsample_nearest_2x(h))
        h = ad.silu(self._norm_apply("norm_out", h))
        out = self._conv_apply("conv_out", h)
        if return_bottleneck:
            return out, bottleneck
        return out

    def forward(self, x_t, mask_channel, t) -> Tensor:
        """eps_theta(x_t, t | m): the encoded mask is concatenated as an extra input channel."""
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.dtype))
        mask_channel = mask_channel if isinstance(mask_channel, Tensor) else Tensor(np.asarray(mask_channel, dtype=self.dtype))
        self._check_input(x_t, self.config.image_channels)
        if mask_channel.shape != (x_t.shape[0], 1) + x_t.shape[2:]:
            raise ValueError(f"mask channel {mask_channel.shape} does not match image batch {x_t.shape}")
        return self.run(ad.concat_channels([x_t, mask_channel]), t)

    __call__ = forward

    def predict_eps(self, x_t: np.ndarray, mask_channel: np.ndarray, t: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(x_t, mask_channel, t).data

    # -- parameter utilities -------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)
            p.grad = None


class Segmenter:
    """Wraps a time-free UNet producing per-pixel class logits."""

    def __init__(self, net: UNet):
        if net.config.conditional_time:
            raise ValueError("segmenter UNet must not use a time embedding")
        self.net = net

    @property
    def config(self) -> UNetConfig:
        return self.net.config

    def logits(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.net.dtype))
        return self.net.run(x)

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """(N, 1, H, W) images -> (N, H, W) argmax labels."""
        out = []
        with ad.no_grad():
            for s in range(0, len(images), batch_size):
                out.append(self.logits(images[s:s + batch_size]).data.argmax(axis=1).astype(np.uint8))
        return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.uint8)

    def features(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Global-average-pooled bottleneck activations, one row per image."""
        feats = []
        with ad.no_grad():
            for s in range(0, len(images), batch_size):
                x = Tensor(np.asarray(images[s:s + batch_size], dtype=self.net.dtype))
                _, bottleneck = self.net.run(x, return_bottleneck=True)
                feats.append(bottleneck.data.mean(axis=(2, 3)).astype(np.float64))
        return np.concatenate(feats) if feats else np.zeros((0, self.config.widths[-1]))


__all__ = ["UNetConfig", "UNet", "Segmenter", "timestep_embedding", "encode_mask", "mask_channel_batch"]
