"""Binary checkpoint format.

Layout (all integers 4-byte little-endian unless noted)::

    b"SGDF" | version | tensor count
    per tensor: name length | name (UTF-8) | rank | dims... | float32 LE data
    8-byte LE checksum = sum of all preceding bytes mod 2**64

Non-parameter metadata travels as tensors under ``meta/``.  Their float64
values are stored bit-for-bit as pairs of 32-bit words so schedules and
configs survive the round trip exactly.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, linear_schedule
from .unet import UNet, UNetConfig

MAGIC = b"SGDF"
FORMAT_VERSION = 1
META_PREFIX = "meta/"

KINDS = ("denoiser", "segmenter")
MODES = ("guided", "guided-ablated", "unconditional", "segmenter")


class CheckpointError(OSError):
    pass


@dataclass
class ModelCheckpoint:
    params: dict[str, np.ndarray]
    config: UNetConfig
    schedule: NoiseSchedule | None = None
    step: int = 0
    kind: str = "denoiser"
    mode: str = "guided"
    seed: int = 0
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def conditional(self) -> bool:
        return self.mode != "unconditional"

    def build(self, dtype=np.float32) -> UNet:
        net = UNet(self.config, dtype=dtype)
        net.load_state_dict(self.params)
        return net

    @classmethod
    def from_model(cls, net: UNet, **kw) -> ModelCheckpoint:
        return cls(params=net.state_dict(), config=net.config, **kw)


def _meta_encode(values) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(values, dtype="<f8")).view("<f4")


def _meta_decode(words: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(words, dtype="<f4").view("<f8")


def _checksum(payload: bytes) -> int:
    return int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64)) % (1 << 64)


def serialize(ckpt: ModelCheckpoint) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = []
    tensors.append((META_PREFIX + "unet", _meta_encode(ckpt.config.to_vector())))
    tensors.append((META_PREFIX + "run", _meta_encode([ckpt.step, KINDS.index(ckpt.kind), MODES.index(ckpt.mode), ckpt.seed])))
    if ckpt.schedule is not None:
        s = ckpt.schedule
        tensors.append((META_PREFIX + "schedule", _meta_encode([s.T, s.beta_start, s.beta_end])))
    for name, arr in ckpt.extra.items():
        tensors.append((META_PREFIX + "extra/" + name, _meta_encode(np.ravel(arr))))
    for name, arr in ckpt.params.items():
        tensors.append((name, np.asarray(arr, dtype="<f4")))

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
    for name, arr in tensors:
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    return payload + struct.pack("<Q", _checksum(payload))


def deserialize(blob: bytes, source: str = "<bytes>") -> ModelCheckpoint:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not an SGDF checkpoint")
    payload, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if _checksum(payload) != stored:
        raise CheckpointError(f"{source}: checksum mismatch (file truncated or corrupt)")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    pos = 12
    params: dict[str, np.ndarray] = {}
    meta: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            name = payload[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(payload, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
            if name.startswith(META_PREFIX):
                meta[name[len(META_PREFIX):]] = _meta_decode(arr)
            else:
                params[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{source}: malformed tensor table ({exc})") from exc
    if pos != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - pos} trailing bytes before checksum")
    if "unet" not in meta or "run" not in meta:
        raise CheckpointError(f"{source}: missing model metadata")

    step, kind, mode, seed = (int(v) for v in meta["run"])
    schedule = None
    if "schedule" in meta:
        T, b0, b1 = meta["schedule"]
        schedule = linear_schedule(int(T), float(b0), float(b1))
    extra = {k[len("extra/"):]: v for k, v in meta.items() if k.startswith("extra/")}
    return ModelCheckpoint(params, UNetConfig.from_vector(meta["unet"]), schedule, step,
                           KINDS[kind], MODES[mode], seed, extra)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(serialize(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelCheckpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc})") from exc
    return deserialize(blob, str(path))
