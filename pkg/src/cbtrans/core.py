"""Shared configuration, RNG streams, image range helpers, and checkpointing.

Checkpoint file layout (version 1, little-endian):

    magic        4 bytes  b"CBT1"
    version      u32
    step         u64
    config       u64 length + UTF-8 config text (canonical ``key = value`` lines)
    tensor table u32 count, then per entry:
                     u16 name length + UTF-8 name
                     u8 dtype code (0=float32, 1=float64, 2=int64)
                     u8 ndim, then u32 per dimension
                     u64 byte length + raw little-endian data
    rng blob     u64 length + opaque bytes
    digest       32 bytes, SHA-256 of everything before it

Tensor names carry a section prefix: ``param/`` (model parameters),
``ema/`` (averaged parameters) and ``opt/`` (optimizer state).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


class ConfigError(ValueError):
    """Raised on unparseable or out-of-range configuration values."""

    def __init__(self, message, *, key=None, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.key = key
        self.line = line


class CheckpointError(RuntimeError):
    """Base class for checkpoint file problems."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint file has a version this build cannot read."""


class IntegrityError(CheckpointError):
    """Checkpoint file digest does not match its contents."""


class DatasetError(RuntimeError):
    """Raised for malformed or insufficient datasets."""


class DivergenceError(RuntimeError):
    """Raised when a loss becomes non-finite during training."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    """All hyperparameters of the translation model and its training loop.

    Defaults are desk scale (32x32); the loss weights and noise scale default
    to sigma=1, lambda_adv=1, lambda_cb=0.0001.
    """

    sigma: float = 1.0
    lambda_adv: float = 1.0
    lambda_cb: float = 0.0001
    num_domains: int = 2
    style_dim: int = 8
    latent_dim: int = 8
    content_channels: int = 8
    image_size: int = 32
    base_channels: int = 32
    num_down: int = 2
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4
    lr_mapping: float = 1e-6
    batch_size: int = 8
    total_steps: int = 2000
    ema_decay: float = 0.999
    r1_gamma: float = 1.0
    seed: int = 0

    def validate(self):
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0", key="sigma")
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv must be >= 0", key="lambda_adv")
        if self.lambda_cb < 0:
            raise ConfigError("lambda_cb must be >= 0", key="lambda_cb")
        if self.num_domains < 2:
            raise ConfigError("num_domains must be >= 2", key="num_domains")
        for key in ("style_dim", "latent_dim", "content_channels",
                    "base_channels", "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        if self.num_down < 1:
            raise ConfigError("num_down must be >= 1", key="num_down")
        stride = 2 ** self.num_down
        if self.image_size < stride or self.image_size % stride != 0:
            raise ConfigError(
                f"image_size must be a positive multiple of {stride} "
                f"(2**num_down)", key="image_size")
        for key in ("lr_generator", "lr_discriminator", "lr_mapping"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be > 0", key=key)
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0", key="total_steps")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in [0, 1)", key="ema_decay")
        if self.r1_gamma < 0:
            raise ConfigError("r1_gamma must be >= 0", key="r1_gamma")
        return self

    def to_text(self):
        """Canonical config text; parseable by :func:`parse_config_text`."""
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {value!r}")
        return "\n".join(lines) + "\n"

    def replace(self, **overrides):
        return dataclasses.replace(self, **overrides).validate()


_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(key, raw, line_no):
    kind = _CONFIG_FIELDS[key]
    try:
        if kind == "int":
            # Reject silent float truncation ("batch_size = 2.5").
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        return float(raw)
    except ValueError:
        raise ConfigError(
            f"invalid value {raw!r} for key {key!r}", key=key, line=line_no
        ) from None


def parse_config_text(text):
    """Parse ``key = value`` lines (``#`` comments) into a TrainConfig."""
    values = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw_line!r}",
                              line=line_no)
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown key {key!r}", key=key, line=line_no)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", key=key, line=line_no)
        values[key] = _parse_value(key, raw, line_no)
    return TrainConfig(**values).validate()


def load_config(path):
    """Load a config file; unspecified keys take their documented defaults."""
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# RNG streams


STREAM_NAMES = ("data", "content_noise", "latent", "init")


class RngStreams:
    """Independent named random streams derived from one root seed.

    Each consumer draws from its own stream, so disabling one consumer
    (e.g. content noise) leaves every other stream's draws unchanged.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(STREAM_NAMES))
        self._generators = {
            name: np.random.Generator(np.random.PCG64(child))
            for name, child in zip(STREAM_NAMES, children)
        }

    def __getattr__(self, name):
        try:
            return self._generators[name]
        except KeyError:
            raise AttributeError(name) from None

    def state_bytes(self):
        payload = {
            "seed": self.seed,
            "streams": {name: gen.bit_generator.state
                        for name, gen in self._generators.items()},
        }
        return json.dumps(payload, sort_keys=True).encode("utf-8")

    def restore(self, blob):
        payload = json.loads(blob.decode("utf-8"))
        self.seed = int(payload["seed"])
        for name, state in payload["streams"].items():
            self._generators[name].bit_generator.state = state

    @classmethod
    def from_bytes(cls, blob):
        streams = cls(0)
        streams.restore(blob)
        return streams


def normal_tensor(rng, shape, *, scale=1.0, dtype=torch.float32):
    """Draw a normal tensor from a numpy stream as a torch tensor."""
    sample = rng.normal(0.0, scale, size=tuple(shape))
    return torch.from_numpy(np.asarray(sample)).to(dtype)


# ---------------------------------------------------------------------------
# Image range helpers


def normalize_image(pixels_u8):
    """Map uint8 pixels to float32 in [-1, 1]."""
    arr = np.asarray(pixels_u8)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    return arr.astype(np.float32) / 127.5 - 1.0


def denormalize_image(pixels):
    """Map [-1, 1] floats back to uint8; exact inverse of normalize_image."""
    arr = np.asarray(pixels, dtype=np.float32)
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def validate_image(image, *, image_size=None):
    """Check the canonical image contract: finite, in [-1, 1], 1 or 3 channels."""
    if image.dim() not in (3, 4):
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got {tuple(image.shape)}")
    channels = image.shape[-3]
    if channels not in (1, 3):
        raise ValueError(f"channel count must be 1 or 3, got {channels}")
    if not torch.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    if image.min() < -1.0 - 1e-5 or image.max() > 1.0 + 1e-5:
        raise ValueError("image values outside [-1, 1]")
    if image_size is not None and tuple(image.shape[-2:]) != (image_size, image_size):
        raise ValueError(
            f"expected spatial size {image_size}x{image_size}, "
            f"got {tuple(image.shape[-2:])}")
    return image


# ---------------------------------------------------------------------------
# Checkpoint serialization


CHECKPOINT_MAGIC = b"CBT1"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_CODE_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64}
_NUMPY_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}


@dataclass
class Checkpoint:
    """Full resumable training state."""

    config: TrainConfig
    step: int
    parameters: dict
    ema_parameters: dict
    optimizer_state: dict
    rng_state: bytes
    version: int = CHECKPOINT_VERSION


def _write_tensor(buf, name, tensor):
    tensor = tensor.detach().contiguous().cpu()
    code = _DTYPE_CODES.get(tensor.dtype)
    if code is None:
        raise ValueError(f"unsupported tensor dtype {tensor.dtype} for {name!r}")
    encoded = name.encode("utf-8")
    buf += struct.pack("<H", len(encoded)) + encoded
    buf += struct.pack("<BB", code, tensor.dim())
    for dim in tensor.shape:
        buf += struct.pack("<I", dim)
    raw = tensor.numpy().astype(_NUMPY_DTYPES[code], copy=False).tobytes()
    buf += struct.pack("<Q", len(raw)) + raw


def _check_finite(section, tensors):
    for name, tensor in tensors.items():
        if tensor.is_floating_point() and not torch.isfinite(tensor).all():
            raise ValueError(f"non-finite tensor {section}/{name}")


def save_checkpoint(checkpoint, path):
    """Serialize a checkpoint; see the module docstring for the layout."""
    _check_finite("param", checkpoint.parameters)
    _check_finite("ema", checkpoint.ema_parameters)
    if set(checkpoint.parameters) != set(checkpoint.ema_parameters):
        raise ValueError("parameters and ema_parameters must share keys")
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", checkpoint.version)
    buf += struct.pack("<Q", checkpoint.step)
    config_blob = checkpoint.config.to_text().encode("utf-8")
    buf += struct.pack("<Q", len(config_blob)) + config_blob
    sections = (("param", checkpoint.parameters),
                ("ema", checkpoint.ema_parameters),
                ("opt", checkpoint.optimizer_state))
    count = sum(len(tensors) for _, tensors in sections)
    buf += struct.pack("<I", count)
    for prefix, tensors in sections:
        for name, tensor in tensors.items():
            _write_tensor(buf, f"{prefix}/{name}", tensor)
    buf += struct.pack("<Q", len(checkpoint.rng_state)) + checkpoint.rng_state
    buf += hashlib.sha256(bytes(buf)).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.offset = 0

    def take(self, n):
        if self.offset + n > len(self.blob):
            raise IntegrityError("checkpoint file truncated")
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Read a checkpoint file, verifying version and digest."""
    blob = Path(path).read_bytes()
    reader = _Reader(blob)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {version} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    if len(blob) < 36:
        raise IntegrityError("checkpoint file truncated")
    digest = blob[-32:]
    if hashlib.sha256(blob[:-32]).digest() != digest:
        raise IntegrityError(f"checkpoint digest mismatch: {path}")
    (step,) = reader.unpack("<Q")
    (config_len,) = reader.unpack("<Q")
    config = parse_config_text(reader.take(config_len).decode("utf-8"))
    (count,) = reader.unpack("<I")
    sections = {"param": {}, "ema": {}, "opt": {}}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        shape = tuple(reader.unpack("<I")[0] for _ in range(ndim))
        (nbytes,) = reader.unpack("<Q")
        raw = reader.take(nbytes)
        array = np.frombuffer(raw, dtype=_NUMPY_DTYPES[code]).reshape(shape)
        tensor = torch.from_numpy(array.copy()).to(_CODE_DTYPES[code])
        prefix, _, key = name.partition("/")
        if prefix not in sections:
            raise IntegrityError(f"unknown tensor section {prefix!r}")
        sections[prefix][key] = tensor
    (rng_len,) = reader.unpack("<Q")
    rng_state = bytes(reader.take(rng_len))
    return Checkpoint(config=config, step=step,
                      parameters=sections["param"],
                      ema_parameters=sections["ema"],
                      optimizer_state=sections["opt"],
                      rng_state=rng_state, version=version)
