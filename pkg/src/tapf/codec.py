"""Convolutional encoder/decoder pair and the binary checkpoint format."""

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, FormatError, NumericError

COMPONENTS = ("encoder_conv", "decoder_conv", "quantizer", "fusion_head")


@dataclass(frozen=True)
class CodecConfig:
    strides: tuple = (4, 2)
    channels: int = 32
    latent_dim: int = 64
    kernel_size: int = 7

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if not self.strides or any(s < 1 for s in self.strides):
            raise ConfigError(f"codec.strides must be positive integers, got {list(self.strides)}")
        if self.channels < 1 or self.latent_dim < 1:
            raise ConfigError("codec.channels and codec.latent_dim must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"codec.kernel_size must be odd and positive, got {self.kernel_size}")

    @property
    def hop(self):
        return int(np.prod(self.strides))


class ParamSet:
    """Named trainable tensors, each tagged with exactly one component label."""

    def __init__(self):
        self.tensors = {}
        self.components = {}

    def add(self, name, array, component, trainable=True):
        if component not in COMPONENTS:
            raise ConfigError(f"unknown component label {component!r}")
        t = ad.Tensor(array, requires_grad=trainable, name=name)
        self.tensors[name] = t
        self.components[name] = component
        return t

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def trainable(self):
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def state_dict(self):
        return {k: t.data for k, t in self.tensors.items()}

    def load_state_dict(self, arrays, prefix=""):
        for k, t in self.tensors.items():
            key = prefix + k
            if key not in arrays:
                raise ContractError(f"missing tensor {key!r} in checkpoint")
            arr = np.asarray(arrays[key])
            if arr.shape != t.shape:
                raise ContractError(f"tensor {key!r}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.dtype).copy()


def _conv_init(rng, c_out, c_in, k, dtype, gain=1.0):
    std = gain / np.sqrt(c_in * k)
    return (rng.standard_normal((c_out, c_in, k)) * std).astype(dtype)


class Codec:
    """Strided conv encoder with a 1x1 channel mixer, mirrored by a transposed-conv decoder.

    Channel width doubles at each downsampling stage.  Latents are laid out
    as (batch, frames, latent_dim).
    """

    def __init__(self, cfg, rng, dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        self.params = ParamSet()
        p, k = self.params, cfg.kernel_size
        widths = [cfg.channels * 2 ** i for i in range(len(cfg.strides) + 1)]
        self.widths = widths

        p.add("encoder.conv_in.weight", _conv_init(rng, widths[0], 1, k, dtype), "encoder_conv")
        p.add("encoder.conv_in.bias", np.zeros(widths[0], dtype), "encoder_conv")
        for i, s in enumerate(cfg.strides):
            p.add(f"encoder.down{i}.weight", _conv_init(rng, widths[i + 1], widths[i], 2 * s, dtype), "encoder_conv")
            p.add(f"encoder.down{i}.bias", np.zeros(widths[i + 1], dtype), "encoder_conv")
        top = widths[-1]
        p.add("encoder.mix.weight", _conv_init(rng, top, top, 1, dtype), "encoder_conv")
        p.add("encoder.mix.bias", np.zeros(top, dtype), "encoder_conv")
        p.add("encoder.conv_out.weight", _conv_init(rng, cfg.latent_dim, top, k, dtype), "encoder_conv")
        p.add("encoder.conv_out.bias", np.zeros(cfg.latent_dim, dtype), "encoder_conv")

        p.add("decoder.conv_in.weight", _conv_init(rng, top, cfg.latent_dim, k, dtype), "decoder_conv")
        p.add("decoder.conv_in.bias", np.zeros(top, dtype), "decoder_conv")
        p.add("decoder.mix.weight", _conv_init(rng, top, top, 1, dtype), "decoder_conv")
        p.add("decoder.mix.bias", np.zeros(top, dtype), "decoder_conv")
        for j, i in enumerate(reversed(range(len(cfg.strides)))):
            s = cfg.strides[i]
            w = (rng.standard_normal((widths[i + 1], widths[i], 2 * s)) / np.sqrt(widths[i + 1] * 2)).astype(dtype)
            p.add(f"decoder.up{j}.weight", w, "decoder_conv")
            p.add(f"decoder.up{j}.bias", np.zeros(widths[i], dtype), "decoder_conv")
        p.add("decoder.conv_out.weight", _conv_init(rng, 1, widths[0], k, dtype, gain=0.1), "decoder_conv")
        p.add("decoder.conv_out.bias", np.zeros(1, dtype), "decoder_conv")

    def frames(self, n_samples):
        if n_samples % self.cfg.hop:
            raise ContractError(f"audio length {n_samples} is not divisible by {self.cfg.hop}; "
                                f"zero-pad to {pad_length(n_samples, self.cfg.hop)} samples first")
        return n_samples // self.cfg.hop

    def encode(self, x):
        """Audio (B, T) or (T,) -> latents (B, T', d) or (T', d)."""
        x = ad.as_tensor(x)
        single = x.ndim == 1
        self.frames(x.shape[-1])
        p, pad = self.params, self.cfg.kernel_size // 2
        h = x.reshape(1 if single else x.shape[0], 1, x.shape[-1])
        h = ad.conv1d(h, p["encoder.conv_in.weight"], p["encoder.conv_in.bias"], padding=pad)
        for i, s in enumerate(self.cfg.strides):
            h = ad.conv1d(ad.tanh(h), p[f"encoder.down{i}.weight"], p[f"encoder.down{i}.bias"],
                          stride=s, padding=(s // 2, s - s // 2))
        h = ad.conv1d(ad.tanh(h), p["encoder.mix.weight"], p["encoder.mix.bias"])
        h = ad.conv1d(ad.tanh(h), p["encoder.conv_out.weight"], p["encoder.conv_out.bias"], padding=pad)
        z = ad.transpose(h, (0, 2, 1))
        return z.reshape(z.shape[1:]) if single else z

    def decode(self, z):
        """Latents (B, T', d) or (T', d) -> audio (B, T' * hop) or (T' * hop,)."""
        z = ad.as_tensor(z)
        if not np.all(np.isfinite(z.data)):
            raise NumericError("decode: latent contains non-finite values")
        single = z.ndim == 2
        if single:
            z = z.reshape((1,) + z.shape)
        p, pad = self.params, self.cfg.kernel_size // 2
        h = ad.transpose(z, (0, 2, 1))
        h = ad.conv1d(h, p["decoder.conv_in.weight"], p["decoder.conv_in.bias"], padding=pad)
        h = ad.conv1d(ad.tanh(h), p["decoder.mix.weight"], p["decoder.mix.bias"])
        for j, i in enumerate(reversed(range(len(self.cfg.strides)))):
            s = self.cfg.strides[i]
            h = ad.conv1d_transpose(ad.tanh(h), p[f"decoder.up{j}.weight"], p[f"decoder.up{j}.bias"],
                                    stride=s, crop=(s // 2, s - s // 2))
        h = ad.conv1d(ad.tanh(h), p["decoder.conv_out.weight"], p["decoder.conv_out.bias"], padding=pad)
        out = h.reshape(h.shape[0], h.shape[-1])
        return out.reshape(out.shape[1:]) if single else out


def pad_length(n, hop):
    return -(-n // hop) * hop


# ---------------------------------------------------------------- checkpoint files

CKPT_MAGIC = b"TAPF"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_checkpoint(path, tensors):
    """Write ``{name: array}`` in the TAPF binary layout (all fields little-endian)."""
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_checkpoint(buf)


def parse_checkpoint(buf):
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic, expected b'TAPF'", offset=0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        at = pos
        try:
            name = take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", offset=at) from None
        at = pos
        tag, rank = struct.unpack("<BB", take(2, "dtype tag"))
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for tensor {name!r}", offset=at)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        dt = _DTYPES[tag]
        nbytes = math.prod(dims) * dt.itemsize   # python ints: corrupt dims must not wrap around
        payload = take(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", offset=pos)
    return out
