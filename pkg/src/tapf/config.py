"""Experiment configuration: dataclass sections stored as an INI file.

Each section maps to one dataclass and keys are addressed as
``section.field`` (``fusion.method``, ``codec.strides`` ...).  Values are
written as Python/JSON literals so a file round-trips exactly::

    [fusion]
    method = 'tapf'
    weight = 120.0
"""

import ast
import configparser
import dataclasses
import io
import zlib
from dataclasses import dataclass, field

import numpy as np

from .codec import CodecConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .spectral import SpectralConfig
from .synthav import DataConfig


@dataclass(frozen=True)
class QuantizerConfig:
    kind: str = "rvq"
    n_q: int = 4
    codebook_size: int = 64
    levels: tuple = (8, 5, 5, 5)
    ema_decay: float = 0.99
    dead_after: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        if self.kind not in ("rvq", "fsq"):
            raise ConfigError(f"quantizer.kind must be rvq or fsq, got {self.kind!r}")
        if self.n_q < 1 or self.codebook_size < 1:
            raise ConfigError("quantizer.n_q and quantizer.codebook_size must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"quantizer.ema_decay must lie in (0, 1), got {self.ema_decay}")


@dataclass(frozen=True)
class TrainConfig:
    lambda_recon: float = 500.0
    lambda_mel: float = 1.0
    lambda_commit: float = 10.0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    precision: str = "f32"
    grad_every: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"train.precision must be f32 or f64, got {self.precision!r}")
        if self.batch_size < 1 or self.steps < 0 or self.grad_every < 1:
            raise ConfigError("train.batch_size and train.grad_every must be >= 1, train.steps >= 0")
        for name in ("lambda_recon", "lambda_mel", "lambda_commit"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be nonnegative")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass(frozen=True)
class ProbeConfig:
    e_dim: int = 32
    learning_rate: float = 1e-3
    steps: int = 500
    batch_size: int = 64
    n_train: int = 256
    n_test: int = 128
    dataset_seed: int = 7


@dataclass(frozen=True)
class ExperimentConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if self.quantizer.kind == "fsq" and self.codec.latent_dim != len(self.quantizer.levels):
            raise ConfigError(f"fsq needs codec.latent_dim == len(quantizer.levels) "
                              f"({self.codec.latent_dim} != {len(self.quantizer.levels)})")
        if self.data.n_samples % self.codec.hop:
            raise ConfigError(f"data.n_samples {self.data.n_samples} is not divisible by the codec hop "
                              f"{self.codec.hop}")
        if self.data.n_samples < max(self.spectral.fft_sizes):
            raise ConfigError("data.n_samples is shorter than the largest spectral fft size")

    def replace(self, **overrides):
        """Copy with dotted-key overrides, e.g. ``cfg.replace(**{"fusion.weight": 120.0})``."""
        sections = {name: {} for name in SECTIONS}
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            _check_key(section, name, key)
            sections[section][name] = value
        return dataclasses.replace(self, **{s: dataclasses.replace(getattr(self, s), **kv)
                                            for s, kv in sections.items() if kv})

    def as_dict(self):
        return {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}


SECTIONS = {
    "codec": CodecConfig, "quantizer": QuantizerConfig, "fusion": FusionConfig,
    "spectral": SpectralConfig, "train": TrainConfig, "data": DataConfig, "probe": ProbeConfig,
}


def _check_key(section, name, key):
    if section not in SECTIONS:
        raise ConfigError(f"unknown config key {key!r}: no section {section!r}")
    fields = {f.name for f in dataclasses.fields(SECTIONS[section])}
    if name not in fields:
        raise ConfigError(f"unknown config key {key!r}")


def _literal(text, key):
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        # bare words are accepted as strings
        value = text.strip()
    if isinstance(value, list):
        value = tuple(value)
    return value


def from_ini(text):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    overrides = {}
    for section in parser.sections():
        for name, raw in parser.items(section):
            key = f"{section}.{name}"
            _check_key(section, name, key)
            overrides[key] = _literal(raw, key)
    try:
        return ExperimentConfig().replace(**overrides)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from None


def load(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return from_ini(text)


def to_ini(cfg):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        parser[section] = {k: repr(list(v) if isinstance(v, tuple) else v)
                           for k, v in dataclasses.asdict(getattr(cfg, section)).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save(cfg, path):
    with open(path, "w") as fh:
        fh.write(to_ini(cfg))


# ---------------------------------------------------------------- seeding


def _label_key(label):
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def seed_sequence(seed, *labels):
    """Stream derived from one u64 seed by a labeled split."""
    return np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(_label_key(x) for x in labels))


def rng_for(seed, *labels):
    return np.random.default_rng(seed_sequence(seed, *labels))


def derive_seed(seed, *labels):
    return int(seed_sequence(seed, *labels).generate_state(1, dtype=np.uint64)[0])
