"""Synthetic audio-visual pairs and the AVF1 feature file format.

Each class owns a tone (audio) and a unit direction in feature space (video).
An event is a decaying tone burst; with probability ``rho`` the video jumps
along the class direction at the event onset and relaxes back at the same
rate, so visual change marks audible events.  With ``rho = 0`` the video is
the event-free base trajectory.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError

WORLD_SEED = 20240917


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 8000
    n_video: int = 25
    video_dim: int = 16
    n_classes: int = 8
    n_events: int = 1
    rho: float = 1.0
    sample_rate_hz: float = 8000.0
    event_fraction: float = 0.25
    background: float = 0.02
    distractors: int = 0
    distractor_level: float = 0.5
    step_size: float = 1.0


@dataclass
class AVPair:
    audio: np.ndarray      # (T,)
    video: np.ndarray      # (T_v, d_v)
    labels: np.ndarray     # (n_events, 2): onset sample, class
    rho: float

    @property
    def label(self):
        return int(self.labels[0, 1])

    def onset_frames(self):
        return (self.labels[:, 0] * len(self.video)) // len(self.audio)


def class_frequencies(n_classes, lo=300.0, hi=2400.0):
    if n_classes == 1:
        return np.array([lo])
    return lo * (hi / lo) ** (np.arange(n_classes) / (n_classes - 1))


def class_directions(n_classes, video_dim):
    rng = np.random.default_rng(WORLD_SEED)
    m = rng.standard_normal((max(n_classes, video_dim), video_dim))
    if n_classes <= video_dim:
        q, _ = np.linalg.qr(m.T)
        return q.T[:n_classes]
    return m[:n_classes] / np.linalg.norm(m[:n_classes], axis=1, keepdims=True)


def _burst(n, freq, sr, rng, decay_s):
    t = np.arange(n) / sr
    attack = np.minimum(1.0, t / 0.004)
    env = attack * np.exp(-t / decay_s)
    phase = rng.uniform(0, 2 * np.pi)
    return env * (np.sin(2 * np.pi * freq * t + phase) + 0.3 * np.sin(4 * np.pi * freq * t + 2 * phase))


def generate_pair(seed, rho, n_events, n_samples, n_video, video_dim, n_classes=8, cfg=None):
    """One deterministic audio-visual pair; a pure function of its arguments."""
    if n_events < 1:
        raise ContractError("n_events must be >= 1")
    if not 0.0 <= rho <= 1.0:
        raise ContractError(f"rho must lie in [0, 1], got {rho}")
    cfg = cfg or DataConfig()
    sr = cfg.sample_rate_hz
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A17]))
    event_len = max(1, int(n_samples * cfg.event_fraction))
    frame_len = n_samples / n_video
    first = int(np.ceil(frame_len))  # keep onsets off video frame 0
    slack = n_samples - first - n_events * event_len
    if slack < 0:
        raise ContractError(f"cannot pack {n_events} events of {event_len} samples into {n_samples} samples")

    gaps = np.sort(rng.integers(0, slack + 1, size=n_events))
    onsets = first + gaps + np.arange(n_events) * event_len
    classes = rng.integers(0, n_classes, size=n_events)
    freqs = class_frequencies(n_classes)
    dirs = class_directions(n_classes, video_dim)

    audio = rng.standard_normal(n_samples) * cfg.background
    decay_s = event_len / sr / 3.0
    for on, c in zip(onsets, classes):
        amp = rng.uniform(0.3, 0.8)
        audio[on:on + event_len] += amp * _burst(event_len, freqs[c], sr, rng, decay_s)
    for _ in range(cfg.distractors):
        f = rng.uniform(200.0, 3000.0)
        on = rng.integers(0, n_samples - event_len + 1)
        audio[on:on + event_len] += cfg.distractor_level * _burst(event_len, f, sr, rng, decay_s)

    t = np.arange(n_video)[:, None] / n_video
    freqs_v = rng.uniform(0.2, 1.0, size=(2, video_dim))
    phases = rng.uniform(0, 2 * np.pi, size=(2, video_dim))
    offset = rng.standard_normal(video_dim) * 0.2
    video = offset + 0.1 * (np.sin(2 * np.pi * freqs_v[0] * t + phases[0])
                            + np.sin(2 * np.pi * freqs_v[1] * t + phases[1]))
    tau_frames = max(1.0, event_len / frame_len / 2.0)
    show = rng.random(n_events) < rho
    for on, c, s in zip(onsets, classes, show):
        if not s:
            continue
        f0 = int(on // frame_len)
        k = np.arange(n_video - f0)
        video[f0:] += cfg.step_size * np.exp(-k / tau_frames)[:, None] * dirs[c][None, :]

    rms = np.sqrt(np.mean(audio ** 2))
    if rms > 1.0:
        audio = audio / rms
    labels = np.stack([onsets, classes], axis=1).astype(np.int64)
    return AVPair(audio=audio, video=video, labels=labels, rho=float(rho))


def pair_from_config(seed, cfg):
    return generate_pair(seed, cfg.rho, cfg.n_events, cfg.n_samples, cfg.n_video, cfg.video_dim,
                         cfg.n_classes, cfg)


def make_batch(seeds, cfg, dtype=np.float64):
    pairs = [pair_from_config(s, cfg) for s in seeds]
    audio = np.stack([p.audio for p in pairs]).astype(dtype)
    video = np.stack([p.video for p in pairs]).astype(dtype)
    labels = np.array([p.label for p in pairs])
    return audio, video, labels


# ---------------------------------------------------------------- AVF1 feature files

AVF_MAGIC = b"AVF1"
AVF_VERSION = 1
_HEADER = struct.Struct("<4sIBII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_features(array):
    a = np.asarray(array)
    if a.ndim != 2:
        raise ContractError(f"feature arrays must be 2-D (T_v, d_v), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("feature array contains non-finite values")
    tag = 0 if a.dtype == np.float32 else 1
    dt = _DTYPES[tag]
    return _HEADER.pack(AVF_MAGIC, AVF_VERSION, tag, a.shape[0], a.shape[1]) + a.astype(dt).tobytes()


def decode_features(buf):
    if len(buf) < 4:
        raise FormatError("file too short for AVF1 magic", offset=len(buf))
    if buf[:4] != AVF_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected b'AVF1'", offset=0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated AVF1 header", offset=len(buf))
    _, version, tag, n, d = _HEADER.unpack_from(buf)
    if version != AVF_VERSION:
        raise FormatError(f"unsupported AVF1 version {version}", offset=4)
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}", offset=8)
    dt = _DTYPES[tag]
    need = n * d * dt.itemsize
    payload = buf[_HEADER.size:]
    if len(payload) != need:
        raise FormatError(f"payload has {len(payload)} bytes, header promises {need}",
                          offset=_HEADER.size + min(len(payload), need))
    return np.frombuffer(payload, dtype=dt).reshape(n, d).astype(dt.newbyteorder("="))


def write_features(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_features(array))


def read_features(path):
    with open(path, "rb") as fh:
        return decode_features(fh.read())


# ---------------------------------------------------------------- raw audio


def write_raw_audio(path, audio, sample_rate_hz):
    """32-bit float little-endian samples plus a ``<path>.json`` sidecar."""
    audio = np.asarray(audio, dtype="<f4").ravel()
    with open(path, "wb") as fh:
        fh.write(audio.tobytes())
    with open(f"{path}.json", "w") as fh:
        json.dump({"sample_rate_hz": float(sample_rate_hz), "length": int(audio.size)}, fh)


def read_raw_audio(path):
    """Returns (samples as float64, sample_rate_hz)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % 4:
        raise FormatError(f"raw audio size {len(raw)} is not a multiple of 4 bytes", offset=len(raw) - len(raw) % 4)
    audio = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    sr = 8000.0
    try:
        with open(f"{path}.json") as fh:
            meta = json.load(fh)
        sr = float(meta["sample_rate_hz"])
        if int(meta["length"]) != audio.size:
            raise FormatError(f"sidecar length {meta['length']} != {audio.size} samples in file", offset=0)
    except FileNotFoundError:
        pass
    return audio, sr
