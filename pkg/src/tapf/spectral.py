"""Spectral reconstruction losses and evaluation metrics.

The STFT is computed as a matmul against cosine/sine DFT matrices so it runs
through the autodiff tape like any other op.  Mel Error and STFT Distance
have no canonical definition; here they are the mean L1 distance of log-mel
and linear magnitudes at the largest analysis scale.
"""

import csv
import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError

LOG_FLOOR = 1e-5
SI_SDR_CAP_DB = 100.0


@dataclass(frozen=True)
class SpectralConfig:
    fft_sizes: tuple = (512, 256, 128, 64)
    mel_bins: tuple = (64, 32, 16, 8)
    scale_weights: tuple = (45.0, 1.0, 1.0, 1.0)
    sample_rate_hz: float = 8000.0

    def __post_init__(self):
        for name in ("fft_sizes", "mel_bins", "scale_weights"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = len(self.fft_sizes)
        if len(self.scale_weights) != n or len(self.mel_bins) != n:
            raise ConfigError(f"spectral: {n} fft sizes but {len(self.mel_bins)} mel_bins "
                              f"and {len(self.scale_weights)} scale_weights")
        for f in self.fft_sizes:
            if f < 2 or f & (f - 1):
                raise ConfigError(f"spectral.fft_sizes must be powers of two, got {f}")
        if any(w < 0 for w in self.scale_weights):
            raise ConfigError("spectral.scale_weights must be nonnegative")

    @property
    def largest(self):
        i = int(np.argmax(self.fft_sizes))
        return self.fft_sizes[i], self.mel_bins[i]


@functools.lru_cache(maxsize=None)
def _dft(n_fft):
    n = np.arange(n_fft)
    k = np.arange(n_fft // 2 + 1)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / n_fft)  # periodic Hann
    ang = 2 * np.pi * np.outer(n, k) / n_fft
    return window[:, None] * np.cos(ang), -window[:, None] * np.sin(ang)


def hann(n_fft):
    n = np.arange(n_fft)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / n_fft)


def stft_mag(x, fft_size):
    """Hann-windowed magnitude spectrogram, hop = fft_size / 4, no centering.

    x: (T,) or (B, T). Returns (frames, bins) or (B, frames, bins).
    """
    x = ad.as_tensor(x)
    T = x.shape[-1]
    if T < fft_size:
        raise ContractError(f"stft_mag: signal length {T} shorter than fft size {fft_size}")
    hop = fft_size // 4
    frames = ad.frames(x, fft_size, hop)
    cos_m, sin_m = _dft(fft_size)
    re = frames @ ad.Tensor(cos_m.astype(x.dtype))
    im = frames @ ad.Tensor(sin_m.astype(x.dtype))
    return ad.hypot(re, im)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=None)
def mel_filterbank(n_mels, fft_size, sample_rate_hz):
    """Triangular HTK-mel filters, shape (n_mels, fft_size // 2 + 1)."""
    bins = np.linspace(0.0, sample_rate_hz / 2, fft_size // 2 + 1)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate_hz / 2), n_mels + 2))
    fb = np.zeros((n_mels, len(bins)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def save_filterbank_csv(path, fb):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(fb.tolist())


def log_mel(mag, n_mels, fft_size, sample_rate_hz):
    fb = mel_filterbank(n_mels, fft_size, float(sample_rate_hz))
    mel = mag @ ad.Tensor(fb.T.astype(mag.dtype))
    return ad.log(ad.clamp_min(mel, LOG_FLOOR))


def _check_pair(name, x, x_hat):
    if x.shape != x_hat.shape:
        raise DimensionError(f"{name}: lengths differ, {x.shape} vs {x_hat.shape}")


def multiscale_spectral_loss(x, x_hat, cfg):
    """Weighted sum over scales of the mean L1 distance between log-mel spectrograms."""
    x, x_hat = ad.as_tensor(x), ad.as_tensor(x_hat)
    _check_pair("multiscale_spectral_loss", x, x_hat)
    total = None
    for n_fft, n_mels, w in zip(cfg.fft_sizes, cfg.mel_bins, cfg.scale_weights):
        if w == 0:
            continue
        a = log_mel(stft_mag(x, n_fft), n_mels, n_fft, cfg.sample_rate_hz)
        b = log_mel(stft_mag(x_hat, n_fft), n_mels, n_fft, cfg.sample_rate_hz)
        term = ad.l1(a, b) * w
        total = term if total is None else total + term
    if total is None:
        return ad.Tensor(np.zeros((), dtype=x.dtype))
    return total


def mel_error(x, x_hat, cfg):
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    _check_pair("mel_error", x, x_hat)
    n_fft, n_mels = cfg.largest
    a = log_mel(stft_mag(x, n_fft), n_mels, n_fft, cfg.sample_rate_hz).data
    b = log_mel(stft_mag(x_hat, n_fft), n_mels, n_fft, cfg.sample_rate_hz).data
    return float(np.mean(np.abs(a - b)))


def stft_distance(x, x_hat, cfg):
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    _check_pair("stft_distance", x, x_hat)
    n_fft, _ = cfg.largest
    return float(np.mean(np.abs(stft_mag(x, n_fft).data - stft_mag(x_hat, n_fft).data)))


def si_sdr(x, x_hat):
    """Scale-invariant SDR in dB, clipped to [-100, 100].

    x_hat is projected onto the reference x; the result compares the energy
    of that projection with the energy of what is left over.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    if x.shape != x_hat.shape:
        raise DimensionError(f"si_sdr: lengths differ, {x.shape} vs {x_hat.shape}")
    ref_energy = float(x @ x)
    if ref_energy == 0.0:
        raise ContractError("si_sdr: reference signal is all zeros")
    target = (float(x_hat @ x) / ref_energy) * x
    noise = x_hat - target
    t_e, n_e = float(target @ target), float(noise @ noise)
    if n_e == 0.0:
        return SI_SDR_CAP_DB
    if t_e == 0.0:
        return -SI_SDR_CAP_DB
    return float(np.clip(10.0 * np.log10(t_e / n_e), -SI_SDR_CAP_DB, SI_SDR_CAP_DB))


def metrics_report(x, x_hat, cfg):
    return {
        "mel_error": mel_error(x, x_hat, cfg),
        "stft_distance": stft_distance(x, x_hat, cfg),
        "si_sdr_db": si_sdr(x, x_hat),
    }
