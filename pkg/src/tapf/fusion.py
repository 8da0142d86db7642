"""Audio-visual fusion losses and the timing-aware temporal pooling.

Index conventions: ``align_index`` and ``attention_pool`` take 1-based frame
indices (matching how window centers are usually reported); everything
vectorized inside uses 0-based numpy indices.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .codec import ParamSet
from .errors import ConfigError, ContractError, DimensionError

LOCATIONS = ("pre_quantization", "quantization_level")
METHODS = ("distillation", "contrastive", "tapf", "none")
_MASKED = -1e30


@dataclass(frozen=True)
class FusionConfig:
    location: str = "pre_quantization"
    method: str = "none"
    weight: float = 0.0
    temperature: float = 0.07
    w_min: int = 1
    w_max: int = 7
    lambda_sim: float = 1.0
    complexity_norm: str = "l2"
    pooling: str = "attention"
    complexity_standardize: bool = True
    dynamic_window: bool = True
    semantic_dim: int = 16

    def __post_init__(self):
        if self.location not in LOCATIONS:
            raise ConfigError(f"fusion.location must be one of {LOCATIONS}, got {self.location!r}")
        if self.method not in METHODS:
            raise ConfigError(f"fusion.method must be one of {METHODS}, got {self.method!r}")
        if not 1 <= self.w_min <= self.w_max:
            raise ConfigError(f"fusion window bounds need 1 <= w_min <= w_max, got {self.w_min}, {self.w_max}")
        if self.temperature <= 0:
            raise ConfigError("fusion.temperature must be positive")
        if self.weight < 0 or self.lambda_sim < 0:
            raise ConfigError("fusion.weight and fusion.lambda_sim must be nonnegative")
        if self.complexity_norm not in ("l1", "l2"):
            raise ConfigError(f"fusion.complexity_norm must be l1 or l2, got {self.complexity_norm!r}")
        if self.pooling not in ("attention", "mean"):
            raise ConfigError(f"fusion.pooling must be attention or mean, got {self.pooling!r}")

    @property
    def fixed_window(self):
        # Window used when dynamic sizing is ablated: the size a score of 0 maps to.
        return int(ad.round_half_away(self.w_min + (self.w_max - self.w_min) * 0.5))


# ---------------------------------------------------------------- alignment


def align_index(t, n_video, n_audio):
    """1-based audio frame at the center of 1-based video frame ``t``."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > n_video):
        raise ContractError(f"video frame index must lie in [1, {n_video}]")
    center = ad.round_half_away((t - 0.5) * n_audio / n_video + 0.5)
    return np.clip(center, 1, n_audio).astype(np.int64)


def _centers0(n_video, n_audio):
    return align_index(np.arange(1, n_video + 1), n_video, n_audio) - 1


# ---------------------------------------------------------------- static fusion losses


class _ZeroNormLog:
    def __init__(self):
        self.count = 0

    def __call__(self, n):
        self.count += n


def distill_loss(f_audio, f_vision):
    """Mean over video frames of -log(sigmoid(cos(audio at the aligned frame, vision))).

    Accepts (T', d_s) / (T_v, d_s) or batched (B, T', d_s) / (B, T_v, d_s).
    """
    f_audio, f_vision = ad.as_tensor(f_audio), ad.as_tensor(f_vision)
    if f_audio.shape[-1] != f_vision.shape[-1] or f_audio.ndim != f_vision.ndim:
        raise DimensionError(f"distill_loss: audio {f_audio.shape} and vision {f_vision.shape} are incompatible")
    n_audio, n_video = f_audio.shape[-2], f_vision.shape[-2]
    if n_audio != n_video:
        f_audio = f_audio[..., _centers0(n_video, n_audio), :]
    zero = _ZeroNormLog()
    cos = ad.cosine_similarity(f_audio, f_vision, axis=-1, on_zero=zero)
    if zero.count:
        warnings.warn(f"distill_loss: {zero.count} zero-norm frame(s) treated as cos = 0", RuntimeWarning,
                      stacklevel=2)
    return ad.mean(ad.softplus(-cos))


def _unit(x, axis=-1):
    n = ad.clamp_min(ad.l2norm(x, axis=axis, keepdims=True), 1e-12)
    return x / n


def similarity_matrix(f_audio_batch, f_vision_batch):
    a = _unit(ad.mean(f_audio_batch, axis=1))
    v = _unit(ad.mean(f_vision_batch, axis=1))
    return a @ ad.transpose(v, (1, 0))


def contrastive_loss(f_audio_batch, f_vision_batch, temperature):
    """Symmetric InfoNCE over time-pooled features. Inputs (B, T, d_s)."""
    f_audio_batch, f_vision_batch = ad.as_tensor(f_audio_batch), ad.as_tensor(f_vision_batch)
    B = f_audio_batch.shape[0]
    if B < 1:
        raise ContractError("contrastive_loss needs a batch of at least one pair")
    if f_vision_batch.shape[0] != B or f_audio_batch.shape[-1] != f_vision_batch.shape[-1]:
        raise DimensionError(f"contrastive_loss: audio {f_audio_batch.shape} and vision "
                             f"{f_vision_batch.shape} are incompatible")
    return infonce_from_similarity(similarity_matrix(f_audio_batch, f_vision_batch), temperature)


def infonce_from_similarity(s, temperature):
    s = ad.as_tensor(s)
    B = s.shape[0]
    diag = (np.arange(B), np.arange(B))
    logits = s * (1.0 / temperature)
    a2v = -ad.mean(ad.log_softmax(logits, axis=1)[diag])
    v2a = -ad.mean(ad.log_softmax(logits, axis=0)[diag])
    return (a2v + v2a) * 0.5


# ---------------------------------------------------------------- timing-aware pooling


def visual_complexity(V, norm="l2", standardize=True):
    """Per-frame change score: ||v_t - v_{t-1}|| for t >= 2 and ||v_1|| for the first frame.

    With ``standardize`` the scores are shifted and scaled to zero mean and unit
    variance over the sequence (left centered only when the variance is 0).
    Accepts (T_v, d_v) or (B, T_v, d_v); returns a numpy array.
    """
    V = np.asarray(V.data if isinstance(V, ad.Tensor) else V, dtype=np.float64)
    if V.shape[-2] < 1:
        raise ContractError("visual_complexity needs at least one frame")
    diffs = np.concatenate([V[..., :1, :], np.diff(V, axis=-2)], axis=-2)
    if norm == "l2":
        c = np.sqrt((diffs * diffs).sum(-1))
    elif norm == "l1":
        c = np.abs(diffs).sum(-1)
    else:
        raise ConfigError(f"complexity norm must be l1 or l2, got {norm!r}")
    if standardize:
        c = c - c.mean(axis=-1, keepdims=True)
        sd = c.std(axis=-1, keepdims=True)
        c = np.where(sd > 0, c / np.where(sd > 0, sd, 1.0), c)
    return c


def dynamic_window(c, w_min, w_max):
    """round(w_min + (w_max - w_min) * sigmoid(c)), rounding half away from zero."""
    if w_min > w_max:
        raise ContractError(f"dynamic_window needs w_min <= w_max, got {w_min}, {w_max}")
    c = np.asarray(c, dtype=np.float64)
    sig = ad._sigmoid_np(np.atleast_1d(c)).reshape(c.shape)
    w = ad.round_half_away(w_min + (w_max - w_min) * sig).astype(np.int64)
    return w if w.ndim else int(w)


def window_indices(center, width, n_audio):
    """1-based audio indices within floor(width/2) of ``center``, clipped to [1, n_audio]."""
    half = int(width) // 2
    lo, hi = max(1, center - half), min(n_audio, center + half)
    return np.arange(lo, hi + 1)


def attention_pool(v_t, Z, center, width, pooling="attention"):
    """Pool audio frames around ``center`` (1-based) with cosine-softmax weights.

    Returns (pooled, weights, indices) where ``indices`` are 1-based.
    """
    Z = ad.as_tensor(Z)
    if width < 1:
        raise ContractError("window width must be >= 1")
    idx = window_indices(int(center), width, Z.shape[0])
    rows = Z[idx - 1]
    if pooling == "mean":
        alpha = ad.Tensor(np.full(len(idx), 1.0 / len(idx), dtype=Z.dtype))
    else:
        alpha = ad.softmax(ad.cosine_similarity(rows, ad.as_tensor(v_t)[None, :], axis=-1), axis=0)
    pooled = ad.sum_(rows * ad.reshape(alpha, (len(idx), 1)), axis=0)
    return pooled, alpha, idx


def window_widths(V_for_complexity, cfg):
    if not cfg.dynamic_window:
        return np.full(np.asarray(V_for_complexity).shape[:-1], cfg.fixed_window, dtype=np.int64)
    c = visual_complexity(V_for_complexity, cfg.complexity_norm, cfg.complexity_standardize)
    return np.asarray(dynamic_window(c, cfg.w_min, cfg.w_max))


def pool_windows(Z, V_proj, widths, pooling="attention"):
    """Vectorized pooling for every video frame. Z (B, T', d), V_proj (B, T_v, d), widths (B, T_v).

    Returns pooled features (B, T_v, d) and the weight tensor (B, T_v, M) over
    the padded window offsets.
    """
    B, n_audio, _ = Z.shape
    n_video = V_proj.shape[1]
    widths = np.asarray(widths).reshape(B, n_video)
    half_max = int(widths.max()) // 2
    offsets = np.arange(-half_max, half_max + 1)
    centers = _centers0(n_video, n_audio)
    j = centers[None, :, None] + offsets[None, None, :]                 # (1, T_v, M)
    valid = (np.abs(offsets)[None, None, :] <= (widths // 2)[:, :, None]) & (j >= 0) & (j < n_audio)
    j = np.broadcast_to(np.clip(j, 0, n_audio - 1), valid.shape)
    b = np.broadcast_to(np.arange(B)[:, None, None], valid.shape)
    rows = Z[b, j]                                                        # (B, T_v, M, d)
    if pooling == "mean":
        w = valid / valid.sum(-1, keepdims=True)
        alpha = ad.Tensor(w.astype(Z.dtype))
    else:
        cos = ad.cosine_similarity(rows, ad.reshape(V_proj, (B, n_video, 1, V_proj.shape[-1])), axis=-1,
                                   on_zero=_ZeroNormLog())
        alpha = ad.softmax(cos + ad.Tensor(np.where(valid, 0.0, _MASKED).astype(Z.dtype)), axis=-1)
    pooled = ad.sum_(rows * ad.reshape(alpha, alpha.shape + (1,)), axis=2)
    return pooled, alpha


def tapf_loss(Z, V_proj, cfg, V_complexity=None):
    """Timing-aware distillation loss.

    Mean over video frames of ||pooled_t - v_t||_1 + lambda_sim * (1 - cos(pooled_t, v_t)).
    Window widths come from the complexity of ``V_complexity`` (defaults to
    ``V_proj``).  Accepts unbatched (T', d)/(T_v, d) or batched inputs; the
    batched loss is the mean of per-sequence losses.
    """
    Z, V_proj = ad.as_tensor(Z), ad.as_tensor(V_proj)
    single = Z.ndim == 2
    if single:
        Z = ad.reshape(Z, (1,) + Z.shape)
        V_proj = ad.reshape(V_proj, (1,) + V_proj.shape)
    if Z.shape[-1] != V_proj.shape[-1]:
        raise DimensionError(f"tapf_loss: audio dim {Z.shape[-1]} != vision dim {V_proj.shape[-1]}")
    src = V_proj.data if V_complexity is None else np.asarray(V_complexity)
    if single and src.ndim == 2:
        src = src[None]
    widths = window_widths(src, cfg)
    pooled, _ = pool_windows(Z, V_proj, widths, cfg.pooling)
    l1 = ad.sum_(ad.abs_(pooled - V_proj), axis=-1)
    cos = ad.cosine_similarity(pooled, V_proj, axis=-1, on_zero=_ZeroNormLog())
    per_frame = l1 + (1.0 - cos) * cfg.lambda_sim
    return ad.mean(per_frame)


# ---------------------------------------------------------------- wiring


class FusionHeads:
    """Audio projection (trained) and vision projection (fixed) into the shared semantic space.

    The vision side acts as the distillation teacher and is never updated,
    which rules out the trivial optimum where both heads emit the same
    constant vector.
    """

    def __init__(self, latent_dim, vision_dim, cfg, rng, dtype=np.float64):
        self.cfg = cfg
        d_s = cfg.semantic_dim
        self.params = ParamSet()
        self.params.add("fusion.audio.weight",
                        (rng.standard_normal((latent_dim, d_s)) / np.sqrt(latent_dim)).astype(dtype), "fusion_head")
        self.params.add("fusion.audio.bias", np.zeros(d_s, dtype), "fusion_head")
        q, _ = np.linalg.qr(rng.standard_normal((max(vision_dim, d_s), max(vision_dim, d_s))))
        self.params.add("fusion.vision.weight", q[:vision_dim, :d_s].astype(dtype), "fusion_head", trainable=False)

    def project_audio(self, feats):
        p = self.params
        return feats @ p["fusion.audio.weight"] + p["fusion.audio.bias"]

    def project_vision(self, V):
        return ad.as_tensor(V) @ self.params["fusion.vision.weight"]

    def loss(self, feats, V):
        """Fusion loss for audio features (B, T', d) and raw video (B, T_v, d_v); None for method=none."""
        cfg = self.cfg
        if cfg.method == "none":
            return None
        V = ad.as_tensor(V).data.astype(feats.dtype)
        fa = self.project_audio(feats)
        fv = self.project_vision(V)
        if cfg.method == "distillation":
            return distill_loss(fa, fv)
        if cfg.method == "contrastive":
            return contrastive_loss(fa, fv, cfg.temperature)
        return tapf_loss(fa, fv, cfg, V_complexity=V)


def fusion_features(location, z_e, quantized):
    """Features the fusion loss sees: the encoder output, or the first quantizer layer."""
    if location == "pre_quantization":
        return z_e
    if location == "quantization_level":
        return quantized.first_layer
    raise ConfigError(f"unknown fusion location {location!r}")
