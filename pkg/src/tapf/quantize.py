"""Residual vector quantization and finite scalar quantization.

Both quantizers pass gradients straight through to their input.  RVQ
codebooks are learned by exponential moving averages of the residuals
assigned to each entry, never by gradient descent.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError


@dataclass
class RVQState:
    """Codebooks plus the bookkeeping that the EMA update needs.

    ``pin_zero`` keeps entry 0 of every book fixed at the zero vector, which
    makes the residual norm non-increasing across layers.
    """

    codebooks: list
    usage: list = None
    unused_steps: list = None
    pin_zero: bool = True

    def __post_init__(self):
        if len(self.codebooks) < 1:
            raise ConfigError("RVQ needs at least one layer")
        self.codebooks = [np.asarray(c) for c in self.codebooks]
        for i, c in enumerate(self.codebooks):
            if c.ndim != 2 or c.shape[0] < 1:
                raise ConfigError(f"codebook {i} must be a non-empty K x d array, got shape {c.shape}")
            if not np.all(np.isfinite(c)):
                raise ConfigError(f"codebook {i} has non-finite entries")
        if self.usage is None:
            self.usage = [np.zeros(len(c)) for c in self.codebooks]
        if self.unused_steps is None:
            self.unused_steps = [np.zeros(len(c), dtype=np.int64) for c in self.codebooks]

    @property
    def n_q(self):
        return len(self.codebooks)

    @property
    def dim(self):
        return self.codebooks[0].shape[1]

    @property
    def sizes(self):
        return [len(c) for c in self.codebooks]


def init_rvq(n_q, codebook_size, dim, rng, scale=1.0, dtype=np.float64, pin_zero=True):
    books = []
    for _ in range(n_q):
        c = (rng.standard_normal((codebook_size, dim)) * scale).astype(dtype)
        if pin_zero:
            c[0] = 0.0
        books.append(c)
        scale *= 0.5
    return RVQState(books, pin_zero=pin_zero)


@dataclass
class QuantizeResult:
    codes: np.ndarray            # (n_q, ...) integer indices
    z_hat: ad.Tensor             # straight-through quantized latent
    layers: list                 # per-layer quantized values, numpy
    residual: np.ndarray         # r_{n_q}
    first_layer: ad.Tensor       # layer-1 quantized values with straight-through gradient
    inputs: list = field(default_factory=list)  # residual entering each layer, for EMA


def nearest(r, book):
    """Index of the closest codebook row (squared Euclidean) for each row of r; ties go low."""
    d = (r * r).sum(-1, keepdims=True) - 2.0 * r @ book.T + (book * book).sum(-1)[None, :]
    return np.argmin(d, axis=-1)


def rvq_quantize(z_e, state):
    """Quantize ``z_e`` (..., d) layer by layer; gradients pass straight through."""
    z_e = ad.as_tensor(z_e)
    if z_e.shape[-1] != state.dim:
        raise DimensionError(f"rvq_quantize: latent dim {z_e.shape[-1]} != codebook dim {state.dim}")
    lead = z_e.shape[:-1]
    r = z_e.data.reshape(-1, state.dim)
    codes, layers, inputs = [], [], []
    for book in state.codebooks:
        idx = nearest(r, book)
        q = book[idx].astype(r.dtype)
        inputs.append(r)
        codes.append(idx.reshape(lead))
        layers.append(q.reshape(lead + (state.dim,)))
        r = r - q
    z_hat = layers[0]
    for q in layers[1:]:
        z_hat = z_hat + q
    return QuantizeResult(
        codes=np.stack(codes),
        z_hat=ad.straight_through(z_e, z_hat),
        layers=layers,
        residual=r.reshape(z_e.shape),
        first_layer=ad.straight_through(z_e, layers[0]),
        inputs=inputs,
    )


def rvq_decode(codes, state):
    """Sum of the selected codebook rows; ``codes`` is (n_q, ...)."""
    out = state.codebooks[0][codes[0]]
    for book, c in zip(state.codebooks[1:], codes[1:]):
        out = out + book[c]
    return out


def ema_update(state, assignments, decay, rng=None, dead_after=None):
    """Return a new state whose used entries moved toward their assigned means.

    ``assignments`` holds one ``(codes, vectors)`` pair per layer.  An entry e
    with assigned mean m becomes ``decay * e + (1 - decay) * m``; unused
    entries keep their value.  ``usage`` tracks an EMA of assignment counts.
    With ``dead_after`` and ``rng`` given, entries unused for that many
    consecutive updates are re-seeded to a random vector from this batch.
    """
    if not 0.0 <= decay < 1.0:
        raise ContractError(f"decay must lie in [0, 1), got {decay}")
    books, usage, unused = [], [], []
    for i, book in enumerate(state.codebooks):
        book = book.copy()
        u = state.usage[i].copy()
        idle = state.unused_steps[i].copy()
        if i < len(assignments) and assignments[i] is not None and len(assignments[i][0]):
            codes, vecs = assignments[i]
            codes = np.asarray(codes).reshape(-1)
            vecs = np.asarray(vecs).reshape(len(codes), -1)
            counts = np.bincount(codes, minlength=len(book)).astype(np.float64)
            onehot = np.zeros((len(codes), len(book)))
            onehot[np.arange(len(codes)), codes] = 1.0
            sums = onehot.T @ vecs.astype(np.float64)   # np.add.at is far slower here
            used = counts > 0
            if state.pin_zero:
                used[0] = False
            means = sums[used] / counts[used][:, None]
            book[used] = (decay * book[used] + (1.0 - decay) * means).astype(book.dtype)
            u = decay * u + (1.0 - decay) * counts
            idle = np.where(counts > 0, 0, idle + 1)
            if dead_after is not None and rng is not None:
                dead = np.flatnonzero(idle >= dead_after)
                if state.pin_zero:
                    dead = dead[dead != 0]
                if len(dead):
                    pick = rng.integers(0, len(vecs), size=len(dead))
                    book[dead] = vecs[pick].astype(book.dtype)
                    idle[dead] = 0
        books.append(book)
        usage.append(u)
        unused.append(idle)
    return replace(state, codebooks=books, usage=usage, unused_steps=unused)


def commit_loss(z_e, z_hat):
    """Mean squared distance from ``z_e`` to the stop-gradient of ``z_hat``."""
    z_e = ad.as_tensor(z_e)
    target = z_hat.data if isinstance(z_hat, ad.Tensor) else np.asarray(z_hat)
    if z_e.shape != target.shape:
        raise DimensionError(f"commit_loss: shapes {z_e.shape} and {target.shape} differ")
    return ad.mean(ad.square(z_e - ad.Tensor(target.astype(z_e.dtype))))


# ---------------------------------------------------------------- FSQ


@dataclass(frozen=True)
class FSQConfig:
    levels: tuple = (8, 5, 5, 5)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))
        bad = [v for v in self.levels if v < 2]
        if bad or not self.levels:
            raise ConfigError(f"FSQ levels must all be >= 2, got {list(self.levels)}")

    @property
    def codebook_size(self):
        return int(np.prod(self.levels))

    @property
    def dim(self):
        return len(self.levels)


FSQ_EVEN_EPS = 1e-3


def _fsq_constants(levels, dtype):
    L = np.asarray(levels, dtype=np.float64)
    even = (np.asarray(levels) % 2 == 0)
    # Even level counts use a half-step offset so that all L values are reachable;
    # their half-range is widened slightly so the shift atanh(offset / h) stays finite (L = 2).
    h = ((L - 1) / 2 * np.where(even, 1.0 + FSQ_EVEN_EPS, 1.0)).astype(dtype)
    offset = np.where(even, 0.5, 0.0).astype(dtype)
    shift = np.arctanh(offset / h).astype(dtype)
    half_width = (np.asarray(levels) // 2).astype(dtype)
    return h, offset, shift, half_width


def fsq_quantize(z, cfg):
    """Bounded per-dimension rounding. Returns (codes, z_hat).

    For odd L the quantized value is round(h * tanh(z)) / h with h = (L-1)/2.
    Even L shifts the grid by half a step, giving levels -L/2 .. L/2-1 scaled
    by 1/(L/2).
    ``codes`` is the mixed-radix composite index (first dimension least
    significant).
    """
    z = ad.as_tensor(z)
    if z.shape[-1] != cfg.dim:
        raise DimensionError(f"fsq_quantize: latent dim {z.shape[-1]} != len(levels) {cfg.dim}")
    h, offset, shift, hw = _fsq_constants(cfg.levels, z.dtype)
    bounded = ad.tanh(z + shift) * h - offset
    rounded = ad.round_ste(bounded)
    z_hat = rounded / hw
    per_dim = (ad.round_half_away(bounded.data) + hw).astype(np.int64)
    return fsq_compose(per_dim, cfg.levels), z_hat


def fsq_compose(per_dim, levels):
    radix = np.cumprod((1,) + tuple(levels[:-1])).astype(np.int64)
    return (per_dim * radix).sum(-1)


def fsq_split(codes, levels):
    codes = np.asarray(codes, dtype=np.int64)
    parts = []
    for L in levels:
        parts.append(codes % L)
        codes = codes // L
    return np.stack(parts, axis=-1)


def fsq_decode(codes, cfg, dtype=np.float64):
    _, _, _, hw = _fsq_constants(cfg.levels, dtype)
    per_dim = fsq_split(codes, cfg.levels).astype(dtype)
    return (per_dim - hw) / hw


def fsq_quantize_result(z, cfg):
    """FSQ wrapped in the same result shape as RVQ (a single layer)."""
    z = ad.as_tensor(z)
    codes, z_hat = fsq_quantize(z, cfg)
    return QuantizeResult(
        codes=codes[None],
        z_hat=z_hat,
        layers=[z_hat.data],
        residual=z.data - z_hat.data,
        first_layer=z_hat,
    )
