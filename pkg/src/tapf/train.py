"""Tokenizer assembly, composite objective, AdamW, and the training loop."""

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import gradscope
from .codec import Codec, ParamSet, read_checkpoint, write_checkpoint
from .config import rng_for
from .errors import ContractError, NumericError
from .fusion import FusionHeads, fusion_features
from .quantize import (FSQConfig, RVQState, commit_loss, ema_update, fsq_quantize_result, nearest,
                       rvq_quantize)
from .spectral import multiscale_spectral_loss
from .synthav import make_batch

TERMS = ("recon", "mel", "commit", "fusion")


class Tokenizer:
    """Encoder, quantizer, decoder and fusion heads for one experiment config."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.dtype = cfg.train.dtype
        rng = rng_for(seed, "init")
        self.codec = Codec(cfg.codec, rng, self.dtype)
        self.heads = FusionHeads(cfg.codec.latent_dim, cfg.data.video_dim, cfg.fusion, rng, self.dtype)
        q = cfg.quantizer
        if q.kind == "fsq":
            self.fsq = FSQConfig(q.levels)
            self.rvq = None
        else:
            self.fsq = None
            books = [np.zeros((q.codebook_size, cfg.codec.latent_dim), self.dtype) for _ in range(q.n_q)]
            self.rvq = RVQState(books)
        self.quantizer_ready = self.rvq is None
        self.params = ParamSet()
        for ps in (self.codec.params, self.heads.params):
            self.params.tensors.update(ps.tensors)
            self.params.components.update(ps.components)

    @property
    def codebook_sizes(self):
        return [self.fsq.codebook_size] if self.fsq else self.rvq.sizes

    def quantize(self, z_e):
        if self.fsq is not None:
            return fsq_quantize_result(z_e, self.fsq)
        return rvq_quantize(z_e, self.rvq)

    def init_codebooks(self, z_e, rng):
        """Seed entries 1..K-1 of each layer with residual vectors drawn from a batch."""
        r = np.asarray(z_e, dtype=np.float64).reshape(-1, self.rvq.dim)
        books = []
        for book in self.rvq.codebooks:
            k = len(book) - 1
            pick = rng.choice(len(r), size=k, replace=len(r) < k)
            book = book.copy()
            book[1:] = r[pick]
            books.append(book.astype(self.dtype))
            r = r - book[nearest(r, book)]
        self.rvq = RVQState(books, pin_zero=self.rvq.pin_zero)
        self.quantizer_ready = True

    def tokenize(self, audio):
        """Codes (n_q, ..., T') for audio (..., T); no gradients recorded."""
        z_e = self.codec.encode(np.asarray(audio, dtype=self.dtype))
        return self.quantize(z_e).codes

    def reconstruct(self, audio):
        z_e = self.codec.encode(np.asarray(audio, dtype=self.dtype))
        return self.codec.decode(self.quantize(z_e).z_hat).data

    # -- checkpoint arrays

    def state_arrays(self):
        out = {f"param.{k}": v for k, v in self.params.state_dict().items()}
        if self.rvq is not None:
            for i in range(self.rvq.n_q):
                out[f"quantizer.codebook.{i}"] = self.rvq.codebooks[i]
                out[f"quantizer.usage.{i}"] = self.rvq.usage[i].astype(np.float64)
                out[f"quantizer.unused.{i}"] = self.rvq.unused_steps[i].astype(np.float64)
            out["quantizer.ready"] = np.array(float(self.quantizer_ready))
        return out

    def load_arrays(self, arrays):
        self.params.load_state_dict(arrays, prefix="param.")
        if self.rvq is not None:
            n_q = self.rvq.n_q
            try:
                books = [arrays[f"quantizer.codebook.{i}"].astype(self.dtype) for i in range(n_q)]
                usage = [arrays[f"quantizer.usage.{i}"].astype(np.float64) for i in range(n_q)]
                unused = [arrays[f"quantizer.unused.{i}"].astype(np.int64) for i in range(n_q)]
            except KeyError as exc:
                raise ContractError(f"checkpoint is missing quantizer tensor {exc}") from None
            self.rvq = RVQState(books, usage, unused, pin_zero=self.rvq.pin_zero)
            self.quantizer_ready = bool(arrays.get("quantizer.ready", np.array(1.0)))


# ---------------------------------------------------------------- objective


def total_loss(terms, weights):
    """Weighted sum of loss terms; ``terms`` and ``weights`` are keyed by term name.

    Missing terms count as 0.  A non-finite term raises NumericError naming it.
    """
    total = None
    for name, value in terms.items():
        if value is None:
            continue
        v = value.data if isinstance(value, ad.Tensor) else value
        if not np.all(np.isfinite(v)):
            raise NumericError(f"loss term {name!r} is not finite")
        part = ad.as_tensor(value) * weights.get(name, 0.0)
        total = part if total is None else total + part
    return total if total is not None else ad.Tensor(0.0)


def loss_weights(cfg):
    return {"recon": cfg.train.lambda_recon, "mel": cfg.train.lambda_mel,
            "commit": cfg.train.lambda_commit, "fusion": cfg.fusion.weight}


def forward_terms(model, audio, video):
    """All raw loss terms for one batch (call inside a Tape to get gradients)."""
    z_e = model.codec.encode(audio)
    q = model.quantize(z_e)
    x_hat = model.codec.decode(q.z_hat)
    terms = {
        "recon": ad.l1(x_hat, audio),
        "mel": multiscale_spectral_loss(audio, x_hat, model.cfg.spectral),
        "commit": commit_loss(z_e, q.z_hat),
        "fusion": None,
    }
    if model.cfg.fusion.method != "none":
        terms["fusion"] = model.heads.loss(fusion_features(model.cfg.fusion.location, z_e, q), video)
    return terms, q, z_e


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params, grads, moments, cfg, t):
    """One AdamW update in place. ``params``/``grads`` map names to arrays/Tensors.

    Decoupled weight decay scales each parameter by (1 - lr * wd) before the
    bias-corrected moment step.
    """
    if t < 1:
        raise ContractError("adamw_step expects t >= 1")
    lr, b1, b2 = cfg.learning_rate, cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        data = p.data if isinstance(p, ad.Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        m = moments.m.get(name)
        v = moments.v.get(name)
        if m is None:
            m, v = np.zeros_like(data), np.zeros_like(data)
        if cfg.weight_decay:
            data *= (1.0 - lr * cfg.weight_decay)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        moments.m[name], moments.v[name] = m.astype(data.dtype), v.astype(data.dtype)
    moments.t = t
    return params, moments


# ---------------------------------------------------------------- training loop


@dataclass
class StepRecord:
    step: int
    l_recon: float
    l_mel: float
    l_commit: float
    l_fusion: float
    l_total: float
    ms: float


@dataclass
class TrainResult:
    model: Tokenizer
    records: list
    trace: gradscope.GradTrace
    moments: AdamState


def synthetic_source(cfg, seed):
    """Batch at step k is a pure function of (seed, k)."""
    def source(step):
        rng = rng_for(seed, "data", step)
        seeds = rng.integers(0, 2 ** 62, size=cfg.train.batch_size)
        audio, video, _ = make_batch(seeds, cfg.data, dtype=cfg.train.dtype)
        return audio, video
    return source


def checkpoint_arrays(model, moments):
    out = model.state_arrays()
    for k in model.params.trainable():
        if k in moments.m:
            out[f"optim.m.{k}"] = moments.m[k]
            out[f"optim.v.{k}"] = moments.v[k]
    out["optim.t"] = np.array(float(moments.t))
    return out


def save_checkpoint(path, model, moments):
    write_checkpoint(path, checkpoint_arrays(model, moments))


def load_checkpoint(path, cfg, seed=0):
    """Rebuild (model, moments) from a checkpoint written by :func:`save_checkpoint`."""
    arrays = read_checkpoint(path)
    model = Tokenizer(cfg, seed)
    model.load_arrays(arrays)
    moments = AdamState(t=int(arrays.get("optim.t", np.array(0.0))))
    for k in model.params.trainable():
        if f"optim.m.{k}" in arrays:
            moments.m[k] = arrays[f"optim.m.{k}"].astype(model.dtype)
            moments.v[k] = arrays[f"optim.v.{k}"].astype(model.dtype)
    return model, moments


def train_step(model, moments, audio, video, step, seed):
    """Forward, backward, optimizer and EMA update for 1-based ``step``.

    Returns the raw loss values, the total, and the tape (gradients are left
    on the parameters for inspection).
    """
    cfg = model.cfg
    if not model.quantizer_ready:
        with ad.Tape():
            z0 = model.codec.encode(audio)
        model.init_codebooks(z0.data, rng_for(seed, "codebook-init"))
    model.params.zero_grad()
    with ad.Tape() as tape:
        terms, q, _ = forward_terms(model, audio, video)
        total = total_loss(terms, loss_weights(cfg))
    if not np.isfinite(total.data):
        raise NumericError("total loss is not finite")
    tape.backward(total)
    raw = {k: (float(v.data) if v is not None else 0.0) for k, v in terms.items()}
    trainable = model.params.trainable()
    adamw_step(trainable, {k: t.grad for k, t in trainable.items()}, moments, cfg.train, step)
    if model.rvq is not None:
        assignments = list(zip(q.codes.reshape(q.codes.shape[0], -1), q.inputs))
        model.rvq = ema_update(model.rvq, assignments, cfg.quantizer.ema_decay,
                               rng=rng_for(seed, "dead-code", step), dead_after=cfg.quantizer.dead_after)
    return raw, float(total.data), tape


def train_run(cfg, seed=None, source=None, out_dir=None, init=None, start_step=0, log=None):
    """Train for ``cfg.train.steps`` steps.

    With ``out_dir`` the run writes ``checkpoint.tapf``, ``steps.jsonl``,
    ``grad_trace.csv`` and ``grad_summary.csv`` there.  ``init`` resumes from a
    ``(model, moments)`` pair, continuing at ``start_step + 1``.
    """
    seed = cfg.train.seed if seed is None else seed
    source = source or synthetic_source(cfg, seed)
    if init is None:
        model, moments = Tokenizer(cfg, seed), AdamState()
    else:
        model, moments = init
    records, trace = [], gradscope.GradTrace()
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "steps.jsonl"), "w")
    ckpt = os.path.join(out_dir, "checkpoint.tapf") if out_dir else None
    try:
        for step in range(start_step + 1, start_step + cfg.train.steps + 1):
            audio, video = source(step)
            t0 = time.perf_counter()
            try:
                raw, total, _ = train_step(model, moments, audio, video, step, seed)
            except NumericError:
                if ckpt:
                    save_checkpoint(ckpt, model, moments)
                raise
            if step == start_step + 1 or step % cfg.train.grad_every == 0:
                trace.add(gradscope.capture(model.params.tensors, model.params.components, step=step))
            rec = StepRecord(step, raw["recon"], raw["mel"], raw["commit"], raw["fusion"], total,
                             round((time.perf_counter() - t0) * 1000.0, 3))
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(asdict(rec)) + "\n")
            if log and (step % max(1, cfg.train.steps // 10) == 0):
                log(rec)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(ckpt, model, moments)
        trace.write_csv(os.path.join(out_dir, "grad_trace.csv"))
        trace.write_summary_csv(os.path.join(out_dir, "grad_summary.csv"))
    return TrainResult(model, records, trace, moments)


def read_step_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def recompute_total(rec, cfg):
    w = loss_weights(cfg)
    return (w["recon"] * rec["l_recon"] + w["mel"] * rec["l_mel"]
            + w["commit"] * rec["l_commit"] + w["fusion"] * rec["l_fusion"])

