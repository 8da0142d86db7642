"""Frozen-tokenizer probe: learn code embeddings + a small classifier on top.

Only the probe's own tensors are trained.  The tokenizer is used through
``tokenize`` (no tape), so its parameters cannot move.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import TrainConfig, rng_for
from .errors import ContractError
from .synthav import make_batch
from .train import AdamState, adamw_step


@dataclass
class ProbeState:
    tables: list          # one (K_i, e_dim) table per quantizer level
    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor
    head_w: ad.Tensor
    head_b: ad.Tensor

    def __post_init__(self):
        dims = {t.shape[1] for t in self.tables}
        if len(dims) != 1:
            raise ContractError(f"embedding tables disagree on e_dim: {sorted(dims)}")

    @property
    def e_dim(self):
        return self.tables[0].shape[1]

    @property
    def sizes(self):
        return [t.shape[0] for t in self.tables]

    def named(self):
        out = {f"embed.{i}": t for i, t in enumerate(self.tables)}
        out.update(w1=self.w1, b1=self.b1, w2=self.w2, b2=self.b2, head_w=self.head_w, head_b=self.head_b)
        return out


def init_probe(sizes, e_dim, n_classes, rng):
    def dense(n_in, n_out):
        w = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
        return ad.Tensor(w, requires_grad=True), ad.Tensor(np.zeros(n_out), requires_grad=True)

    tables = [ad.Tensor(rng.standard_normal((k, e_dim)) * 0.1, requires_grad=True) for k in sizes]
    w1, b1 = dense(len(sizes) * e_dim, e_dim)
    w2, b2 = dense(e_dim, e_dim)
    hw, hb = dense(e_dim, n_classes)
    return ProbeState(tables, w1, b1, w2, b2, hw, hb)


def embed_codes(state, codes):
    """Per-level table lookup, concatenated on the feature axis.

    codes: (n_q, ..., T') integers -> (..., T', n_q * e_dim).
    """
    codes = np.asarray(codes)
    if codes.shape[0] != len(state.tables):
        raise ContractError(f"got codes for {codes.shape[0]} levels, probe has {len(state.tables)} tables")
    parts = []
    for level, (table, c) in enumerate(zip(state.tables, codes)):
        bad = (c < 0) | (c >= table.shape[0])
        if np.any(bad):
            value = int(c[bad].flat[0])
            raise IndexError(f"code {value} out of range for level {level} (size {table.shape[0]})")
        parts.append(ad.gather(table, c.astype(np.int64), axis=0))
    return ad.concat(parts, axis=-1)


def probe_logits(state, codes):
    e = embed_codes(state, codes)
    h = ad.tanh(e @ state.w1 + state.b1)
    h = ad.tanh(h @ state.w2 + state.b2)
    pooled = ad.mean(h, axis=-2)
    return pooled @ state.head_w + state.head_b


def cross_entropy(logits, labels):
    logp = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.sum_(logp * ad.Tensor(onehot), axis=-1)
    return -ad.mean(picked)


def predict(state, codes):
    return np.argmax(probe_logits(state, codes).data, axis=-1)


def fit_probe(codes_train, y_train, codes_test, y_test, sizes, n_classes, cfg, seed):
    """Train a fresh probe on fixed codes and return (state, test accuracy).

    codes_* are (n_q, N, T') arrays.
    """
    y_train = np.asarray(y_train)
    missing = sorted(set(range(n_classes)) - set(y_train.tolist()))
    if missing:
        raise ContractError(f"classes {missing} have no training examples")
    rng = rng_for(seed, "probe")
    state = init_probe(sizes, cfg.e_dim, n_classes, rng)
    params = state.named()
    opt = TrainConfig(learning_rate=cfg.learning_rate, weight_decay=0.0)
    moments = AdamState()
    n = len(y_train)
    bs = min(cfg.batch_size, n)
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(n, size=bs, replace=False)
        for p in params.values():
            p.grad = None
        with ad.Tape() as tape:
            loss = cross_entropy(probe_logits(state, codes_train[:, idx]), y_train[idx])
        tape.backward(loss)
        adamw_step(params, {k: p.grad for k, p in params.items()}, moments, opt, step)
    acc = float(np.mean(predict(state, codes_test) == np.asarray(y_test)))
    return state, acc


@dataclass
class ProbeDataset:
    codes_train: np.ndarray
    y_train: np.ndarray
    codes_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_test(self):
        return len(self.y_test)


def build_dataset(model, cfg, dataset_seed=None, chunk=64):
    """Tokenize a fresh synthetic set and split it into train/test by the dataset seed."""
    pc = cfg.probe
    dataset_seed = pc.dataset_seed if dataset_seed is None else dataset_seed
    n = pc.n_train + pc.n_test
    seeds = rng_for(dataset_seed, "probe-data").integers(0, 2 ** 62, size=n)
    codes, labels = [], []
    for i in range(0, n, chunk):
        audio, _, y = make_batch(seeds[i:i + chunk], cfg.data, dtype=model.dtype)
        codes.append(np.asarray(model.tokenize(audio)))
        labels.append(y)
    codes = np.concatenate(codes, axis=1)
    labels = np.concatenate(labels)
    order = rng_for(dataset_seed, "probe-split").permutation(n)
    tr, te = order[:pc.n_train], order[pc.n_train:]
    return ProbeDataset(codes[:, tr], labels[tr], codes[:, te], labels[te])


def probe_train_eval(model, cfg, seed, dataset=None):
    """Test accuracy of a probe trained on a frozen tokenizer's codes."""
    data = dataset if dataset is not None else build_dataset(model, cfg)
    _, acc = fit_probe(data.codes_train, data.y_train, data.codes_test, data.y_test,
                       model.codebook_sizes, cfg.data.n_classes, cfg.probe, seed)
    return acc


def write_result(path, checkpoint, seed, accuracy, n_test):
    with open(path, "w") as fh:
        json.dump({"checkpoint": str(checkpoint), "seed": int(seed), "accuracy": float(accuracy),
                   "n_test": int(n_test)}, fh, indent=2)
