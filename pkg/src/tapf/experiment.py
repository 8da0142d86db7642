"""Train-then-evaluate runs shared by the CLI sweeps and the acceptance checks."""

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import probe
from .config import rng_for, save
from .errors import ConfigError
from .spectral import metrics_report
from .synthav import make_batch
from .train import train_run


def eval_batch(cfg, seed, n_clips=8):
    seeds = rng_for(seed, "eval-clips").integers(0, 2 ** 62, size=n_clips)
    audio, _, _ = make_batch(seeds, cfg.data, dtype=np.float64)
    return audio


def reconstruction_metrics(model, cfg, seed=0, n_clips=8):
    """Mean of the per-clip metrics over held-out clips, plus their waveform L1."""
    audio = eval_batch(cfg, seed, n_clips)
    recon = np.asarray(model.reconstruct(audio), dtype=np.float64)
    rows = [metrics_report(a, r, cfg.spectral) for a, r in zip(audio, recon)]
    out = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    out["l1"] = float(np.mean(np.abs(recon - audio)))
    return out


def run_setting(cfg, seed, out_dir=None, with_probe=True):
    """Train one tokenizer, then score it. Returns a flat dict of results."""
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save(cfg, os.path.join(out_dir, "config.ini"))
    res = train_run(cfg, seed=seed, out_dir=out_dir)
    row = {"seed": seed}
    if with_probe:
        data = probe.build_dataset(res.model, cfg)
        row["accuracy"] = probe.probe_train_eval(res.model, cfg, seed, dataset=data)
        row["n_test"] = data.n_test
    row.update(reconstruction_metrics(res.model, cfg, seed))
    row["result"] = res
    return row


# ---------------------------------------------------------------- ablations

AXES = ("window", "complexity", "pooling", "dynamic")


def ablation_settings(axis, cfg):
    """[(label, config)] for one ablation axis; every setting uses the tapf method."""
    cfg = cfg.replace(**{"fusion.method": "tapf"})
    if axis == "window":
        return [(f"w_max={w}", cfg.replace(**{"fusion.w_max": w})) for w in (5, 7, 9)]
    if axis == "complexity":
        return [(n, cfg.replace(**{"fusion.complexity_norm": n})) for n in ("l1", "l2")]
    if axis == "pooling":
        return [(p, cfg.replace(**{"fusion.pooling": p})) for p in ("mean", "attention")]
    if axis == "dynamic":
        return [("fixed", cfg.replace(**{"fusion.dynamic_window": False})),
                ("dynamic", cfg.replace(**{"fusion.dynamic_window": True}))]
    raise ConfigError(f"unknown ablation axis {axis!r}; valid axes: {', '.join(AXES)}")


def _job(args):
    label, cfg, seed, out_dir = args
    row = run_setting(cfg, seed, out_dir)
    row.pop("result")
    row["setting"] = label
    return row


def worker_count():
    raw = os.environ.get("TAPF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TAPF_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_dir_name(label, seed):
    return f"{label}_seed{seed}"


def run_ablation(axis, cfg, seeds, out_dir=None, workers=None):
    """Train and probe every (setting, seed) pair; one summary row per setting."""
    settings = ablation_settings(axis, cfg)
    jobs = []
    for label, c in settings:
        for s in seeds:
            sub = os.path.join(out_dir, run_dir_name(label, s)) if out_dir else None
            jobs.append((label, c, s, sub))
    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    rows = []
    for label, _ in settings:
        mine = [r for r in results if r["setting"] == label]
        row = {"axis": axis, "setting": label, "n_seeds": len(mine)}
        for key in ("accuracy", "mel_error", "stft_distance", "si_sdr_db", "l1"):
            row[key] = float(np.mean([r[key] for r in mine]))
        rows.append(row)
    return rows, results
