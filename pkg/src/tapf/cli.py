"""``tapf`` command line: train, reconstruct, analyze-grads, probe, ablate, synth, report.

Every command writes a ``manifest.json`` next to its outputs holding the
config snapshot, the seed, a content hash of the installed package, and the
output file names.
"""

import argparse
import csv
import datetime
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import experiment, probe, report
from .codec import pad_length
from .errors import ConfigError, ContractError, TapfError
from .gradscope import GradTrace
from .spectral import mel_filterbank, metrics_report, save_filterbank_csv
from .synthav import pair_from_config, write_features, write_raw_audio, read_raw_audio
from .train import load_checkpoint, read_step_log, train_run

log = logging.getLogger("tapf")


def content_hash():
    """git-style tree hash over the package sources (sha1 of "blob <n>\\0<bytes>" per file)."""
    root = Path(__file__).resolve().parent
    tree = hashlib.sha1()
    for path in sorted(root.rglob("*.py")):
        data = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        tree.update(f"{path.relative_to(root).as_posix()} {blob}\n".encode())
    return tree.hexdigest()


def write_manifest(out_dir, command, cfg, seed, outputs):
    """One manifest per directory.  A manifest left by a different command is kept under "previous"."""
    path = os.path.join(out_dir, "manifest.json")
    previous = None
    if os.path.exists(path):
        try:
            with open(path) as fh:
                old = json.load(fh)
        except (OSError, ValueError):
            old = None
        if isinstance(old, dict):
            previous = old if old.get("command") != command else old.get("previous")
    manifest = {
        "command": command,
        "seed": seed,
        "content_hash": content_hash(),
        "config": cfg.as_dict() if cfg is not None else None,
        "outputs": sorted(outputs),
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    if previous is not None:
        manifest["previous"] = previous
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=list)


def _load_config(path, overrides=()):
    cfg = cfgmod.load(path) if path else cfgmod.ExperimentConfig()
    if overrides:
        kv = {}
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            kv[key.strip()] = cfgmod._literal(raw, key)
        try:
            cfg = cfg.replace(**kv)
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from None
    return cfg


def _config_for_checkpoint(ckpt, explicit):
    path = explicit or os.path.join(os.path.dirname(os.path.abspath(ckpt)), "config.ini")
    if not os.path.exists(path):
        raise ConfigError(f"no config for checkpoint: {path} not found (pass --config)")
    return cfgmod.load(path)


# ---------------------------------------------------------------- commands


def cmd_train(args):
    cfg = _load_config(args.config, args.set)
    seed = cfg.train.seed if args.seed is None else args.seed
    out = args.out
    os.makedirs(out, exist_ok=True)
    cfgmod.save(cfg, os.path.join(out, "config.ini"))
    fb_name = "mel_filterbank.csv"
    n_fft, n_mels = cfg.spectral.largest
    save_filterbank_csv(os.path.join(out, fb_name), mel_filterbank(n_mels, n_fft, float(cfg.spectral.sample_rate_hz)))
    res = train_run(cfg, seed=seed, out_dir=out, log=lambda r: log.info(
        "step %d  total %.5g  recon %.5g  fusion %.5g", r.step, r.l_total, r.l_recon, r.l_fusion))
    outputs = ["config.ini", "checkpoint.tapf", "steps.jsonl", "grad_trace.csv", "grad_summary.csv", fb_name]
    if args.report and res.records:
        report.plot_losses(read_step_log(os.path.join(out, "steps.jsonl")), os.path.join(out, "loss_curve.png"))
        report.plot_grad_variance(res.trace, os.path.join(out, "grad_variance.png"))
        outputs += ["loss_curve.png", "grad_variance.png"]
    write_manifest(out, "train", cfg, seed, outputs)
    return 0


def cmd_reconstruct(args):
    cfg = _config_for_checkpoint(args.checkpoint, args.config)
    model, _ = load_checkpoint(args.checkpoint, cfg)
    audio, sr = read_raw_audio(args.input)
    n = len(audio)
    padded = pad_length(n, cfg.codec.hop)
    if padded != n:
        log.warning("input length %d is not divisible by %d; zero-padding to %d", n, cfg.codec.hop, padded)
        audio = np.concatenate([audio, np.zeros(padded - n)])
    recon = np.asarray(model.reconstruct(audio), dtype=np.float64)[:n]
    write_raw_audio(args.out, recon, sr)
    metrics = metrics_report(audio[:n], recon, cfg.spectral)
    with open(args.metrics, "w") as fh:
        json.dump(metrics, fh, indent=2)
    outputs = [args.out, args.out + ".json", args.metrics]
    if args.codes:
        codes = np.asarray(model.tokenize(audio))
        with open(args.codes, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"layer{i}" for i in range(codes.shape[0])])
            w.writerows(codes.T.tolist())
        outputs.append(args.codes)
    for d in sorted({os.path.dirname(os.path.abspath(p)) for p in outputs}):
        write_manifest(d, "reconstruct", cfg, None, [os.path.basename(p) for p in outputs
                                                     if os.path.dirname(os.path.abspath(p)) == d])
    return 0


def cmd_analyze_grads(args):
    path = os.path.join(args.run, "grad_trace.csv")
    if not os.path.exists(path):
        raise ContractError(f"no gradient trace in {args.run} (expected {path})")
    if not 0 < args.tail <= 1:
        raise ContractError(f"--tail must lie in (0, 1], got {args.tail}")
    trace = GradTrace.read_csv(path)
    variances = trace.variances()
    slopes = trace.slopes(args.tail)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "component", "variance"])
        for (s, c), v in variances.items():
            w.writerow([s, c, repr(v)])
    slope_path = _sibling(args.out, "_slopes.csv")
    with open(slope_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "tail_fraction", "slope"])
        for c, v in slopes.items():
            w.writerow([c, args.tail, repr(v)])
    outputs = [args.out, slope_path]
    if args.plot:
        report.plot_grad_variance(trace, args.plot, tail_fraction=args.tail)
        outputs.append(args.plot)
    print(json.dumps({"tail": args.tail, "slopes": slopes}, indent=2))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    write_manifest(out_dir, "analyze-grads", None, None, [os.path.basename(p) for p in outputs])
    return 0


def cmd_probe(args):
    cfg = _config_for_checkpoint(args.checkpoint, args.config)
    model, _ = load_checkpoint(args.checkpoint, cfg)
    data = probe.build_dataset(model, cfg)
    acc = probe.probe_train_eval(model, cfg, args.seed, dataset=data)
    probe.write_result(args.out, args.checkpoint, args.seed, acc, data.n_test)
    print(f"accuracy {acc:.4f} on {data.n_test} test clips")
    write_manifest(os.path.dirname(os.path.abspath(args.out)), "probe", cfg, args.seed, [os.path.basename(args.out)])
    return 0


def cmd_ablate(args):
    if args.axis not in experiment.AXES:
        raise ConfigError(f"unknown ablation axis {args.axis!r}; valid axes: {', '.join(experiment.AXES)}")
    cfg = _load_config(args.config, args.set)
    if cfg.fusion.weight == 0:
        log.warning("fusion.weight is 0, so every setting trains the same audio-only model; "
                    "pass e.g. --set fusion.weight=120")
    seeds = [args.seed + i for i in range(args.seeds)]
    os.makedirs(args.out, exist_ok=True)
    rows, results = experiment.run_ablation(args.axis, cfg, seeds, out_dir=args.out)
    settings = dict(experiment.ablation_settings(args.axis, cfg))
    run_dirs = []
    for r in results:
        sub = experiment.run_dir_name(r["setting"], r["seed"])
        write_manifest(os.path.join(args.out, sub), "ablate-run", settings[r["setting"]], r["seed"],
                       ["config.ini", "checkpoint.tapf", "steps.jsonl", "grad_trace.csv", "grad_summary.csv"])
        run_dirs.append(sub)
    cols = ["axis", "setting", "n_seeds", "accuracy", "mel_error", "stft_distance", "si_sdr_db", "l1"]
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    report.plot_ablation(rows, os.path.join(args.out, "ablation.png"))
    for r in rows:
        print(f"{r['setting']:>12}  accuracy {r['accuracy']:.3f}  mel_error {r['mel_error']:.4f}  "
              f"si_sdr {r['si_sdr_db']:.2f} dB")
    write_manifest(args.out, f"ablate --axis {args.axis}", cfg, args.seed, ["summary.csv", "ablation.png"] + run_dirs)
    return 0


def cmd_synth(args):
    cfg = _load_config(args.config, args.set)
    os.makedirs(args.out, exist_ok=True)
    pair = pair_from_config(args.seed, cfg.data)
    write_raw_audio(os.path.join(args.out, "audio.f32"), pair.audio, cfg.data.sample_rate_hz)
    write_features(os.path.join(args.out, "video.avf"), pair.video.astype(np.float32))
    with open(os.path.join(args.out, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["onset_sample", "class"])
        w.writerows(pair.labels.tolist())
    write_manifest(args.out, "synth", cfg, args.seed, ["audio.f32", "audio.f32.json", "video.avf", "labels.csv"])
    return 0


def cmd_report(args):
    for name in ("steps.jsonl", "grad_trace.csv"):
        if not os.path.exists(os.path.join(args.run, name)):
            raise ContractError(f"{args.run} has no {name}; is it a train output directory?")
    out = args.out or os.path.join(args.run, "report")
    os.makedirs(out, exist_ok=True)
    report.plot_losses(read_step_log(os.path.join(args.run, "steps.jsonl")), os.path.join(out, "loss_curve.png"))
    report.plot_grad_variance(GradTrace.read_csv(os.path.join(args.run, "grad_trace.csv")),
                              os.path.join(out, "grad_variance.png"), tail_fraction=args.tail)
    write_manifest(out, "report", None, None, ["loss_curve.png", "grad_variance.png"])
    return 0


def _sibling(path, suffix):
    root, _ = os.path.splitext(path)
    return root + suffix


# ---------------------------------------------------------------- entry point


def build_parser():
    p = argparse.ArgumentParser(prog="tapf", description="Audio tokenizer fusion experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI config file (defaults built in)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. --set fusion.method=tapf")

    sp = sub.add_parser("train", help="train a tokenizer")
    with_config(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", action="store_true", help="also render loss and gradient figures")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("reconstruct", help="encode/decode a raw audio file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config", help="defaults to config.ini next to the checkpoint")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--codes", help="also write the codes, one CSV row per frame")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("analyze-grads", help="variance of gradient norms and tail slopes")
    sp.add_argument("--run", required=True)
    sp.add_argument("--tail", type=float, default=0.3)
    sp.add_argument("--out", required=True)
    sp.add_argument("--plot", help="PNG path for the variance figure")
    sp.set_defaults(func=cmd_analyze_grads)

    sp = sub.add_parser("probe", help="probe accuracy of a frozen tokenizer")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("ablate", help="sweep one fusion design axis")
    with_config(sp)
    sp.add_argument("--axis", required=True, help=f"one of {', '.join(experiment.AXES)}")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds per setting")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("synth", help="write one synthetic audio/feature pair")
    with_config(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("report", help="render figures for a finished run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--tail", type=float, default=0.3)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"tapf: config error: {exc}", file=sys.stderr)
        return 2
    except (TapfError, OSError) as exc:
        print(f"tapf: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
