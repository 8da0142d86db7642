import json

import numpy as np
import pytest

from conftest import tiny_config
from tapf import autodiff as ad
from tapf.codec import read_checkpoint
from tapf.config import TrainConfig
from tapf.errors import ConfigError, ContractError, NumericError
from tapf.quantize import commit_loss
from tapf.train import (AdamState, Tokenizer, adamw_step, checkpoint_arrays, forward_terms, load_checkpoint,
                        loss_weights, read_step_log, recompute_total, synthetic_source, total_loss,
                        train_run, train_step)

LOSS_WEIGHTS = {"recon": 500.0, "mel": 1.0, "commit": 10.0, "fusion": 1.0}


def test_total_loss_example():
    terms = {"recon": 0.1, "mel": 0.2, "commit": 0.05, "fusion": 0.3}
    assert total_loss(terms, LOSS_WEIGHTS).item() == pytest.approx(51.0, abs=1e-12)


def test_fusion_weight_only_scales_fusion_term():
    terms = {"recon": 0.1, "mel": 0.2, "commit": 0.05, "fusion": 0.3}
    hi = total_loss(terms, dict(LOSS_WEIGHTS, fusion=120.0)).item()
    assert hi - total_loss(terms, LOSS_WEIGHTS).item() == pytest.approx(119 * 0.3, abs=1e-12)
    base = total_loss(dict(terms, fusion=None), LOSS_WEIGHTS).item()
    assert total_loss(terms, dict(LOSS_WEIGHTS, fusion=0.0)).item() == base


def test_non_finite_term_is_named():
    with pytest.raises(NumericError, match="commit"):
        total_loss({"recon": 0.1, "commit": float("nan")}, LOSS_WEIGHTS)


def _adam(lr=0.1, wd=0.0):
    return TrainConfig(learning_rate=lr, beta1=0.9, beta2=0.99, weight_decay=wd)


def test_adamw_first_step():
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([1.0])}, AdamState(), _adam(), 1)
    assert p["w"][0] == pytest.approx(0.9, abs=1e-6)


def test_adamw_zero_grad_no_decay_is_identity():
    w = np.random.default_rng(0).standard_normal(5)
    p = {"w": w.copy()}
    adamw_step(p, {"w": np.zeros(5)}, AdamState(), _adam(), 1)
    assert np.array_equal(p["w"], w)


def test_adamw_decoupled_decay():
    p = {"w": np.array([2.0, -3.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), _adam(wd=0.1), 1)
    np.testing.assert_allclose(p["w"], [2.0 * 0.99, -3.0 * 0.99], rtol=1e-15)
    with pytest.raises(ContractError):
        adamw_step(p, {}, AdamState(), _adam(), 0)


def test_adamw_matches_hand_execution_over_steps():
    cfg = _adam(lr=0.01, wd=0.05)
    p = {"w": np.array([0.5])}
    m = v = 0.0
    w = 0.5
    moments = AdamState()
    for t, g in enumerate([0.3, -1.2, 0.7, 0.0], start=1):
        adamw_step(p, {"w": np.array([g])}, moments, cfg, t)
        w *= 1 - 0.01 * 0.05
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        w -= 0.01 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.99 ** t)) ** 0.5 + 1e-8)
        assert p["w"][0] == pytest.approx(w, rel=1e-14)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(precision="f16")


# -- runs


def test_zero_steps_checkpoint_equals_init(tmp_path):
    cfg = tiny_config(**{"train.steps": 0})
    train_run(cfg, seed=3, out_dir=tmp_path)
    arrays = read_checkpoint(tmp_path / "checkpoint.tapf")
    init = Tokenizer(cfg, seed=3)
    for k, t in init.params.tensors.items():
        assert arrays[f"param.{k}"].tobytes() == t.data.tobytes()
    assert read_step_log(tmp_path / "steps.jsonl") == []


def test_same_seed_runs_are_bit_identical(tmp_path):
    cfg = tiny_config(**{"fusion.method": "tapf", "fusion.weight": 120.0, "train.steps": 4})
    for name in ("a", "b"):
        train_run(cfg, seed=5, out_dir=tmp_path / name)
    strip = [{k: v for k, v in r.items() if k != "ms"} for r in read_step_log(tmp_path / "a" / "steps.jsonl")]
    again = [{k: v for k, v in r.items() if k != "ms"} for r in read_step_log(tmp_path / "b" / "steps.jsonl")]
    assert strip == again and len(strip) == 4
    assert (tmp_path / "a" / "checkpoint.tapf").read_bytes() == (tmp_path / "b" / "checkpoint.tapf").read_bytes()
    assert (tmp_path / "a" / "grad_trace.csv").read_bytes() == (tmp_path / "b" / "grad_trace.csv").read_bytes()


def test_step_log_keys_and_totals(tmp_path):
    cfg = tiny_config(**{"fusion.method": "distillation", "fusion.weight": 120.0, "train.steps": 3})
    train_run(cfg, seed=0, out_dir=tmp_path)
    lines = (tmp_path / "steps.jsonl").read_text().splitlines()
    for line in lines:
        rec = json.loads(line)
        assert set(rec) == {"step", "l_recon", "l_mel", "l_commit", "l_fusion", "l_total", "ms"}
        assert abs(rec["l_total"] - recompute_total(rec, cfg)) <= 1e-9
        assert rec["l_fusion"] > 0


@pytest.mark.parametrize("method", ["distillation", "tapf"])
def test_checkpoint_replay_reproduces_next_step(tmp_path, method):
    cfg = tiny_config(**{"fusion.method": method, "fusion.weight": 1.0, "train.steps": 3})
    full = train_run(cfg.replace(**{"train.steps": 5}), seed=2)
    train_run(cfg, seed=2, out_dir=tmp_path)
    model, moments = load_checkpoint(tmp_path / "checkpoint.tapf", cfg, seed=2)
    resumed = train_run(cfg.replace(**{"train.steps": 2}), seed=2, init=(model, moments), start_step=3)
    for a, b in zip(full.records[3:], resumed.records):
        assert (a.step, a.l_recon, a.l_mel, a.l_commit, a.l_fusion, a.l_total) == \
            (b.step, b.l_recon, b.l_mel, b.l_commit, b.l_fusion, b.l_total)


def test_method_none_leaves_fusion_head_without_gradient():
    cfg = tiny_config()
    model = Tokenizer(cfg, 0)
    moments = AdamState()
    src = synthetic_source(cfg, 0)
    for step in (1, 2):
        train_step(model, moments, *src(step), step, 0)
        for name, t in model.params.tensors.items():
            if name.startswith("fusion."):
                assert t.grad is None or not np.any(t.grad)


@pytest.mark.filterwarnings("ignore:distill_loss")
@pytest.mark.parametrize("location", ["pre_quantization", "quantization_level"])
def test_fusion_gradient_reaches_encoder(location):
    cfg = tiny_config(**{"fusion.method": "distillation", "fusion.weight": 1.0, "fusion.location": location,
                         "train.lambda_recon": 0.0, "train.lambda_mel": 0.0, "train.lambda_commit": 0.0})
    model = Tokenizer(cfg, 0)
    train_step(model, AdamState(), *synthetic_source(cfg, 0)(1), 1, 0)
    for name, t in model.params.tensors.items():
        if name.startswith("encoder."):
            assert np.any(t.grad), name
        if name.startswith("decoder."):
            assert t.grad is None or not np.any(t.grad), name


def test_recon_improves_over_200_steps():
    cfg = tiny_config(**{"train.steps": 200, "train.learning_rate": 1e-3, "train.grad_every": 50,
                         "codec.channels": 8, "data.n_samples": 256, "spectral.fft_sizes": (64, 32),
                         "spectral.mel_bins": (16, 8)})
    res = train_run(cfg, seed=0)
    assert res.records[-1].l_recon < res.records[0].l_recon


def test_nan_aborts_and_keeps_last_good_checkpoint(tmp_path):
    cfg = tiny_config(**{"train.steps": 3})
    good = synthetic_source(cfg, 0)

    def source(step):
        audio, video = good(step)
        if step == 3:
            audio = audio * np.nan
        return audio, video

    with pytest.raises(NumericError):
        train_run(cfg, seed=0, source=source, out_dir=tmp_path)
    arrays = read_checkpoint(tmp_path / "checkpoint.tapf")
    assert arrays["optim.t"] == 2.0
    assert all(np.all(np.isfinite(v)) for v in arrays.values())


def test_checkpoint_arrays_include_optimizer_and_codebooks():
    cfg = tiny_config(**{"train.steps": 1})
    res = train_run(cfg, seed=0)
    arrays = checkpoint_arrays(res.model, res.moments)
    assert "quantizer.codebook.1" in arrays and "optim.m.encoder.conv_in.weight" in arrays


# -- gradient of the full objective


GRAD_TENSORS = ("encoder.conv_in.bias", "fusion.audio.bias", "decoder.conv_out.bias")


def _objective_grad_error(cfg, seed):
    model = Tokenizer(cfg, seed)
    audio, video = synthetic_source(cfg, seed)(1)
    with ad.Tape():
        model.init_codebooks(model.codec.encode(audio).data, np.random.default_rng(seed))
    shapes = [model.params[n].shape for n in GRAD_TENSORS]
    sizes = [int(np.prod(s)) for s in shapes]
    x0 = np.concatenate([model.params[n].data.ravel() for n in GRAD_TENSORS])

    def f(x):
        parts = ad.concat([x], axis=0)
        start = 0
        for name, shape, size in zip(GRAD_TENSORS, shapes, sizes):
            model.params.tensors[name] = ad.reshape(parts[start:start + size], shape)
            start += size
        terms, _, _ = forward_terms(model, audio, video)
        return total_loss(terms, loss_weights(cfg))

    return ad.grad_check(f, ad.Tensor(x0), eps=1e-6)


@pytest.mark.parametrize("method", ["distillation", "contrastive", "tapf"])
def test_full_objective_grad_check(method):
    cfg = tiny_config(**{"fusion.method": method, "fusion.weight": 120.0})
    worst = max(_objective_grad_error(cfg, seed) for seed in range(100))
    assert worst <= 1e-5


def test_commit_loss_grad_check():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        target = rng.standard_normal((2, 5, 3))
        z = rng.standard_normal((2, 5, 3))
        worst = max(worst, ad.grad_check(lambda t: commit_loss(t, target), ad.Tensor(z), eps=1e-6))
    assert worst <= 1e-5


def test_default_hyperparameters():
    from tapf.config import ExperimentConfig
    cfg = ExperimentConfig()
    t = cfg.train
    assert (t.learning_rate, t.beta1, t.beta2) == (1e-4, 0.9, 0.99)
    assert (t.lambda_recon, t.lambda_commit) == (500.0, 10.0)
    assert cfg.spectral.scale_weights == (45.0, 1.0, 1.0, 1.0)
    assert (cfg.fusion.w_min, cfg.fusion.w_max) == (1, 7)
    assert cfg.quantizer.levels == (8, 5, 5, 5)
