import json

import numpy as np
import pytest

from conftest import tiny_config
from tapf import autodiff as ad
from tapf.config import ProbeConfig
from tapf.errors import ContractError
from tapf.probe import (ProbeState, build_dataset, embed_codes, fit_probe, init_probe, probe_train_eval,
                        write_result)
from tapf.train import train_run

FAST = ProbeConfig(e_dim=8, steps=150, batch_size=32, learning_rate=1e-2)


def test_embed_identity_table_selects_rows():
    state = init_probe([4], 4, 3, np.random.default_rng(0))
    state.tables[0] = ad.Tensor(np.eye(4), requires_grad=True)
    codes = np.array([[2, 0, 3, 3]])
    out = embed_codes(state, codes).data
    assert np.array_equal(out, np.eye(4)[[2, 0, 3, 3]])


def test_embed_shape_law_and_determinism():
    rng = np.random.default_rng(1)
    state = init_probe([8, 5, 3], 6, 4, rng)
    codes = np.stack([rng.integers(0, k, size=(2, 7)) for k in (8, 5, 3)])
    a = embed_codes(state, codes).data
    assert a.shape == (2, 7, 18)
    assert np.array_equal(a, embed_codes(state, codes.copy()).data)
    assert [t.shape[0] for t in state.tables] == [8, 5, 3]


def test_embed_out_of_range_names_level_and_value():
    state = init_probe([8, 4], 2, 2, np.random.default_rng(0))
    codes = np.array([[1, 2], [3, 4]])
    with pytest.raises(IndexError, match=r"code 4 .*level 1"):
        embed_codes(state, codes)
    with pytest.raises(IndexError, match=r"code -1 .*level 0"):
        embed_codes(state, np.array([[-1, 0], [0, 0]]))


def test_tables_must_share_width():
    rng = np.random.default_rng(0)
    s = init_probe([3, 3], 4, 2, rng)
    with pytest.raises(ContractError):
        ProbeState([s.tables[0], ad.Tensor(np.zeros((3, 5)))], s.w1, s.b1, s.w2, s.b2, s.head_w, s.head_b)


def _constant_codes(labels, T=6):
    return np.repeat(np.asarray(labels)[None, :, None], T, axis=2)


def test_true_class_as_constant_code_is_learned_perfectly():
    rng = np.random.default_rng(2)
    y_tr, y_te = rng.integers(0, 8, 256), rng.integers(0, 8, 128)
    y_tr[:8] = np.arange(8)
    _, acc = fit_probe(_constant_codes(y_tr), y_tr, _constant_codes(y_te), y_te, [8], 8, FAST, seed=0)
    assert acc == 1.0


def test_shuffled_labels_give_chance():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        y_tr, y_te = rng.integers(0, 8, 256), rng.integers(0, 8, 128)
        y_tr[:8] = np.arange(8)
        codes_te = _constant_codes(rng.permutation(y_te))
        _, acc = fit_probe(_constant_codes(y_tr), rng.permutation(y_tr), codes_te, y_te, [8], 8, FAST, seed)
        accs.append(acc)
    assert abs(np.mean(accs) - 1 / 8) <= 0.05


def test_missing_class_is_an_error():
    y = np.array([0, 1, 1, 0])
    with pytest.raises(ContractError, match=r"\[2\]"):
        fit_probe(_constant_codes(y), y, _constant_codes(y), y, [3], 3, FAST, seed=0)


def _tiny_model():
    cfg = tiny_config(**{"probe.n_train": 96, "probe.n_test": 32, "probe.steps": 20, "probe.e_dim": 4,
                         "data.n_classes": 4})
    return cfg, train_run(cfg, seed=0).model


def test_tokenizer_is_frozen_and_accuracy_deterministic():
    cfg, model = _tiny_model()
    before = {k: t.data.tobytes() for k, t in model.params.tensors.items()}
    books = [b.tobytes() for b in model.rvq.codebooks]
    a = probe_train_eval(model, cfg, seed=1)
    b = probe_train_eval(model, cfg, seed=1)
    assert a == b and 0.0 <= a <= 1.0
    assert {k: t.data.tobytes() for k, t in model.params.tensors.items()} == before
    assert [b.tobytes() for b in model.rvq.codebooks] == books


def test_dataset_split_depends_on_dataset_seed():
    cfg, model = _tiny_model()
    d1, d2 = build_dataset(model, cfg), build_dataset(model, cfg)
    assert np.array_equal(d1.codes_train, d2.codes_train) and np.array_equal(d1.y_test, d2.y_test)
    assert d1.codes_train.shape[:2] == (cfg.quantizer.n_q, 96) and d1.n_test == 32
    d3 = build_dataset(model, cfg, dataset_seed=99)
    assert not np.array_equal(d1.y_train, d3.y_train)


def test_result_json(tmp_path):
    path = tmp_path / "probe.json"
    write_result(path, "run/checkpoint.tapf", 3, 0.5, 128)
    assert json.loads(path.read_text()) == {"checkpoint": "run/checkpoint.tapf", "seed": 3, "accuracy": 0.5,
                                            "n_test": 128}
