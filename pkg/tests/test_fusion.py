import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tapf import autodiff as ad
from tapf.errors import ConfigError, ContractError, DimensionError
from tapf.fusion import (FusionConfig, FusionHeads, align_index, attention_pool, contrastive_loss,
                         distill_loss, dynamic_window, fusion_features, infonce_from_similarity,
                         pool_windows, tapf_loss, visual_complexity, window_indices, window_widths)
from tapf.quantize import RVQState, rvq_quantize

SEEDS = range(100)


def softplus(x):
    return math.log1p(math.exp(x))


def _rows_with_cos(c, d=3):
    # unit pairs (a, v) with cos(a, v) == c exactly in the first two coordinates
    a = np.zeros((4, d))
    v = np.zeros((4, d))
    a[:, 0] = 1.0
    v[:, 0] = c
    v[:, 1] = math.sqrt(max(0.0, 1 - c * c))
    return a, v


# -- closed forms


@pytest.mark.parametrize("c,expected", [(1.0, softplus(-1.0)), (0.0, math.log(2.0)), (-1.0, softplus(1.0))])
def test_distill_closed_forms(c, expected):
    a, v = _rows_with_cos(c)
    assert abs(distill_loss(a, v).item() - expected) <= 1e-12


def test_distill_is_scale_invariant():
    rng = np.random.default_rng(0)
    a, v = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    assert abs(distill_loss(a, v).item() - distill_loss(2 * a, v).item()) <= 1e-12
    assert abs(distill_loss(a, v).item() - distill_loss(a, 3.5 * v).item()) <= 1e-12


def test_distill_aligns_mismatched_rates():
    rng = np.random.default_rng(1)
    a, v = rng.standard_normal((50, 4)), rng.standard_normal((10, 4))
    centers = align_index(np.arange(1, 11), 10, 50) - 1
    assert distill_loss(a, v).item() == pytest.approx(distill_loss(a[centers], v).item(), abs=1e-15)


def test_distill_zero_norm_frame_warns_and_counts_as_orthogonal():
    a, v = np.zeros((2, 3)), np.ones((2, 3))
    with pytest.warns(RuntimeWarning, match="zero-norm"):
        val = distill_loss(a, v).item()
    assert val == pytest.approx(math.log(2.0), abs=1e-15)


def test_contrastive_single_pair_is_zero():
    rng = np.random.default_rng(2)
    assert abs(contrastive_loss(rng.standard_normal((1, 5, 3)), rng.standard_normal((1, 4, 3)), 0.07).item()) <= 1e-12


@pytest.mark.parametrize("B", [2, 4, 7])
def test_contrastive_uniform_similarity_is_log_b(B):
    a = np.ones((B, 3, 2))
    assert abs(contrastive_loss(a, a, 0.07).item() - math.log(B)) <= 1e-12
    assert abs(infonce_from_similarity(np.full((B, B), 0.3), 0.5).item() - math.log(B)) <= 1e-12


def test_contrastive_identity_similarity_by_hand():
    tau = 0.07
    s = np.eye(2)
    # each row/column: -log(e^{1/tau} / (e^{1/tau} + e^{0}))
    one = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + 1.0))
    assert infonce_from_similarity(s, tau).item() == pytest.approx(one, rel=1e-12)


def test_contrastive_errors():
    with pytest.raises(ContractError):
        contrastive_loss(np.zeros((0, 3, 2)), np.zeros((0, 3, 2)), 0.1)
    with pytest.raises(DimensionError):
        contrastive_loss(np.zeros((2, 3, 2)), np.zeros((3, 3, 2)), 0.1)


# -- complexity and windows


def test_visual_complexity_examples():
    const = np.tile([1.0, 2.0], (5, 1))
    c = visual_complexity(const, standardize=False)
    assert np.all(c[1:] == 0) and c[0] == pytest.approx(math.sqrt(5))
    ramp = np.outer(np.arange(1, 7), [1.0, 0.0, 0.0])
    assert np.all(visual_complexity(ramp, standardize=False)[1:] == 1.0)


def test_visual_complexity_matches_elementwise_oracle():
    rng = np.random.default_rng(3)
    V = rng.standard_normal((9, 4))
    for norm in ("l1", "l2"):
        got = visual_complexity(V, norm=norm, standardize=False)
        for t in range(9):
            d = V[t] - (V[t - 1] if t else 0.0)
            want = sum(abs(x) for x in d) if norm == "l1" else math.sqrt(sum(x * x for x in d))
            assert got[t] == pytest.approx(want, rel=1e-14)
    s = visual_complexity(V)
    assert abs(s.mean()) < 1e-12 and s.std() == pytest.approx(1.0, rel=1e-12)


def test_dynamic_window_examples():
    assert dynamic_window(0.0, 1, 7) == 4
    assert dynamic_window(1e6, 1, 7) == 7
    assert dynamic_window(-5.0, 1, 7) == 1
    assert dynamic_window(-1e6, 1, 7) == 1


def test_window_bounds_and_monotonicity_over_1e5_scores():
    rng = np.random.default_rng(4)
    c = np.sort(np.concatenate([rng.standard_normal(50_000) * 4, rng.uniform(-40, 40, 50_000)]))
    for lo, hi in ((1, 7), (1, 5), (2, 9), (3, 3)):
        w = dynamic_window(c, lo, hi)
        assert w.min() >= lo and w.max() <= hi
        assert np.all(np.diff(w) >= 0)


def test_unstandardized_scores_never_go_below_the_midpoint():
    rng = np.random.default_rng(5)
    c = visual_complexity(rng.standard_normal((40, 6)), standardize=False)
    assert np.all(dynamic_window(c, 1, 7) >= 4)


def test_align_index_examples():
    assert align_index(1, 10, 50) == 3
    assert align_index(10, 10, 50) == 48
    t = np.arange(1, 13)
    assert np.array_equal(align_index(t, 12, 12), t)
    with pytest.raises(ContractError):
        align_index(0, 10, 50)


def test_window_indices_clip():
    assert window_indices(1, 5, 10).tolist() == [1, 2, 3]
    assert window_indices(10, 4, 10).tolist() == [8, 9, 10]
    assert window_indices(5, 1, 10).tolist() == [5]


# -- attention pooling


def test_attention_pool_examples():
    v = np.array([1.0, 0.0])
    Z = np.array([[1.0, 0.0], [0.0, 1.0]])
    _, alpha, idx = attention_pool(v, Z, center=1, width=3)
    e = math.e
    assert idx.tolist() == [1, 2]
    np.testing.assert_allclose(alpha.data, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    same = np.tile([0.3, -0.7], (5, 1))
    pooled, _, _ = attention_pool(v, same, center=3, width=5)
    np.testing.assert_allclose(pooled.data, [0.3, -0.7], atol=1e-15)
    rng = np.random.default_rng(6)
    Z = rng.standard_normal((6, 2))
    pooled, alpha, _ = attention_pool(v, Z, center=4, width=1)
    assert np.array_equal(pooled.data, Z[3]) and alpha.data.tolist() == [1.0]


@given(st.integers(0, 10_000), st.sampled_from(["attention", "mean"]))
def test_attention_weights_live_on_the_window_simplex(seed, pooling):
    rng = np.random.default_rng(seed)
    B, n_audio, n_video, d = 2, int(rng.integers(3, 20)), int(rng.integers(1, 8)), 3
    Z, V = rng.standard_normal((B, n_audio, d)), rng.standard_normal((B, n_video, d))
    widths = rng.integers(1, 8, size=(B, n_video))
    _, alpha = pool_windows(ad.Tensor(Z), ad.Tensor(V), widths, pooling)
    a = alpha.data
    assert np.all(a >= 0) and np.all(np.abs(a.sum(-1) - 1) <= 1e-12)
    half = int(widths.max()) // 2
    offsets = np.arange(-half, half + 1)
    centers = align_index(np.arange(1, n_video + 1), n_video, n_audio) - 1
    j = centers[None, :, None] + offsets[None, None, :]
    outside = (np.abs(offsets)[None, None, :] > (widths // 2)[:, :, None]) | (j < 0) | (j >= n_audio)
    assert np.all(a[outside] == 0)


def test_vectorized_pooling_matches_per_frame_pooling():
    rng = np.random.default_rng(7)
    Z, V = rng.standard_normal((11, 3)), rng.standard_normal((4, 3))
    widths = np.array([1, 4, 7, 3])
    pooled, _ = pool_windows(ad.Tensor(Z[None]), ad.Tensor(V[None]), widths[None])
    centers = align_index(np.arange(1, 5), 4, 11)
    for t in range(4):
        p, _, _ = attention_pool(V[t], Z, centers[t], widths[t])
        np.testing.assert_allclose(pooled.data[0, t], p.data, atol=1e-14)


# -- tapf loss


def test_tapf_loss_zero_when_aligned():
    rng = np.random.default_rng(8)
    v = rng.standard_normal((5, 3))
    cfg = FusionConfig(method="tapf", w_min=1, w_max=1)
    assert tapf_loss(v, v, cfg).item() == pytest.approx(0.0, abs=1e-15)
    same = np.tile(v[:1], (5, 1))
    assert tapf_loss(same, same, FusionConfig(method="tapf")).item() == pytest.approx(0.0, abs=1e-15)


def test_tapf_loss_opposite_vectors():
    v = np.array([[1.0, 0.0]])
    cfg = FusionConfig(method="tapf", lambda_sim=1.0)
    assert tapf_loss(-v, v, cfg).item() == pytest.approx(4.0, abs=1e-15)


@given(st.integers(0, 10_000))
def test_tapf_loss_nonnegative_and_positive_when_misaligned(seed):
    rng = np.random.default_rng(seed)
    Z, V = rng.standard_normal((9, 3)), rng.standard_normal((3, 3))
    assert tapf_loss(Z, V, FusionConfig(method="tapf")).item() > 0


def _tapf_oracle(Z, V, w_min, w_max, lam):
    """Plain-python composition: complexity -> standardize -> window -> cosine softmax -> L1 + cosine loss."""
    T_v, T_a = len(V), len(Z)

    def norm(x):
        return math.sqrt(sum(t * t for t in x))

    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / (norm(a) * norm(b))

    c = [norm(V[0])] + [norm([V[t][k] - V[t - 1][k] for k in range(len(V[0]))]) for t in range(1, T_v)]
    mu = sum(c) / T_v
    sd = math.sqrt(sum((x - mu) ** 2 for x in c) / T_v)
    c = [(x - mu) / sd for x in c]
    total = 0.0
    for t in range(T_v):
        raw = w_min + (w_max - w_min) / (1 + math.exp(-c[t]))
        W = int(math.floor(raw + 0.5))
        center = min(max(int(math.floor((t + 0.5) * T_a / T_v + 1.0)), 1), T_a)
        js = [j for j in range(center - W // 2, center + W // 2 + 1) if 1 <= j <= T_a]
        e = [math.exp(cos(V[t], Z[j - 1])) for j in js]
        alpha = [x / sum(e) for x in e]
        pooled = [sum(a * Z[j - 1][k] for a, j in zip(alpha, js)) for k in range(len(V[0]))]
        total += sum(abs(p - v) for p, v in zip(pooled, V[t])) + lam * (1 - cos(pooled, V[t]))
    return total / T_v


@pytest.mark.parametrize("seed", range(10))
def test_three_frame_value_matches_compositional_oracle(seed):
    rng = np.random.default_rng(seed)
    Z, V = rng.standard_normal((6, 2)), rng.standard_normal((3, 2))
    cfg = FusionConfig(method="tapf", lambda_sim=0.7)
    got = tapf_loss(Z, V, cfg).item()
    assert abs(got - _tapf_oracle(Z.tolist(), V.tolist(), 1, 7, 0.7)) <= 1e-10


def test_fixed_window_and_mean_pooling_ablations():
    cfg = FusionConfig(method="tapf", dynamic_window=False)
    assert cfg.fixed_window == 4
    assert np.all(window_widths(np.random.default_rng(0).standard_normal((2, 5, 3)), cfg) == 4)
    rng = np.random.default_rng(9)
    Z, V = rng.standard_normal((12, 3)), rng.standard_normal((4, 3))
    mean_cfg = FusionConfig(method="tapf", pooling="mean", w_min=3, w_max=3)
    centers = align_index(np.arange(1, 5), 4, 12) - 1
    pooled = np.stack([Z[max(0, c - 1):c + 2].mean(0) for c in centers])
    diff = np.abs(pooled - V).sum(-1)
    cosv = (pooled * V).sum(-1) / np.linalg.norm(pooled, axis=-1) / np.linalg.norm(V, axis=-1)
    assert tapf_loss(Z, V, mean_cfg).item() == pytest.approx(np.mean(diff + 1 - cosv), rel=1e-13)


def test_complexity_norm_changes_windows():
    V = np.random.default_rng(10).standard_normal((1, 12, 5))
    w1 = window_widths(V, FusionConfig(method="tapf", complexity_norm="l1", complexity_standardize=False))
    w2 = window_widths(V, FusionConfig(method="tapf", complexity_norm="l2", complexity_standardize=False))
    assert w1.shape == w2.shape == (1, 12)
    assert np.all(w1 >= w2)


# -- gradients of the composite fusion losses over 100 seeds


def _unit_pairs(rng, shape=(5, 4), margin=1e-3):
    # Redraw while any true gradient component (v - cos * a) is within ``margin`` of zero:
    # there the relative error is pure roundoff, same reason power() is sampled away from 0.
    while True:
        a, v = rng.standard_normal(shape), rng.standard_normal(shape)
        a /= np.linalg.norm(a, axis=-1, keepdims=True)
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        cos = (a * v).sum(-1, keepdims=True)
        if np.all(np.abs(v - cos * a) > margin):
            return a, v


def test_distill_grad_check():
    worst = 0.0
    for seed in SEEDS:
        a, v = _unit_pairs(np.random.default_rng(seed))
        worst = max(worst, ad.grad_check(lambda t: distill_loss(t, ad.Tensor(v)), ad.Tensor(a), eps=1e-5))
    assert worst <= 1e-5


def test_contrastive_grad_check():
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        a, v = rng.standard_normal((3, 4, 5)), rng.standard_normal((3, 2, 5))
        worst = max(worst, ad.grad_check(lambda t: contrastive_loss(t, ad.Tensor(v), 0.07), ad.Tensor(a),
                                         eps=3e-5))
    assert worst <= 1e-5


@pytest.mark.parametrize("pooling", ["attention", "mean"])
def test_tapf_grad_check(pooling):
    worst = 0.0
    cfg = FusionConfig(method="tapf", pooling=pooling)
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        Z, V = rng.standard_normal((6, 3)), rng.standard_normal((3, 3))
        worst = max(worst, ad.grad_check(lambda t: tapf_loss(t, ad.Tensor(V), cfg), ad.Tensor(Z), eps=1e-6))
        worst = max(worst, ad.grad_check(lambda t: tapf_loss(ad.Tensor(Z), t, cfg, V_complexity=V),
                                         ad.Tensor(V), eps=1e-6))
    assert worst <= 1e-5


# -- wiring


def test_config_validation():
    with pytest.raises(ConfigError):
        FusionConfig(w_min=5, w_max=3)
    with pytest.raises(ConfigError):
        FusionConfig(temperature=0.0)
    with pytest.raises(ConfigError):
        FusionConfig(method="cross_attention")


def test_fusion_features_by_location():
    rng = np.random.default_rng(11)
    z = ad.Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    state = RVQState([z.data.copy()], pin_zero=False)
    q = rvq_quantize(z, state)
    assert fusion_features("pre_quantization", z, q) is z
    assert np.array_equal(fusion_features("quantization_level", z, q).data, z.data)
    with pytest.raises(ConfigError):
        fusion_features("post", z, q)


def test_heads_none_method_returns_nothing():
    heads = FusionHeads(4, 3, FusionConfig(), np.random.default_rng(0))
    assert heads.loss(ad.Tensor(np.zeros((1, 5, 4))), np.zeros((1, 5, 3))) is None


def test_vision_head_is_frozen_and_audio_head_trains():
    cfg = FusionConfig(method="distillation", weight=1.0)
    heads = FusionHeads(4, 3, cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    with ad.Tape() as tape:
        loss = heads.loss(ad.Tensor(rng.standard_normal((2, 5, 4))), rng.standard_normal((2, 5, 3)))
    tape.backward(loss)
    assert heads.params["fusion.audio.weight"].grad is not None
    assert not heads.params["fusion.vision.weight"].requires_grad
    assert heads.params["fusion.vision.weight"].grad is None
