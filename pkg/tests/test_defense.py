import math

import numpy as np
import pytest

from fedleak import model as lm
from fedleak.defense import (
    DefenseConfig,
    DefenseError,
    DPConfig,
    KLConfig,
    LoRAConfig,
    LoraAdapters,
    add_dp_noise,
    clip_gradient,
    init_adapters,
    kl_divergence,
    kl_regularized_loss,
    lora_effective_weight,
    lora_loss_and_grad,
    merge_adapters,
)
from fedleak.model import ModelConfig, init_model, loss_and_grad, zero_model

from helpers import finite_difference_check


def small_config(vocab=9, k=2, embed=4, hidden=(6,), seed=2):
    return ModelConfig(context_len=k, embed_dim=embed, hidden_dims=hidden, vocab_size=vocab, init_seed=seed)


def test_clip_gradient_examples():
    np.testing.assert_allclose(clip_gradient(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
    short = np.array([0.3, 0.4])
    np.testing.assert_array_equal(clip_gradient(short, 1.0), short)
    np.testing.assert_array_equal(clip_gradient(np.zeros(3), 1.0), np.zeros(3))
    with pytest.raises(DefenseError):
        clip_gradient(short, 0.0)


def test_clip_gradient_norm_bounded():
    rng = np.random.default_rng(0)
    for _ in range(20):
        grad = rng.normal(size=50) * rng.uniform(0.1, 10)
        clipped = clip_gradient(grad, 1.0)
        assert np.linalg.norm(clipped) <= 1.0 + 1e-12
        if np.linalg.norm(grad) <= 1.0:
            np.testing.assert_array_equal(clipped, grad)


def test_add_dp_noise_zero_multiplier_is_identity():
    grad = np.array([0.1, -0.2, 0.3])
    out = add_dp_noise(grad, 0.0, 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out, grad)


def test_add_dp_noise_statistics():
    rng = np.random.default_rng(42)
    n = 100_000
    noise = add_dp_noise(np.zeros(n), 0.8, 1.0, rng)
    std = noise.std()
    assert abs(std - 0.8) / 0.8 < 0.02
    assert abs(noise.mean()) < 3 * 0.8 / math.sqrt(n)


def test_add_dp_noise_deterministic_given_rng():
    a = add_dp_noise(np.zeros(10), 0.5, 1.0, np.random.default_rng(7))
    b = add_dp_noise(np.zeros(10), 0.5, 1.0, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_kl_divergence_closed_form():
    value = kl_divergence(np.array([0.5, 0.5]), np.array([0.25, 0.75]))
    assert value == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)
    assert value == pytest.approx(0.14384, abs=1e-5)
    assert kl_divergence(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == pytest.approx(0.0)


def _forced_output_model(cfg, log_probs):
    """Zero weights make logits equal the output bias exactly."""
    params = zero_model(cfg)
    params.view("out_b")[:] = log_probs
    return params


def test_kl_regularized_loss_fixture_value():
    cfg = small_config(vocab=4)
    params = _forced_output_model(cfg, [math.log(0.5), math.log(0.5), -40.0, -40.0])
    reference = _forced_output_model(cfg, [math.log(0.25), math.log(0.75), -40.0, -40.0])
    contexts, targets = np.array([[1, 2]]), np.array([0])
    plain, _, _ = kl_regularized_loss(params, reference, 0.0, contexts, targets)
    total, _, ce = kl_regularized_loss(params, reference, 2.0, contexts, targets)
    assert ce == pytest.approx(plain)
    assert total - ce == pytest.approx(2.0 * 0.14384, abs=1e-4)


def test_kl_term_zero_when_params_equal_reference():
    cfg = small_config()
    params = init_model(cfg)
    contexts, targets = np.array([[1, 2], [3, 4]]), np.array([0, 5])
    plain_loss, plain_grad = loss_and_grad(params, contexts, targets)
    total, grad, ce = kl_regularized_loss(params, params.copy(), 0.5, contexts, targets)
    assert total == pytest.approx(plain_loss)
    assert ce == pytest.approx(plain_loss)
    np.testing.assert_allclose(grad, plain_grad, atol=1e-12)


def test_kl_mu_zero_matches_plain_loss():
    cfg = small_config(seed=4)
    params = init_model(cfg)
    reference = init_model(small_config(seed=9))
    contexts, targets = np.array([[1, 2], [3, 4]]), np.array([2, 7])
    plain = loss_and_grad(params, contexts, targets)
    regularized = kl_regularized_loss(params, reference, 0.0, contexts, targets)
    assert regularized[0] == pytest.approx(plain[0])
    np.testing.assert_allclose(regularized[1], plain[1], atol=1e-12)


def test_kl_term_nonnegative():
    rng = np.random.default_rng(3)
    cfg = small_config(seed=5)
    params = init_model(cfg)
    for seed in range(5):
        reference = init_model(small_config(seed=seed + 20))
        contexts = rng.integers(0, cfg.vocab_size, size=(4, 2))
        targets = rng.integers(0, cfg.vocab_size, size=4)
        total, _, ce = kl_regularized_loss(params, reference, 1.0, contexts, targets)
        assert total >= ce - 1e-12


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    cfg = small_config(seed=6)
    params = init_model(cfg)
    reference = init_model(small_config(seed=31))
    contexts = rng.integers(0, cfg.vocab_size, size=(4, 2))
    targets = rng.integers(0, cfg.vocab_size, size=4)
    coords = rng.choice(params.flat.size, size=20, replace=False)

    def loss_fn():
        total, grad, _ = kl_regularized_loss(params, reference, 0.01, contexts, targets)
        return total, grad

    finite_difference_check(loss_fn, params.flat, coords)


def test_lora_effective_weight_examples():
    w = np.zeros((2, 2))
    a = np.array([[1.0, 1.0]])
    b = np.array([[1.0], [0.0]])
    np.testing.assert_array_equal(
        lora_effective_weight(w, a, b, rank=1, alpha=2.0), [[2.0, 2.0], [0.0, 0.0]]
    )
    base = np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(
        lora_effective_weight(base, np.zeros((1, 2)), np.zeros((2, 1)), 1, 2.0), base
    )
    with pytest.raises(DefenseError):
        lora_effective_weight(w, np.zeros((2, 2)), b, rank=1, alpha=2.0)


def test_lora_alpha_over_rank_ratio():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 4))
    a = rng.normal(size=(2, 4))
    b = rng.normal(size=(3, 2))
    once = lora_effective_weight(w, a, b, rank=2, alpha=4.0)
    doubled = lora_effective_weight(w, a, b, rank=4, alpha=8.0)
    np.testing.assert_array_equal(once, doubled)
    np.testing.assert_allclose(once - w, (4.0 / 2) * b @ a)


def test_lora_zero_init_merge_is_identity():
    cfg = small_config(seed=7)
    base = init_model(cfg)
    adapters = init_adapters(cfg, LoRAConfig(rank=2, alpha=4.0), seed=1)
    merged = merge_adapters(base, adapters)
    np.testing.assert_array_equal(merged.flat, base.flat)


def test_lora_rank_cap_enforced():
    cfg = small_config(hidden=(3,))
    with pytest.raises(DefenseError):
        init_adapters(cfg, LoRAConfig(rank=5, alpha=10.0), seed=0)


def test_lora_base_frozen_and_grads_flow_to_adapters():
    cfg = small_config(seed=8)
    base = init_model(cfg)
    snapshot = base.flat.copy()
    adapters = init_adapters(cfg, LoRAConfig(rank=2, alpha=4.0, dropout=0.0), seed=3)
    rng = np.random.default_rng(1)
    contexts = rng.integers(0, cfg.vocab_size, size=(4, 2))
    targets = rng.integers(0, cfg.vocab_size, size=4)
    for _ in range(5):
        _, grad = lora_loss_and_grad(base, adapters, contexts, targets)
        adapters.flat -= 0.1 * grad
    assert np.array_equal(base.flat, snapshot)
    assert np.any(grad != 0.0)


def test_lora_dropout_zero_equals_merged_forward():
    cfg = small_config(seed=9)
    base = init_model(cfg)
    adapters = init_adapters(cfg, LoRAConfig(rank=2, alpha=4.0, dropout=0.0), seed=3)
    adapters.flat[:] = np.random.default_rng(2).normal(scale=0.1, size=adapters.flat.shape)
    rng = np.random.default_rng(1)
    contexts = rng.integers(0, cfg.vocab_size, size=(5, 2))
    targets = rng.integers(0, cfg.vocab_size, size=5)
    lora_loss, _ = lora_loss_and_grad(base, adapters, contexts, targets)
    merged_loss, _ = loss_and_grad(merge_adapters(base, adapters), contexts, targets)
    assert lora_loss == pytest.approx(merged_loss, rel=1e-12)


def test_lora_gradient_matches_finite_differences():
    cfg = small_config(seed=10)
    base = init_model(cfg)
    adapters = init_adapters(cfg, LoRAConfig(rank=2, alpha=4.0, dropout=0.0), seed=4)
    rng = np.random.default_rng(5)
    adapters.flat[:] = rng.normal(scale=0.05, size=adapters.flat.shape)
    contexts = rng.integers(0, cfg.vocab_size, size=(4, 2))
    targets = rng.integers(0, cfg.vocab_size, size=4)
    coords = rng.choice(adapters.flat.size, size=20, replace=False)
    finite_difference_check(
        lambda: lora_loss_and_grad(base, adapters, contexts, targets), adapters.flat, coords
    )


def test_lora_dropout_gradient_with_fixed_mask():
    # with a fixed dropout mask (same rng state per call) the gradient is
    # still exact for the realized sub-network
    cfg = small_config(seed=12)
    base = init_model(cfg)
    adapters = init_adapters(cfg, LoRAConfig(rank=2, alpha=4.0, dropout=0.4), seed=4)
    rng = np.random.default_rng(5)
    adapters.flat[:] = rng.normal(scale=0.05, size=adapters.flat.shape)
    contexts = rng.integers(0, cfg.vocab_size, size=(3, 2))
    targets = rng.integers(0, cfg.vocab_size, size=3)
    coords = rng.choice(adapters.flat.size, size=10, replace=False)
    finite_difference_check(
        lambda: lora_loss_and_grad(base, adapters, contexts, targets, np.random.default_rng(99)),
        adapters.flat,
        coords,
    )


def test_lora_fedavg_matches_average_of_effective_deltas():
    # two clients sharing the up matrices: averaging adapter parameters must
    # equal averaging the effective weight deltas
    cfg = small_config(seed=13)
    base = init_model(cfg)
    lora_cfg = LoRAConfig(rank=2, alpha=4.0, dropout=0.0)
    rng = np.random.default_rng(6)
    client_a = init_adapters(cfg, lora_cfg, seed=1)
    client_b = LoraAdapters(cfg, lora_cfg, client_a.flat.copy())
    for (down_a, up_a), (down_b, up_b) in zip(client_a.pairs, client_b.pairs):
        up = rng.normal(scale=0.1, size=up_a.shape)
        up_a[:] = up
        up_b[:] = up
        down_a[:] = rng.normal(scale=0.1, size=down_a.shape)
        down_b[:] = rng.normal(scale=0.1, size=down_b.shape)
    averaged = LoraAdapters(cfg, lora_cfg, (client_a.flat + client_b.flat) / 2)
    merged_avg = merge_adapters(base, averaged).flat
    delta_a = merge_adapters(base, client_a).flat - base.flat
    delta_b = merge_adapters(base, client_b).flat - base.flat
    np.testing.assert_allclose(merged_avg, base.flat + (delta_a + delta_b) / 2, atol=1e-12)


def test_defense_config_validation():
    with pytest.raises(DefenseError):
        DPConfig(noise_multiplier=-0.1)
    with pytest.raises(DefenseError):
        DPConfig(noise_multiplier=0.1, max_grad_norm=0.0)
    with pytest.raises(DefenseError):
        KLConfig(mu=-1.0)
    with pytest.raises(DefenseError):
        KLConfig(mu=0.1, reference="nope")
    with pytest.raises(DefenseError):
        LoRAConfig(rank=0, alpha=1.0)
    with pytest.raises(DefenseError):
        DefenseConfig(kl=KLConfig(mu=0.1), lora=LoRAConfig(rank=1, alpha=1.0))
