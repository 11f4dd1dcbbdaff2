import math

import numpy as np
import pytest
import torch

from conftest import ALL_METHODS, TINY, random_adapter, random_tokens, random_weights
from gainlab.adapters import AdapterOptions, init_adapter, packnet_push
from gainlab.model import GradTape, backward, forward, lm_loss, perplexity
from gainlab.optimize import (
    DivergenceError,
    FisherEstimate,
    Regularizer,
    ReplayBuffer,
    ReplayConfig,
    TrainConfig,
    TrainingError,
    estimate_fisher,
    l2_prev_penalty,
    make_optimizer,
    mean_squared,
    param_drift,
    replay_schedule,
    snapshot,
    train_domain,
)

SHORT = TrainConfig(steps_per_epoch=4, epochs=2, batch_size=2)


def _fresh(method, w):
    opts = AdapterOptions(rank=1 if method == "packnet" else 2, targets=("O", "V"))
    ad = init_adapter(method, w.config, opts, weights=w)
    return packnet_push(ad) if method == "packnet" else ad


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(steps_per_epoch=0)
    with pytest.raises(ValueError):
        Regularizer("l1", 1.0)
    cfg = TrainConfig(regularizer=Regularizer("ewc", 10.0), replay=ReplayConfig())
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_hand_adamw_step_on_quadratic():
    lr, wd, p0, target = 0.1, 0.01, 1.0, 3.0
    p = torch.tensor([p0], dtype=torch.float64, requires_grad=True)
    opt = make_optimizer([p], TrainConfig(learning_rate=lr, weight_decay=wd))
    loss = 0.5 * (p - target) ** 2
    loss.sum().backward()
    opt.step()
    g = p0 - target
    # bias-corrected first step: m_hat = g, v_hat = g^2
    expected = p0 * (1 - lr * wd) - lr * g / (math.sqrt(g * g) + 1e-8)
    assert float(p.detach()) == pytest.approx(expected, abs=1e-15)


def test_l2_prev_penalty_examples():
    p = {"a": torch.tensor([1.0, 2.0], dtype=torch.float64)}
    z = {"a": torch.zeros(2, dtype=torch.float64)}
    val, grad = l2_prev_penalty(p, z, 0.5)
    assert val == 2.5
    assert torch.equal(grad["a"], torch.tensor([1.0, 2.0], dtype=torch.float64))
    assert l2_prev_penalty(p, p, 3.0)[0] == 0.0
    assert l2_prev_penalty(p, z, 0.0)[0] == 0.0
    with pytest.raises(ValueError):
        l2_prev_penalty(p, {"a": torch.zeros(3)}, 1.0)


def test_mean_squared_hand_example():
    grads = [{"p": torch.tensor([1.0, -1.0])}, {"p": torch.tensor([3.0, 1.0])}]
    assert torch.equal(mean_squared(grads)["p"], torch.tensor([5.0, 1.0]))
    with pytest.raises(TrainingError):
        mean_squared([])


def test_fisher_single_sequence_and_insensitive_params():
    w = random_weights()
    ad = init_adapter("lora", TINY, AdapterOptions(rank=1, targets=("O",))).to(torch.float64)
    seq = random_tokens(1, 12, seed=2)[0]
    tape = GradTape(ad.params)
    g = backward(tape, tape.record(lm_loss(forward(w, ad, seq), seq)))
    f = estimate_fisher(w, ad, [seq])
    for k in ad.params:
        torch.testing.assert_close(f.fisher[k], g[k] ** 2, rtol=0, atol=0)
    # A has zero gradient while B = 0
    assert torch.all(f.fisher["layers.0.O.lora_A"] == 0)
    with pytest.raises(TrainingError):
        estimate_fisher(w, ad, [])
    with pytest.raises(ValueError):
        FisherEstimate({"x": -torch.ones(1)}, {"x": torch.ones(1)})


def test_replay_schedule():
    buf = ReplayBuffer()
    assert [replay_schedule(s, 4, buf) for s in range(1, 9)] == ["current"] * 8
    assert replay_schedule(4, 4, None) == "current"
    buf.add("d0", np.arange(16 * 20) % 256, 16, np.random.default_rng(0))
    picks = [s for s in range(1, 9) if replay_schedule(s, 4, buf) == "buffer"]
    assert picks == [4, 8]
    with pytest.raises(ValueError):
        replay_schedule(0, 4, buf)


def test_replay_pool_after_eight_domains():
    buf = ReplayBuffer()
    rng = np.random.default_rng(0)
    for i in range(8):
        buf.add(f"d{i}", random_tokens(1, 16 * 30, seed=i)[0], 16, rng)
    assert len(buf) == 128 and buf.sequences().shape == (128, 16)


def test_lr_zero_is_identity():
    w = random_weights()
    for method in ALL_METHODS:
        ad = random_adapter(method, w, seed=1)
        out, log = train_domain(w, ad, random_tokens(1, 200)[0], TrainConfig(learning_rate=0.0, steps_per_epoch=3,
                                                                              epochs=1, batch_size=2))
        assert out.bitwise_equal(ad), method
        assert len(log.steps) == 3


@pytest.mark.parametrize("method", ALL_METHODS)
def test_training_is_deterministic_and_leaves_base_untouched(method):
    w = random_weights()
    w_copy = w.clone()
    corpus = random_tokens(1, 400, seed=3)[0]
    a, la = train_domain(w, _fresh(method, w), corpus, SHORT)
    b, lb = train_domain(w, _fresh(method, w), corpus, SHORT)
    assert a.bitwise_equal(b)
    assert np.array_equal(la.losses(), lb.losses())
    assert w.bitwise_equal(w_copy)


def test_output_independent_of_unused_prev_and_buffer():
    w = random_weights()
    corpus = random_tokens(1, 400, seed=3)[0]
    ad = _fresh("gain_ffn", w)
    plain, _ = train_domain(w, ad, corpus, SHORT)
    buf = ReplayBuffer()
    buf.add("x", random_tokens(1, 400, seed=9)[0], 16, np.random.default_rng(1))
    noisy, log = train_domain(w, ad, corpus, SHORT, prev=snapshot(random_adapter("gain_ffn", w)), buffer=buf)
    assert plain.bitwise_equal(noisy)
    assert {r["source"] for r in log.steps} == {"current"}


def test_replay_steps_draw_from_buffer():
    w = random_weights()
    buf = ReplayBuffer()
    for i in range(2):
        buf.add(f"d{i}", random_tokens(1, 400, seed=i)[0], 16, np.random.default_rng(i))
    cfg = TrainConfig(steps_per_epoch=8, epochs=1, batch_size=2, replay=ReplayConfig())
    _, log = train_domain(w, _fresh("gain", w), random_tokens(1, 400, seed=5)[0], cfg, buffer=buf)
    assert [r["step"] for r in log.steps if r["source"] == "buffer"] == [4, 8]


def test_regularizer_penalty_logged_and_reduces_drift():
    w = random_weights()
    corpus = random_tokens(1, 400, seed=3)[0]
    ad = _fresh("gain", w)
    snap = snapshot(ad)
    base, _ = train_domain(w, ad, corpus, SHORT)
    cfg = TrainConfig(steps_per_epoch=4, epochs=2, batch_size=2, regularizer=Regularizer("l2_prev", 100.0))
    reg, log = train_domain(w, ad, corpus, cfg, prev=snap)
    assert log.steps[0]["penalty"] == 0.0 and log.steps[-1]["penalty"] > 0.0
    assert param_drift(reg, snap) < param_drift(base, snap)
    with pytest.raises(TrainingError):
        train_domain(w, ad, corpus, TrainConfig(regularizer=Regularizer("ewc", 1.0)), prev=snap)


def test_ewc_drift_weakly_decreases_with_lambda_tiny():
    w = random_weights()
    c1, c2 = random_tokens(1, 400, seed=1)[0], random_tokens(1, 400, seed=2)[0]
    ad, _ = train_domain(w, _fresh("gain", w), c1, SHORT)
    fisher = estimate_fisher(w, ad, list(random_tokens(8, 16, seed=4)))
    drifts = []
    for lam in (1e3, 1e4, 1e5):
        cfg = TrainConfig(steps_per_epoch=4, epochs=2, batch_size=2, regularizer=Regularizer("ewc", lam))
        out, _ = train_domain(w, ad, c2, cfg, prev=fisher)
        drifts.append(param_drift(out, fisher.snapshot))
    assert drifts[0] >= drifts[1] >= drifts[2]


def test_divergence_is_signalled():
    w = random_weights()
    bad = w.replace({"unembed": w["unembed"] * float("inf")})
    with pytest.raises(DivergenceError) as exc:
        train_domain(bad, _fresh("gain", bad), random_tokens(1, 400)[0], SHORT)
    assert exc.value.step == 1 and exc.value.log.diverged


def test_empty_corpus_rejected():
    w = random_weights()
    with pytest.raises(TrainingError):
        train_domain(w, _fresh("gain", w), np.arange(5), SHORT)


def test_per_epoch_scaling_stats_for_gain_only():
    w = random_weights()
    corpus = random_tokens(1, 400, seed=3)[0]
    _, log = train_domain(w, _fresh("gain", w), corpus, SHORT)
    assert len(log.epochs) == 2 and "s_min" in log.epochs[0]
    _, log = train_domain(w, _fresh("lora", w), corpus, SHORT)
    assert "s_min" not in log.epochs[0]


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_training_loss_decreases_on_desk_config(desk_base, desk_suite, seed):
    # loss over the whole training split; single batch losses are too noisy
    train = desk_suite[0].train
    before = perplexity(desk_base, None, train)
    cfg = TrainConfig(steps_per_epoch=50, epochs=2, seed=seed)
    for method in ALL_METHODS:
        ad, _ = train_domain(desk_base, _fresh(method, desk_base), train, cfg)
        assert perplexity(desk_base, ad, train) < before, method
