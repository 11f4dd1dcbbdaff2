import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, random_adapter, random_tokens, random_weights
from gainlab import numerics
from gainlab.adapters import AdapterError, absorb, init_adapter
from gainlab.diagnostics import (
    DiagnosticsError,
    SubspaceTieWarning,
    ablate_component,
    blend,
    delta_cosine,
    frobenius_perturbation,
    grid_2d,
    infer_diagonal_scaling,
    interpolate_1d,
    lattice,
    log_gains,
    overlap_with_tie,
    per_token_delta,
    probe_preservation,
    probed_layers,
    rank_subspace_overlap,
    scaling_stats,
    shared_component,
    singular_bound_check,
    subspace_overlap,
    subspace_report,
    truncate_rank,
    weight_delta,
)
from gainlab.model import forward, perplexity, token_losses

seeds = st.integers(0, 2**31 - 1)


# ---- subspace overlap ---------------------------------------------------------

def test_overlap_identity_and_scalar():
    w = np.random.default_rng(0).normal(size=(6, 5))
    assert subspace_overlap(w, w, 3) == pytest.approx(1.0, abs=1e-12)
    assert subspace_overlap(w, 2 * w, 3) == pytest.approx(1.0, abs=1e-12)


def test_overlap_diagonal_example():
    a = np.diag([3.0, 2.0, 1.0, 0.0])
    b = np.diag([3.0, 2.0, 1.0, 5.0])
    assert subspace_overlap(a, b, 3) == pytest.approx(2 / 3, abs=1e-12)


def test_overlap_errors_and_ties():
    with pytest.raises(numerics.DimensionError):
        subspace_overlap(np.eye(3), np.eye(4), 1)
    with pytest.raises(DiagnosticsError):
        subspace_overlap(np.eye(3), np.eye(3), 4)
    with pytest.warns(SubspaceTieWarning):
        subspace_overlap(np.eye(3), np.diag([3.0, 2.0, 1.0]), 1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        subspace_overlap(np.diag([3.0, 2.0, 1.0]), np.diag([3.0, 2.0, 1.0]), 1)


@given(seeds, st.integers(1, 4))
@settings(max_examples=100)
def test_overlap_in_unit_interval_and_symmetric(seed, k):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    v = subspace_overlap(a, b, k)
    assert -1e-9 <= v <= 1 + 1e-9
    assert v == pytest.approx(subspace_overlap(b, a, k), abs=1e-9)


def _overlap_oracle(a, b, k):
    # independent route: LAPACK singular vectors
    va = np.linalg.svd(a)[2][:k].T
    vb = np.linalg.svd(b)[2][:k].T
    return float(np.sum((va.T @ vb) ** 2)) / k


@given(seeds)
@settings(max_examples=50)
def test_overlap_matches_lapack_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(7, 6))
    b = a + 0.3 * rng.normal(size=(7, 6))
    assert subspace_overlap(a, b, 3) == pytest.approx(_overlap_oracle(a, b, 3), abs=1e-9)


@given(seeds, st.integers(1, 5), st.sampled_from(["rows", "cols"]))
@settings(max_examples=100)
def test_rank_subspace_preserved_by_positive_diagonal(seed, r, side):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(8, r)) @ rng.normal(size=(r, 7))
    n = w.shape[0] if side == "rows" else w.shape[1]
    s = rng.uniform(0.2, 3.0, size=n)
    scaled = s[:, None] * w if side == "rows" else w * s[None, :]
    ov = rank_subspace_overlap(w, scaled, side="right" if side == "rows" else "left")
    assert ov == pytest.approx(1.0, abs=1e-9)


@given(seeds)
@settings(max_examples=100)
def test_additive_deficit(seed):
    rng = np.random.default_rng(seed)
    n, r = 8, 3
    q = np.linalg.qr(rng.normal(size=(n, n)))[0]
    w = q[:, :r] @ np.diag(rng.uniform(1, 2, r)) @ rng.normal(size=(r, n))
    b = q[:, r:r + 1]
    a = rng.normal(size=(1, n))
    assert rank_subspace_overlap(w, w + 3.0 * b @ a, side="left") < 1 - 1e-6


def test_truncate_rank():
    w = np.random.default_rng(1).normal(size=(6, 5))
    t = truncate_rank(w, 2)
    assert numerics.rank(t) == 2
    with pytest.raises(DiagnosticsError):
        truncate_rank(w, 6)
    with pytest.raises(DiagnosticsError):
        rank_subspace_overlap(np.zeros((3, 3)), np.eye(3))


def test_frobenius_perturbation():
    w = np.random.default_rng(0).normal(size=(4, 3))
    assert frobenius_perturbation(w, w) == 0.0
    assert frobenius_perturbation(w, 2 * w) == pytest.approx(1.0, abs=1e-15)
    assert frobenius_perturbation(np.eye(2), np.eye(2) + np.array([[0, 1.0], [0, 0]])) == pytest.approx(
        1 / math.sqrt(2), abs=1e-15)
    with pytest.raises(DiagnosticsError):
        frobenius_perturbation(np.zeros((2, 2)), np.eye(2))


# ---- singular-value bound -----------------------------------------------------

def test_bound_identity_and_scalar():
    w = np.random.default_rng(0).normal(size=(5, 5))
    assert singular_bound_check(w, np.ones(5)).holds
    chk = singular_bound_check(w, 2 * np.ones(5))
    assert chk.holds and chk.max_violation <= 1e-15
    np.testing.assert_allclose(numerics.singular_values(2 * w), 2 * numerics.singular_values(w), rtol=1e-14)


def test_bound_errors():
    with pytest.raises(DiagnosticsError):
        singular_bound_check(np.eye(2), [1.0, 0.0])
    with pytest.raises(DiagnosticsError):
        singular_bound_check(np.eye(2), [1.0, -1.0])
    with pytest.raises(numerics.DimensionError):
        singular_bound_check(np.eye(2), [1.0, 1.0, 1.0])
    with pytest.raises(DiagnosticsError):
        singular_bound_check(np.eye(2), [1.0, 1.0], side="diag")


@given(seeds, st.sampled_from(["rows", "cols"]))
@settings(max_examples=100)
def test_bound_holds_on_random_pairs(seed, side):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(5, 5))
    s = rng.uniform(0.5, 1.5, size=5)
    chk = singular_bound_check(w, s, side)
    assert chk.holds and chk.max_violation <= 1e-9
    # independent oracle via LAPACK
    scaled = s[:, None] * w if side == "rows" else w * s[None, :]
    sig, sig_s = np.linalg.svd(w, compute_uv=False), np.linalg.svd(scaled, compute_uv=False)
    assert np.all(sig_s >= s.min() * sig - 1e-12) and np.all(sig_s <= s.max() * sig + 1e-12)


def test_bound_reports_breach_for_a_non_diagonal_change():
    # sigma(S W) is compared against sigma(W); feeding unrelated gains exposes a breach
    w = np.diag([4.0, 1.0])
    chk = singular_bound_check(w, [1.0, 1.0], tol=0.0)
    assert chk.holds and chk.max_violation == 0.0
    big = singular_bound_check(np.diag([1.0, 1.0]), [3.0, 3.0])
    assert big.holds


# ---- scaling statistics -------------------------------------------------------

def test_scaling_stats_examples():
    s = scaling_stats(np.ones(7))
    assert (s.s_min, s.s_max, s.s_mean, s.pct_tight, s.sign_flip_count) == (1.0, 1.0, 1.0, 1.0, 0)
    s = scaling_stats([0.9, 1.0, 1.02, 1.2])
    assert (s.s_min, s.s_max, s.pct_tight) == (0.9, 1.2, 0.5)
    assert s.s_mean == pytest.approx(1.03, abs=1e-15)
    assert scaling_stats([-0.5, 1.5]).sign_flip_count == 1
    with pytest.raises(DiagnosticsError):
        scaling_stats([])


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=40))
def test_scaling_stats_invariants(v):
    s = scaling_stats(v)
    assert s.s_min <= s.s_mean + 1e-12 and s.s_mean <= s.s_max + 1e-12
    assert 0.0 <= s.pct_tight <= 1.0
    assert s.sign_flip_count == sum(x <= 0 for x in v)


# ---- per-token deltas ---------------------------------------------------------

def test_per_token_delta():
    w = random_weights()
    a = init_adapter("gain", TINY)
    b = random_adapter("gain", w, seed=2)
    corpus = random_tokens(1, TINY.context_len * 2, seed=3)[0]
    same = per_token_delta(w, a, a.clone(), corpus)
    assert np.all(same.deltas == 0) and same.std == 0.0
    d = per_token_delta(w, a, b, corpus)
    # direct per-position recomputation
    for i in range(2):
        win = corpus[i * TINY.context_len:(i + 1) * TINY.context_len]
        for ad, sign in ((b, 1), (a, -1)):
            logits = forward(w, ad, win).detach().numpy()
            z = logits - logits.max(axis=-1, keepdims=True)
            lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            ref = -lp[np.arange(len(win) - 1), win[1:]]
            if sign == 1:
                lb = ref
            else:
                la = ref
        np.testing.assert_allclose(d.deltas[i], lb - la, atol=1e-12)
    mean_diff = token_losses(w, b, corpus).mean() - token_losses(w, a, corpus).mean()
    assert d.mean == pytest.approx(mean_diff, abs=1e-12)
    assert d.hist_counts.sum() == d.deltas.size
    with pytest.raises(DiagnosticsError):
        per_token_delta(w, a, b, np.zeros(0, dtype=int))


# ---- landscape ----------------------------------------------------------------

def _landscape_setup():
    w = random_weights(seed=3)
    adapted = absorb(random_adapter("gain", w, seed=5), w)
    sets = {"in": random_tokens(1, TINY.context_len * 3, seed=1)[0],
            "cross": random_tokens(1, TINY.context_len * 3, seed=2)[0]}
    return w, adapted, sets


def test_interpolation_endpoints_and_midpoint():
    w, adapted, sets = _landscape_setup()
    tr = interpolate_1d(w, adapted, [0.0, 0.5, 1.0], sets)
    for name, toks in sets.items():
        assert tr.ppl[name][0] == perplexity(w, None, toks)
        assert tr.ppl[name][2] == perplexity(adapted, None, toks)
        mid = type(w)(w.config, {k: 0.5 * w[k] + 0.5 * adapted[k] for k in w.tensors})
        assert tr.ppl[name][1] == pytest.approx(perplexity(mid, None, toks), rel=1e-13)
    with pytest.raises(DiagnosticsError):
        interpolate_1d(w, adapted, [1.5], sets)
    assert len(interpolate_1d(w, adapted, [1.5], sets, allow_extrapolation=True).coords) == 1
    assert blend(w, adapted, 0.0).bitwise_equal(w) and blend(w, adapted, 1.0).bitwise_equal(adapted)


def test_interpolation_shape_mismatch():
    from gainlab.model import ModelConfig
    w, _, sets = _landscape_setup()
    other = random_weights(ModelConfig(256, d_model=8, n_heads=2, n_layers=2, d_ffn=16, context_len=16))
    with pytest.raises((numerics.DimensionError, DiagnosticsError)):
        interpolate_1d(w, other, [0.0], sets)


def test_grid_origin_and_axis_consistency():
    w, adapted, sets = _landscape_setup()
    other = absorb(random_adapter("lora", w, seed=7), w)
    da, db = weight_delta(adapted, w), weight_delta(other, w)
    tr = grid_2d(w, da, db, lattice([0.0, 1.0], [0.0, 1.0]), sets)
    assert tr.coords[0] == (0.0, 0.0)
    for name, toks in sets.items():
        assert tr.ppl[name][0] == perplexity(w, None, toks)
        line = interpolate_1d(w, adapted, [1.0], {name: toks})
        assert tr.ppl[name][2] == pytest.approx(line.ppl[name][0], rel=1e-12)
    assert -1.0 <= tr.cosine <= 1.0
    assert delta_cosine(da, da) == pytest.approx(1.0, abs=1e-12)
    assert delta_cosine(da, {k: -v for k, v in da.items()}) == pytest.approx(-1.0, abs=1e-12)


def test_lattice_order():
    assert lattice([0, 1], [0, 2]) == [(0, 0), (0, 2), (1, 0), (1, 2)]


# ---- shared component ---------------------------------------------------------

def test_shared_component_examples():
    d = shared_component({"a": [0.2, 0.0], "b": [0.0, 0.2]})
    np.testing.assert_allclose(d.shared, [0.1, 0.1], atol=1e-15)
    assert d.shared_variance_fraction == pytest.approx(0.5, abs=1e-12)
    same = shared_component([[0.1, -0.3, 0.2]] * 3)
    assert same.shared_variance_fraction == pytest.approx(1.0, abs=1e-12)
    assert all(np.max(np.abs(v)) <= 1e-15 for v in same.specific.values())
    zero = shared_component([[0.1, -0.2], [-0.1, 0.2]])
    assert np.all(zero.shared == 0) and zero.shared_variance_fraction == 0.0
    with pytest.raises(DiagnosticsError):
        shared_component([[0.1]])


@given(seeds, st.integers(2, 5))
@settings(max_examples=100)
def test_decomposition_reconstructs(seed, n):
    vecs = np.random.default_rng(seed).normal(scale=0.3, size=(n, 9))
    d = shared_component(list(vecs))
    for i, dom in enumerate(d.domains):
        assert np.max(np.abs(d.shared + d.specific[dom] - vecs[i])) <= 1e-12
    assert 0.0 <= d.shared_variance_fraction <= 1.0 + 1e-12


def test_ablation():
    w = random_weights()
    ads = {f"d{i}": random_adapter("gain_ffn", w, seed=i) for i in range(3)}
    dec = shared_component({k: log_gains(v) for k, v in ads.items()})
    full = ablate_component(ads["d1"], dec, "d1", "full")
    assert full.bitwise_equal(ads["d1"])
    shared = ablate_component(ads["d1"], dec, "d1", "shared_only").flat_gains()
    specific = ablate_component(ads["d1"], dec, "d1", "specific_only").flat_gains()
    np.testing.assert_allclose(shared * specific, ads["d1"].flat_gains(),
                               rtol=0, atol=1e-12)
    # identical gains everywhere: the shared part is everything
    same = shared_component({"x": log_gains(ads["d0"]), "y": log_gains(ads["d0"])})
    np.testing.assert_allclose(ablate_component(ads["d0"], same, "x", "shared_only").flat_gains(),
                               ads["d0"].flat_gains(), atol=1e-12)
    with pytest.raises(DiagnosticsError):
        ablate_component(ads["d0"], None, "d0", "shared_only")
    with pytest.raises(DiagnosticsError):
        ablate_component(ads["d0"], dec, "d0", "half")
    with pytest.raises(AdapterError):
        ablate_component(random_adapter("lora", w), dec, "d0", "full")


def test_log_gains_rejects_non_positive():
    w = random_weights()
    ad = init_adapter("gain", TINY)
    flat = ad.flat_gains().copy()
    flat[0] = -0.5
    with pytest.raises(DiagnosticsError):
        log_gains(ad.with_flat_gains(flat))


# ---- reports ------------------------------------------------------------------

def test_probed_layers():
    assert probed_layers(36) == [0, 9, 18, 27, 35]
    for n in range(1, 50):
        got = probed_layers(n)
        assert got[0] == 0 and got[-1] == n - 1 and len(got) == min(5, n) and got == sorted(set(got))
    assert probed_layers(4) == [0, 1, 2, 3]
    assert probed_layers(1) == [0]


def test_infer_diagonal_scaling():
    w = np.random.default_rng(0).normal(size=(4, 3))
    s = np.array([0.5, 2.0, 1.5, 0.7])
    got, side = infer_diagonal_scaling(w, s[:, None] * w)
    assert side == "rows" and np.allclose(got, s, atol=1e-12)
    got, side = infer_diagonal_scaling(w, w * s[None, :3])
    assert side == "cols"
    assert infer_diagonal_scaling(w, w + 1.0) is None


@pytest.mark.parametrize("method", ["gain", "gain_ffn", "lora", "ia3"])
def test_subspace_report(method):
    w = random_weights()
    ad = random_adapter(method, w, seed=1)
    rows = subspace_report(w, ad, k=4)
    assert {(r.layer, r.target) for r in rows} == {(i, t) for i in range(2) for t in ("O", "down")}
    for r in rows:
        assert -1e-9 <= r.overlap <= 1 + 1e-9
        unchanged = r.perturbation == 0.0
        if method == "gain" and r.target == "O" or method == "gain_ffn":
            assert r.bound_holds is True
        elif unchanged:
            assert r.overlap == pytest.approx(1.0, abs=1e-9)
    if method == "gain":
        absorbed = subspace_report(w, absorb(ad, w), k=4)
        assert [r.bound_holds for r in absorbed] == [r.bound_holds for r in rows]


def test_probe_preservation():
    w = random_weights()
    for method in ("gain", "gain_ffn", "ia3"):
        res = probe_preservation(w, random_adapter(method, w, seed=4))
        assert res and all(abs(r.overlap - 1.0) <= 1e-6 for r in res)
    with pytest.raises(AdapterError):
        probe_preservation(w, random_adapter("lora", w))
    ad = init_adapter("gain", TINY)
    flat = ad.flat_gains().copy()
    flat[3] = 0.0
    with pytest.raises(DiagnosticsError):
        probe_preservation(w, ad.with_flat_gains(flat))
