"""Token-wise view routing: pooling, logits, Gumbel selection, STE."""

import numpy as np
import pytest

import roar3d.numerics as nx
from roar3d.numerics import Tensor, grad_check
from roar3d.router import (
    RouterParams,
    gumbel_select,
    pool_view_keys,
    routing_logits,
    sample_gumbel,
)
from roar3d.rng import stream
from roar3d.world import Camera, ViewFeatureSet


def _views(rng, v=3, s=4, d=8, primary=0):
    feats = rng.normal(size=(v, s, d))
    cams = [Camera(azimuth=90.0 * (i % 4), elevation=0.0) for i in range(v)]
    return ViewFeatureSet(features=feats, cameras=cams, primary_index=primary)


def _params(rng, model_dim=8, feat_dim=8, heads=2, head_dim=4):
    return RouterParams.init(model_dim, feat_dim, heads, head_dim, rng)


# ---------------------------------------------------------------------------
# pool_view_keys
# ---------------------------------------------------------------------------


def test_pool_constant_patches():
    c = np.array([1.0, -2.0, 3.0])
    feats = np.tile(c, (2, 5, 1))
    pooled = pool_view_keys(feats)
    assert np.allclose(pooled.data, np.tile(c, (2, 1)), atol=1e-15)


def test_pool_zero_features():
    pooled = pool_view_keys(np.zeros((3, 4, 6)))
    assert np.array_equal(pooled.data, np.zeros((3, 6)))


def test_pool_matches_direct_summation():
    rng = np.random.default_rng(0)
    views = _views(rng)
    pooled = pool_view_keys(views)
    expect = views.features.sum(axis=1) / views.features.shape[1]
    assert np.allclose(pooled.data, expect, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------------------
# routing_logits
# ---------------------------------------------------------------------------


def test_orthogonal_query_key_gives_zero_logit():
    """Post-norm q and k orthogonal per head => logit is exactly w dot 0."""
    rng = np.random.default_rng(1)
    p = _params(rng, heads=1, head_dim=2, model_dim=2, feat_dim=2)
    # engineer projections so q = (c, 0) and k = (0, c') before RMSNorm
    p.w_q.data[...] = np.array([[1.0, 0.0], [1.0, 0.0]])
    p.w_k.data[...] = np.array([[0.0, 1.0], [0.0, 1.0]])
    z = np.array([[0.7, -0.3]])
    pooled = np.array([[0.4, 0.9]])
    r = routing_logits(z, pooled, p)
    assert abs(float(r.data[0, 0])) < 1e-12


def test_identical_pooled_keys_give_identical_columns():
    rng = np.random.default_rng(2)
    p = _params(rng)
    z = rng.normal(size=(5, 8))
    key = rng.normal(size=8)
    pooled = np.tile(key, (4, 1))
    r = routing_logits(z, pooled, p).data
    for v in range(1, 4):
        assert np.array_equal(r[:, 0], r[:, v])


def test_routing_logits_match_per_head_oracle():
    rng = np.random.default_rng(3)
    N, V, H, dh = 3, 2, 2, 4
    D = 8
    p = _params(rng, model_dim=D, feat_dim=D, heads=H, head_dim=dh)
    z = rng.normal(size=(N, D))
    pooled = rng.normal(size=(V, D))
    r = routing_logits(z, pooled, p).data

    # direct evaluation of the stated formula
    zt = nx.layer_norm(Tensor(z), p.ln_gain, p.ln_bias).data
    q = nx.rms_norm(Tensor(zt @ p.w_q.data), p.q_gain).data
    k = nx.rms_norm(Tensor(pooled @ p.w_k.data), p.k_gain).data
    expect = np.zeros((N, V))
    for i in range(N):
        for v in range(V):
            acc = 0.0
            for h in range(H):
                qh = q[i, h * dh:(h + 1) * dh]
                kh = k[v, h * dh:(h + 1) * dh]
                acc += p.w_agg.data[h] * float(qh @ kh) / np.sqrt(dh)
            expect[i, v] = acc
    assert np.allclose(r, expect, rtol=1e-10, atol=1e-14)


def test_w_agg_initialized_uniform():
    p = _params(np.random.default_rng(0), heads=4, head_dim=2)
    assert np.array_equal(p.w_agg.data, np.full(4, 0.25))


# ---------------------------------------------------------------------------
# gumbel_select
# ---------------------------------------------------------------------------


def test_single_view_selects_zero_in_both_modes():
    logits = Tensor(np.array([[0.3], [-1.0], [2.0]]))
    for mode in ("train", "inference"):
        dec = gumbel_select(logits, mode=mode, rng=np.random.default_rng(0))
        assert np.array_equal(dec.hard_index, np.zeros(3, dtype=np.int64))
        assert np.allclose(dec.y_soft.data, 1.0, atol=1e-15)


def test_inference_soft_weights_match_softmax():
    dec = gumbel_select(Tensor(np.array([[2.0, 1.0, 1.0]])), tau=1.0, mode="inference")
    assert dec.hard_index[0] == 0
    e = np.exp(np.array([2.0, 1.0, 1.0]))
    assert np.allclose(dec.y_soft.data[0], e / e.sum(), atol=1e-12)
    assert np.allclose(dec.y_soft.data[0], [0.576, 0.212, 0.212], atol=5e-4)


def test_tie_breaks_to_lowest_index():
    dec = gumbel_select(Tensor(np.array([[1.0, 1.0]])), mode="inference")
    assert dec.hard_index[0] == 0


def test_invalid_arguments():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        gumbel_select(logits, tau=0.0, mode="inference")
    with pytest.raises(ValueError):
        gumbel_select(logits, mode="maybe")
    with pytest.raises(ValueError):
        gumbel_select(logits, mode="train")  # no rng, no noise


def test_ste_forward_identity_is_one_hot():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(6, 4)))
    dec = gumbel_select(logits, mode="train", rng=rng)
    m = dec.ste_multiplier()
    assert np.array_equal(m.data, np.ones((6, 1)))
    # the one-hot at hard_index: all rows sum to 1 with entries in {0, 1}
    one_hot = np.zeros((6, 4))
    one_hot[np.arange(6), dec.hard_index] = 1.0
    assert np.array_equal(one_hot.sum(axis=1), np.ones(6))


def test_ste_backward_equals_soft_surrogate_finite_differences():
    """Tape grads of the STE path == FD of the offset soft surrogate."""
    rng = np.random.default_rng(6)
    N, V, D = 4, 3, 5
    w = Tensor(rng.normal(size=(D, V)), requires_grad=True)
    x = rng.normal(size=(N, D))
    noise = sample_gumbel(np.random.default_rng(1), (N, V))
    downstream = rng.normal(size=(N, 1))

    def decision():
        logits = nx.matmul(Tensor(x), w)
        return gumbel_select(logits, tau=1.0, mode="train", noise=noise)

    # real network: STE multiplier scales a fixed downstream value
    w.zero_grad()
    dec = decision()
    loss = nx.sum_all(nx.mul(dec.ste_multiplier(), Tensor(downstream)))
    loss.backward()
    analytic = w.grad.copy()

    # surrogate: multiplier replaced by y_soft[v*] + (1 - y_soft0[v*]), v* frozen
    hard0 = dec.hard_index.copy()
    offset = 1.0 - np.take_along_axis(dec.y_soft.data, hard0[:, None], axis=-1)

    def surrogate():
        d2 = decision()
        d2.hard_index = hard0
        return nx.sum_all(nx.mul(d2.surrogate_multiplier(offset), Tensor(downstream)))

    report = grad_check(surrogate, {"w": w})
    assert report["w"] < 1e-4
    w.zero_grad()
    surrogate().backward()
    assert np.allclose(w.grad, analytic, rtol=1e-12, atol=1e-15)


def test_view_permutation_equivariance():
    """Permuting views (with identically permuted noise) permutes the decision."""
    rng = np.random.default_rng(7)
    N, V = 5, 4
    logits = rng.normal(size=(N, V))
    noise = sample_gumbel(np.random.default_rng(2), (N, V))
    perm = np.array([2, 0, 3, 1])

    base = gumbel_select(Tensor(logits), mode="train", noise=noise)
    permuted = gumbel_select(Tensor(logits[:, perm]), mode="train", noise=noise[:, perm])
    inv = np.argsort(perm)
    assert np.array_equal(inv[base.hard_index], permuted.hard_index)
    assert np.allclose(permuted.y_soft.data, base.y_soft.data[:, perm], atol=1e-12)

    # inference mode needs no noise coupling at all
    b2 = gumbel_select(Tensor(logits), mode="inference")
    p2 = gumbel_select(Tensor(logits[:, perm]), mode="inference")
    assert np.array_equal(inv[b2.hard_index], p2.hard_index)


def test_inference_determinism_bit_exact():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(7, 3))
    a = gumbel_select(Tensor(logits), mode="inference")
    b = gumbel_select(Tensor(logits), mode="inference")
    assert np.array_equal(a.hard_index, b.hard_index)
    assert np.array_equal(a.y_soft.data, b.y_soft.data)


def test_gumbel_marginals_uniform_logits():
    """With uniform logits each view is picked ~1/V over 100k train draws."""
    V = 4
    draws = 100_000
    noise = sample_gumbel(stream(0, "marginal-test"), (draws, V))
    picks = np.argmax(noise, axis=-1)  # uniform logits: argmax of noise alone
    freq = np.bincount(picks, minlength=V) / draws
    assert np.abs(freq - 1.0 / V).max() < 0.01


def test_routing_noise_is_reproducible_and_blockwise_independent():
    from roar3d.router import routing_noise

    a = routing_noise(42, step=3, block=1, shape=(4, 5))
    b = routing_noise(42, step=3, block=1, shape=(4, 5))
    c = routing_noise(42, step=3, block=2, shape=(4, 5))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
