"""Loss, perturbation sampling, freezing, optimizer, and the train loop."""

import dataclasses

import numpy as np
import pytest

from roar3d.config import RunConfig
from roar3d.model import ForwardInfo, ForwardOptions, LatentTokens, Model
from roar3d.numerics import Tensor
from roar3d.rng import stream
from roar3d.trainer import (
    AdamW,
    Batch,
    TrainingSample,
    apply_freeze,
    assemble_batch,
    build_perturbed_sample,
    candidate_rotations,
    cosine_lr,
    flow_matching_loss,
    train,
    upgrade_from_single,
)
from roar3d.world import Camera, ViewFeatureSet, azimuth_bin

from conftest import micro_run_config

CFG = micro_run_config()


def _sample(rng, cfg, bins=(0,), primary=0):
    n = cfg.model.tokens
    latent = LatentTokens(rng.normal(size=(n, cfg.model.model_dim)), azimuth_tag=0.0)
    cams = [Camera(azimuth=90.0 * b, elevation=0.0) for b in bins]
    feats = rng.normal(size=(len(bins), cfg.model.patches, cfg.model.feat_dim))
    return TrainingSample(latent, ViewFeatureSet(feats, cams, primary_index=primary))


# ---------------------------------------------------------------------------
# flow matching loss
# ---------------------------------------------------------------------------


class _StubModel:
    """Model whose velocity equals the exact target."""

    def __init__(self, z0, noise):
        self.target = noise - z0

    def velocity(self, z_t, t, feats, primary_index=None, opts=None):
        return Tensor(self.target), ForwardInfo()


def test_loss_zero_when_model_equals_target():
    rng = np.random.default_rng(0)
    s = _sample(rng, CFG)
    noise = rng.normal(size=s.latent_clean.tokens.shape)
    stub = _StubModel(s.latent_clean.tokens[None], noise[None])
    loss, _ = flow_matching_loss(stub, s, np.array([0.4]), noise[None])
    assert float(loss.data) == 0.0


def test_loss_zero_model_at_t_one_matches_arithmetic():
    rng = np.random.default_rng(1)
    model = Model.create(dataclasses.replace(CFG.model, arch="single"), 0)  # zero head
    s = _sample(rng, CFG)
    noise = rng.normal(size=s.latent_clean.tokens.shape)
    loss, _ = flow_matching_loss(model, s, np.array([1.0]), noise[None],
                                 ForwardOptions(mode="inference"))
    expect = float(((noise - s.latent_clean.tokens) ** 2).mean())
    assert abs(float(loss.data) - expect) < 1e-12


def test_loss_rejects_bad_noise_shape():
    rng = np.random.default_rng(2)
    s = _sample(rng, CFG)
    with pytest.raises(ValueError):
        flow_matching_loss(_StubModel(np.zeros((1, 2, 3)), np.zeros((1, 2, 3))),
                           s, np.array([0.5]), np.zeros((1, 2, 3)))


# ---------------------------------------------------------------------------
# orientation perturbation
# ---------------------------------------------------------------------------


def test_candidate_rotations_exclude_occupied_bins():
    rng = np.random.default_rng(3)
    s = _sample(rng, CFG, bins=(0,))
    assert candidate_rotations(s) == [90.0, 180.0, 270.0]
    s2 = _sample(rng, CFG, bins=(0, 2))
    assert candidate_rotations(s2) == [90.0, 270.0]


def test_perturbed_rotation_frequencies_uniform():
    rng = np.random.default_rng(4)
    base = _sample(rng, CFG, bins=(0,))
    draw = stream(7, "pert-freq")
    counts = {90.0: 0, 180.0: 0, 270.0: 0}
    n = 30_000
    for _ in range(n):
        out, skipped = build_perturbed_sample(base, draw, CFG)
        assert not skipped
        counts[out.latent_clean.azimuth_tag] += 1
    for rot in counts:
        assert abs(counts[rot] / n - 1 / 3) < 0.01


def test_perturbed_sample_contract():
    rng = np.random.default_rng(5)
    base = _sample(rng, CFG, bins=(0, 1))
    out, skipped = build_perturbed_sample(base, stream(1, "x"), CFG)
    assert not skipped
    assert out.perturbed and not out.primary_present
    assert out.views.primary_index is None
    assert azimuth_bin(out.latent_clean.azimuth_tag) not in base.occupied_bins()
    with pytest.raises(ValueError):
        build_perturbed_sample(out, stream(2, "y"), CFG)


def test_all_bins_occupied_skips():
    rng = np.random.default_rng(6)
    base = _sample(rng, CFG, bins=(0, 1, 2, 3))
    out, skipped = build_perturbed_sample(base, stream(3, "z"), CFG)
    assert skipped
    assert out is base and not out.perturbed


def test_perturbation_invariant_over_many_draws():
    rng = np.random.default_rng(7)
    draw = stream(11, "many")
    violations = 0
    for i in range(10_000):
        n_bins = int(draw.integers(1, 4))
        bins = tuple(sorted(set(draw.integers(0, 4, size=n_bins).tolist())))
        base = _sample(rng, CFG, bins=bins)
        out, skipped = build_perturbed_sample(base, draw, CFG)
        if skipped:
            continue
        if azimuth_bin(out.latent_clean.azimuth_tag) in out.occupied_bins():
            violations += 1
    assert violations == 0


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------


def _batch_from(samples):
    return Batch(
        z0=np.stack([s.latent_clean.tokens for s in samples]),
        feats=np.stack([s.views.features for s in samples]),
        primary_index=np.array([-1 if s.views.primary_index is None else s.views.primary_index
                                for s in samples]),
        perturbed=np.array([s.perturbed for s in samples]),
    )


def _grads(model, batch, seed=0):
    t = stream(seed, "t").random(batch.size)
    noise = stream(seed, "n").normal(size=batch.z0.shape)
    model.zero_grads()
    loss, _ = flow_matching_loss(model, batch, t, noise,
                                 ForwardOptions(mode="train", run_seed=seed, step=0))
    loss.backward()
    return loss


def test_fully_perturbed_batch_zeroes_and_freezes_ca_p():
    rng = np.random.default_rng(8)
    model = Model.create(CFG.model, 1)
    samples = [build_perturbed_sample(_sample(rng, CFG, bins=(0,), primary=0),
                                      stream(i, "p"), CFG)[0] for i in range(3)]
    batch = _batch_from(samples)
    _grads(model, batch)
    frozen = apply_freeze(model.params, batch.perturbed)
    assert frozen == {k for k in model.params if ".ca_p." in k}
    for name in frozen:
        g = model.params[name].grad
        assert g is None or np.array_equal(g, np.zeros_like(g))


def test_unperturbed_batch_freezes_nothing():
    rng = np.random.default_rng(9)
    model = Model.create(CFG.model, 2)
    batch = _batch_from([_sample(rng, CFG, bins=(0, 1)) for _ in range(3)])
    _grads(model, batch)
    assert apply_freeze(model.params, batch.perturbed) == set()


def test_mixed_batch_ca_p_gradient_equals_unperturbed_subset():
    """CA_p grads from a mixed batch == grads from the clean subset alone."""
    rng = np.random.default_rng(10)
    model = Model.create(CFG.model, 3)
    clean = [_sample(rng, CFG, bins=(0, 2)) for _ in range(2)]
    pert = [build_perturbed_sample(_sample(rng, CFG, bins=(0, 1)), stream(5, "m"), CFG)[0]]
    mixed = _batch_from(clean + pert)

    t = stream(0, "t").random(mixed.size)
    noise = stream(0, "n").normal(size=mixed.z0.shape)
    model.zero_grads()
    loss, _ = flow_matching_loss(model, mixed, t, noise,
                                 ForwardOptions(mode="train", run_seed=0, step=0))
    loss.backward()
    mixed_grads = {k: p.grad.copy() for k, p in model.params.items()
                   if ".ca_p." in k and p.grad is not None}

    clean_batch = _batch_from(clean)
    model.zero_grads()
    loss2, _ = flow_matching_loss(model, clean_batch, t[:2], noise[:2],
                                  ForwardOptions(mode="train", run_seed=0, step=0))
    loss2.backward()
    ratio = len(clean) / mixed.size  # mean-over-batch rescaling
    for k, g in mixed_grads.items():
        sub = model.params[k].grad
        sub = np.zeros_like(g) if sub is None else sub
        assert np.allclose(g, sub * ratio, rtol=1e-10, atol=1e-12), k


# ---------------------------------------------------------------------------
# upgrade
# ---------------------------------------------------------------------------


def test_upgrade_copies_parameters():
    single = Model.create(dataclasses.replace(CFG.model, arch="single"), 4)
    up = upgrade_from_single(single)
    H = CFG.model.heads
    for l in range(CFG.model.blocks):
        pre = f"blocks.{l}"
        assert np.array_equal(up.params[f"{pre}.router.w_agg"].data, np.full(H, 1.0 / H))
        for k in ("w_q", "q_gain", "w_k", "k_gain", "w_v", "w_o"):
            diff = np.abs(up.params[f"{pre}.ca_a.{k}"].data
                          - up.params[f"{pre}.ca_p.{k}"].data).max()
            assert diff == 0.0
        assert np.array_equal(up.params[f"{pre}.router.w_q"].data,
                              up.params[f"{pre}.ca_p.w_q"].data)
        assert np.array_equal(up.params[f"{pre}.router.ln_gain"].data,
                              up.params[f"{pre}.ln_ca.gain"].data)
    assert up.cfg.arch == "routed"
    with pytest.raises(ValueError):
        upgrade_from_single(up)


def test_upgrade_rejects_shape_mismatch():
    single = Model.create(dataclasses.replace(CFG.model, arch="single"), 5)
    bad_cfg = dataclasses.replace(CFG.model, feat_dim=12, arch="single")
    bad = Model(bad_cfg, single.params)  # config no longer matches the tensors
    with pytest.raises(ValueError):
        upgrade_from_single(bad)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def test_adamw_deterministic():
    def run():
        model = Model.create(CFG.model, 6)
        opt = AdamW(model.params, CFG.train)
        rng = np.random.default_rng(0)
        for step in range(3):
            for p in model.params.values():
                p.grad = rng.normal(size=p.data.shape)
            opt.step(1e-3)
        return {k: p.data.copy() for k, p in model.params.items()}

    a, b = run(), run()
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_adamw_skips_frozen_entirely():
    model = Model.create(CFG.model, 7)
    opt = AdamW(model.params, CFG.train)
    frozen = {k for k in model.params if ".ca_p." in k}
    before = {k: model.params[k].data.copy() for k in frozen}
    rng = np.random.default_rng(1)
    for step in range(5):
        for p in model.params.values():
            p.grad = rng.normal(size=p.data.shape)
        opt.step(1e-2, frozen)
    for k in frozen:
        assert np.array_equal(model.params[k].data, before[k])
        assert opt.t[k] == 0


def test_cosine_schedule_endpoints():
    tc = CFG.train
    assert abs(cosine_lr(tc, 0, 100) - tc.lr) < 1e-15
    assert abs(cosine_lr(tc, 100, 100) - tc.lr_final) < 1e-15
    assert cosine_lr(tc, 50, 100) < tc.lr


# ---------------------------------------------------------------------------
# train loop
# ---------------------------------------------------------------------------


def test_train_no_perturbation_when_p_zero(micro_cfg, micro_dataset):
    cfg = micro_run_config()
    cfg.train = dataclasses.replace(cfg.train, p_pert=0.0)
    model = Model.create(dataclasses.replace(cfg.model, arch="single"), 0)
    up = upgrade_from_single(model)
    log = train(up, micro_dataset.split("train"), cfg, phase="mv", steps=12)
    assert log.pert_total == 0
    assert all(row.split(",")[3] == "0.000000" for row in log.rows)


def test_train_deterministic_loss_curve(micro_cfg, micro_dataset):
    def run():
        cfg = micro_run_config(seed=5)
        model = Model.create(dataclasses.replace(cfg.model, arch="single"), 3)
        log = train(model, micro_dataset.split("train"), cfg, phase="single", steps=10)
        return [row.split(",")[1] for row in log.rows]

    assert run() == run()


def test_train_loss_decreases_on_micro_config(micro_cfg, micro_dataset):
    cfg = micro_run_config(seed=1)
    model = Model.create(dataclasses.replace(cfg.model, arch="single"), 1)
    log = train(model, micro_dataset.split("train"), cfg, phase="single", steps=160)
    losses = [float(r.split(",")[1]) for r in log.rows]
    assert np.mean(losses[-16:]) < 0.6 * np.mean(losses[:16])


def test_fully_perturbed_training_leaves_ca_p_bit_identical(micro_cfg, micro_dataset):
    # aux_max=2 keeps every sample eligible (primary bin + 2 aux bins can
    # never cover all four), so p_pert=1 really perturbs 100% of samples
    cfg = micro_run_config(seed=2)
    cfg.train = dataclasses.replace(cfg.train, p_pert=1.0, aux_max=2)
    single = Model.create(dataclasses.replace(cfg.model, arch="single"), 2)
    model = upgrade_from_single(single)
    before = {k: p.data.copy() for k, p in model.params.items() if ".ca_p." in k}
    train(model, micro_dataset.split("train"), cfg, phase="mv", steps=60)
    for k, v in before.items():
        assert np.array_equal(model.params[k].data, v), k


def test_assemble_batch_deterministic(micro_cfg, micro_dataset):
    split = micro_dataset.split("train")
    a = assemble_batch(split, micro_cfg, 7, "mv", 0.3)
    b = assemble_batch(split, micro_cfg, 7, "mv", 0.3)
    assert np.array_equal(a.z0, b.z0)
    assert np.array_equal(a.feats, b.feats)
    assert np.array_equal(a.perturbed, b.perturbed)
