"""Flow-matching training: two phases, orientation perturbation, freezing.

Phase one trains the single-stream baseline on one view per sample. Phase
two upgrades it (auxiliary stream and router initialized from the trained
cross attention) and finetunes on 1 primary + 1..4 auxiliary views.

With probability ``p_pert`` an eligible multi-view sample is perturbed:
its latent is quarter-rotated away from every input view's azimuth bin, the
primary designation is dropped so every token runs through the auxiliary
stream, and the primary-stream weights are frozen for that step. Samples
whose views cover all four bins admit no such rotation; they are counted as
skips and emitted unperturbed (eligibility is checked before the coin flip
so the realized perturbed fraction matches ``p_pert``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .config import RunConfig, TrainConfig
from .data import SplitData
from .model import (
    ForwardInfo,
    ForwardOptions,
    LatentTokens,
    Model,
    rotate_latent,
)
from .numerics import Tensor
from .rng import stream
from .world import Camera, ViewFeatureSet, azimuth_bin

__all__ = [
    "TrainingSample",
    "Batch",
    "TrainingDiverged",
    "flow_matching_loss",
    "candidate_rotations",
    "build_perturbed_sample",
    "apply_freeze",
    "AdamW",
    "upgrade_from_single",
    "cosine_lr",
    "assemble_batch",
    "train",
]

QUARTER_TURNS = (0.0, 90.0, 180.0, 270.0)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class TrainingSample:
    latent_clean: LatentTokens
    views: ViewFeatureSet
    perturbed: bool = False
    primary_present: bool = True

    def occupied_bins(self) -> set[int]:
        return {cam.bin for cam in self.views.cameras}


@dataclass
class Batch:
    """Stacked sample arrays; primary_index is -1 where the primary is absent."""

    z0: np.ndarray               # (B, N, D)
    feats: np.ndarray            # (B, V, S, feat_dim)
    primary_index: np.ndarray    # (B,)
    perturbed: np.ndarray        # (B,) bool
    skips: int = 0

    @property
    def size(self) -> int:
        return self.z0.shape[0]


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _as_batch(sample) -> Batch:
    if isinstance(sample, Batch):
        return sample
    primary = sample.views.primary_index
    return Batch(
        z0=sample.latent_clean.tokens[None],
        feats=sample.views.features[None],
        primary_index=np.array([-1 if primary is None else primary]),
        perturbed=np.array([sample.perturbed]),
    )


def flow_matching_loss(
    model: Model,
    sample: Batch | TrainingSample,
    t: np.ndarray,
    noise: np.ndarray,
    opts: ForwardOptions | None = None,
) -> tuple[Tensor, ForwardInfo]:
    """MSE between predicted velocity and (noise - clean) on the straight path.

    z_t = (1 - t) * z_clean + t * noise, target velocity u = noise - z_clean.
    """
    batch = _as_batch(sample)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if noise.shape != batch.z0.shape:
        raise ValueError(f"noise shape {noise.shape} vs latents {batch.z0.shape}")
    tb = t[:, None, None]
    z_t = (1.0 - tb) * batch.z0 + tb * noise
    target = noise - batch.z0
    vel, info = model.velocity(z_t, t, batch.feats, batch.primary_index, opts)
    loss = nx.mse(vel, Tensor(target))
    if not np.isfinite(loss.data):
        raise TrainingDiverged(opts.step if opts is not None else -1)
    return loss, info


# ---------------------------------------------------------------------------
# orientation perturbation
# ---------------------------------------------------------------------------


def candidate_rotations(sample: TrainingSample) -> list[float]:
    """Quarter turns that land the latent outside every occupied azimuth bin."""
    occupied = sample.occupied_bins()
    tag = sample.latent_clean.azimuth_tag
    return [rot for rot in QUARTER_TURNS
            if azimuth_bin((tag + rot) % 360.0) not in occupied]


def build_perturbed_sample(
    base: TrainingSample, rng: np.random.Generator, cfg: RunConfig
) -> tuple[TrainingSample, bool]:
    """Rotate the latent away from all view bins and drop the primary view.

    Returns (sample, skipped). When every rotation would align with some
    input view the base sample is returned unchanged and skipped is True.
    """
    if base.perturbed:
        raise ValueError("base sample is already perturbed")
    survivors = candidate_rotations(base)
    if not survivors:
        return base, True
    rot = survivors[int(rng.integers(len(survivors)))]
    latent = rotate_latent(base.latent_clean, rot, cfg.model)
    assert azimuth_bin(latent.azimuth_tag) not in base.occupied_bins()
    views = ViewFeatureSet(
        features=base.views.features,
        cameras=list(base.views.cameras),
        primary_index=None,
    )
    return TrainingSample(latent, views, perturbed=True, primary_present=False), False


# ---------------------------------------------------------------------------
# freezing and the optimizer
# ---------------------------------------------------------------------------


def apply_freeze(params: dict[str, Tensor], perturbed: np.ndarray) -> set[str]:
    """Names of parameters excluded from this step's update.

    Perturbed samples reach only the auxiliary stream, so their primary-
    stream gradient contribution is structurally zero; in a mixed batch the
    CA_p gradient already equals the unperturbed subset's gradient and
    nothing needs masking. Only when the whole batch is perturbed is CA_p
    frozen outright (gradients zeroed, optimizer update and weight decay
    skipped).
    """
    perturbed = np.asarray(perturbed, dtype=bool)
    if perturbed.size == 0 or not perturbed.all():
        return set()
    frozen = {name for name in params if ".ca_p." in name}
    for name in frozen:
        if params[name].grad is not None:
            params[name].grad[...] = 0.0
    return frozen


class AdamW:
    """Decoupled weight decay Adam on a name -> Tensor dict.

    Updates are deterministic functions of (gradients, step counts); frozen
    or gradient-less parameters are left completely untouched, including
    their moment buffers and decay.
    """

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, lr: float, frozen: set[str] = frozenset()) -> None:
        c = self.cfg
        for name, p in self.params.items():
            if name in frozen or p.grad is None:
                continue
            g = p.grad
            self.t[name] += 1
            tk = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - c.beta1) * (g - m)
            v += (1.0 - c.beta2) * (g * g - v)
            mhat = m / (1.0 - c.beta1**tk)
            vhat = v / (1.0 - c.beta2**tk)
            p.data -= lr * (mhat / (np.sqrt(vhat) + c.adam_eps) + c.weight_decay * p.data)


def cosine_lr(cfg: TrainConfig, step: int, total: int) -> float:
    if total <= 0:
        return cfg.lr
    frac = min(max(step / total, 0.0), 1.0)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# phase transition
# ---------------------------------------------------------------------------


def upgrade_from_single(single: Model) -> Model:
    """Single-stream checkpoint -> routed dual-stream model.

    CA_a starts as a bit-exact copy of the trained CA_p; the router's
    query/key projections, QK gains and pre-norm are copied from the same
    cross attention; head aggregation starts uniform at 1/heads. The
    backbone is untouched, so forced-primary routing reproduces the source
    model exactly.
    """
    import dataclasses as _dc

    cfg = single.cfg
    if cfg.arch == "routed":
        raise ValueError("model already has router/auxiliary parameters")
    hd = cfg.attn_width
    params: dict[str, Tensor] = {}
    for name, p in single.params.items():
        params[name] = Tensor(p.data.copy(), requires_grad=True)
    for l in range(cfg.blocks):
        pre = f"blocks.{l}"
        ca_p = {k.rsplit(".", 1)[-1]: params[f"{pre}.ca_p.{k.rsplit('.', 1)[-1]}"]
                for k in ("w_q", "q_gain", "w_k", "k_gain", "w_v", "w_o")}
        expected = {
            "w_q": (cfg.model_dim, hd), "q_gain": (hd,),
            "w_k": (cfg.feat_dim, hd), "k_gain": (hd,),
            "w_v": (cfg.feat_dim, hd), "w_o": (hd, cfg.model_dim),
        }
        for key, shape in expected.items():
            if ca_p[key].shape != shape:
                raise ValueError(
                    f"checkpoint/config mismatch at {pre}.ca_p.{key}: "
                    f"{ca_p[key].shape} vs {shape}"
                )
        for key in expected:
            params[f"{pre}.ca_a.{key}"] = Tensor(ca_p[key].data.copy(), requires_grad=True)
        params[f"{pre}.router.w_q"] = Tensor(ca_p["w_q"].data.copy(), requires_grad=True)
        params[f"{pre}.router.w_k"] = Tensor(ca_p["w_k"].data.copy(), requires_grad=True)
        params[f"{pre}.router.q_gain"] = Tensor(ca_p["q_gain"].data.copy(), requires_grad=True)
        params[f"{pre}.router.k_gain"] = Tensor(ca_p["k_gain"].data.copy(), requires_grad=True)
        params[f"{pre}.router.ln_gain"] = Tensor(params[f"{pre}.ln_ca.gain"].data.copy(),
                                                 requires_grad=True)
        params[f"{pre}.router.ln_bias"] = Tensor(params[f"{pre}.ln_ca.bias"].data.copy(),
                                                 requires_grad=True)
        params[f"{pre}.router.w_agg"] = Tensor(np.full(cfg.heads, 1.0 / cfg.heads),
                                               requires_grad=True)
    new_cfg = _dc.replace(cfg, arch="routed")
    return Model(new_cfg, params)


# ---------------------------------------------------------------------------
# batch assembly and the training loop
# ---------------------------------------------------------------------------


def _make_camera(az_el: np.ndarray) -> Camera:
    return Camera(azimuth=float(az_el[0]), elevation=float(az_el[1]))


def assemble_batch(
    split: SplitData,
    cfg: RunConfig,
    step: int,
    phase: str,
    p_pert: float,
) -> Batch:
    """Deterministic batch for one step, keyed by (run seed, "data", step).

    Multi-view batches share one auxiliary view count so sample tensors
    stack; the count itself is uniform on [aux_min, aux_max] per step.
    """
    rng = stream(cfg.seed, "data", step)
    tc = cfg.train
    B = tc.batch
    K = split.feats.shape[2]
    picks = rng.integers(0, len(split), size=B)
    single_view = phase == "single"
    n_aux = 0 if single_view else int(rng.integers(tc.aux_min, tc.aux_max + 1))

    z0 = np.empty((B,) + split.latents.shape[1:])
    feats = np.empty((B, 1 + n_aux) + split.feats.shape[3:])
    primary = np.zeros(B, dtype=np.int64)
    perturbed = np.zeros(B, dtype=bool)
    skips = 0

    for b, i in enumerate(picks):
        cam_rows = [(0, int(rng.integers(K)))]
        for _ in range(n_aux):
            cam_rows.append((int(rng.integers(4)), int(rng.integers(K))))
        view_feats = np.stack([split.feats[i, bn, kk] for bn, kk in cam_rows])
        cams = [_make_camera(split.cams[i, bn, kk]) for bn, kk in cam_rows]
        sample = TrainingSample(
            latent_clean=LatentTokens(split.latents[i], azimuth_tag=0.0),
            views=ViewFeatureSet(view_feats, cams, primary_index=0),
        )
        if not single_view:
            if not candidate_rotations(sample):
                skips += 1
            elif rng.random() < p_pert:
                sample, _ = build_perturbed_sample(sample, rng, cfg)
        z0[b] = sample.latent_clean.tokens
        feats[b] = sample.views.features
        primary[b] = -1 if sample.views.primary_index is None else sample.views.primary_index
        perturbed[b] = sample.perturbed
    return Batch(z0=z0, feats=feats, primary_index=primary, perturbed=perturbed, skips=skips)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    pert_total: int = 0
    skip_total: int = 0
    seen_total: int = 0

    HEADER = "step,loss,lr,pert_fraction,pert_skips,routing_entropy_mean"

    def add(self, step: int, loss: float, lr: float, batch: Batch, entropy: float) -> None:
        self.pert_total += int(batch.perturbed.sum())
        self.skip_total += batch.skips
        self.seen_total += batch.size
        eligible = max(self.seen_total - self.skip_total, 1)
        self.rows.append(
            f"{step},{loss:.8f},{lr:.8e},{self.pert_total / eligible:.6f},"
            f"{self.skip_total},{entropy:.6f}"
        )

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.HEADER + "\n")
            for row in self.rows:
                fh.write(row + "\n")


def train(model: Model, split: SplitData, cfg: RunConfig, phase: str,
          steps: int | None = None) -> TrainLog:
    """Run one training phase in place on ``model``; returns the step log.

    ``phase`` is "single" (one view, no router) or "mv". Divergence raises
    :class:`TrainingDiverged` before the parameters are damaged, so the live
    model still holds the last good weights.
    """
    if phase not in ("single", "mv"):
        raise ValueError(f"unknown phase {phase!r}")
    tc = cfg.train
    total = tc.steps_single if phase == "single" else tc.steps_mv
    if steps is not None:
        total = steps
    p_pert = tc.p_pert if (phase == "mv" and model.cfg.arch == "routed") else 0.0
    opt = AdamW(model.params, tc)
    log = TrainLog()
    routed = model.cfg.arch == "routed" and phase == "mv"

    for step in range(total):
        batch = assemble_batch(split, cfg, step, phase, p_pert)
        # cube-root draw (density 3t^2) balances the clean-latent head's
        # 1/t^2 effective weighting, so per-sample gradients stay comparable
        # across the path and the high-noise (conditioning) regime is covered
        t = stream(cfg.seed, "time", step).random(batch.size) ** (1.0 / 3.0)
        noise = stream(cfg.seed, "noise", step).normal(size=batch.z0.shape)
        opts = ForwardOptions(mode="train", tau=tc.tau, run_seed=cfg.seed, step=step,
                              collect_decisions=routed)
        model.zero_grads()
        loss, info = flow_matching_loss(model, batch, t, noise, opts)
        loss.backward()
        frozen = apply_freeze(model.params, batch.perturbed)
        opt.step(cosine_lr(tc, step, total), frozen)
        log.add(step, float(loss.data), cosine_lr(tc, step, total), batch,
                info.mean_entropy() if routed else 0.0)
    return log
