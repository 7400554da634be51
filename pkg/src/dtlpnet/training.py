"""Optimization loop.

A step is split in two halves. :func:`prepare_targets` runs without gradients
and produces everything the student is regressed onto (noisy labels, dual
teacher pseudo-labels, CutMix pairs, patch masks, teacher logits).
:func:`compute_losses` is then a differentiable function of the student
parameters alone, which is what the finite-difference checks exercise.

Randomness is derived from ``(seed, iteration)``, so a resumed run replays
the same batches, noise and masks as an uninterrupted one.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .config import TrainConfig
from .data import DatasetManifest, SampleCache
from .diffusion import DiffusionSchedule, ddim_pseudo_predict, diffusion_forward
from .masking import apply_cutmix, default_patch_size, make_cutmix_mask, make_patch_mask
from .network import ModelBundle, ModelConfig
from .propagation import loss_corr_u, pool_labels, propagated_logits
from .pseudo_labels import EnsembledPrediction, ensemble_predictions, reparameterize_smooth, single_teacher

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


def lr_schedule(lr_init, i, I, power=0.9):
    """Polynomial decay lr_init * (1 - i / I) ** power; i past I clamps to 0."""
    if I < 1:
        raise ValueError("max iterations must be >= 1")
    i = min(max(i, 0), I)
    return lr_init * (1.0 - i / I) ** power


def _dtype(cfg):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def one_hot(labels, K, dtype):
    return F.one_hot(labels.long(), K).movedim(-1, 1).to(dtype)


def iteration_rngs(seed, it):
    ss = np.random.SeedSequence([seed, it])
    np_rng = np.random.default_rng(ss.spawn(1)[0])
    gen = torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1)))
    return np_rng, gen


def _stream_index(seed, tag, k, n):
    # k-th element of an endless stream of per-epoch reshuffles of range(n)
    epoch, pos = divmod(k, n)
    perm = np.random.default_rng([seed, tag, epoch]).permutation(n)
    return int(perm[pos])


def batch_ids(spec, seed, it, bs_l, bs_u):
    """Sample ids for iteration ``it``: both pools cycled with a reshuffle per pass."""
    lab = [spec.labeled[_stream_index(seed, 1, it * bs_l + j, len(spec.labeled))] for j in range(bs_l)]
    unl = [spec.unlabeled[_stream_index(seed, 2, it * bs_u + j, len(spec.unlabeled))] for j in range(bs_u)] if bs_u else []
    return lab, unl


@dataclass
class StepBatch:
    x_l: torch.Tensor  # (B_l, 1, L, W, H)
    y_l: torch.Tensor  # (B_l, L, W, H) long
    x_u: torch.Tensor  # (B_u, 1, L, W, H)

    @classmethod
    def from_samples(cls, labeled, unlabeled, dtype=torch.float32):
        x_l = torch.stack([torch.as_tensor(s.image) for s in labeled])[:, None].to(dtype)
        y_l = torch.stack([torch.as_tensor(s.label.astype(np.int64)) for s in labeled])
        if unlabeled:
            x_u = torch.stack([torch.as_tensor(s.image) for s in unlabeled])[:, None].to(dtype)
        else:
            x_u = x_l[:0]
        return cls(x_l, y_l, x_u)


@dataclass
class Targets:
    y_l_oh: torch.Tensor
    t: torch.Tensor
    y_noisy: torch.Tensor
    unsupervised: bool = False
    p_u_xi: torch.Tensor | None = None
    p_u_psi: torch.Tensor | None = None
    pseudo: EnsembledPrediction | None = None
    y_t_oh: torch.Tensor | None = None
    x_mix: torch.Tensor | None = None
    y_mix: torch.Tensor | None = None
    mask_u: torch.Tensor | None = None
    mask_l: torch.Tensor | None = None
    teacher_logits_u: torch.Tensor | None = None
    teacher_logits_l: torch.Tensor | None = None
    mix_partners: list = field(default_factory=list)


def _patch(cfg, shape):
    return cfg.patch_size if cfg.patch_size else default_patch_size(shape)


@torch.no_grad()
def prepare_targets(bundle: ModelBundle, schedule: DiffusionSchedule, batch: StepBatch, cfg: TrainConfig,
                    np_rng: np.random.Generator, gen: torch.Generator) -> Targets:
    K = bundle.cfg.num_classes
    dtype = batch.x_l.dtype
    B_l = batch.x_l.shape[0]
    y_l_oh = one_hot(batch.y_l, K, dtype)
    t = torch.randint(0, schedule.T, (B_l,), generator=gen)
    eps = torch.randn(y_l_oh.shape, generator=gen, dtype=dtype)
    tg = Targets(y_l_oh, t, diffusion_forward(y_l_oh, t, eps, schedule))
    if cfg.supervised_only:
        return tg
    tg.unsupervised = True
    x_u = batch.x_u
    shape = tuple(x_u.shape[2:])

    # teacher 1: diffusion sampling + supervised branch, reparameterized and smoothed
    tg.p_u_xi = ddim_pseudo_predict(bundle, x_u, schedule, gen)
    psi_u_logits = bundle.forward_plain(x_u, "psi")
    tg.p_u_psi = torch.softmax(psi_u_logits, 1)
    q1 = reparameterize_smooth(tg.p_u_xi, psi_u_logits, cfg.gumbel_tau, cfg.blur_sigma, gen, cfg.gumbel_on)
    # teacher 2: mean teacher
    need_l_teacher = cfg.use_rec
    x_t = torch.cat([x_u, batch.x_l]) if need_l_teacher else x_u
    t_logits = bundle.forward_plain(x_t, "theta", use_teacher=True)
    tg.teacher_logits_u = t_logits[: len(x_u)]
    if need_l_teacher:
        tg.teacher_logits_l = t_logits[len(x_u):]
    q2 = torch.softmax(tg.teacher_logits_u, 1)
    if cfg.teachers == "both":
        tg.pseudo = ensemble_predictions(q1, q2, weight_base=2.0 if cfg.entropy_weight == "pow2" else math.e)
    else:
        tg.pseudo = single_teacher(q1 if cfg.teachers == "t1" else q2)
    tg.y_t_oh = one_hot(tg.pseudo.hard, K, dtype)

    if cfg.use_mix:
        # pool of mixing partners: every other volume in the batch, labeled ones
        # carrying ground truth and unlabeled ones their pseudo-label
        pool_x = torch.cat([batch.x_l, x_u])
        pool_y = torch.cat([batch.y_l, tg.pseudo.hard])
        xs, ys = [], []
        for i in range(len(x_u)):
            own = B_l + i
            j = int(np_rng.choice([k for k in range(len(pool_x)) if k != own]))
            tg.mix_partners.append(j)
            M = torch.as_tensor(make_cutmix_mask(shape, (cfg.cutmix_min, cfg.cutmix_max), np_rng).mask)
            xm, ym = apply_cutmix(x_u[i], pool_x[j], tg.pseudo.hard[i], pool_y[j], M)
            xs.append(xm)
            ys.append(ym)
        tg.x_mix = torch.stack(xs)
        tg.y_mix = one_hot(torch.stack(ys), K, dtype)

    if cfg.use_mic or cfg.use_rec:
        b = _patch(cfg, shape)
        tg.mask_u = torch.stack([
            torch.as_tensor(make_patch_mask(shape, cfg.mask_ratio, b, np_rng).mask) for _ in range(len(x_u))
        ])[:, None].to(dtype)
        if cfg.use_rec:
            tg.mask_l = torch.stack([
                torch.as_tensor(make_patch_mask(shape, cfg.mask_ratio, b, np_rng).mask) for _ in range(B_l)
            ])[:, None].to(dtype)
    return tg


def per_class_batch_dice(probs, target_oh, eps=L.SMOOTH):
    dims = (0,) + tuple(range(2, probs.dim()))
    inter = (probs * target_oh).sum(dims)
    return ((2 * inter + eps) / (probs.sum(dims) + target_oh.sum(dims) + eps)).tolist()


def _split_feats(feats, sizes):
    parts = [torch.split(f, sizes) for f in feats]
    return [list(p) for p in zip(*parts)]


def compute_losses(bundle: ModelBundle, batch: StepBatch, tg: Targets, cfg: TrainConfig, weights_fn=None):
    """Differentiable loss components for one batch, plus step diagnostics.

    ``weights_fn`` maps the current per-class Dice of the diffusion branch to
    the difficulty weights; it defaults to unit weights.
    """
    K = bundle.cfg.num_classes
    dtype = batch.x_l.dtype
    zero = torch.zeros((), dtype=dtype)
    comps = {k: zero for k in L.COMPONENTS}
    info = {}

    logits_xi = bundle.forward_labeled_diffusion(batch.x_l, tg.y_noisy, tg.t)
    comps["deno"] = L.loss_deno(torch.softmax(logits_xi, 1), tg.y_l_oh, torch.log_softmax(logits_xi, 1))
    lam = per_class_batch_dice(torch.softmax(logits_xi.detach(), 1), tg.y_l_oh)
    w = weights_fn(lam) if weights_fn is not None else [1.0] * K
    info["dice_xi"], info["class_weights"] = lam, list(w)

    # every plain student input goes through the shared encoder in one pass
    inputs = {"l": batch.x_l}
    if tg.unsupervised:
        inputs["u"] = batch.x_u
        if cfg.use_mix:
            inputs["mix"] = tg.x_mix
        if cfg.use_mic or cfg.use_rec:
            inputs["u_mask"] = batch.x_u * tg.mask_u
        if cfg.use_rec:
            inputs["l_mask"] = batch.x_l * tg.mask_l
    names = list(inputs)
    sizes = [len(v) for v in inputs.values()]
    feats = dict(zip(names, _split_feats(bundle.encoder(torch.cat(list(inputs.values()))), sizes)))

    logits_psi_l = bundle.decoder_psi(feats["l"])
    comps["diff"] = L.loss_diff(torch.softmax(logits_psi_l, 1), tg.y_l_oh, w)

    if tg.unsupervised:
        theta_names = names[1:]
        theta_feats = [torch.cat(fs) for fs in zip(*[feats[n] for n in theta_names])]
        theta_logits = dict(zip(theta_names, torch.split(bundle.decoder_theta(theta_feats), sizes[1:])))
        lu = theta_logits["u"]
        p_u = torch.softmax(lu, 1)
        comps["u"] = L.loss_u(p_u, tg.y_t_oh, torch.log_softmax(lu, 1))
        if cfg.use_mix:
            lm = theta_logits["mix"]
            comps["mix"] = L.loss_mix(torch.softmax(lm, 1), tg.y_mix, torch.log_softmax(lm, 1))
        if cfg.use_mic:
            lk = theta_logits["u_mask"]
            comps["mic"] = L.loss_mic(torch.softmax(lk, 1), tg.y_t_oh, torch.log_softmax(lk, 1))
        if cfg.use_rec:
            student = torch.cat([theta_logits["u_mask"], theta_logits["l_mask"]])
            teacher = torch.cat([tg.teacher_logits_u, tg.teacher_logits_l])
            comps["rec"] = L.loss_rec(student, teacher)
        if cfg.use_kd:
            comps["kd"] = L.loss_kd(p_u, tg.p_u_xi, tg.p_u_psi)
        if cfg.use_corr:
            grid = bundle.cfg.corr_grid
            e1u, e2u = bundle.corr_head(feats["u"][-1])
            coor_u = propagated_logits(lu, e1u, e2u, grid, cfg.corr_scale_outside)
            e1l, e2l = bundle.corr_head(feats["l"][-1])
            coor_l = propagated_logits(logits_psi_l, e1l, e2l, grid, cfg.corr_scale_outside)
            comps["corr"] = (loss_corr_u(coor_u, pool_labels(tg.pseudo.hard, K, grid))
                             + loss_corr_u(coor_l, pool_labels(tg.y_l_oh.argmax(1), K, grid)))
    return comps, info


def check_finite(comps):
    bad = [k for k, v in comps.items() if not torch.isfinite(v).all()]
    if bad:
        raise TrainingError("non-finite loss components: " + ", ".join(
            f"{k}={float(comps[k])}" for k in bad))


@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    tracker: L.DifficultyTracker
    schedule: DiffusionSchedule
    max_iterations: int
    iteration: int = 0
    log: list = field(default_factory=list)


def build_state(cfg: TrainConfig, num_classes: int, max_iterations: int, model_cfg: ModelConfig | None = None):
    model_cfg = model_cfg or cfg.model_config(num_classes)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        bundle = ModelBundle(model_cfg).to(_dtype(cfg))
    opt = torch.optim.SGD(list(bundle.student_parameters()), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    tracker = L.DifficultyTracker(num_classes, cfg.drs_window, cfg.drs_alpha, cfg.drs_w_min,
                                  lambda_weight=cfg.drs_lambda_weight)
    schedule = DiffusionSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end, cfg.ddim_steps)
    return TrainState(cfg, bundle, opt, tracker, schedule, max_iterations)


def train_step(state: TrainState, batch: StepBatch):
    """One optimization step; returns the logged row."""
    cfg = state.config
    it = state.iteration
    np_rng, gen = iteration_rngs(cfg.seed, it)
    bundle = state.bundle
    tg = prepare_targets(bundle, state.schedule, batch, cfg, np_rng, gen)
    comps, info = compute_losses(bundle, batch, tg, cfg, lambda lam: state.tracker.update(lam).weights())
    check_finite(comps)
    total = L.total_loss(comps, cfg.weights)
    lr = lr_schedule(cfg.lr, it, state.max_iterations, cfg.lr_power)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    if tg.unsupervised:
        bundle.ema_update(cfg.gamma_ema)
    state.iteration += 1
    row = {"iteration": it, "lr": lr, "total": float(total.detach())}
    row.update({k: float(v.detach()) for k, v in comps.items()})
    row.update({f"w_{k}": v for k, v in cfg.weights.__dict__.items()})
    row.update({f"drs_w{k}": v for k, v in enumerate(info["class_weights"])})
    state.log.append(row)
    return row


def save_checkpoint(state: TrainState, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "training",
        "iteration": state.iteration,
        "max_iterations": state.max_iterations,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "model_config": state.bundle.cfg.__dict__,
        "model": state.bundle.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "tracker": state.tracker.state_dict(),
        "schedule": state.schedule.to_dict(),
        "log": state.log,
    }, path)
    return path


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if ck.get("format_version") != CHECKPOINT_VERSION or ck.get("kind") != "training":
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} training checkpoint")
    saved = TrainConfig.from_dict(ck["config"])
    if saved.hash() != ck["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    cfg = config or saved
    state = build_state(cfg, ck["model_config"]["num_classes"], ck["max_iterations"],
                        ModelConfig(**ck["model_config"]))
    state.bundle.load_state_dict(ck["model"])
    state.optimizer.load_state_dict(ck["optimizer"])
    state.tracker.load_state_dict(ck["tracker"])
    state.iteration = ck["iteration"]
    state.log = list(ck["log"])
    return state


def export_inference(state: TrainState, path):
    """Encoder plus the theta decoder (the supervised decoder when theta was
    never trained)."""
    source = "psi" if state.config.supervised_only else "theta"
    path = Path(path)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "kind": "inference",
        "decoder_source": source,
        "model_config": state.bundle.cfg.__dict__,
        "config_hash": state.config.hash(),
        "state": state.bundle.inference_state(source),
    }, path)
    return path


def write_loss_csv(rows, path):
    if not rows:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


@dataclass
class TrainResult:
    state: TrainState
    checkpoints: list
    export_path: Path
    loss_csv: Path


def resolve_iterations(cfg: TrainConfig, n_train):
    if cfg.max_iterations:
        return cfg.max_iterations
    per_epoch = cfg.iters_per_epoch or n_train
    return max(1, cfg.epochs * per_epoch)


def run_training(cfg: TrainConfig, manifest: DatasetManifest | None = None, resume=None,
                 stop_at: int | None = None, progress=None) -> TrainResult:
    """Train to ``max_iterations`` (or ``stop_at``), writing periodic checkpoints,
    ``losses.csv`` and the inference export."""
    manifest = manifest or DatasetManifest.load(cfg.data_dir)
    spec = manifest.split(cfg.split)
    need_u = 0 if cfg.supervised_only else cfg.unlabeled_bs
    if len(spec.labeled) < cfg.labeled_bs or len(spec.unlabeled) < need_u:
        raise TrainingError(f"split {cfg.split!r} too small for batch {cfg.labeled_bs}+{cfg.unlabeled_bs}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_checkpoint(resume)
        if state.config.hash() != cfg.hash():
            log.warning("resuming with the checkpoint's config, not the one given")
        cfg = state.config
    else:
        I = resolve_iterations(cfg, len(spec.labeled) + len(spec.unlabeled))
        state = build_state(cfg, manifest.num_classes, I)
    end = state.max_iterations if stop_at is None else min(stop_at, state.max_iterations)
    cache = SampleCache(manifest)
    dtype = _dtype(cfg)
    checkpoints = []
    while state.iteration < end:
        lab, unl = batch_ids(spec, cfg.seed, state.iteration, cfg.labeled_bs, need_u)
        batch = StepBatch.from_samples([cache.get(i) for i in lab], [cache.get(i) for i in unl], dtype)
        row = train_step(state, batch)
        if progress:
            progress(row)
        if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0 and state.iteration < end:
            checkpoints.append(save_checkpoint(state, out / f"checkpoint_{state.iteration:06d}.pt"))
    checkpoints.append(save_checkpoint(state, out / f"checkpoint_{state.iteration:06d}.pt"))
    loss_csv = out / "losses.csv"
    write_loss_csv(state.log, loss_csv)
    export = export_inference(state, out / "inference.pt")
    return TrainResult(state, checkpoints, export, loss_csv)
