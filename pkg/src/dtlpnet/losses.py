"""Training objectives.

Probability maps are batched and channel-first, (B, K, *spatial). Every
DiceCE-style loss is evaluated per sample and averaged over the batch.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import torch

SMOOTH = 1e-5
_CLAMP = 1e-7


def _flat(x):
    return x.reshape(x.shape[0], x.shape[1], -1)


def _check(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


def dice_loss_per_sample(pred, target, eps=SMOOTH):
    """1 - mean_k (2 sum(p q) + eps) / (sum p + sum q + eps), one value per sample."""
    p, q = _flat(pred), _flat(target)
    dice = (2 * (p * q).sum(-1) + eps) / (p.sum(-1) + q.sum(-1) + eps)
    return 1 - dice.mean(dim=1)


def ce_per_sample(pred, target, log_probs=None):
    """Natural-log cross entropy averaged over voxels."""
    if log_probs is None:
        log_probs = torch.log(pred.clamp_min(1e-12))
    return -(_flat(target) * _flat(log_probs)).sum(1).mean(-1)


def dice_ce_per_sample(pred, target, log_probs=None, eps=SMOOTH):
    _check(pred, target)
    return 0.5 * (ce_per_sample(pred, target, log_probs) + dice_loss_per_sample(pred, target, eps))


def dice_ce(pred, target, log_probs=None, eps=SMOOTH):
    """0.5 * (CE + Dice). Accepts a single (K, ...) map or a batch; batches
    are averaged over samples."""
    if pred.dim() == 4:
        pred, target = pred[None], target[None]
        log_probs = None if log_probs is None else log_probs[None]
    _check(pred, target)
    return dice_ce_per_sample(pred, target, log_probs, eps).mean()


def batch_mean_dice_ce(pred, target, log_probs=None):
    if pred.shape[0] == 0:
        raise ValueError("empty batch")
    return dice_ce(pred, target, log_probs)


def loss_deno(p_l_xi, y_onehot, log_probs=None):
    return batch_mean_dice_ce(p_l_xi, y_onehot, log_probs)


def loss_u(p_u_theta, y_t_onehot, log_probs=None):
    return batch_mean_dice_ce(p_u_theta, y_t_onehot, log_probs)


def loss_mix(p_mix, y_mix_onehot, log_probs=None):
    return batch_mean_dice_ce(p_mix, y_mix_onehot, log_probs)


def loss_mic(p_masked, y_t_onehot, log_probs=None):
    # targets come from the unmasked volume; all voxels count
    return batch_mean_dice_ce(p_masked, y_t_onehot, log_probs)


def per_class_dice_ce(pred, target, eps=SMOOTH):
    """One-vs-rest DiceCE per class channel, shape (B, K)."""
    _check(pred, target)
    p = _flat(pred).clamp(_CLAMP, 1 - _CLAMP)
    q = _flat(target)
    bce = -(q * torch.log(p) + (1 - q) * torch.log(1 - p)).mean(-1)
    dice = 1 - (2 * (p * q).sum(-1) + eps) / (p.sum(-1) + q.sum(-1) + eps)
    return 0.5 * (bce + dice)


def loss_diff(p_l_psi, y_onehot, class_weights=None):
    """(1/N)(1/K) sum_i sum_k w_k DiceCE_k."""
    if p_l_psi.shape[0] == 0:
        raise ValueError("empty batch")
    per = per_class_dice_ce(p_l_psi, y_onehot)
    if class_weights is None:
        class_weights = torch.ones(per.shape[1], dtype=per.dtype)
    w = torch.as_tensor(class_weights, dtype=per.dtype)
    return (per * w[None]).mean()


def loss_rec(student_logits, teacher_logits, eps=1e-8):
    """Mean over samples of ||s - t||^2 / ||t||^2. Teacher logits are detached."""
    _check(student_logits, teacher_logits)
    if student_logits.shape[0] == 0:
        raise ValueError("empty batch")
    t = teacher_logits.detach().reshape(teacher_logits.shape[0], -1)
    s = student_logits.reshape(student_logits.shape[0], -1)
    num = ((s - t) ** 2).sum(-1)
    den = (t ** 2).sum(-1).clamp_min(eps)
    return (num / den).mean()


def soft_dice_per_sample(p, q, eps=SMOOTH):
    _check(p, q)
    pf, qf = _flat(p), _flat(q)
    score = (2 * (pf * qf).sum(-1) + eps) / ((pf ** 2).sum(-1) + (qf ** 2).sum(-1) + eps)
    return 1 - score.mean(1)


def soft_dice(p, q, eps=SMOOTH):
    if p.dim() == 4:
        p, q = p[None], q[None]
    return soft_dice_per_sample(p, q, eps).mean()


def loss_kd(p_u_theta, p_u_xi, p_u_psi):
    if p_u_theta.shape[0] == 0:
        raise ValueError("empty batch")
    return (soft_dice_per_sample(p_u_theta, p_u_xi.detach())
            + soft_dice_per_sample(p_u_theta, p_u_psi.detach())).mean()


@dataclass
class LossWeights:
    alpha: float = 2.0  # masked-modeling consistency
    beta: float = 0.1  # knowledge distillation
    gamma: float = 0.2  # masked reconstruction
    eta: float = 1.2  # correlation
    u: float = 0.0  # plain unsupervised term, not part of the published total

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")


COMPONENTS = ("deno", "diff", "u", "mix", "mic", "kd", "rec", "corr")


def total_loss(components, weights: LossWeights):
    c = components
    zero = 0.0
    return (c.get("deno", zero) + c.get("diff", zero) + c.get("mix", zero)
            + weights.alpha * c.get("mic", zero) + weights.beta * c.get("kd", zero)
            + weights.gamma * c.get("rec", zero) + weights.eta * c.get("corr", zero)
            + weights.u * c.get("u", zero))


class DifficultyTracker:
    """Per-class difficulty weights from the trailing Dice history.

    Over the last ``window`` transitions, regressions (Dice going down) feed
    ``du`` and improvements feed ``dl``; ``d = du / dl`` and the class weight
    is ``w_lambda * d ** alpha`` floored at ``w_min``.
    """

    def __init__(self, num_classes, window=50, alpha=0.2, w_min=0.1, eps=1e-4, lambda_weight="inverse_dice"):
        if lambda_weight not in ("inverse_dice", "constant"):
            raise ValueError(f"unknown lambda_weight {lambda_weight!r}")
        self.num_classes = num_classes
        self.window = window
        self.alpha = alpha
        self.w_min = w_min
        self.eps = eps
        self.lambda_weight = lambda_weight
        self.history = deque(maxlen=window + 1)

    def update(self, lam):
        lam = [max(float(v), self.eps) for v in lam]
        if len(lam) != self.num_classes:
            raise ValueError(f"expected {self.num_classes} Dice values, got {len(lam)}")
        self.history.append(lam)
        return self

    def accumulators(self):
        K = self.num_classes
        du, dl = [0.0] * K, [0.0] * K
        hist = list(self.history)
        for prev, cur in zip(hist[:-1], hist[1:]):
            for k in range(K):
                delta = cur[k] - prev[k]
                ratio = math.log(cur[k] / prev[k])
                du[k] += min(delta, 0.0) * ratio
                dl[k] += max(delta, 0.0) * ratio
        return du, dl

    def difficulty(self):
        du, dl = self.accumulators()
        return [u / l if l > 0 else 0.0 for u, l in zip(du, dl)]

    @property
    def warm(self):
        return len(self.history) >= 2

    def weights(self):
        if not self.warm:
            return [1.0] * self.num_classes
        lam = self.history[-1]
        if self.lambda_weight == "constant":
            wl = [1.0] * self.num_classes
        else:
            inv = [1.0 - v for v in lam]
            s = max(sum(inv), self.eps)
            wl = [self.num_classes * v / s for v in inv]
        return [max(w * d ** self.alpha, self.w_min) for w, d in zip(wl, self.difficulty())]

    def state_dict(self):
        return {"history": [list(h) for h in self.history]}

    def load_state_dict(self, state):
        self.history = deque((list(h) for h in state["history"]), maxlen=self.window + 1)
