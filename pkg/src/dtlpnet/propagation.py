"""Voxel-level label propagation through a feature correlation map."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .losses import dice_ce


def correlation_map(e1, e2, scale_outside=False):
    """Row-stochastic (P, P) map softmax(e1^T e2 / sqrt(D)).

    Accepts (D, P) or batched (B, D, P) features. ``scale_outside`` applies
    the 1/sqrt(D) after the softmax instead, which no longer sums rows to 1.
    """
    if e1.shape != e2.shape:
        raise ValueError(f"feature shapes differ: {tuple(e1.shape)} vs {tuple(e2.shape)}")
    D = e1.shape[-2]
    logits = e1.transpose(-1, -2) @ e2
    if scale_outside:
        return torch.softmax(logits, dim=-1) / math.sqrt(D)
    return torch.softmax(logits / math.sqrt(D), dim=-1)


def propagate(pred, C):
    """Spread (K, P) scores through C: output position j is the row-j
    weighted combination of all input positions."""
    if pred.shape[-1] != C.shape[-1] or C.shape[-1] != C.shape[-2]:
        raise ValueError(f"scores with {pred.shape[-1]} positions vs correlation map {tuple(C.shape)}")
    return pred @ C.transpose(-1, -2)


def pool_logits(logits, grid):
    """(B, K, L, W, H) -> (B, K, P) by average pooling to the correlation grid."""
    return F.adaptive_avg_pool3d(logits, grid).flatten(2)


def pool_labels(labels, num_classes, grid):
    """Majority vote of an integer (B, L, W, H) map per pooled cell,
    lowest class index on ties. Returns (B, P) long."""
    oh = F.one_hot(labels.long(), num_classes).movedim(-1, 1).to(torch.float64)
    votes = F.adaptive_avg_pool3d(oh, grid).flatten(2)
    return votes.argmax(dim=1)


def loss_corr_u(p_coor_logits, target):
    """DiceCE between softmaxed propagated scores (B, K, P) and pooled hard
    targets (B, P)."""
    K = p_coor_logits.shape[1]
    oh = F.one_hot(target.long(), K).movedim(-1, 1).to(p_coor_logits.dtype)
    return dice_ce(torch.softmax(p_coor_logits, 1), oh, torch.log_softmax(p_coor_logits, 1))


def loss_corr(p_coor_u, y_t, p_coor_l, y_l):
    return loss_corr_u(p_coor_u, y_t) + loss_corr_u(p_coor_l, y_l)


def propagated_logits(logits, e1, e2, grid, scale_outside=False):
    C = correlation_map(e1, e2, scale_outside)
    return propagate(pool_logits(logits, grid), C)
