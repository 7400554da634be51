"""Dual-teacher pseudo-labels.

Teacher 1 mixes a Gumbel-perturbed diffusion map with the supervised decoder's
softmax and smooths the result; teacher 2 is the EMA model. The two are fused
per voxel with weights that halve for every bit of entropy.

All maps are channel-first: (K, L, W, H) or batched (B, K, L, W, H).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

LOG2 = math.log(2.0)


@dataclass
class EnsembledPrediction:
    probs: torch.Tensor
    hard: torch.Tensor
    entropy_t1: torch.Tensor
    entropy_t2: torch.Tensor


def sample_gumbel(shape, generator=None, dtype=None, eps=1e-20):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + eps) + eps)


def gumbel_softmax(scores, tau=1.0, dim=0, generator=None, noise=None):
    """softmax((scores + g) / tau) with g ~ Gumbel(0, 1); ``noise`` overrides g."""
    if tau <= 0:
        raise ValueError("Gumbel-Softmax temperature must be > 0")
    g = sample_gumbel(scores.shape, generator, scores.dtype) if noise is None else noise
    return torch.softmax((scores + g) / tau, dim=dim)


def gaussian_kernel1d(sigma, radius=1, dtype=None):
    x = torch.arange(-radius, radius + 1, dtype=dtype or torch.get_default_dtype())
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur3d(maps, sigma, radius=1):
    """Channelwise separable blur of (B, C, L, W, H) with a (2r+1)^3 kernel."""
    if sigma <= 0:
        return maps
    C = maps.shape[1]
    k = gaussian_kernel1d(sigma, radius, maps.dtype)
    out = maps
    for axis in range(3):
        shape = [1, 1, 1, 1, 1]
        shape[2 + axis] = len(k)
        weight = k.reshape(shape).repeat(C, 1, 1, 1, 1)
        pad = [0] * 6
        pad[2 * (2 - axis)] = pad[2 * (2 - axis) + 1] = radius
        out = F.conv3d(F.pad(out, pad, mode="replicate"), weight, groups=C)
    return out


def _renormalize(p, dim):
    s = p.sum(dim=dim, keepdim=True)
    if (s <= 0).any() or not torch.isfinite(s).all():
        raise ValueError("probability map has a voxel that cannot be renormalized")
    return p / s


def reparameterize_smooth(p_xi, psi_logits, tau=1.0, sigma=1.0, generator=None,
                          gumbel_on="xi", noise=None):
    """Teacher-1 map: 0.5 * (GumbelSoftmax(p_xi) + Softmax(psi_logits)), blurred
    and renormalized.

    ``gumbel_on="psi"`` perturbs the supervised branch instead:
    0.5 * (p_xi + GumbelSoftmax(psi_logits)).
    """
    if p_xi.shape != psi_logits.shape:
        raise ValueError(f"shape mismatch {tuple(p_xi.shape)} vs {tuple(psi_logits.shape)}")
    single = p_xi.dim() == 4
    if single:
        p_xi, psi_logits = p_xi[None], psi_logits[None]
        noise = None if noise is None else noise[None]
    if gumbel_on == "xi":
        q = 0.5 * (gumbel_softmax(p_xi, tau, 1, generator, noise) + torch.softmax(psi_logits, dim=1))
    elif gumbel_on == "psi":
        q = 0.5 * (p_xi + gumbel_softmax(psi_logits, tau, 1, generator, noise))
    else:
        raise ValueError(f"gumbel_on must be 'xi' or 'psi', got {gumbel_on!r}")
    q = _renormalize(gaussian_blur3d(q, sigma), dim=1)
    return q[0] if single else q


def entropy_map(probs, dim=None):
    """Per-voxel entropy in bits, 0 log 0 := 0."""
    dim = (0 if probs.dim() == 4 else 1) if dim is None else dim
    return -torch.xlogy(probs, probs).sum(dim=dim) / LOG2


def harden(probs, dim=None):
    # torch.argmax returns the first maximal index, i.e. the lowest class on ties
    dim = (0 if probs.dim() == 4 else 1) if dim is None else dim
    return probs.argmax(dim=dim)


def fuse(q1, q2, h1, h2, dim=0, weight_base=2.0):
    """(w1 q1 + w2 q2) / (w1 + w2) with w = weight_base ** -h, per voxel."""
    if weight_base <= 1:
        raise ValueError(f"weight base must exceed 1, got {weight_base}")
    lb = math.log(weight_base)
    w1 = torch.exp(-lb * h1).unsqueeze(dim)
    w2 = torch.exp(-lb * h2).unsqueeze(dim)
    return (w1 * q1 + w2 * q2) / (w1 + w2)


def ensemble_predictions(q1, q2, dim=None, weight_base=2.0) -> EnsembledPrediction:
    """Entropy-weighted per-voxel fusion of two teacher maps.

    Entropies are in bits, so the default base 2 halves a teacher's weight
    per bit of uncertainty; ``weight_base=math.e`` applies exp(-H_bits).
    """
    if q1.shape != q2.shape:
        raise ValueError(f"teacher maps differ in shape: {tuple(q1.shape)} vs {tuple(q2.shape)}")
    dim = (0 if q1.dim() == 4 else 1) if dim is None else dim
    h1, h2 = entropy_map(q1, dim), entropy_map(q2, dim)
    p = fuse(q1, q2, h1, h2, dim, weight_base)
    return EnsembledPrediction(p, harden(p, dim), h1, h2)


def single_teacher(q) -> EnsembledPrediction:
    """Ablation path: one teacher, no fusion."""
    h = entropy_map(q)
    return EnsembledPrediction(q, harden(q), h, h)
