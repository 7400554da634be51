"""Label-space diffusion: forward noising and a DDIM sampler that turns the
diffusion decoder into a pseudo-label generator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class DiffusionSchedule:
    alpha_bar: torch.Tensor  # (T,), alpha_bar[0] == 1
    ddim_steps: int = 10

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.dim() != 1 or len(ab) < 2:
            raise ValueError("alpha_bar must be a 1D sequence with at least two steps")
        if (ab <= 0).any() or (ab > 1).any() or (ab[1:] > ab[:-1]).any():
            raise ValueError("alpha_bar must be in (0, 1] and nonincreasing")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")

    @property
    def T(self):
        return len(self.alpha_bar)

    @classmethod
    def linear(cls, T=1000, beta_start=1e-4, beta_end=0.02, ddim_steps=10):
        betas = torch.linspace(beta_start, beta_end, T - 1, dtype=torch.float64)
        ab = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1 - betas, 0)])
        return cls(ab, ddim_steps)

    def ddim_timesteps(self):
        """Descending steps T-1 -> 0; ``ddim_steps`` updates between them."""
        seq = np.linspace(self.T - 1, 0, self.ddim_steps + 1).round().astype(int)
        return [int(s) for s in seq]

    def to_dict(self):
        return {"alpha_bar": self.alpha_bar.tolist(), "ddim_steps": self.ddim_steps}


def _gather(ab, t, ndim, dtype):
    return ab.to(dtype)[t].reshape((-1,) + (1,) * (ndim - 1))


def diffusion_forward(y0, t, eps, schedule: DiffusionSchedule):
    """y_t = sqrt(ab_t) * y0 + sqrt(1 - ab_t) * eps.

    ``t`` is an int for a single map or a (B,) tensor for a batch.
    """
    if eps.shape != y0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != label shape {tuple(y0.shape)}")
    t_ = torch.as_tensor(t, dtype=torch.long)
    if (t_ < 0).any() or (t_ >= schedule.T).any():
        raise ValueError(f"time step out of range [0, {schedule.T})")
    if t_.dim() == 0:
        ab = schedule.alpha_bar[t_].to(y0.dtype)
    else:
        ab = _gather(schedule.alpha_bar, t_, y0.dim(), y0.dtype)
    return ab.sqrt() * y0 + (1 - ab).sqrt() * eps


@torch.no_grad()
def ddim_pseudo_predict(bundle, x, schedule: DiffusionSchedule, generator=None):
    """Deterministic (eta = 0) DDIM over the diffusion decoder, started from
    pure noise. Returns per-voxel class probabilities."""
    B = x.shape[0]
    K = bundle.cfg.num_classes
    y = torch.randn((B, K) + tuple(x.shape[2:]), generator=generator, dtype=x.dtype)
    steps = schedule.ddim_timesteps()
    logits = None
    for t, t_prev in zip(steps[:-1], steps[1:]):
        tt = torch.full((B,), t, dtype=torch.long)
        logits = bundle.forward_labeled_diffusion(x, y, tt)
        y0_hat = torch.softmax(logits, dim=1)
        ab_t = schedule.alpha_bar[t].to(x.dtype)
        ab_prev = schedule.alpha_bar[t_prev].to(x.dtype)
        eps_hat = (y - ab_t.sqrt() * y0_hat) / (1 - ab_t).clamp_min(1e-12).sqrt()
        y = ab_prev.sqrt() * y0_hat + (1 - ab_prev).sqrt() * eps_hat
    return torch.softmax(logits, dim=1)
