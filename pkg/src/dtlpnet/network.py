"""Miniature V-Net style shared encoder with three decoders and an EMA teacher.

The encoder takes ``concat([y_t, x])`` plus a time step. Plain (non-diffusion)
flows feed zeros in place of ``y_t`` and the ``t = 0`` embedding, so all three
decoders see feature pyramids of identical shape.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    num_classes: int = 3
    in_channels: int = 1
    base_width: int = 8
    num_stages: int = 3
    convs_per_stage: int = 2
    time_dim: int = 32
    norm: str = "instance"
    corr_grid: int = 8
    corr_dim: int = 16
    zero_init_head: bool = False


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer steps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(torch.get_default_dtype())


def _norm(kind, ch):
    if kind == "instance":
        return nn.InstanceNorm3d(ch, affine=True)
    if kind == "group":
        return nn.GroupNorm(1, ch)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, n_convs, norm, time_dim=0):
        super().__init__()
        layers = []
        for i in range(n_convs):
            layers.append(nn.Conv3d(in_ch if i == 0 else out_ch, out_ch, 3, padding=1))
        self.convs = nn.ModuleList(layers)
        self.norms = nn.ModuleList([_norm(norm, out_ch) for _ in range(n_convs)])
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None

    def forward(self, x, temb=None):
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = norm(conv(x))
            # after the norm: instance norm would cancel a per-channel shift
            if i == 0 and self.time_proj is not None and temb is not None:
                x = x + self.time_proj(temb)[:, :, None, None, None]
            x = F.leaky_relu(x, 0.01)
        return x


def stage_widths(cfg: ModelConfig):
    # stage i (1-based) carries i * F channels
    return [(i + 1) * cfg.base_width for i in range(cfg.num_stages)]


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = stage_widths(cfg)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        in_ch = cfg.in_channels + cfg.num_classes
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, w in enumerate(widths):
            self.blocks.append(ConvBlock(in_ch if i == 0 else w, w, cfg.convs_per_stage, cfg.norm, cfg.time_dim))
            if i + 1 < len(widths):
                self.downs.append(nn.Conv3d(w, widths[i + 1], 2, stride=2))

    def forward(self, x, y_t=None, t=None):
        B = x.shape[0]
        K = self.cfg.num_classes
        if y_t is None:
            y_t = x.new_zeros((B, K) + x.shape[2:])
        elif y_t.shape[1] != K:
            raise ValueError(f"noisy label has {y_t.shape[1]} channels, expected {K}")
        if t is None:
            t = torch.zeros(B, dtype=torch.long, device=x.device)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(x.dtype))
        h = torch.cat([y_t, x], dim=1)
        feats = []
        for i, block in enumerate(self.blocks):
            h = block(h, temb)
            feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return feats


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = stage_widths(cfg)
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(len(widths) - 1, 0, -1):
            self.ups.append(nn.ConvTranspose3d(widths[i], widths[i - 1], 2, stride=2))
            self.blocks.append(ConvBlock(widths[i - 1], widths[i - 1], cfg.convs_per_stage, cfg.norm))
        self.head = nn.Conv3d(widths[0], cfg.num_classes, 1)
        if cfg.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, feats):
        h = feats[-1]
        for j, (up, block) in enumerate(zip(self.ups, self.blocks)):
            skip = feats[-2 - j]
            h = block(up(h) + skip)
        return self.head(h)


class CorrelationHead(nn.Module):
    """Two linear projections of the pooled deepest encoder features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = stage_widths(cfg)[-1]
        self.grid = cfg.corr_grid
        self.proj1 = nn.Conv3d(w, cfg.corr_dim, 1)
        self.proj2 = nn.Conv3d(w, cfg.corr_dim, 1)

    def forward(self, deepest):
        pooled = F.adaptive_avg_pool3d(deepest, self.grid)
        e1 = self.proj1(pooled).flatten(2)
        e2 = self.proj2(pooled).flatten(2)
        return e1, e2


class ModelBundle(nn.Module):
    """Student parameters (encoder xi, decoders xi/psi/theta, correlation head)
    plus frozen EMA copies of the encoder and the theta decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder_xi = Decoder(cfg)
        self.decoder_psi = Decoder(cfg)
        self.decoder_theta = Decoder(cfg)
        self.corr_head = CorrelationHead(cfg)
        self.teacher_encoder = copy.deepcopy(self.encoder)
        self.teacher_theta = copy.deepcopy(self.decoder_theta)
        for p in self.teacher_parameters():
            p.requires_grad_(False)

    STUDENT = ("encoder", "decoder_xi", "decoder_psi", "decoder_theta", "corr_head")

    def student_parameters(self):
        for name in self.STUDENT:
            yield from getattr(self, name).parameters()

    def teacher_parameters(self):
        yield from self.teacher_encoder.parameters()
        yield from self.teacher_theta.parameters()

    def forward_labeled_diffusion(self, x, y_t, t):
        """Diffusion flow: logits of the clean label given the noisy one."""
        return self.decoder_xi(self.encoder(x, y_t, t))

    def forward_plain(self, x, decoder="theta", use_teacher=False):
        if decoder not in ("psi", "theta"):
            raise ValueError(f"plain forward decoder must be 'psi' or 'theta', got {decoder!r}")
        if use_teacher:
            if decoder != "theta":
                raise ValueError("the mean teacher only exists for the theta decoder")
            return self.teacher_theta(self.teacher_encoder(x))
        dec = self.decoder_psi if decoder == "psi" else self.decoder_theta
        return dec(self.encoder(x))

    def correlation_features(self, x=None, feats=None):
        if feats is None:
            feats = self.encoder(x)
        return self.corr_head(feats[-1])

    @torch.no_grad()
    def ema_update(self, gamma):
        ema_update(self.encoder, self.teacher_encoder, gamma)
        ema_update(self.decoder_theta, self.teacher_theta, gamma)

    def inference_state(self, decoder="theta"):
        dec = self.decoder_theta if decoder == "theta" else self.decoder_psi
        return {"encoder": self.encoder.state_dict(), "decoder": dec.state_dict()}


@torch.no_grad()
def ema_update(student: nn.Module, teacher: nn.Module, gamma: float):
    """teacher <- gamma * teacher + (1 - gamma) * student, parameter by parameter."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {gamma}")
    s_params = dict(student.named_parameters())
    t_params = dict(teacher.named_parameters())
    if s_params.keys() != t_params.keys() or any(s_params[k].shape != t_params[k].shape for k in s_params):
        raise ValueError("student and teacher parameter structures differ")
    for k, tp in t_params.items():
        tp.mul_(gamma).add_(s_params[k].detach(), alpha=1.0 - gamma)
    for (_, tb), (_, sb) in zip(teacher.named_buffers(), student.named_buffers()):
        tb.copy_(sb)


class InferenceModel(nn.Module):
    """Encoder + one plain decoder; all that is needed at test time."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, x):
        return self.decoder(self.encoder(x))

    @torch.no_grad()
    def predict(self, x):
        """Hard labels for a (B, C, L, W, H) or single (L, W, H) volume."""
        single = x.dim() == 3
        if single:
            x = x[None, None]
        out = torch.softmax(self(x), dim=1).argmax(dim=1)
        return out[0] if single else out
