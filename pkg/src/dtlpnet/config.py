"""Training configuration: one flat key-value TOML file.

Every key is a field of :class:`TrainConfig`; its ``help`` metadata is the
schema documentation shown by ``dtlpnet train --help``. Unknown keys and
ill-typed values raise :class:`ConfigError` listing the offending keys.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .losses import LossWeights
from .network import ModelConfig


class ConfigError(ValueError):
    pass


def _f(default, help, **kw):
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: type(default)(default), metadata={"help": help, **kw})
    return field(default=default, metadata={"help": help, **kw})


@dataclass
class TrainConfig:
    # paths
    data_dir: str = _f("data", "dataset directory holding manifest.json")
    output_dir: str = _f("runs/default", "where checkpoints, losses.csv and the inference export go")
    split: str = _f("train", "manifest split used for training")
    seed: int = _f(0, "seed for weights, batch order, noise and masks")
    # schedule
    epochs: int = _f(20, "number of epochs")
    iters_per_epoch: int = _f(0, "iterations per epoch; 0 = number of training samples")
    max_iterations: int = _f(0, "total iterations I; 0 = epochs * iters_per_epoch")
    labeled_bs: int = _f(2, "labeled volumes per batch")
    unlabeled_bs: int = _f(2, "unlabeled volumes per batch")
    lr: float = _f(1e-2, "initial learning rate")
    lr_power: float = _f(0.9, "exponent of the polynomial decay")
    momentum: float = _f(0.9, "SGD momentum")
    weight_decay: float = _f(1e-4, "SGD weight decay")
    checkpoint_every: int = _f(0, "checkpoint period in iterations; 0 = only at the end")
    # model
    base_width: int = _f(8, "channels F of the first stage; stage i has i*F")
    num_stages: int = _f(3, "resolution stages of the encoder")
    convs_per_stage: int = _f(2, "3x3x3 convolutions per stage")
    time_dim: int = _f(32, "time-step embedding width")
    norm: str = _f("instance", "normalization layer: instance, group or none", choices=("instance", "group", "none"))
    corr_grid: int = _f(8, "pooled grid edge for the correlation map (P = grid^3)")
    corr_dim: int = _f(16, "channel width D of the correlation features")
    zero_init_head: bool = _f(False, "zero-initialize decoder output layers")
    # diffusion
    diffusion_steps: int = _f(1000, "diffusion length T")
    beta_start: float = _f(1e-4, "first beta of the linear noise schedule")
    beta_end: float = _f(0.02, "last beta of the linear noise schedule")
    ddim_steps: int = _f(10, "DDIM updates used to build the diffusion pseudo-label")
    # pseudo labels
    gumbel_tau: float = _f(1.0, "Gumbel-Softmax temperature")
    blur_sigma: float = _f(1.0, "sigma of the 3x3x3 Gaussian blur on teacher-1 maps; 0 disables")
    gumbel_on: str = _f("xi", "map perturbed by Gumbel noise: xi (diffusion) or psi (supervised)", choices=("xi", "psi"))
    teachers: str = _f("both", "pseudo-label teachers: both, t1 (RS only) or t2 (mean teacher only)", choices=("both", "t1", "t2"))
    entropy_weight: str = _f("pow2", "teacher weight from entropy H in bits: pow2 = 2^-H, exp = e^-H", choices=("pow2", "exp"))
    gamma_ema: float = _f(0.99, "EMA decay of the mean teacher")
    # masking
    mask_ratio: float = _f(0.7, "patch mask ratio r")
    patch_size: int = _f(0, "patch edge b in voxels; 0 = 1/16 of the image extent")
    cutmix_min: float = _f(0.2, "smallest CutMix box volume fraction")
    cutmix_max: float = _f(0.5, "largest CutMix box volume fraction")
    # loss weights
    alpha: float = _f(2.0, "weight of the masked-modeling consistency loss")
    beta: float = _f(0.1, "weight of the knowledge distillation loss")
    gamma: float = _f(0.2, "weight of the masked reconstruction loss")
    eta: float = _f(1.2, "weight of the correlation loss")
    weight_u: float = _f(0.0, "weight of the plain pseudo-label loss (computed and logged either way)")
    corr_scale_outside: bool = _f(False, "apply 1/sqrt(D) after the correlation softmax")
    # DRS
    drs_window: int = _f(50, "DRS accumulation window tau")
    drs_alpha: float = _f(0.2, "DRS difficulty exponent")
    drs_w_min: float = _f(0.1, "floor of the DRS class weights")
    drs_lambda_weight: str = _f("inverse_dice", "DRS Dice factor: inverse_dice or constant", choices=("inverse_dice", "constant"))
    # ablations
    supervised_only: bool = _f(False, "train only the denoising and difficulty-aware losses")
    use_mix: bool = _f(True, "enable the CutMix consistency loss")
    use_mic: bool = _f(True, "enable the masked-modeling consistency loss")
    use_kd: bool = _f(True, "enable knowledge distillation")
    use_rec: bool = _f(True, "enable masked reconstruction")
    use_corr: bool = _f(True, "enable the correlation (label propagation) loss")
    dtype: str = _f("float32", "tensor dtype: float32 or float64", choices=("float32", "float64"))

    def __post_init__(self):
        self.validate()

    def validate(self):
        bad = []
        for f in fields(self):
            v = getattr(self, f.name)
            choices = f.metadata.get("choices")
            if choices and v not in choices:
                bad.append(f"{f.name}={v!r} (choose from {', '.join(choices)})")
        nonneg = ("lr", "lr_power", "momentum", "weight_decay", "alpha", "beta", "gamma", "eta", "weight_u",
                  "blur_sigma", "drs_w_min", "epochs", "iters_per_epoch", "max_iterations", "checkpoint_every",
                  "patch_size")
        bad += [f"{k}={getattr(self, k)!r} (must be >= 0)" for k in nonneg if getattr(self, k) < 0]
        if not 0 <= self.gamma_ema <= 1:
            bad.append(f"gamma_ema={self.gamma_ema!r} (must lie in [0, 1])")
        if not 0 <= self.mask_ratio <= 1:
            bad.append(f"mask_ratio={self.mask_ratio!r} (must lie in [0, 1])")
        if not 0 <= self.cutmix_min <= self.cutmix_max <= 1:
            bad.append("cutmix_min/cutmix_max (need 0 <= min <= max <= 1)")
        for k in ("labeled_bs", "unlabeled_bs", "ddim_steps", "num_stages", "base_width", "drs_window",
                  "diffusion_steps", "corr_grid", "corr_dim", "time_dim", "convs_per_stage"):
            if getattr(self, k) < 1:
                bad.append(f"{k}={getattr(self, k)!r} (must be >= 1)")
        if self.gumbel_tau <= 0:
            bad.append("gumbel_tau (must be > 0)")
        if bad:
            raise ConfigError("invalid config values: " + "; ".join(bad))

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.eta, self.weight_u)

    def model_config(self, num_classes) -> ModelConfig:
        return ModelConfig(
            num_classes=num_classes, base_width=self.base_width, num_stages=self.num_stages,
            convs_per_stage=self.convs_per_stage, time_dim=self.time_dim, norm=self.norm,
            corr_grid=self.corr_grid, corr_dim=self.corr_dim, zero_init_head=self.zero_init_head,
        )

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw):
        return cls(**coerce(cls, raw))

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def coerce(cls, raw):
    """Type-check a flat mapping against a dataclass; collects every problem."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    errors = [f"unknown key {k!r}" for k in unknown]
    out = {}
    for k, v in raw.items():
        if k not in known:
            continue
        want = _TYPES.get(known[k].type if isinstance(known[k].type, str) else known[k].type.__name__)
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if want is not None and (not isinstance(v, want) or (want is int and isinstance(v, bool))):
            errors.append(f"{k!r} expects {want.__name__}, got {type(v).__name__}")
            continue
        out[k] = v
    if errors:
        raise ConfigError("config errors: " + "; ".join(errors))
    return out


def read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e


def load_train_config(path, **overrides) -> TrainConfig:
    raw = read_config_file(path)
    raw = dict(raw.get("train", raw))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(raw)


def schema_help(cls=TrainConfig):
    lines = []
    for f in fields(cls):
        default = f.default if f.default is not MISSING else f.default_factory()
        lines.append(f"  {f.name} = {default!r}\n      {f.metadata.get('help', '')}")
    return "\n".join(lines)


def dump_toml(mapping):
    """Minimal writer for flat key-value configs."""
    lines = []
    for k, v in mapping.items():
        if isinstance(v, bool):
            lines.append(f"{k} = {'true' if v else 'false'}")
        elif isinstance(v, (int, float)):
            lines.append(f"{k} = {v!r}")
        elif isinstance(v, str):
            lines.append(f"{k} = {json.dumps(v)}")
        elif isinstance(v, (list, tuple)):
            lines.append(f"{k} = {json.dumps(list(v))}")
        else:
            raise TypeError(f"cannot write {k}={v!r} as TOML")
    return "\n".join(lines) + "\n"
