"""Synthetic multi-domain 3D segmentation data.

Each sample is a volume with ``K - 1`` smooth ellipsoidal foreground blobs on a
background of class 0. Domains differ only by an intensity transform, so labels
are shared across domains while image statistics shift.

On disk a dataset is a directory holding ``manifest.json`` plus one raw
little-endian float32 file per image and one uint8 file per label.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class DataConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DomainTransform:
    gamma: float = 1.0
    bias_field_strength: float = 0.0
    noise_sigma: float = 0.0
    contrast_inversion: bool = False

    def __post_init__(self):
        if self.gamma <= 0:
            raise DataConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.bias_field_strength < 0 or self.noise_sigma < 0:
            raise DataConfigError("bias_field_strength and noise_sigma must be >= 0")

    def apply(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Shift image statistics. Labels are never touched."""
        out = np.clip(image, 0.0, 1.0)
        if self.contrast_inversion:
            out = 1.0 - out
        out = out ** self.gamma
        if self.bias_field_strength > 0:
            out = out * (1.0 + self.bias_field_strength * _bias_field(image.shape, rng))
        if self.noise_sigma > 0:
            out = out + rng.normal(0.0, self.noise_sigma, size=image.shape)
        return np.clip(out, 0.0, 1.0)


def _bias_field(shape, rng):
    # low-frequency field in [-1, 1]: random sum of a few cosines along each axis
    grids = np.meshgrid(*[np.linspace(0.0, 1.0, n) for n in shape], indexing="ij")
    field_ = np.zeros(shape)
    for _ in range(3):
        freq = rng.uniform(0.3, 1.2, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        term = np.ones(shape)
        for g, f, p in zip(grids, freq, phase):
            term = term * np.cos(2 * np.pi * f * g + p)
        field_ += term
    return field_ / (np.abs(field_).max() + 1e-8)


DEFAULT_DOMAINS = (
    DomainTransform(),
    DomainTransform(gamma=0.7, bias_field_strength=0.15, noise_sigma=0.03),
    DomainTransform(gamma=1.6, bias_field_strength=0.3, noise_sigma=0.06),
)


@dataclass
class DataConfig:
    num_classes: int = 3
    shape: tuple[int, int, int] = (32, 32, 32)
    num_samples: int = 60
    domains: list[DomainTransform] = field(default_factory=lambda: list(DEFAULT_DOMAINS))
    labeled_fraction: float = 0.1
    # domain index held out as the test split; None gives a random split instead
    test_domain: int | None = 2
    test_fraction: float = 0.2
    # fraction of held-out-domain samples moved into train as unlabeled data
    adapt_fraction: float = 0.0
    imbalance: bool = False
    # per-class base intensities; None spreads classes evenly over [0.15, 0.85]
    class_intensities: list[float] | None = None
    texture_sigma: float = 0.05

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.domains = [d if isinstance(d, DomainTransform) else DomainTransform(**d) for d in self.domains]
        self.validate()

    def validate(self):
        if self.num_classes < 2:
            raise DataConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.shape) != 3 or any(s < 16 or s % 16 for s in self.shape):
            raise DataConfigError(f"shape dims must be >= 16 and divisible by 16, got {self.shape}")
        if not self.domains:
            raise DataConfigError("at least one domain is required")
        if self.test_domain is not None and not 0 <= self.test_domain < len(self.domains):
            raise DataConfigError(f"test_domain {self.test_domain} out of range")
        if not 0 < self.labeled_fraction <= 1:
            raise DataConfigError("labeled_fraction must lie in (0, 1]")
        if self.class_intensities is not None and len(self.class_intensities) != self.num_classes:
            raise DataConfigError("class_intensities needs one entry per class")

    def intensities(self):
        if self.class_intensities is not None:
            return np.asarray(self.class_intensities, dtype=np.float64)
        return np.linspace(0.15, 0.85, self.num_classes)

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataConfigError(f"unknown data config keys: {', '.join(unknown)}")
        d = dict(d)
        # TOML has no null: a negative held-out domain asks for a random split
        if d.get("test_domain") is not None and d["test_domain"] < 0:
            d["test_domain"] = None
        return cls(**d)


DATA_KEYS_HELP = {
    "num_classes": "label classes K including background",
    "shape": "volume shape [L, W, H]; each dim >= 16 and divisible by 16",
    "num_samples": "number of volumes",
    "domains": "list of {gamma, bias_field_strength, noise_sigma, contrast_inversion} tables",
    "labeled_fraction": "fraction of training volumes that keep their labels",
    "test_domain": "domain index held out as the test split; negative = random split",
    "test_fraction": "test share of a random split",
    "adapt_fraction": "share of held-out-domain volumes moved into train as unlabeled data",
    "imbalance": "shrink the last foreground classes",
    "class_intensities": "per-class base intensity; default spreads classes over [0.15, 0.85]",
    "texture_sigma": "std of the smoothed texture added to each class",
}


@dataclass
class VolumeSample:
    image: np.ndarray
    label: np.ndarray | None
    domain_id: int
    sample_id: str

    def __post_init__(self):
        if self.label is not None and self.label.shape != self.image.shape:
            raise ValueError(
                f"{self.sample_id}: image shape {self.image.shape} != label shape {self.label.shape}"
            )

    def unlabeled(self) -> "VolumeSample":
        return VolumeSample(self.image, None, self.domain_id, self.sample_id)


@dataclass
class SplitSpec:
    labeled: list[str] = field(default_factory=list)
    unlabeled: list[str] = field(default_factory=list)


@dataclass
class DatasetManifest:
    num_classes: int
    shape: tuple[int, int, int]
    splits: dict[str, SplitSpec]
    domains: list[DomainTransform]
    seed: int
    samples: dict[str, dict]
    root: Path | None = None

    def __post_init__(self):
        self.shape = tuple(self.shape)
        for name, split in self.splits.items():
            overlap = set(split.labeled) & set(split.unlabeled)
            if overlap:
                raise ValueError(f"split {name!r}: ids both labeled and unlabeled: {sorted(overlap)}")

    def to_dict(self):
        return {
            "version": MANIFEST_VERSION,
            "num_classes": self.num_classes,
            "shape": list(self.shape),
            "seed": self.seed,
            "domains": [asdict(d) for d in self.domains],
            "splits": {k: asdict(v) for k, v in self.splits.items()},
            "samples": self.samples,
        }

    @classmethod
    def from_dict(cls, d, root=None):
        return cls(
            num_classes=d["num_classes"],
            shape=tuple(d["shape"]),
            splits={k: SplitSpec(**v) for k, v in d["splits"].items()},
            domains=[DomainTransform(**x) for x in d["domains"]],
            seed=d["seed"],
            samples=d["samples"],
            root=Path(root) if root is not None else None,
        )

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        with open(root / MANIFEST_NAME, "w") as f:
            json.dump(self.to_dict(), f, indent=1)
        self.root = root

    @classmethod
    def load(cls, root):
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"no manifest at {path}")
        with open(path) as f:
            manifest = cls.from_dict(json.load(f), root=root)
        for sid, entry in manifest.samples.items():
            for key in ("image", "label"):
                if entry.get(key) and not (root / entry[key]).exists():
                    raise FileNotFoundError(f"sample {sid}: missing {key} file {root / entry[key]}")
        return manifest

    def split(self, name) -> SplitSpec:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; available: {sorted(self.splits)}")
        return self.splits[name]

    def load_sample(self, sample_id, with_label=True) -> VolumeSample:
        if self.root is None:
            raise ValueError("manifest has no root directory; save or load it first")
        entry = self.samples[sample_id]
        image = read_raw(self.root / entry["image"], np.dtype("<f4"), self.shape)
        label = None
        if with_label and entry.get("label"):
            label = read_raw(self.root / entry["label"], np.dtype("u1"), self.shape)
        return VolumeSample(image, label, entry["domain"], sample_id)


def read_raw(path, dtype, shape):
    return np.fromfile(path, dtype=dtype).reshape(shape)


def write_raw(path, array, dtype):
    np.ascontiguousarray(array, dtype=dtype).tofile(path)


def one_hot_encode(label, num_classes):
    """(L, W, H) integer map -> (K, L, W, H) float one-hot grid.

    Works on numpy arrays and torch tensors; batched (B, L, W, H) torch input
    gives (B, K, L, W, H).
    """
    if _is_torch(label):
        import torch

        if label.numel() and (int(label.min()) < 0 or int(label.max()) >= num_classes):
            raise ValueError(f"label values must lie in [0, {num_classes}), got max {int(label.max())}")
        channel_dim = 0 if label.dim() == 3 else 1
        oh = torch.nn.functional.one_hot(label.long(), num_classes)
        return oh.movedim(-1, channel_dim).to(torch.get_default_dtype())
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() >= num_classes):
        raise ValueError(f"label values must lie in [0, {num_classes}), got max {label.max()}")
    return (np.arange(num_classes).reshape((-1,) + (1,) * label.ndim) == label[None]).astype(np.float32)


def _is_torch(x):
    return type(x).__module__.startswith("torch")


def _ellipsoid_label(cfg: DataConfig, rng: np.random.Generator):
    shape = np.array(cfg.shape)
    label = np.zeros(cfg.shape, dtype=np.uint8)
    grids = np.meshgrid(*[np.arange(n) for n in cfg.shape], indexing="ij")
    K = cfg.num_classes
    for k in range(1, K):
        radii = rng.uniform(0.10, 0.35, size=3) * shape
        if cfg.imbalance:
            if k == K - 1:
                radii = radii * 0.35
            elif k == K - 2:
                radii = radii * 0.7
        radii = np.maximum(radii, 1.5)
        center = rng.uniform(radii, shape - radii)
        dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
        # later class wins on overlap
        label[dist <= 1.0] = k
    return label


def render_image(label, cfg: DataConfig, rng: np.random.Generator):
    """Clean (domain-free) image for a label map: class intensities, smoothed
    boundaries, and a mild smooth texture."""
    base = cfg.intensities()[label]
    base = ndimage.gaussian_filter(base, sigma=1.0)
    texture = ndimage.gaussian_filter(rng.normal(size=label.shape), sigma=2.0)
    texture *= cfg.texture_sigma / (texture.std() + 1e-8)
    return np.clip(base + texture, 0.0, 1.0)


def generate_sample(cfg: DataConfig, seed: int, index: int) -> VolumeSample:
    rng = np.random.default_rng([seed, index])
    domain_id = index % len(cfg.domains)
    label = _ellipsoid_label(cfg, rng)
    image = render_image(label, cfg, rng)
    image = cfg.domains[domain_id].apply(image, rng)
    return VolumeSample(image.astype(np.float32), label, domain_id, f"s{index:04d}")


def _assign_splits(cfg: DataConfig, seed: int, samples: Sequence[VolumeSample]):
    rng = np.random.default_rng([seed, 10**6])
    ids = [s.sample_id for s in samples]
    if cfg.test_domain is not None:
        held = [s.sample_id for s in samples if s.domain_id == cfg.test_domain]
        pool = [s.sample_id for s in samples if s.domain_id != cfg.test_domain]
        held = list(rng.permutation(held))
        n_adapt = int(round(cfg.adapt_fraction * len(held)))
        adapt, test = held[:n_adapt], held[n_adapt:]
    else:
        perm = list(rng.permutation(ids))
        n_test = max(1, int(round(cfg.test_fraction * len(ids))))
        test, pool, adapt = perm[:n_test], perm[n_test:], []
    pool = list(rng.permutation(pool))
    n_lab = max(2, int(round(cfg.labeled_fraction * len(pool))))
    if n_lab > len(pool):
        raise DataConfigError(f"not enough training samples ({len(pool)}) for {n_lab} labeled")
    train = SplitSpec(labeled=sorted(pool[:n_lab]), unlabeled=sorted(pool[n_lab:] + adapt))
    return {"train": train, "test": SplitSpec(labeled=sorted(test))}


def generate_dataset(cfg: DataConfig, seed: int, out_dir=None) -> DatasetManifest:
    """Build the dataset for ``(cfg, seed)``; persist it when ``out_dir`` is given."""
    cfg.validate()
    samples = [generate_sample(cfg, seed, i) for i in range(cfg.num_samples)]
    entries = {
        s.sample_id: {"domain": s.domain_id, "image": f"{s.sample_id}_image.f32", "label": f"{s.sample_id}_label.u8"}
        for s in samples
    }
    manifest = DatasetManifest(
        num_classes=cfg.num_classes,
        shape=cfg.shape,
        splits=_assign_splits(cfg, seed, samples),
        domains=list(cfg.domains),
        seed=seed,
        samples=entries,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for s in samples:
            write_raw(out_dir / entries[s.sample_id]["image"], s.image, "<f4")
            write_raw(out_dir / entries[s.sample_id]["label"], s.label, "u1")
        manifest.save(out_dir)
        log.info("wrote %d samples to %s", len(samples), out_dir)
    return manifest


@dataclass(frozen=True)
class Batch:
    labeled: tuple[VolumeSample, ...]
    unlabeled: tuple[VolumeSample, ...]


def sample_batch(manifest: DatasetManifest, split: str, rng: np.random.Generator,
                 n_labeled: int = 2, n_unlabeled: int = 2, cache=None) -> Batch:
    """Uniform draw without replacement inside one batch."""
    spec = manifest.split(split)
    if len(spec.labeled) < n_labeled or len(spec.unlabeled) < n_unlabeled:
        raise ValueError(
            f"split {split!r} has {len(spec.labeled)} labeled / {len(spec.unlabeled)} unlabeled samples, "
            f"need {n_labeled} / {n_unlabeled}"
        )
    lab = rng.choice(len(spec.labeled), size=n_labeled, replace=False)
    unl = rng.choice(len(spec.unlabeled), size=n_unlabeled, replace=False)
    get = cache.get if cache is not None else manifest.load_sample
    return Batch(
        labeled=tuple(get(spec.labeled[i]) for i in lab),
        unlabeled=tuple(get(spec.unlabeled[i]).unlabeled() for i in unl),
    )


class SampleCache:
    """Loads each sample once; samples are treated as read-only afterwards."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._store = {}

    def get(self, sample_id) -> VolumeSample:
        if sample_id not in self._store:
            self._store[sample_id] = self.manifest.load_sample(sample_id)
        return self._store[sample_id]


def load_data_config(path) -> DataConfig:
    from .config import read_config_file

    raw = read_config_file(path)
    raw = raw.get("data", raw)
    return DataConfig.from_dict(raw)


def class_voxel_counts(manifest: DatasetManifest, ids=None):
    ids = list(manifest.samples) if ids is None else ids
    counts = np.zeros(manifest.num_classes, dtype=np.int64)
    for sid in ids:
        lab = manifest.load_sample(sid).label
        counts += np.bincount(lab.ravel(), minlength=manifest.num_classes)
    return counts


def output_root(default="."):
    return Path(os.environ.get("DTLP_OUTPUT_ROOT", default))
