"""Segmentation metrics, the inference path, and CSV/plot reports.

Distances are in voxel units. A boundary voxel is a foreground voxel with at
least one 6-connected background neighbour (outside the volume counts as
background).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from .network import InferenceModel, ModelConfig

log = logging.getLogger(__name__)

METRICS = ("dice", "jaccard", "hd95", "asd")


def load_inference(path) -> InferenceModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"inference export not found: {path}")
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if ck.get("kind") == "training":
        # a full training checkpoint also works: take encoder + theta/psi
        from .training import load_checkpoint

        state = load_checkpoint(path)
        source = "psi" if state.config.supervised_only else "theta"
        model = InferenceModel(state.bundle.cfg)
        sd = state.bundle.inference_state(source)
        model.encoder.load_state_dict(sd["encoder"])
        model.decoder.load_state_dict(sd["decoder"])
        return model.to(next(state.bundle.parameters()).dtype).eval()
    if ck.get("kind") != "inference":
        raise ValueError(f"{path} is not an inference export")
    model = InferenceModel(ModelConfig(**ck["model_config"]))
    model.encoder.load_state_dict(ck["state"]["encoder"])
    model.decoder.load_state_dict(ck["state"]["decoder"])
    dtype = next(iter(ck["state"]["encoder"].values())).dtype
    return model.to(dtype).eval()


def infer(x, model: InferenceModel):
    """Hard label map for one (L, W, H) volume: argmax softmax(D(E(x)))."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(x)).to(dtype)
    return model.predict(x).numpy()


def dice_jaccard(pred, gt, num_classes):
    """Per-class (dice, jaccard) arrays. Empty vs empty scores 1."""
    dice = np.zeros(num_classes)
    jac = np.zeros(num_classes)
    for k in range(num_classes):
        a, b = pred == k, gt == k
        inter = np.logical_and(a, b).sum()
        sa, sb = a.sum(), b.sum()
        if sa + sb == 0:
            dice[k] = jac[k] = 1.0
            continue
        dice[k] = 2.0 * inter / (sa + sb)
        jac[k] = inter / (sa + sb - inter)
    return dice, jac


_SIX = ndimage.generate_binary_structure(3, 1)


def boundary(mask):
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def directed_distances(a_border, b_border):
    """Distance from each border voxel of a to the nearest border voxel of b."""
    pa = np.argwhere(a_border).astype(np.float64)
    pb = np.argwhere(b_border).astype(np.float64)
    d, _ = cKDTree(pb).query(pa)
    return d


def surface_distances(pred, gt, cls=1):
    """(HD95, ASD) for one class; (nan, nan) when either mask is empty."""
    a, b = np.asarray(pred) == cls, np.asarray(gt) == cls
    if not a.any() or not b.any():
        log.warning("class %d empty in %s; surface distances undefined", cls,
                    "prediction" if not a.any() else "ground truth")
        return math.nan, math.nan
    ba, bb = boundary(a), boundary(b)
    d_ab = directed_distances(ba, bb)
    d_ba = directed_distances(bb, ba)
    hd95 = float(np.percentile(np.concatenate([d_ab, d_ba]), 95))
    asd = float(0.5 * (d_ab.mean() + d_ba.mean()))
    return hd95, asd


def sample_metrics(pred, gt, num_classes):
    """Rows of per-class metrics for one prediction."""
    dice, jac = dice_jaccard(pred, gt, num_classes)
    rows = []
    for k in range(num_classes):
        hd, asd = surface_distances(pred, gt, k)
        rows.append({"class": k, "dice": dice[k], "jaccard": jac[k], "hd95": hd, "asd": asd})
    return rows


@dataclass
class MetricReport:
    num_classes: int
    rows: list = field(default_factory=list)  # per repeat/sample/class

    def per_repeat(self):
        """{repeat: {metric: per-class mean over samples}} with NaNs excluded."""
        out = {}
        for r in sorted({row["repeat"] for row in self.rows}):
            sub = [row for row in self.rows if row["repeat"] == r]
            out[r] = {m: np.array([_nanmean([row[m] for row in sub if row["class"] == k])
                                   for k in range(self.num_classes)]) for m in METRICS}
        return out

    def summary(self, foreground_only=True):
        """Rows ``{metric, class, mean, std}``; class 'mean' averages the
        foreground classes. std is across repeats."""
        reps = self.per_repeat()
        ks = range(1 if foreground_only and self.num_classes > 1 else 0, self.num_classes)
        out = []
        for m in METRICS:
            per = np.array([reps[r][m] for r in reps])  # (R, K)
            for k in range(self.num_classes):
                out.append(_row(m, k, per[:, k]))
            out.append(_row(m, "mean", np.array([_nanmean(p[list(ks)]) for p in per])))
        return out

    def mean_dice(self):
        for row in self.summary():
            if row["metric"] == "dice" and row["class"] == "mean":
                return row["mean"]

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(out_dir / "metrics.csv", self.rows)
        write_csv(out_dir / "summary.csv", self.summary())
        return out_dir / "metrics.csv", out_dir / "summary.csv"

    @classmethod
    def from_csv(cls, path, num_classes):
        rows = []
        with open(path) as f:
            for r in csv.DictReader(f):
                rows.append({"repeat": int(r["repeat"]), "sample_id": r["sample_id"], "class": int(r["class"]),
                             **{m: float(r[m]) for m in METRICS}})
        return cls(num_classes, rows)


def _nanmean(v):
    v = np.asarray(v, dtype=np.float64)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else math.nan


def _row(metric, cls, values):
    values = np.asarray(values, dtype=np.float64)
    ok = values[~np.isnan(values)]
    return {"metric": metric, "class": cls, "mean": float(ok.mean()) if ok.size else math.nan,
            "std": float(ok.std()) if ok.size else math.nan, "n": int(ok.size)}


def write_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def evaluate_split(manifest, split, exports, cache=None) -> MetricReport:
    """Score every labeled sample of ``split`` with each export (one per
    repeat). ``exports`` holds paths or loaded models."""
    if not isinstance(exports, (list, tuple)):
        exports = [exports]
    ids = manifest.split(split).labeled
    get = cache.get if cache is not None else manifest.load_sample
    report = MetricReport(manifest.num_classes)
    for r, export in enumerate(exports):
        model = export if isinstance(export, torch.nn.Module) else load_inference(export)
        for sid in ids:
            s = get(sid)
            pred = infer(s.image, model)
            for row in sample_metrics(pred, s.label, manifest.num_classes):
                report.rows.append({"repeat": r, "sample_id": sid, **row})
    return report


def plot_losses(loss_csvs, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, p in loss_csvs.items():
        with open(p) as f:
            rows = list(csv.DictReader(f))
        if rows:
            ax.plot([int(r["iteration"]) for r in rows], [float(r["total"]) for r in rows], label=name, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_class_dice(summaries, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    names = list(summaries)
    for i, name in enumerate(names):
        rows = [r for r in summaries[name] if r["metric"] == "dice" and r["class"] != "mean"]
        xs = np.arange(len(rows)) + i / (len(names) + 1)
        ax.bar(xs, [float(r["mean"]) for r in rows], width=1 / (len(names) + 1), label=name)
    ax.set_xlabel("class")
    ax.set_ylabel("Dice")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
