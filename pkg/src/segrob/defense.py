"""Input-filtering defenses and defended evaluation.

Both defenses drop suspect points before the model sees the cloud:

* srs: simple random sampling, removing a fixed number of random points.
* sor: statistical outlier removal; a point is dropped when its mean
  distance to its k nearest neighbors (measured in the concatenated
  coordinate + feature space) exceeds mean + std_mult * std of that
  statistic over the cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics as me
from .pointcloud import PointCloud, knn
from .segmodel import SegModel, predict

DEFENSE_KINDS = ("none", "srs", "sor")


@dataclass(frozen=True)
class DefenseConfig:
    # srs_count is the number of points removed; srs_keep flips it to the
    # number of points kept instead.
    srs_count: int = 50
    srs_keep: bool = False
    sor_k: int = 2
    sor_std_mult: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.srs_count < 0:
            raise ValueError("srs_count must be >= 0")
        if self.sor_k < 1:
            raise ValueError("sor_k must be >= 1")
        if self.sor_std_mult < 0.0:
            raise ValueError("sor_std_mult must be >= 0")


def srs(cloud: PointCloud, m: int = 50, seed: int = 0):
    """Remove m uniformly random points. Returns (filtered cloud, kept
    indices in ascending order)."""
    if m < 0:
        raise ValueError("m must be >= 0")
    if m >= cloud.n_points:
        raise ValueError("srs would remove every point")
    if m == 0:
        return cloud, np.arange(cloud.n_points, dtype=np.int64)
    rng = np.random.default_rng(seed)
    removed = rng.choice(cloud.n_points, size=m, replace=False)
    keep = np.setdiff1d(np.arange(cloud.n_points, dtype=np.int64), removed)
    return cloud.subset(keep), keep


def sor_scores(cloud: PointCloud, k: int = 2) -> np.ndarray:
    """Mean distance from each point to its k nearest neighbors in the
    concatenated (coords || feats) space."""
    full = np.hstack([cloud.coords, cloud.feats])
    nbr = knn(full, k)
    d = np.sqrt(((full[:, None, :] - full[nbr]) ** 2).sum(axis=2))
    return d.mean(axis=1)


def sor(cloud: PointCloud, k: int = 2, std_mult: float = 1.0):
    """Remove points whose neighbor-distance score exceeds
    mean + std_mult * std (population std). The minimum-score point always
    survives, so the result is never empty. Returns (filtered cloud,
    removed indices in ascending order)."""
    scores = sor_scores(cloud, k)
    cutoff = scores.mean() + std_mult * scores.std()
    removed = np.flatnonzero(scores > cutoff).astype(np.int64)
    return cloud.subset(np.flatnonzero(scores <= cutoff)), removed


def apply_defense(cloud: PointCloud, kind: str, cfg: DefenseConfig = DefenseConfig()):
    if kind == "none":
        return cloud, np.arange(cloud.n_points, dtype=np.int64)
    if kind == "srs":
        m = cloud.n_points - cfg.srs_count if cfg.srs_keep else cfg.srs_count
        if m < 0:
            raise ValueError("srs_keep count exceeds cloud size")
        return srs(cloud, m, cfg.seed)
    if kind == "sor":
        filtered, removed = sor(cloud, cfg.sor_k, cfg.sor_std_mult)
        keep = np.setdiff1d(np.arange(cloud.n_points, dtype=np.int64), removed)
        return filtered, keep
    raise ValueError(f"defense kind must be one of {DEFENSE_KINDS}")


def defended_eval(model: SegModel, cloud: PointCloud, kind: str,
                  cfg: DefenseConfig = DefenseConfig()):
    """Filter the cloud, segment what survives, and score it against the
    surviving ground truth. Returns (MetricBlock, kept indices)."""
    if cloud.labels is None:
        raise ValueError("defended evaluation needs ground-truth labels")
    filtered, keep = apply_defense(cloud, kind, cfg)
    pred = predict(model, filtered)
    block = me.evaluate(pred, filtered.labels, model.num_classes)
    return block, keep
