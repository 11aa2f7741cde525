"""Input-transformation defenses: simple random sampling and statistical outlier removal.

Both return a subset of the input points in their original order; no point is
moved. Classifiers pool over points, so defended clouds with fewer points are
classified without retraining.
"""

from __future__ import annotations

import logging
import math
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import DefenseError
from .geometry import MIN_POINTS, PointCloud
from .saao_config import DefenseConfig
from .saao_state import DefenseKind

logger = logging.getLogger(__name__)


def srs(cloud: PointCloud, keep_ratio: float, seed: Union[int, Sequence[int]]) -> PointCloud:
    """Keep ⌈keep_ratio·n⌉ points drawn uniformly without replacement.

    ``seed`` may be a sequence such as ``(seed, cloud_index)`` so each cloud of
    a batch gets its own draw.
    """

    if not 0.0 < keep_ratio <= 1.0:
        raise DefenseError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    count = math.ceil(keep_ratio * cloud.n)
    if count < MIN_POINTS:
        raise DefenseError(f"SRS would keep {count} points, at least {MIN_POINTS} are required")
    if count == cloud.n:
        return cloud

    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(cloud.n, size=count, replace=False))
    return cloud.with_points(cloud.points[kept])


def sor(cloud: PointCloud, k: int, std_mult: float) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds μ + std_mult·σ.

    If fewer than four points would survive, the four with the smallest mean
    distance are kept instead.
    """

    if not 1 <= k < cloud.n:
        raise DefenseError(f"k must satisfy 1 <= k < n, got k={k}, n={cloud.n}")
    if std_mult <= 0:
        raise DefenseError(f"std_mult must be positive, got {std_mult}")

    distances, _ = cKDTree(cloud.points).query(cloud.points, k=k + 1)
    # column 0 is the query point itself (or an exact duplicate at distance 0)
    mean_distances = distances[:, 1:].mean(axis=1)
    threshold = mean_distances.mean() + std_mult * mean_distances.std()
    keep = mean_distances <= threshold

    if int(keep.sum()) < MIN_POINTS:
        keep = np.zeros(cloud.n, dtype=bool)
        keep[np.argsort(mean_distances, kind="stable")[:MIN_POINTS]] = True

    removed = cloud.n - int(keep.sum())
    if removed:
        logger.debug("SOR removed %d of %d points (threshold %.4f)", removed, cloud.n, threshold)
    return cloud.with_points(cloud.points[keep])


def apply_defense(cloud: PointCloud, cfg: DefenseConfig, index: Optional[int] = None) -> PointCloud:
    """Run the configured defense; ``index`` separates the SRS draws of a batch."""

    kind = DefenseKind(cfg.kind)
    if kind is DefenseKind.SRS:
        seed = cfg.seed if index is None else (cfg.seed, index)
        return srs(cloud, cfg.srs_keep_ratio, seed)
    return sor(cloud, cfg.sor_k, cfg.sor_std_mult)
