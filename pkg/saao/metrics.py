"""Spatial distortion metrics and the learnable spectral mix metric.

Spatial metrics accept PointCloud objects or plain n×3 arrays. Chamfer and
Hausdorff compare point sets; the MSE distance compares points by index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import MetricError
from .geometry import PointCloud, as_points
from .graph_spectral import SpectralCloud, pairwise_sq_dists

DEFAULT_METRIC_EPSILON = 1e-6
DEFAULT_M_MIN = 1e-4
DEFAULT_M_MAX = 1e4
ZERO_DISTANCE = 1e-12

CloudLike = Union[PointCloud, np.ndarray]
SpectralLike = Union[SpectralCloud, np.ndarray]


@dataclass(frozen=True, eq=False)
class MixMetric:
    """Positive diagonal metric M used by the mixing weight w = exp(−Dist)."""

    m_diag: np.ndarray
    epsilon: float = DEFAULT_METRIC_EPSILON
    m_min: float = DEFAULT_M_MIN
    m_max: float = DEFAULT_M_MAX

    def __post_init__(self) -> None:
        if not 0.0 < self.m_min <= self.m_max:
            raise MetricError(f"metric bounds must satisfy 0 < m_min <= m_max, got ({self.m_min}, {self.m_max})")
        m_diag = np.array(self.m_diag, dtype=np.float64)
        if m_diag.ndim != 1:
            raise MetricError("m_diag must be a vector")
        if np.any(m_diag < self.m_min) or np.any(m_diag > self.m_max) or not np.all(np.isfinite(m_diag)):
            raise MetricError(f"m_diag entries must lie in [{self.m_min}, {self.m_max}]")
        m_diag.setflags(write=False)
        object.__setattr__(self, "m_diag", m_diag)

    @property
    def n(self) -> int:
        return int(self.m_diag.shape[0])

    def clip(self, values: np.ndarray) -> np.ndarray:
        return np.clip(values, self.m_min, self.m_max)

    def with_diag(self, values: np.ndarray) -> "MixMetric":
        """Return a copy holding values clipped to the metric bounds."""

        return replace(self, m_diag=self.clip(np.asarray(values, dtype=np.float64)))


# ======================
# SPATIAL METRICS
# ======================


def mse_dist(cloud: CloudLike, other: CloudLike) -> float:
    """(1/n)·Σ‖p_i − p'_i‖², comparing points by index."""

    a, b = _non_empty(cloud), _non_empty(other)
    if a.shape != b.shape:
        raise MetricError(f"mse_dist needs equal point counts, got {a.shape[0]} and {b.shape[0]}")
    return float(np.sum((a - b) ** 2) / a.shape[0])


def chamfer(cloud: CloudLike, other: CloudLike) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""

    distances = pairwise_sq_dists(_non_empty(cloud), _non_empty(other))
    return float(distances.min(axis=1).mean() + distances.min(axis=0).mean())


def hausdorff(cloud: CloudLike, other: CloudLike) -> float:
    """Largest nearest-neighbour Euclidean distance over both directions."""

    distances = pairwise_sq_dists(_non_empty(cloud), _non_empty(other))
    return float(math.sqrt(max(distances.min(axis=1).max(), distances.min(axis=0).max())))


def l2_norm_dist(cloud: CloudLike, other: CloudLike) -> float:
    """Frobenius norm of the indexed displacement, reported as D_norm."""

    a, b = _non_empty(cloud), _non_empty(other)
    if a.shape != b.shape:
        raise MetricError(f"l2_norm_dist needs equal point counts, got {a.shape[0]} and {b.shape[0]}")
    return float(np.linalg.norm(a - b))


# ======================
# SPECTRAL MIX METRIC
# ======================


def weighted_spectral_dist(spectral: SpectralLike, other: SpectralLike, metric: MixMetric) -> float:
    """sqrt(Σ_channels dᵀ M d) for d = S − S'."""

    difference = _spectral_difference(spectral, other, metric)
    return float(math.sqrt(float(metric.m_diag @ np.sum(difference ** 2, axis=1))))


def mix_weight(spectral: SpectralLike, other: SpectralLike, metric: MixMetric) -> float:
    """w = exp(−Dist), in (0, 1] and equal to 1 only for identical inputs."""

    return math.exp(-weighted_spectral_dist(spectral, other, metric))


def grad_mix_weight_wrt_M(spectral: SpectralLike, other: SpectralLike, metric: MixMetric) -> np.ndarray:
    """∂w/∂m_j = −w·Σ_ch d_ch[j]² / (2·Dist); zero when Dist vanishes."""

    row_energy = np.sum(_spectral_difference(spectral, other, metric) ** 2, axis=1)
    distance = math.sqrt(float(metric.m_diag @ row_energy))
    if distance < ZERO_DISTANCE:
        return np.zeros(metric.n)
    weight = math.exp(-distance)
    return -weight * row_energy / (2.0 * distance)


def init_metric(
    spectral_batch: Sequence[SpectralLike],
    epsilon: float = DEFAULT_METRIC_EPSILON,
    m_min: float = DEFAULT_M_MIN,
    m_max: float = DEFAULT_M_MAX,
) -> MixMetric:
    """M₀ = Diag(1/(Var + ε)) with Var taken per spectral row across the batch.

    The three channels of a row are pooled into one population, so each row
    gets one variance.
    """

    if len(spectral_batch) < 2:
        raise MetricError(f"init_metric needs a batch of at least 2 clouds, got {len(spectral_batch)}")
    if epsilon <= 0:
        raise MetricError(f"epsilon must be positive, got {epsilon}")

    stacked = np.stack([_coeffs(item) for item in spectral_batch])
    if stacked.ndim != 3 or stacked.shape[2] != 3:
        raise MetricError(f"spectral batch must stack to b×n×3, got shape {stacked.shape}")
    pooled = np.transpose(stacked, (1, 0, 2)).reshape(stacked.shape[1], -1)
    variance = pooled.var(axis=1)
    return MixMetric(
        m_diag=np.clip(1.0 / (variance + epsilon), m_min, m_max),
        epsilon=epsilon,
        m_min=m_min,
        m_max=m_max,
    )


def calibrate_metric(
    metric: MixMetric,
    pairs: Sequence[Tuple[SpectralLike, SpectralLike]],
    target: float = 1.0,
) -> MixMetric:
    """Rescale M so the median weighted distance over the pairs equals target.

    The row weighting of M is preserved up to the bound clipping.
    """

    if target <= 0:
        raise MetricError(f"calibration target must be positive, got {target}")
    distances = np.array([weighted_spectral_dist(a, b, metric) for a, b in pairs])
    distances = distances[distances > ZERO_DISTANCE]
    if distances.size == 0:
        return metric
    scale = (target / float(np.median(distances))) ** 2
    return metric.with_diag(metric.m_diag * scale)


def cosine_similarity(gradient: np.ndarray, other: np.ndarray) -> float:
    """Cosine of two flattened gradients; −1 when either vector is zero."""

    a = np.ravel(np.asarray(gradient, dtype=np.float64))
    b = np.ravel(np.asarray(other, dtype=np.float64))
    if a.shape != b.shape:
        raise MetricError(f"gradients must have the same size, got {a.size} and {b.size}")
    norm_a, norm_b = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        return -1.0
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def _non_empty(cloud: CloudLike) -> np.ndarray:
    points = as_points(cloud)
    if points.ndim != 2 or points.shape[1] != 3:
        raise MetricError(f"expected an n×3 cloud, got shape {points.shape}")
    if points.shape[0] == 0:
        raise MetricError("distance metrics need non-empty clouds")
    return points


def _coeffs(spectral: SpectralLike) -> np.ndarray:
    if isinstance(spectral, SpectralCloud):
        return spectral.coeffs
    return np.asarray(spectral, dtype=np.float64)


def _spectral_difference(spectral: SpectralLike, other: SpectralLike, metric: MixMetric) -> np.ndarray:
    if (
        isinstance(spectral, SpectralCloud)
        and isinstance(other, SpectralCloud)
        and spectral.basis_id != other.basis_id
    ):
        raise MetricError(f"spectral clouds use different bases ({spectral.basis_id}, {other.basis_id})")
    a, b = _coeffs(spectral), _coeffs(other)
    if a.shape != b.shape or a.shape[0] != metric.n:
        raise MetricError(
            f"dimension mismatch: {a.shape} vs {b.shape} with a metric of size {metric.n}"
        )
    return a - b
