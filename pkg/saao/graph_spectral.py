"""KNN graphs, Laplacians, the Jacobi eigensolver, and the graph Fourier transform.

A basis is computed once per clean cloud and then frozen; perturbed clouds are
always transformed with the basis of the clean cloud they came from.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple, Union

import numpy as np

from .errors import ConvergenceError, SpectralError
from .geometry import PointCloud, as_points

logger = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_LOW_BAND = 32
SYMMETRY_TOLERANCE = 1e-10
SIGN_TOLERANCE = 1e-12
JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 100


@dataclass(frozen=True, eq=False)
class GftBasis:
    """Ascending Laplacian eigenpairs of one cloud's KNN graph."""

    q: np.ndarray
    eigenvalues: np.ndarray
    k_used: int
    basis_id: str

    @property
    def n(self) -> int:
        return int(self.q.shape[0])


@dataclass(frozen=True, eq=False)
class SpectralCloud:
    """GFT coefficients of a cloud, bound to the basis that produced them."""

    coeffs: np.ndarray
    basis_id: str

    @property
    def n(self) -> int:
        return int(self.coeffs.shape[0])


@dataclass(frozen=True, eq=False)
class SpectralMask:
    """Fixed diagonal mask giving low-frequency rows alpha_low, the rest alpha_high."""

    low_band: int
    alpha_low: float
    alpha_high: float
    diag: np.ndarray
    low_indicator: np.ndarray
    high_indicator: np.ndarray

    @property
    def complement(self) -> np.ndarray:
        """Diagonal of I − M_s."""

        return 1.0 - self.diag

    def matrix(self) -> np.ndarray:
        return np.diag(self.diag)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances between the rows of a and b."""

    difference = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", difference, difference)


def knn_graph(cloud: Union[PointCloud, np.ndarray], k: int = DEFAULT_K) -> np.ndarray:
    """Union-symmetrized 0/1 KNN adjacency; distance ties go to the lower index."""

    points = as_points(cloud)
    n = points.shape[0]
    if not 1 <= k < n:
        raise SpectralError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")

    distances = pairwise_sq_dists(points, points)
    np.fill_diagonal(distances, np.inf)
    neighbors = np.argsort(distances, axis=1, kind="stable")[:, :k]

    adjacency = np.zeros((n, n), dtype=np.float64)
    adjacency[np.repeat(np.arange(n), k), neighbors.ravel()] = 1.0
    return np.maximum(adjacency, adjacency.T)


def laplacian(adjacency: np.ndarray) -> np.ndarray:
    """Combinatorial Laplacian L = D − A of a symmetric 0/1 adjacency."""

    adjacency = np.asarray(adjacency, dtype=np.float64)
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise SpectralError(f"adjacency must be square, got shape {adjacency.shape}")
    if not np.array_equal(adjacency, adjacency.T):
        raise SpectralError("adjacency must be symmetric")
    if np.any(np.diag(adjacency) != 0):
        raise SpectralError("adjacency must have a zero diagonal")
    if not np.all((adjacency == 0) | (adjacency == 1)):
        raise SpectralError("adjacency entries must be 0 or 1")
    return np.diag(adjacency.sum(axis=1)) - adjacency


def eigh(matrix: np.ndarray, k_used: int = 0) -> GftBasis:
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Each sweep visits every (p, q) pair once using a round-robin ordering, so
    the n/2 rotations of one round touch disjoint index pairs and are applied
    together. Sweeps stop when the off-diagonal Frobenius norm falls below
    1e-12·‖L‖_F.
    """

    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SpectralError(f"matrix must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise SpectralError("matrix entries must be finite")
    asymmetry = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asymmetry >= SYMMETRY_TOLERANCE:
        raise SpectralError(f"matrix is not symmetric (max |L - Lᵀ| = {asymmetry:.3e})")

    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    threshold = JACOBI_TOLERANCE * float(np.linalg.norm(a))

    sweeps = 0
    off = _off_diagonal_norm(a)
    while off > threshold:
        if sweeps == JACOBI_MAX_SWEEPS:
            raise ConvergenceError(residual=off, sweeps=sweeps)
        for p, q in _round_robin_rounds(n):
            _rotate_round(a, v, p, q)
        sweeps += 1
        off = _off_diagonal_norm(a)
    logger.debug("jacobi converged in %d sweeps (n=%d, off=%.3e)", sweeps, n, off)

    eigenvalues = np.diag(a).copy()
    order = np.argsort(eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    q_matrix = _apply_sign_convention(v[:, order])

    q_matrix.setflags(write=False)
    eigenvalues.setflags(write=False)
    return GftBasis(
        q=q_matrix,
        eigenvalues=eigenvalues,
        k_used=int(k_used),
        basis_id=hashlib.sha1(q_matrix.tobytes()).hexdigest()[:16],
    )


def compute_basis(cloud: Union[PointCloud, np.ndarray], k: int = DEFAULT_K) -> GftBasis:
    return eigh(laplacian(knn_graph(cloud, k)), k_used=k)


def gft(cloud: Union[PointCloud, np.ndarray], basis: GftBasis) -> SpectralCloud:
    """Project a cloud onto the basis: P̃ = QᵀP."""

    points = as_points(cloud)
    if points.shape[0] != basis.n:
        raise SpectralError(f"cloud has {points.shape[0]} points but the basis has dimension {basis.n}")
    return SpectralCloud(coeffs=basis.q.T @ points, basis_id=basis.basis_id)


def igft(spectral: SpectralCloud, basis: GftBasis, label: Optional[int] = None) -> PointCloud:
    """Map coefficients back to points: P = QP̃."""

    if spectral.basis_id != basis.basis_id:
        raise SpectralError(
            f"coefficients belong to basis {spectral.basis_id}, not {basis.basis_id}"
        )
    if spectral.n != basis.n:
        raise SpectralError(f"coefficients have {spectral.n} rows but the basis has dimension {basis.n}")
    return PointCloud(points=basis.q @ spectral.coeffs, label=label)


def spectral_energy(spectral: Union[SpectralCloud, np.ndarray]) -> np.ndarray:
    """Squared energy of each spectral row, summed over the three channels."""

    coeffs = spectral.coeffs if isinstance(spectral, SpectralCloud) else np.asarray(spectral)
    return np.sum(coeffs ** 2, axis=1)


def low_band_energy_fraction(spectral: Union[SpectralCloud, np.ndarray], low_band: int) -> float:
    energy = spectral_energy(spectral)
    total = float(energy.sum())
    if total == 0.0:
        return 1.0
    return float(energy[:low_band].sum()) / total


def default_low_band(n: int) -> int:
    return min(DEFAULT_LOW_BAND, n // 4)


def make_mask(n: int, low_band: int, alpha_low: float, alpha_high: float) -> SpectralMask:
    """Build M_s = alpha_low·1_low + alpha_high·1_high."""

    if not 1 <= low_band < n:
        raise SpectralError(f"low_band must satisfy 1 <= b < n, got b={low_band}, n={n}")
    if not 0.0 < alpha_high < alpha_low < 1.0:
        raise SpectralError(
            f"mask weights must satisfy 0 < alpha_high < alpha_low < 1, "
            f"got alpha_low={alpha_low}, alpha_high={alpha_high}"
        )

    low_indicator = np.zeros(n)
    low_indicator[:low_band] = 1.0
    high_indicator = 1.0 - low_indicator
    return SpectralMask(
        low_band=low_band,
        alpha_low=float(alpha_low),
        alpha_high=float(alpha_high),
        diag=alpha_low * low_indicator + alpha_high * high_indicator,
        low_indicator=low_indicator,
        high_indicator=high_indicator,
    )


def _off_diagonal_norm(a: np.ndarray) -> float:
    return float(np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0)))


@lru_cache(maxsize=16)
def _round_robin_rounds(n: int) -> Tuple[Tuple[np.ndarray, np.ndarray], ...]:
    """Pairings covering every index pair once, with disjoint pairs per round."""

    players = list(range(n + (n % 2)))
    size = len(players)
    rounds: List[Tuple[np.ndarray, np.ndarray]] = []
    for _ in range(size - 1):
        pairs = [
            (min(players[i], players[size - 1 - i]), max(players[i], players[size - 1 - i]))
            for i in range(size // 2)
        ]
        pairs = [(p, q) for p, q in pairs if q < n]
        if pairs:
            rounds.append((
                np.array([p for p, _ in pairs], dtype=np.intp),
                np.array([q for _, q in pairs], dtype=np.intp),
            ))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _rotate_round(a: np.ndarray, v: np.ndarray, p: np.ndarray, q: np.ndarray) -> None:
    """Zero a[p, q] for a set of disjoint pairs with one combined rotation."""

    apq = a[p, q]
    active = apq != 0.0
    if not np.any(active):
        return
    p, q, apq = p[active], q[active], apq[active]

    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
    t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
    t[theta == 0.0] = 1.0
    c = 1.0 / np.sqrt(t * t + 1.0)
    s = t * c

    column_p, column_q = a[:, p].copy(), a[:, q].copy()
    a[:, p] = c * column_p - s * column_q
    a[:, q] = s * column_p + c * column_q
    row_p, row_q = a[p, :].copy(), a[q, :].copy()
    a[p, :] = c[:, None] * row_p - s[:, None] * row_q
    a[q, :] = s[:, None] * row_p + c[:, None] * row_q
    a[p, q] = 0.0
    a[q, p] = 0.0

    vector_p, vector_q = v[:, p].copy(), v[:, q].copy()
    v[:, p] = c * vector_p - s * vector_q
    v[:, q] = s * vector_p + c * vector_q


def _apply_sign_convention(q_matrix: np.ndarray) -> np.ndarray:
    """Flip columns so the first entry with |value| > 1e-12 is positive."""

    q_matrix = q_matrix.copy()
    for column in range(q_matrix.shape[1]):
        significant = np.flatnonzero(np.abs(q_matrix[:, column]) > SIGN_TOLERANCE)
        if significant.size and q_matrix[significant[0], column] < 0:
            q_matrix[:, column] = -q_matrix[:, column]
    return q_matrix
