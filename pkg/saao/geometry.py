"""Point-cloud data model, synthetic shapes, normalization, and file I/O.

Clouds are stored as plain text so they stay inspectable and diffable. Labels
never live inside a cloud file; datasets keep them in a separate manifest.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import CloudFormatError, GeometryError
from .saao_state import DatasetSplit, ShapeClass

logger = logging.getLogger(__name__)

MIN_POINTS = 4
MIN_GENERATED_POINTS = 16
DEFAULT_CLASS_COUNT = len(ShapeClass)

SEED_STRIDE = 10_000_000
CLASS_SEED_STRIDE = 100_000
SPLIT_SEED_OFFSETS = {
    DatasetSplit.TRAIN: 0,
    DatasetSplit.TEST: 5_000_000,
}

TORUS_MAJOR_RADIUS = 1.0
TORUS_MINOR_RADIUS = 0.35
HELIX_TURNS = 2
HELIX_TUBE_RADIUS = 0.1

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An n×3 float64 point set with an optional class label."""

    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise GeometryError(f"points must be an n×3 matrix, got shape {points.shape}")
        if points.shape[0] < MIN_POINTS:
            raise GeometryError(
                f"a point cloud needs at least {MIN_POINTS} points, got {points.shape[0]}"
            )
        if not np.all(np.isfinite(points)):
            raise GeometryError("point coordinates must be finite")
        if self.label is not None and int(self.label) < 0:
            raise GeometryError(f"label must be non-negative, got {self.label}")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Return a cloud with the same label and new coordinates."""

        return PointCloud(points=points, label=self.label)

    def with_label(self, label: Optional[int]) -> "PointCloud":
        return PointCloud(points=self.points, label=label)


@dataclass(frozen=True)
class LabeledDataset:
    """Labelled clouds of one split, all with the same point count."""

    clouds: Sequence[PointCloud] = field(default_factory=tuple)
    class_count: int = DEFAULT_CLASS_COUNT
    split: DatasetSplit = DatasetSplit.TRAIN
    # ids follow a cloud through subsets; empty means zero-padded positions
    cloud_ids: Sequence[str] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "clouds", tuple(self.clouds))
        ids = tuple(self.cloud_ids) or tuple(f"{index:05d}" for index in range(len(self.clouds)))
        if len(ids) != len(self.clouds):
            raise GeometryError(f"got {len(ids)} cloud ids for {len(self.clouds)} clouds")
        object.__setattr__(self, "cloud_ids", ids)
        if self.class_count < 2:
            raise GeometryError(f"class_count must be at least 2, got {self.class_count}")
        point_counts = {cloud.n for cloud in self.clouds}
        if len(point_counts) > 1:
            raise GeometryError(
                f"every cloud in a dataset must have the same point count, got {sorted(point_counts)}"
            )
        for index, cloud in enumerate(self.clouds):
            if cloud.label is None or not 0 <= cloud.label < self.class_count:
                raise GeometryError(
                    f"cloud {index} has label {cloud.label}, expected one in [0, {self.class_count})"
                )

    def __len__(self) -> int:
        return len(self.clouds)

    @property
    def labels(self) -> List[int]:
        return [int(cloud.label) for cloud in self.clouds]

    @property
    def point_count(self) -> Optional[int]:
        return self.clouds[0].n if self.clouds else None

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        return LabeledDataset(
            clouds=tuple(self.clouds[index] for index in indices),
            class_count=self.class_count,
            split=self.split,
            cloud_ids=tuple(self.cloud_ids[index] for index in indices),
        )


def as_points(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    """Return the coordinate matrix of a cloud or an array-like."""

    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


# ======================
# SHAPES
# ======================


def sample_surface(class_id: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample n raw surface points of a shape before jitter and normalization."""

    shape = _shape_class(class_id)
    samplers = {
        ShapeClass.SPHERE: _sample_sphere,
        ShapeClass.CUBE: _sample_cube,
        ShapeClass.CYLINDER: _sample_cylinder,
        ShapeClass.CONE: _sample_cone,
        ShapeClass.TORUS: _sample_torus,
        ShapeClass.PYRAMID: _sample_pyramid,
        ShapeClass.DISK: _sample_disk,
        ShapeClass.HELIX: _sample_helix,
    }
    return samplers[shape](n, rng)


def generate_shape(class_id: int, n: int, seed: int, jitter: float) -> PointCloud:
    """Generate one labelled, unit-ball normalized synthetic cloud.

    The result is a pure function of the arguments.
    """

    shape = _shape_class(class_id)
    if n < MIN_GENERATED_POINTS:
        raise GeometryError(f"generated clouds need at least {MIN_GENERATED_POINTS} points, got {n}")
    if not math.isfinite(jitter):
        raise GeometryError(f"jitter must be finite, got {jitter}")
    if jitter < 0:
        raise GeometryError(f"jitter must be non-negative, got {jitter}")

    rng = np.random.default_rng(seed)
    points = sample_surface(shape, n, rng)
    if jitter > 0:
        points = points + rng.normal(0.0, jitter, size=points.shape)
    return normalize_unit_ball(PointCloud(points=points, label=int(shape)))


def normalize_unit_ball(cloud: PointCloud) -> PointCloud:
    """Center a cloud on its centroid and scale its farthest point to norm 1."""

    points = cloud.points
    if np.all(points == points[0]):
        raise GeometryError("cannot normalize a cloud whose points are all identical")

    centered = points - points.mean(axis=0)
    scale = float(np.max(np.linalg.norm(centered, axis=1)))
    if scale == 0.0:
        raise GeometryError("cannot normalize a cloud with zero extent")
    return cloud.with_points(centered / scale)


def generate_dataset(
    per_class: int,
    n: int,
    seed: int,
    jitter: float,
    split: DatasetSplit = DatasetSplit.TRAIN,
    class_count: int = DEFAULT_CLASS_COUNT,
) -> LabeledDataset:
    """Generate a class-balanced dataset whose seed range is unique per split."""

    if per_class < 1 or per_class >= CLASS_SEED_STRIDE:
        raise GeometryError(f"per_class must be in [1, {CLASS_SEED_STRIDE}), got {per_class}")
    if not 2 <= class_count <= DEFAULT_CLASS_COUNT:
        raise GeometryError(f"class_count must be in [2, {DEFAULT_CLASS_COUNT}], got {class_count}")

    split = DatasetSplit(split)
    base_seed = seed * SEED_STRIDE + SPLIT_SEED_OFFSETS[split]
    clouds = [
        generate_shape(
            class_id=class_id,
            n=n,
            seed=base_seed + class_id * CLASS_SEED_STRIDE + index,
            jitter=jitter,
        )
        for class_id in range(class_count)
        for index in range(per_class)
    ]
    dataset = LabeledDataset(clouds=clouds, class_count=class_count, split=split)
    log_label_counts(dataset)
    return dataset


def stratified_indices(labels: Sequence[int], count: int, seed: int) -> List[int]:
    """Pick up to count indices, cycling over classes in label order."""

    rng = np.random.default_rng(seed)
    by_label: Dict[int, List[int]] = {}
    for index, label in enumerate(labels):
        by_label.setdefault(int(label), []).append(index)

    queues = {
        label: [indices[position] for position in rng.permutation(len(indices))]
        for label, indices in sorted(by_label.items())
    }
    picked: List[int] = []
    while len(picked) < count and any(queues.values()):
        for label in sorted(queues):
            if queues[label] and len(picked) < count:
                picked.append(queues[label].pop(0))
    return picked


def stratified_subset(dataset: LabeledDataset, count: int, seed: int) -> LabeledDataset:
    if count < 1:
        raise GeometryError(f"count must be positive, got {count}")
    return dataset.subset(stratified_indices(dataset.labels, count, seed))


def log_label_counts(dataset: LabeledDataset) -> None:
    counts = Counter(dataset.labels)
    summary = ", ".join(
        f"{ShapeClass(label).name.lower() if label < DEFAULT_CLASS_COUNT else label}={counts[label]}"
        for label in sorted(counts)
    )
    logger.info("%s split: %d clouds (%s)", dataset.split.value, len(dataset), summary)


# ======================
# FILE I/O
# ======================


def format_cloud(cloud: Union[PointCloud, np.ndarray]) -> str:
    points = as_points(cloud)
    lines = [f"{points.shape[0]} 3"]
    lines.extend(" ".join(f"{value:.17g}" for value in row) for row in points)
    return "\n".join(lines) + "\n"


def save_cloud(path: PathLike, cloud: Union[PointCloud, np.ndarray]) -> None:
    """Write a cloud as '<n> 3' followed by n rows of full-precision floats."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(format_cloud(cloud))


def parse_cloud(text: str, label: Optional[int] = None) -> PointCloud:
    """Parse the cloud text format, reporting 1-based line numbers on errors."""

    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CloudFormatError("empty cloud file", line_number=1)

    header = lines[0].split()
    if len(header) != 2:
        raise CloudFormatError(f"malformed header {lines[0]!r}, expected '<n> 3'", line_number=1)
    try:
        count, columns = int(header[0]), int(header[1])
    except ValueError as exc:
        raise CloudFormatError(f"malformed header {lines[0]!r}, expected '<n> 3'", line_number=1) from exc
    if columns != 3:
        raise CloudFormatError(f"expected 3 columns in header, got {columns}", line_number=1)
    if count < MIN_POINTS:
        raise CloudFormatError(f"a cloud needs at least {MIN_POINTS} points, header says {count}", line_number=1)

    rows = []
    for offset in range(count):
        line_number = offset + 2
        if offset + 1 >= len(lines):
            raise CloudFormatError(
                f"expected {count} point rows, file ends after {offset}",
                line_number=line_number,
            )
        tokens = lines[offset + 1].split()
        if len(tokens) != 3:
            raise CloudFormatError(f"expected 3 columns, got {len(tokens)}", line_number=line_number)
        try:
            row = [float(token) for token in tokens]
        except ValueError as exc:
            raise CloudFormatError(f"non-numeric token in {lines[offset + 1]!r}", line_number=line_number) from exc
        if not all(math.isfinite(value) for value in row):
            raise CloudFormatError(f"non-finite token in {lines[offset + 1]!r}", line_number=line_number)
        rows.append(row)

    for offset, extra in enumerate(lines[count + 1:], start=count + 2):
        if extra.strip():
            raise CloudFormatError(f"unexpected content after {count} rows", line_number=offset)

    return PointCloud(points=np.array(rows, dtype=np.float64), label=label)


def load_cloud(path: PathLike, label: Optional[int] = None) -> PointCloud:
    return parse_cloud(Path(path).read_text(encoding="utf-8"), label=label)


def manifest_path(directory: PathLike, split: DatasetSplit) -> Path:
    return Path(directory) / f"{DatasetSplit(split).value}.manifest"


def save_dataset(dataset: LabeledDataset, directory: PathLike) -> Path:
    """Write every cloud plus a '<relative-path>,<label>' manifest."""

    directory = Path(directory)
    entries = []
    for index, cloud in enumerate(dataset.clouds):
        relative = f"{dataset.split.value}/cloud_{index:05d}.xyz"
        save_cloud(directory / relative, cloud)
        entries.append(f"{relative},{cloud.label}")

    manifest = manifest_path(directory, dataset.split)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    with manifest.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write("".join(f"{entry}\n" for entry in entries))
    return manifest


def load_dataset(
    directory: PathLike,
    split: DatasetSplit = DatasetSplit.TRAIN,
    class_count: Optional[int] = None,
) -> LabeledDataset:
    """Load a manifest and its clouds.

    Any directory holding cloud files and a manifest in this layout is
    accepted, which is how externally converted datasets are brought in.
    """

    directory = Path(directory)
    split = DatasetSplit(split)
    manifest = manifest_path(directory, split)
    clouds = []
    for line_number, line in enumerate(manifest.read_text(encoding="utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        relative, separator, label_text = line.rpartition(",")
        if not separator or not relative:
            raise CloudFormatError(f"expected '<relative-path>,<label>' in {manifest}", line_number=line_number)
        try:
            label = int(label_text)
        except ValueError as exc:
            raise CloudFormatError(f"label {label_text!r} is not an integer", line_number=line_number) from exc
        clouds.append(load_cloud(directory / relative, label=label))

    if class_count is None:
        class_count = max(DEFAULT_CLASS_COUNT, max((cloud.label for cloud in clouds), default=0) + 1)
    return LabeledDataset(clouds=clouds, class_count=class_count, split=split)


# ======================
# SHAPE SAMPLERS
# ======================


def _shape_class(class_id: int) -> ShapeClass:
    try:
        return ShapeClass(int(class_id))
    except ValueError as exc:
        raise GeometryError(
            f"unknown class_id {class_id}, expected one in 0..{DEFAULT_CLASS_COUNT - 1}"
        ) from exc


def _sample_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    directions = rng.normal(size=(n, 3))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def _sample_cube(n: int, rng: np.random.Generator) -> np.ndarray:
    faces = rng.integers(0, 6, size=n)
    points = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = faces // 2
    points[np.arange(n), axis] = np.where(faces % 2 == 0, 1.0, -1.0)
    return points


def _sample_disk_points(n: int, rng: np.random.Generator, z: float) -> np.ndarray:
    radius = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.column_stack([radius * np.cos(theta), radius * np.sin(theta), np.full(n, z)])


def _sample_cylinder(n: int, rng: np.random.Generator) -> np.ndarray:
    # lateral area 4π against two caps of π each
    part = rng.uniform(size=n)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    lateral = np.column_stack([np.cos(theta), np.sin(theta), rng.uniform(-1.0, 1.0, size=n)])
    top = _sample_disk_points(n, rng, 1.0)
    bottom = _sample_disk_points(n, rng, -1.0)
    return np.where(
        (part < 2 / 3)[:, None],
        lateral,
        np.where((part < 5 / 6)[:, None], top, bottom),
    )


def _sample_cone(n: int, rng: np.random.Generator) -> np.ndarray:
    slant = math.sqrt(5.0)
    part = rng.uniform(size=n)
    fraction = np.sqrt(rng.uniform(size=n))
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    lateral = np.column_stack([
        fraction * np.cos(theta),
        fraction * np.sin(theta),
        1.0 - 2.0 * fraction,
    ])
    base = _sample_disk_points(n, rng, -1.0)
    return np.where((part < slant / (slant + 1.0))[:, None], lateral, base)


def _sample_torus(n: int, rng: np.random.Generator) -> np.ndarray:
    major, minor = TORUS_MAJOR_RADIUS, TORUS_MINOR_RADIUS
    accepted = []
    total = 0
    while total < n:
        u = rng.uniform(0.0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0.0, 2 * np.pi, size=2 * n)
        # rejection keeps the density uniform in surface area
        keep = rng.uniform(size=2 * n) < (major + minor * np.cos(v)) / (major + minor)
        ring = major + minor * np.cos(v[keep])
        batch = np.column_stack([
            ring * np.cos(u[keep]),
            ring * np.sin(u[keep]),
            minor * np.sin(v[keep]),
        ])
        accepted.append(batch)
        total += batch.shape[0]
    return np.concatenate(accepted)[:n]


def _sample_pyramid(n: int, rng: np.random.Generator) -> np.ndarray:
    apex = np.array([0.0, 0.0, 1.0])
    corners = np.array([
        [-1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0],
        [1.0, 1.0, -1.0],
        [-1.0, 1.0, -1.0],
    ])
    triangles = [(corners[0], corners[1], corners[2]), (corners[0], corners[2], corners[3])]
    triangles.extend((corners[index], corners[(index + 1) % 4], apex) for index in range(4))
    triangles = np.array(triangles)

    edges_a = triangles[:, 1] - triangles[:, 0]
    edges_b = triangles[:, 2] - triangles[:, 0]
    areas = 0.5 * np.linalg.norm(np.cross(edges_a, edges_b), axis=1)
    chosen = rng.choice(len(triangles), size=n, p=areas / areas.sum())

    r1 = np.sqrt(rng.uniform(size=n))[:, None]
    r2 = rng.uniform(size=n)[:, None]
    picked = triangles[chosen]
    return (1 - r1) * picked[:, 0] + r1 * (1 - r2) * picked[:, 1] + r1 * r2 * picked[:, 2]


def _sample_disk(n: int, rng: np.random.Generator) -> np.ndarray:
    return _sample_disk_points(n, rng, 0.0)


def _sample_helix(n: int, rng: np.random.Generator) -> np.ndarray:
    rise = 1.0 / (2 * np.pi)
    t = rng.uniform(0.0, 2 * np.pi * HELIX_TURNS, size=n)
    phi = rng.uniform(0.0, 2 * np.pi, size=n)

    center = np.column_stack([np.cos(t), np.sin(t), t * rise - HELIX_TURNS / 2])
    tangent = np.column_stack([-np.sin(t), np.cos(t), np.full(n, rise)])
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.column_stack([-np.cos(t), -np.sin(t), np.zeros(n)])
    binormal = np.cross(tangent, normal)
    offset = np.cos(phi)[:, None] * normal + np.sin(phi)[:, None] * binormal
    return center + HELIX_TUBE_RADIUS * offset
