"""Kind and lifecycle codes used across the SAAO domain."""

from enum import Enum, IntEnum


class ShapeClass(IntEnum):
    """Synthetic shape classes; the value is the class label."""

    SPHERE = 0
    CUBE = 1
    CYLINDER = 2
    CONE = 3
    TORUS = 4
    PYRAMID = 5
    DISK = 6
    HELIX = 7


class DatasetSplit(str, Enum):
    """Dataset split tags."""

    TRAIN = "train"
    TEST = "test"


class ArchId(str, Enum):
    """Mini classifier architectures.

    A pools per-point features with max, B with mean.
    """

    A = "A"
    B = "B"


class PoolingKind(str, Enum):
    """Symmetric pooling over the point axis."""

    MAX = "max"
    MEAN = "mean"


class DefenseKind(str, Enum):
    """Input-transformation defenses."""

    SRS = "srs"
    SOR = "sor"


class AttackMode(str, Enum):
    """How per-cloud attacks share the mix metric.

    Sequential mode carries one metric across the batch; parallel mode gives
    every worker its own copy of the initial metric.
    """

    SEQUENTIAL_SHARED_M = "sequential-shared-M"
    PARALLEL_PER_WORKER_M = "parallel-per-worker-M"


class AttackMethod(str, Enum):
    """Attack methods the harness can run."""

    SAAO = "saao"
    SAAO_NO_PATH = "saao-nopath"
    IFGSM = "ifgsm"
