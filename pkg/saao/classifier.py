"""Mini PointNet-style classifiers with hand-written reverse-mode gradients.

Architecture A: per-point MLP 3→32→64 (ReLU), max pooling, head 64→32→c.
Architecture B: per-point MLP 3→48→48 (ReLU), mean pooling, head 48→c.

Every function accepts one cloud (n×3) or a batch (B×n×3). Per-point layers
use einsum so a point's activations never depend on where it sits in the
cloud, and mean pooling sums sorted values; both keep logits bit-identical
under point permutations.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .adam import Adam
from .errors import ModelError, ModelFormatError
from .geometry import LabeledDataset, PointCloud, as_points
from .saao_config import TrainConfig
from .saao_state import ArchId, PoolingKind

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"SAAO-MDL1"
EVAL_CHUNK = 256

# (point layer widths, head hidden widths, pooling)
ARCHITECTURES: Dict[ArchId, Tuple[Tuple[int, ...], Tuple[int, ...], PoolingKind]] = {
    ArchId.A: ((32, 64), (32,), PoolingKind.MAX),
    ArchId.B: ((48, 48), (), PoolingKind.MEAN),
}

CloudBatch = Union[PointCloud, np.ndarray]


@dataclass(frozen=True, eq=False)
class DenseLayer:
    """Affine layer y = xW + b with W stored input-major."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.weight.shape[0]), int(self.weight.shape[1])


@dataclass(frozen=True, eq=False)
class MiniPointNet:
    """Immutable classifier parameters."""

    arch_id: ArchId
    point_layers: Tuple[DenseLayer, ...]
    head_layers: Tuple[DenseLayer, ...]

    @property
    def pooling(self) -> PoolingKind:
        return ARCHITECTURES[self.arch_id][2]

    @property
    def class_count(self) -> int:
        return int(self.head_layers[-1].bias.shape[0])

    @property
    def layers(self) -> Tuple[DenseLayer, ...]:
        return self.point_layers + self.head_layers

    def parameters(self) -> List[np.ndarray]:
        """Weights and biases in declaration order."""

        params: List[np.ndarray] = []
        for layer in self.layers:
            params.extend((layer.weight, layer.bias))
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "MiniPointNet":
        if len(params) != 2 * len(self.layers):
            raise ModelError(f"expected {2 * len(self.layers)} parameter arrays, got {len(params)}")
        layers = [
            DenseLayer(weight=np.array(params[2 * index], dtype=np.float64), bias=np.array(params[2 * index + 1], dtype=np.float64))
            for index in range(len(self.layers))
        ]
        split = len(self.point_layers)
        return MiniPointNet(
            arch_id=self.arch_id,
            point_layers=tuple(layers[:split]),
            head_layers=tuple(layers[split:]),
        )


@dataclass
class _ForwardCache:
    inputs: np.ndarray
    point_inputs: List[np.ndarray]
    point_preacts: List[np.ndarray]
    pooled: np.ndarray
    pool_argmax: Optional[np.ndarray]
    head_inputs: List[np.ndarray]
    head_preacts: List[np.ndarray]
    logits: np.ndarray


def layer_dims(arch_id: ArchId, class_count: int) -> Tuple[List[Tuple[int, int]], List[Tuple[int, int]]]:
    point_widths, head_widths, _ = ARCHITECTURES[ArchId(arch_id)]
    point_dims = list(zip((3,) + point_widths[:-1], point_widths))
    head_sizes = (point_widths[-1],) + head_widths + (class_count,)
    head_dims = list(zip(head_sizes[:-1], head_sizes[1:]))
    return point_dims, head_dims


def init_model(arch_id: ArchId, class_count: int, seed: int) -> MiniPointNet:
    """He-normal weights and zero biases."""

    if class_count < 2:
        raise ModelError(f"class_count must be at least 2, got {class_count}")
    arch_id = ArchId(arch_id)
    rng = np.random.default_rng(seed)
    point_dims, head_dims = layer_dims(arch_id, class_count)

    def build(dims: List[Tuple[int, int]]) -> Tuple[DenseLayer, ...]:
        return tuple(
            DenseLayer(
                weight=rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)),
                bias=np.zeros(fan_out),
            )
            for fan_in, fan_out in dims
        )

    return MiniPointNet(arch_id=arch_id, point_layers=build(point_dims), head_layers=build(head_dims))


# ======================
# FORWARD / BACKWARD
# ======================


def forward(model: MiniPointNet, cloud: CloudBatch) -> np.ndarray:
    """Logits for one cloud (length c) or a batch (B×c)."""

    batch, single = _as_batch(cloud)
    logits = _forward(model, batch).logits
    return logits[0] if single else logits


def predict(model: MiniPointNet, cloud: CloudBatch) -> Union[int, np.ndarray]:
    logits = forward(model, cloud)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)


def input_gradient(model: MiniPointNet, cloud: CloudBatch, grad_logits: np.ndarray) -> np.ndarray:
    """Gradient of ⟨logits, grad_logits⟩ with respect to the point coordinates.

    Max pooling routes each feature's gradient to its lowest-index argmax point;
    the ReLU subgradient at exactly zero is 0.
    """

    batch, single = _as_batch(cloud)
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if single:
        grad_logits = grad_logits[None, :]
    if grad_logits.shape != (batch.shape[0], model.class_count):
        raise ModelError(
            f"grad_logits must have shape {(batch.shape[0], model.class_count)}, got {grad_logits.shape}"
        )
    cache = _forward(model, batch)
    grad_inputs, _ = _backward(model, cache, grad_logits, need_params=False)
    return grad_inputs[0] if single else grad_inputs


def softmax_cross_entropy(logits: np.ndarray, labels: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""

    labels = np.asarray(labels, dtype=np.intp)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(logits.shape[0])
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / logits.shape[0]


def param_gradient(
    model: MiniPointNet,
    batch: CloudBatch,
    labels: Sequence[int],
) -> Tuple[float, List[np.ndarray]]:
    """Softmax cross-entropy and its gradient for every weight and bias."""

    points, single = _as_batch(batch)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels.shape[0] != points.shape[0]:
        raise ModelError(f"got {labels.shape[0]} labels for {points.shape[0]} clouds")
    if np.any(labels < 0) or np.any(labels >= model.class_count):
        raise ModelError(f"labels must lie in [0, {model.class_count})")

    cache = _forward(model, points)
    loss, grad_logits = softmax_cross_entropy(cache.logits, labels)
    _, grads = _backward(model, cache, grad_logits, need_params=True)
    return loss, grads


def _as_batch(cloud: CloudBatch) -> Tuple[np.ndarray, bool]:
    points = as_points(cloud)
    single = points.ndim == 2
    if single:
        points = points[None, :, :]
    if points.ndim != 3 or points.shape[2] != 3:
        raise ModelError(f"expected n×3 or B×n×3 input, got shape {points.shape}")
    if points.shape[1] < 1:
        raise ModelError("a cloud needs at least one point")
    if not np.all(np.isfinite(points)):
        raise ModelError("classifier input must be finite")
    return points, single


def _forward(model: MiniPointNet, points: np.ndarray) -> _ForwardCache:
    hidden = points
    point_inputs, point_preacts = [], []
    for layer in model.point_layers:
        point_inputs.append(hidden)
        preact = np.einsum("bnk,kh->bnh", hidden, layer.weight) + layer.bias
        point_preacts.append(preact)
        hidden = np.maximum(preact, 0.0)

    pool_argmax = None
    if model.pooling is PoolingKind.MAX:
        pool_argmax = np.argmax(hidden, axis=1)
        pooled = np.take_along_axis(hidden, pool_argmax[:, None, :], axis=1)[:, 0, :]
    else:
        pooled = np.sort(hidden, axis=1).sum(axis=1) / hidden.shape[1]

    features = pooled
    head_inputs, head_preacts = [], []
    for index, layer in enumerate(model.head_layers):
        head_inputs.append(features)
        preact = np.einsum("bk,kh->bh", features, layer.weight) + layer.bias
        head_preacts.append(preact)
        features = preact if index == len(model.head_layers) - 1 else np.maximum(preact, 0.0)

    return _ForwardCache(
        inputs=points,
        point_inputs=point_inputs,
        point_preacts=point_preacts,
        pooled=pooled,
        pool_argmax=pool_argmax,
        head_inputs=head_inputs,
        head_preacts=head_preacts,
        logits=features,
    )


def _backward(
    model: MiniPointNet,
    cache: _ForwardCache,
    grad_logits: np.ndarray,
    need_params: bool,
) -> Tuple[np.ndarray, List[np.ndarray]]:
    head_grads: List[np.ndarray] = []
    grad = grad_logits
    for index in reversed(range(len(model.head_layers))):
        layer = model.head_layers[index]
        if need_params:
            head_grads = [
                np.einsum("bk,bh->kh", cache.head_inputs[index], grad),
                grad.sum(axis=0),
            ] + head_grads
        grad = np.einsum("bh,kh->bk", grad, layer.weight)
        if index > 0:
            grad = grad * (cache.head_preacts[index - 1] > 0.0)

    batch, n, features = cache.point_preacts[-1].shape
    if model.pooling is PoolingKind.MAX:
        grad_hidden = np.zeros((batch, n, features))
        np.put_along_axis(grad_hidden, cache.pool_argmax[:, None, :], grad[:, None, :], axis=1)
    else:
        grad_hidden = np.broadcast_to(grad[:, None, :] / n, (batch, n, features))

    point_grads: List[np.ndarray] = []
    for index in reversed(range(len(model.point_layers))):
        layer = model.point_layers[index]
        grad_preact = grad_hidden * (cache.point_preacts[index] > 0.0)
        if need_params:
            point_grads = [
                np.einsum("bnk,bnh->kh", cache.point_inputs[index], grad_preact),
                grad_preact.sum(axis=(0, 1)),
            ] + point_grads
        grad_hidden = np.einsum("bnh,kh->bnk", grad_preact, layer.weight)

    return np.array(grad_hidden), point_grads + head_grads


# ======================
# TRAINING
# ======================


def train(
    dataset: LabeledDataset,
    arch_id: ArchId,
    cfg: TrainConfig,
    loss_history: Optional[List[float]] = None,
) -> MiniPointNet:
    """Mini-batch Adam on softmax cross-entropy; deterministic given cfg.seed."""

    if len(dataset) == 0:
        raise ModelError("cannot train on an empty dataset")

    arch_id = ArchId(arch_id)
    model = init_model(arch_id, dataset.class_count, seed=cfg.seed)
    points = np.stack([cloud.points for cloud in dataset.clouds])
    labels = np.array(dataset.labels, dtype=np.intp)
    rng = np.random.default_rng(cfg.seed + 1)
    optimizer = Adam(lr=cfg.learning_rate)
    params = tuple(model.parameters())
    state = optimizer.init(params)

    epochs = tqdm(range(cfg.epochs), desc=f"train {arch_id.value}", disable=None)
    for epoch in epochs:
        order = rng.permutation(len(labels))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chosen = order[start:start + cfg.batch_size]
            loss, grads = param_gradient(model.with_parameters(params), points[chosen], labels[chosen])
            params, state = optimizer.update(params, grads, state)
            batch_losses.append(loss)
        epoch_loss = float(np.mean(batch_losses))
        if loss_history is not None:
            loss_history.append(epoch_loss)
        logger.debug("arch %s epoch %d loss %.6f", arch_id.value, epoch + 1, epoch_loss)

    model = model.with_parameters(params)
    logger.info("trained arch %s for %d epochs (final loss %.4f)", arch_id.value, cfg.epochs, epoch_loss if cfg.epochs else float("nan"))
    return model


def evaluate(model: MiniPointNet, dataset: LabeledDataset) -> float:
    """Fraction of clouds whose predicted label matches the stored label."""

    if len(dataset) == 0:
        raise ModelError("cannot evaluate on an empty dataset")
    points = np.stack([cloud.points for cloud in dataset.clouds])
    predictions = np.concatenate([
        predict(model, points[start:start + EVAL_CHUNK])
        for start in range(0, len(points), EVAL_CHUNK)
    ])
    return float(np.mean(predictions == np.array(dataset.labels)))


# ======================
# SERIALIZATION
# ======================


def save_model(path: Union[str, Path], model: MiniPointNet) -> None:
    """Magic, arch byte, layer counts and dims (u32 LE), then float64 LE weights."""

    header = [MODEL_MAGIC, model.arch_id.value.encode("ascii")]
    header.append(struct.pack("<II", len(model.point_layers), len(model.head_layers)))
    for layer in model.layers:
        header.append(struct.pack("<II", *layer.shape))
    body = [
        np.ascontiguousarray(array, dtype="<f8").tobytes()
        for layer in model.layers
        for array in (layer.weight, layer.bias)
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(header + body))


def load_model(path: Union[str, Path]) -> MiniPointNet:
    data = Path(path).read_bytes()
    offset = len(MODEL_MAGIC)
    if data[:offset] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic bytes")
    try:
        arch_id = ArchId(data[offset:offset + 1].decode("ascii"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: unknown architecture byte {data[offset:offset + 1]!r}") from exc
    offset += 1

    try:
        point_count, head_count = struct.unpack_from("<II", data, offset)
        offset += 8
        dims = []
        for _ in range(point_count + head_count):
            dims.append(struct.unpack_from("<II", data, offset))
            offset += 8
    except struct.error as exc:
        raise ModelFormatError(f"{path}: truncated layer header") from exc

    class_count = dims[-1][1] if dims else 0
    expected_point, expected_head = layer_dims(arch_id, max(class_count, 2))
    if [tuple(d) for d in dims] != expected_point + expected_head:
        raise ModelFormatError(f"{path}: layer dimensions {dims} do not match architecture {arch_id.value}")

    expected_floats = sum(fan_in * fan_out + fan_out for fan_in, fan_out in dims)
    if len(data) - offset != 8 * expected_floats:
        raise ModelFormatError(
            f"{path}: expected {8 * expected_floats} weight bytes, found {len(data) - offset}"
        )

    values = np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64)
    layers = []
    cursor = 0
    for fan_in, fan_out in dims:
        weight = values[cursor:cursor + fan_in * fan_out].reshape(fan_in, fan_out)
        cursor += fan_in * fan_out
        bias = values[cursor:cursor + fan_out]
        cursor += fan_out
        layers.append(DenseLayer(weight=weight.copy(), bias=bias.copy()))
    return MiniPointNet(
        arch_id=arch_id,
        point_layers=tuple(layers[:point_count]),
        head_layers=tuple(layers[point_count:]),
    )
