import tempfile
import unittest
from pathlib import Path

import numpy as np

from saao.classifier import (
    MODEL_MAGIC,
    _forward,
    evaluate,
    forward,
    init_model,
    input_gradient,
    load_model,
    param_gradient,
    predict,
    save_model,
    softmax_cross_entropy,
    train,
)
from saao.errors import ModelError, ModelFormatError
from saao.geometry import generate_dataset
from saao.saao_config import TrainConfig
from saao.saao_state import ArchId, PoolingKind

TIE_GAP = 1e-4


def is_tie_free(model, points):
    cache = _forward(model, points[None])
    preacts = list(cache.point_preacts) + list(cache.head_preacts[:-1])
    if any(float(np.min(np.abs(z))) < TIE_GAP for z in preacts):
        return False
    if model.pooling is PoolingKind.MAX:
        top_two = np.sort(cache.point_preacts[-1][0], axis=0)[-2:]
        active = top_two[1] > 0.0
        if np.any(active) and float(np.min((top_two[1] - top_two[0])[active])) < TIE_GAP:
            return False
    return True


def tie_free_instance(rng, arch, n=6, classes=4):
    while True:
        model = init_model(arch, classes, seed=int(rng.integers(0, 2**31)))
        params = [param + rng.normal(0.0, 0.1, size=param.shape) for param in model.parameters()]
        model = model.with_parameters(params)
        points = rng.normal(size=(n, 3))
        if is_tie_free(model, points):
            return model, points


class ForwardTests(unittest.TestCase):
    def test_layer_shapes(self):
        model_a = init_model(ArchId.A, 8, seed=0)
        model_b = init_model(ArchId.B, 8, seed=0)

        self.assertEqual([layer.shape for layer in model_a.layers], [(3, 32), (32, 64), (64, 32), (32, 8)])
        self.assertEqual([layer.shape for layer in model_b.layers], [(3, 48), (48, 48), (48, 8)])
        self.assertEqual(model_a.pooling, PoolingKind.MAX)
        self.assertEqual(model_b.pooling, PoolingKind.MEAN)

    def test_permutation_invariance_is_bit_exact(self):
        rng = np.random.default_rng(0)
        points = rng.normal(size=(40, 3))
        for arch in ArchId:
            model = init_model(arch, 8, seed=3)
            logits = forward(model, points)
            for _ in range(100):
                permuted = points[rng.permutation(40)]
                self.assertEqual(forward(model, permuted).tobytes(), logits.tobytes())

    def test_zero_parameters_give_zero_logits(self):
        model = init_model(ArchId.A, 5, seed=0)
        model = model.with_parameters([np.zeros_like(param) for param in model.parameters()])

        np.testing.assert_array_equal(forward(model, np.ones((10, 3))), np.zeros(5))

    def test_batched_forward_matches_single(self):
        rng = np.random.default_rng(1)
        model = init_model(ArchId.B, 8, seed=1)
        batch = rng.normal(size=(3, 16, 3))

        logits = forward(model, batch)

        self.assertEqual(logits.shape, (3, 8))
        for index in range(3):
            np.testing.assert_allclose(logits[index], forward(model, batch[index]), atol=1e-12)

    def test_fewer_points_are_accepted(self):
        model = init_model(ArchId.A, 8, seed=0)

        self.assertEqual(forward(model, np.zeros((1, 3))).shape, (8,))

    def test_non_finite_input_rejected(self):
        model = init_model(ArchId.A, 8, seed=0)
        points = np.zeros((4, 3))
        points[0, 0] = np.inf

        with self.assertRaises(ModelError):
            forward(model, points)

    def test_predict_returns_argmax(self):
        model = init_model(ArchId.A, 8, seed=2)
        points = np.random.default_rng(2).normal(size=(12, 3))

        self.assertEqual(predict(model, points), int(np.argmax(forward(model, points))))


class GradientTests(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(42)

    def test_zero_upstream_gives_zero_gradient(self):
        model = init_model(ArchId.A, 8, seed=0)

        gradient = input_gradient(model, np.ones((6, 3)), np.zeros(8))

        np.testing.assert_array_equal(gradient, np.zeros((6, 3)))

    def test_mean_pool_active_regime_is_uniform_over_points(self):
        model = init_model(ArchId.B, 4, seed=0)
        params = [np.abs(param) + 0.01 for param in model.parameters()]
        model = model.with_parameters(params)
        points = self.rng.uniform(0.1, 1.0, size=(9, 3))

        gradient = input_gradient(model, points, np.array([1.0, -0.5, 0.25, 2.0]))

        for row in gradient[1:]:
            np.testing.assert_array_equal(row, gradient[0])

    def test_input_gradient_matches_finite_differences(self):
        step = 1e-5
        for arch in ArchId:
            for _ in range(100):
                model, points = tie_free_instance(self.rng, arch)
                upstream = self.rng.normal(size=model.class_count)
                analytic = input_gradient(model, points, upstream)
                numeric = np.zeros_like(points)
                for index in np.ndindex(points.shape):
                    up, down = points.copy(), points.copy()
                    up[index] += step
                    down[index] -= step
                    numeric[index] = (forward(model, up) - forward(model, down)) @ upstream / (2 * step)
                error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
                self.assertLess(float(error), 1e-5)

    def test_param_gradient_matches_finite_differences(self):
        step = 1e-5
        for arch in ArchId:
            for _ in range(10):
                model, _ = tie_free_instance(self.rng, arch)
                batch = self.rng.normal(size=(3, 6, 3))
                if not all(is_tie_free(model, cloud) for cloud in batch):
                    continue
                labels = self.rng.integers(0, model.class_count, size=3)
                _, analytic = param_gradient(model, batch, labels)
                params = model.parameters()
                for _ in range(30):
                    which = int(self.rng.integers(0, len(params)))
                    index = tuple(int(self.rng.integers(0, size)) for size in params[which].shape)
                    up = [param.copy() for param in params]
                    down = [param.copy() for param in params]
                    up[which][index] += step
                    down[which][index] -= step
                    loss_up, _ = param_gradient(model.with_parameters(up), batch, labels)
                    loss_down, _ = param_gradient(model.with_parameters(down), batch, labels)
                    numeric = (loss_up - loss_down) / (2 * step)
                    self.assertAlmostEqual(analytic[which][index], numeric, delta=1e-5 * max(1.0, abs(numeric)))

    def test_stationary_point_with_balanced_labels(self):
        model = init_model(ArchId.A, 4, seed=0)
        model = model.with_parameters([np.zeros_like(param) for param in model.parameters()])
        batch = self.rng.normal(size=(4, 8, 3))

        _, grads = param_gradient(model, batch, [0, 1, 2, 3])

        for grad in grads:
            np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_cross_entropy_gradient_rows_sum_to_zero(self):
        logits = self.rng.normal(size=(5, 8))

        loss, grad = softmax_cross_entropy(logits, [0, 1, 2, 3, 4])

        self.assertGreater(loss, 0.0)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)

    def test_labels_must_match_batch(self):
        model = init_model(ArchId.A, 4, seed=0)

        with self.assertRaises(ModelError):
            param_gradient(model, np.zeros((2, 5, 3)), [0])


class TrainingTests(unittest.TestCase):
    def setUp(self):
        self.dataset = generate_dataset(per_class=6, n=32, seed=3, jitter=0.02, class_count=4)
        self.cfg = TrainConfig(epochs=4, batch_size=8, learning_rate=0.01, seed=5)

    def test_training_is_bit_reproducible(self):
        first = train(self.dataset, ArchId.A, self.cfg)
        second = train(self.dataset, ArchId.A, self.cfg)

        for a, b in zip(first.parameters(), second.parameters()):
            self.assertEqual(a.tobytes(), b.tobytes())

    def test_training_lowers_the_loss(self):
        history = []

        model = train(self.dataset, ArchId.B, self.cfg.model_copy(update={"epochs": 8}), loss_history=history)

        self.assertEqual(len(history), 8)
        self.assertLess(history[-1], history[0])
        self.assertTrue(0.0 <= evaluate(model, self.dataset) <= 1.0)


class ModelFileTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / "model.mdl"

    def test_roundtrip_is_bit_identical(self):
        rng = np.random.default_rng(0)
        for arch in ArchId:
            model = init_model(arch, 8, seed=7)
            save_model(self.path, model)
            loaded = load_model(self.path)
            self.assertEqual(loaded.arch_id, arch)
            for _ in range(10):
                points = rng.normal(size=(20, 3))
                self.assertEqual(forward(loaded, points).tobytes(), forward(model, points).tobytes())

    def test_file_starts_with_magic_and_arch(self):
        save_model(self.path, init_model(ArchId.B, 8, seed=0))

        data = self.path.read_bytes()

        self.assertEqual(data[:len(MODEL_MAGIC)], MODEL_MAGIC)
        self.assertEqual(data[len(MODEL_MAGIC):len(MODEL_MAGIC) + 1], b"B")

    def test_bad_magic_rejected(self):
        save_model(self.path, init_model(ArchId.A, 8, seed=0))
        data = bytearray(self.path.read_bytes())
        data[0:4] = b"XXXX"
        self.path.write_bytes(bytes(data))

        with self.assertRaises(ModelFormatError):
            load_model(self.path)

    def test_truncated_weights_rejected(self):
        save_model(self.path, init_model(ArchId.A, 8, seed=0))
        self.path.write_bytes(self.path.read_bytes()[:-8])

        with self.assertRaises(ModelFormatError):
            load_model(self.path)


if __name__ == "__main__":
    unittest.main()
