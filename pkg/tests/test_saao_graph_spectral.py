import unittest

import numpy as np

from saao.errors import SpectralError
from saao.geometry import PointCloud, generate_shape
from saao.graph_spectral import (
    SpectralCloud,
    compute_basis,
    default_low_band,
    eigh,
    gft,
    igft,
    knn_graph,
    laplacian,
    low_band_energy_fraction,
    make_mask,
    spectral_energy,
)
from saao.saao_state import ShapeClass


def brute_force_knn(points, k):
    n = len(points)
    adjacency = np.zeros((n, n))
    for i in range(n):
        distances = [(float(np.sum((points[i] - points[j]) ** 2)), j) for j in range(n) if j != i]
        for _, j in sorted(distances)[:k]:
            adjacency[i, j] = 1.0
    return np.maximum(adjacency, adjacency.T)


class KnnGraphTests(unittest.TestCase):
    def test_collinear_points(self):
        points = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0], [10.0, 0, 0]])

        adjacency = knn_graph(points[:3], k=1)

        np.testing.assert_array_equal(adjacency, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])

    def test_full_neighbourhood_gives_complete_graph(self):
        points = np.random.default_rng(0).normal(size=(7, 3))

        adjacency = knn_graph(points, k=6)

        np.testing.assert_array_equal(adjacency, np.ones((7, 7)) - np.eye(7))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for trial in range(100):
            points = rng.normal(size=(64, 3))
            np.testing.assert_array_equal(
                knn_graph(points, k=10), brute_force_knn(points, 10), err_msg=f"cloud {trial}"
            )

    def test_rows_have_at_least_k_neighbours(self):
        adjacency = knn_graph(np.random.default_rng(2).normal(size=(30, 3)), k=4)

        self.assertTrue(np.all(adjacency.sum(axis=1) >= 4))
        np.testing.assert_array_equal(adjacency, adjacency.T)
        np.testing.assert_array_equal(np.diag(adjacency), 0)

    def test_k_must_be_below_n(self):
        with self.assertRaises(SpectralError):
            knn_graph(np.zeros((5, 3)), k=5)


class LaplacianTests(unittest.TestCase):
    def test_single_edge(self):
        np.testing.assert_array_equal(laplacian(np.array([[0, 1], [1, 0]])), [[1, -1], [-1, 1]])

    def test_complete_triangle(self):
        result = laplacian(np.ones((3, 3)) - np.eye(3))

        np.testing.assert_array_equal(np.diag(result), [2, 2, 2])
        self.assertEqual(result[0, 1], -1)

    def test_rows_sum_to_zero(self):
        result = laplacian(knn_graph(np.random.default_rng(3).normal(size=(40, 3)), k=5))

        np.testing.assert_allclose(result.sum(axis=1), 0.0, atol=1e-12)

    def test_asymmetric_adjacency_rejected(self):
        with self.assertRaises(SpectralError):
            laplacian(np.array([[0, 1, 0], [0, 0, 1], [0, 1, 0]]))


class EighTests(unittest.TestCase):
    def test_two_by_two(self):
        basis = eigh(np.array([[1.0, -1.0], [-1.0, 1.0]]))

        np.testing.assert_allclose(basis.eigenvalues, [0.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(basis.q[:, 0], [1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-12)

    def test_diagonal_input_gives_signed_permutation(self):
        basis = eigh(np.diag([3.0, 1.0, 2.0]))

        np.testing.assert_array_equal(basis.eigenvalues, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(basis.q, [[0, 0, 1], [1, 0, 0], [0, 1, 0]])

    def test_random_symmetric_reconstruction(self):
        rng = np.random.default_rng(4)
        raw = rng.normal(size=(64, 64))
        matrix = raw + raw.T

        basis = eigh(matrix)

        reconstruction = basis.q @ np.diag(basis.eigenvalues) @ basis.q.T
        self.assertLess(float(np.max(np.abs(reconstruction - matrix))), 1e-8)
        self.assertLess(float(np.max(np.abs(basis.q.T @ basis.q - np.eye(64)))), 1e-9)
        self.assertTrue(np.all(np.diff(basis.eigenvalues) >= 0))

    def test_knn_laplacian_has_constant_kernel_vector(self):
        cloud = generate_shape(ShapeClass.SPHERE, 64, seed=9, jitter=0.02)
        matrix = laplacian(knn_graph(cloud, k=10))

        basis = eigh(matrix)

        residual = matrix @ basis.q - basis.q * basis.eigenvalues
        self.assertLess(float(np.max(np.abs(residual))), 1e-8 * max(1.0, float(np.max(np.abs(matrix).sum(axis=1)))))
        self.assertGreater(float(basis.eigenvalues[0]), -1e-9)
        self.assertLess(float(basis.eigenvalues[0]), 1e-9)
        np.testing.assert_allclose(basis.q[:, 0], np.full(64, 1 / 8.0), atol=1e-8)

    def test_random_knn_laplacians(self):
        rng = np.random.default_rng(6)
        n = 64
        constant = np.full(n, 1.0 / np.sqrt(n))
        for trial in range(20):
            matrix = laplacian(knn_graph(rng.normal(size=(n, 3)), k=int(rng.integers(4, 12))))

            basis = eigh(matrix)

            residual = matrix @ basis.q - basis.q * basis.eigenvalues
            scale = max(1.0, float(np.max(np.abs(matrix).sum(axis=1))))
            self.assertLess(float(np.max(np.abs(residual))), 1e-8 * scale, f"laplacian {trial}")
            self.assertLess(float(np.max(np.abs(basis.q.T @ basis.q - np.eye(n)))), 1e-9, f"laplacian {trial}")
            self.assertLess(abs(float(basis.eigenvalues[0])), 1e-9 * scale)
            # one zero eigenvalue per connected component; the constant vector lies in their span
            kernel = basis.q[:, basis.eigenvalues < 1e-9 * scale]
            np.testing.assert_allclose(kernel @ (kernel.T @ constant), constant, atol=1e-8)

    def test_sign_convention(self):
        basis = compute_basis(generate_shape(ShapeClass.CUBE, 48, seed=2, jitter=0.02))

        for column in basis.q.T:
            first = column[np.flatnonzero(np.abs(column) > 1e-12)[0]]
            self.assertGreater(first, 0.0)

    def test_asymmetric_matrix_rejected(self):
        with self.assertRaises(SpectralError):
            eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_basis_is_deterministic(self):
        cloud = generate_shape(ShapeClass.CONE, 48, seed=5, jitter=0.02)

        self.assertEqual(compute_basis(cloud).basis_id, compute_basis(cloud).basis_id)


class GraphFourierTests(unittest.TestCase):
    def setUp(self):
        self.cloud = generate_shape(ShapeClass.TORUS, 64, seed=12, jitter=0.02)
        self.basis = compute_basis(self.cloud, k=10)

    def test_roundtrip_and_parseval(self):
        shapes = list(ShapeClass)
        for trial in range(100):
            cloud = generate_shape(shapes[trial % len(shapes)], 128, seed=100 + trial, jitter=0.02)
            basis = compute_basis(cloud, k=10)
            spectral = gft(cloud, basis)

            restored = igft(spectral, basis)

            self.assertLess(float(np.max(np.abs(restored.points - cloud.points))), 1e-9, f"cloud {trial}")
            self.assertAlmostEqual(
                float(np.linalg.norm(spectral.coeffs)), float(np.linalg.norm(cloud.points)), delta=1e-9
            )

    def test_linearity(self):
        other = generate_shape(ShapeClass.SPHERE, 64, seed=1, jitter=0.02)
        combined = PointCloud(points=2.0 * self.cloud.points - 0.5 * other.points)

        expected = 2.0 * gft(self.cloud, self.basis).coeffs - 0.5 * gft(other, self.basis).coeffs

        np.testing.assert_allclose(gft(combined, self.basis).coeffs, expected, atol=1e-9)

    def test_constant_cloud_lives_in_kernel_row(self):
        constant = PointCloud(points=np.tile([0.3, -0.2, 0.5], (64, 1)))

        energy = spectral_energy(gft(constant, self.basis))

        self.assertAlmostEqual(float(energy[1:].sum()), 0.0, delta=1e-20 + 1e-12 * float(energy.sum()))

    def test_igft_rejects_foreign_basis(self):
        spectral = SpectralCloud(coeffs=np.zeros((64, 3)), basis_id="not-this-one")

        with self.assertRaises(SpectralError):
            igft(spectral, self.basis)

    def test_dimension_mismatch_rejected(self):
        with self.assertRaises(SpectralError):
            gft(np.zeros((10, 3)), self.basis)

    def test_sphere_energy_concentrates_in_low_rows(self):
        sphere = generate_shape(ShapeClass.SPHERE, 128, seed=1, jitter=0.0)
        basis = compute_basis(sphere, k=10)

        fraction = low_band_energy_fraction(gft(sphere, basis), 32)

        self.assertGreaterEqual(fraction, 0.9)


class MaskTests(unittest.TestCase):
    def test_mask_diagonal_and_complement(self):
        mask = make_mask(4, 2, 0.9, 0.25)

        np.testing.assert_allclose(mask.diag, [0.9, 0.9, 0.25, 0.25])
        np.testing.assert_allclose(mask.complement, [0.1, 0.1, 0.75, 0.75])
        np.testing.assert_array_equal(mask.low_indicator + mask.high_indicator, np.ones(4))
        np.testing.assert_allclose(mask.matrix(), np.diag(mask.diag))

    def test_equal_weights_rejected(self):
        with self.assertRaises(SpectralError):
            make_mask(4, 2, 0.5, 0.5)

    def test_band_must_be_inside_range(self):
        with self.assertRaises(SpectralError):
            make_mask(4, 4, 0.9, 0.25)

    def test_default_low_band(self):
        self.assertEqual(default_low_band(1024), 32)
        self.assertEqual(default_low_band(64), 16)


if __name__ == "__main__":
    unittest.main()
