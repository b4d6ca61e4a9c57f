"""
Unit tests for taskgraph module
"""

import os
import sys
import tempfile
import unittest

import numpy as np

current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
planner_dir = os.path.join(parent_dir, 'planner')
sys.path.insert(0, planner_dir)

import scenario as sc
import taskgraph as tg


class TestTaskGraph(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.features = self.rng.uniform(size=(7, 4))

    def test_edge_weight(self):
        self.assertEqual(tg.edge_weight([0, 0, 0, 0], [0, 0, 0, 0]), 1.0)
        self.assertAlmostEqual(tg.edge_weight([0, 0, 0, 0], [3, 4, 0, 0]), 1.0 / 6.0)

    def test_weight_matrix_properties(self):
        omega = tg.weight_matrix(self.features)
        np.testing.assert_array_equal(omega, omega.T)
        np.testing.assert_array_equal(np.diag(omega), np.ones(7))
        self.assertTrue(np.all((omega > 0) & (omega <= 1)))
        self.assertAlmostEqual(omega[1, 4], tg.edge_weight(self.features[1], self.features[4]), places=12)

    def test_laplacian_spectrum(self):
        graph = tg.build_task_graph(self.features)
        eig = np.linalg.eigvalsh(graph.laplacian)
        self.assertGreater(eig.min(), -1e-10)
        self.assertLess(eig.max(), 2.0 + 1e-10)
        # D^1/2 1 spans the kernel
        d = np.sqrt(graph.omega.sum(axis=1))
        np.testing.assert_allclose(graph.laplacian @ d, np.zeros(7), atol=1e-12)

    def test_single_node(self):
        graph = tg.build_task_graph(np.array([[0.3, 0.4, 0.5, 0.6]]))
        self.assertEqual(graph.N, 1)
        self.assertEqual(graph.edge_count(), 0)
        np.testing.assert_allclose(graph.laplacian, [[0.0]], atol=1e-15)

    def test_permutation_equivariance(self):
        perm = self.rng.permutation(7)
        a = tg.build_task_graph(self.features)
        b = tg.build_task_graph(self.features[perm])
        np.testing.assert_allclose(b.laplacian, a.laplacian[np.ix_(perm, perm)], atol=1e-12)

    def test_errors(self):
        with self.assertRaises(tg.GraphError):
            tg.build_task_graph(np.zeros((0, 4)))
        with self.assertRaises(tg.GraphError):
            tg.build_task_graph(np.zeros((3, 2)))
        with self.assertRaises(tg.GraphError):
            tg.graph_laplacian(np.zeros((2, 3)))
        with self.assertRaises(tg.GraphError):
            tg.graph_laplacian(np.zeros((2, 2)))

    def test_task_features_remaining_override(self):
        s = sc.generate_scenario(sc.GenerationConfig(base_N=5, base_M=1), 1)
        remaining = s.demands() / 2.0
        full = tg.task_features(s)
        half = tg.task_features(s, remaining)
        np.testing.assert_allclose(half[:, 3], full[:, 3] / 2.0)
        np.testing.assert_array_equal(half[:, :3], full[:, :3])

    def test_dump_omega(self):
        graph = tg.build_task_graph(self.features)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'omega.txt')
            tg.dump_omega(graph, path)
            np.testing.assert_allclose(np.loadtxt(path), graph.omega, rtol=1e-11)


if __name__ == '__main__':
    unittest.main()
