"""
Weighted task graph G = (V, E, Omega) and its Laplacians.

Nodes are tasks only; the depot is handled by the decoder. Features are the
normalized [x, y, deadline, remaining demand] vectors of every task, including
completed and missed ones (they are masked downstream, not removed).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from scenario import Scenario, NormalizationTable, normalize_features

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    """Raised for empty or malformed graphs"""


@dataclass(frozen=True)
class TaskGraph:
    """Immutable graph snapshot"""
    features: np.ndarray    # N x 4
    omega: np.ndarray       # N x N weighted adjacency
    laplacian: np.ndarray   # N x N symmetric normalized Laplacian

    @property
    def N(self) -> int:
        return self.features.shape[0]

    def edge_count(self) -> int:
        return self.N * (self.N - 1) // 2


def edge_weight(delta_i: Sequence[float], delta_j: Sequence[float]) -> float:
    """1 / (1 + ||delta_i - delta_j||)"""
    diff = np.asarray(delta_i, dtype=float) - np.asarray(delta_j, dtype=float)
    return 1.0 / (1.0 + float(np.linalg.norm(diff)))


def pairwise_distances(features: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between feature rows"""
    features = np.asarray(features, dtype=float)
    diff = features[:, None, :] - features[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return 0.5 * (dist + dist.T)


def weight_matrix(features: np.ndarray) -> np.ndarray:
    omega = 1.0 / (1.0 + pairwise_distances(features))
    omega = 0.5 * (omega + omega.T)
    np.fill_diagonal(omega, 1.0)
    return omega


def graph_laplacian(omega: np.ndarray) -> np.ndarray:
    """Symmetric normalized Laplacian I - D^-1/2 Omega D^-1/2"""
    omega = np.asarray(omega, dtype=float)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise GraphError(f"adjacency must be square, got shape {omega.shape}")
    if omega.shape[0] == 0:
        raise GraphError("empty graph")
    degree = omega.sum(axis=1)
    if np.any(degree <= 0):
        raise GraphError("zero-degree row in adjacency")
    inv_sqrt = 1.0 / np.sqrt(degree)
    lap = np.eye(omega.shape[0]) - inv_sqrt[:, None] * omega * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def task_features(scenario: Scenario, remaining: Optional[np.ndarray] = None,
                  table: Optional[NormalizationTable] = None) -> np.ndarray:
    """Normalized N x 4 feature matrix; `remaining` overrides the demand column"""
    table = table or normalize_features(scenario)
    demand = scenario.demands() if remaining is None else np.asarray(remaining, dtype=float)
    pos = scenario.positions()
    return table.features(pos[:, 0], pos[:, 1], scenario.deadlines(), demand)


def build_task_graph(features: np.ndarray) -> TaskGraph:
    """Full graph from an N x 4 matrix of normalized features"""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] == 0:
        raise GraphError("empty graph")
    if features.shape[1] != 4:
        raise GraphError(f"expected 4 features per node, got {features.shape[1]}")
    omega = weight_matrix(features)
    return TaskGraph(features=features, omega=omega, laplacian=graph_laplacian(omega))


def dump_omega(graph: TaskGraph, path: str) -> None:
    """Write Omega as a dense text matrix for debugging"""
    np.savetxt(path, graph.omega, fmt='%.12g')
    logger.debug(f"Wrote {graph.N}x{graph.N} weight matrix to {path}")
