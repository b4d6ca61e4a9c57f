"""
Topological descriptors of task neighborhoods.

For every task node we take its k-hop neighborhood in feature space, compute the
Vietoris-Rips persistence diagram (dimensions 0 and 1, Z/2 coefficients) and
compare diagrams of node pairs with the p-Wasserstein distance. The resulting
affinity matrix L_TD replaces the plain graph Laplacian in the encoder.
"""

import hashlib
import logging
from collections import OrderedDict, deque
from concurrent.futures import Executor
from dataclasses import dataclass, field, asdict
from itertools import combinations
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from taskgraph import TaskGraph, graph_laplacian, pairwise_distances

logger = logging.getLogger(__name__)


class TopologyError(ValueError):
    """Raised for invalid persistence inputs"""


@dataclass(frozen=True)
class TDConfig:
    """Neighborhood and diagram-distance settings"""
    k: int = 1
    d_thresh: float = 0.3
    max_dim: int = 1
    p_w: float = 1.0
    ground_metric: str = 'inf'   # 'inf' or a numeric order such as '2'

    def validate(self) -> None:
        if self.k < 1:
            raise TopologyError(f"k must be >= 1, got {self.k}")
        if not self.d_thresh > 0:
            raise TopologyError(f"d_thresh must be positive, got {self.d_thresh}")
        if self.max_dim not in (0, 1):
            raise TopologyError(f"max_dim must be 0 or 1, got {self.max_dim}")
        if self.p_w < 1:
            raise TopologyError(f"Wasserstein order must be >= 1, got {self.p_w}")
        if self.ground_metric != 'inf' and float(self.ground_metric) < 1:
            raise TopologyError(f"bad ground metric {self.ground_metric!r}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TDConfig':
        return cls(**data)


@dataclass(frozen=True)
class PersistenceDiagram:
    """(birth, death) pairs per homology dimension; death may be inf"""
    pairs: Dict[int, np.ndarray]
    max_filtration: float = 0.0

    def dim(self, p: int) -> np.ndarray:
        return self.pairs.get(p, np.zeros((0, 2)))

    def essential(self, p: int) -> np.ndarray:
        bars = self.dim(p)
        return bars[np.isinf(bars[:, 1])]

    def finite(self, p: int) -> np.ndarray:
        bars = self.dim(p)
        return bars[np.isfinite(bars[:, 1])]


def khop_neighbors(graph: TaskGraph, i: int, cfg: TDConfig) -> List[int]:
    """Node indices (0-based) within k hops of i; j is adjacent to i iff distance < d_thresh"""
    n = graph.N
    if not 0 <= i < n:
        raise TopologyError(f"node {i} out of range for {n} nodes")
    adjacent = pairwise_distances(graph.features) < cfg.d_thresh
    seen = {i}
    frontier = deque([(i, 0)])
    while frontier:
        node, depth = frontier.popleft()
        if depth == cfg.k:
            continue
        for j in np.flatnonzero(adjacent[node]):
            j = int(j)
            if j not in seen:
                seen.add(j)
                frontier.append((j, depth + 1))
    return sorted(seen)


def khop_subgraph(graph: TaskGraph, i: int, cfg: TDConfig) -> np.ndarray:
    """Feature vectors of the k-hop neighborhood of node i"""
    return graph.features[khop_neighbors(graph, i, cfg)]


def rips_filtration(points: np.ndarray, max_dim: int = 1) -> List[Tuple[float, Tuple[int, ...]]]:
    """Rips simplices up to dimension max_dim + 1, faces before cofaces"""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    dist = pairwise_distances(points) if n else np.zeros((0, 0))
    simplices: List[Tuple[float, Tuple[int, ...]]] = [(0.0, (v,)) for v in range(n)]
    for a, b in combinations(range(n), 2):
        simplices.append((float(dist[a, b]), (a, b)))
    if max_dim >= 1:
        for a, b, c in combinations(range(n), 3):
            simplices.append((float(max(dist[a, b], dist[a, c], dist[b, c])), (a, b, c)))
    simplices.sort(key=lambda s: (s[0], len(s[1]), s[1]))
    return simplices


def rips_persistence(points: np.ndarray, max_dim: int = 1) -> PersistenceDiagram:
    """
    Persistence pairs of the Rips filtration by Z/2 column reduction.

    H0 always has one bar per point (one essential); coincident points give
    (0, 0) bars. Zero-persistence pairs in dimension 1 are not recorded.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0:
        raise TopologyError("empty point set")
    if max_dim not in (0, 1):
        raise TopologyError(f"max_dim must be 0 or 1, got {max_dim}")

    simplices = rips_filtration(points, max_dim)
    index = {s: idx for idx, (_, s) in enumerate(simplices)}
    pivot_owner: Dict[int, int] = {}
    reduced_columns: Dict[int, set] = {}
    paired = set()
    bars: Dict[int, List[Tuple[float, float]]] = {p: [] for p in range(max_dim + 1)}

    for j, (value, simplex) in enumerate(simplices):
        if len(simplex) == 1:
            continue
        column = {index[face] for face in combinations(simplex, len(simplex) - 1)}
        reduced = pivot_owner.get(max(column))
        while column and reduced is not None:
            column ^= reduced_columns[reduced]
            reduced = pivot_owner.get(max(column)) if column else None
        if not column:
            continue
        low = max(column)
        pivot_owner[low] = j
        reduced_columns[j] = column
        paired.update((low, j))
        dim = len(simplices[low][1]) - 1
        birth = simplices[low][0]
        if dim <= max_dim and (value > birth or dim == 0):
            bars[dim].append((birth, value))

    for idx, (value, simplex) in enumerate(simplices):
        dim = len(simplex) - 1
        if idx not in paired and dim <= max_dim:
            bars[dim].append((value, np.inf))

    pairs = {p: np.array(sorted(b), dtype=float).reshape(-1, 2) for p, b in bars.items()}
    return PersistenceDiagram(pairs=pairs, max_filtration=simplices[-1][0])


def _ground_distance(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    delta = np.abs(a[:, None, :] - b[None, :, :])
    if metric == 'inf':
        return delta.max(axis=-1)
    q = float(metric)
    return np.power(np.power(delta, q).sum(axis=-1), 1.0 / q)


def _diagonal_distance(bars: np.ndarray, metric: str) -> np.ndarray:
    half = (bars[:, 1] - bars[:, 0]) / 2.0
    if metric == 'inf':
        return half
    return half * 2.0 ** (1.0 / float(metric))


def _truncate(bars: np.ndarray, cap: float) -> np.ndarray:
    bars = bars.copy()
    bars[np.isinf(bars[:, 1]), 1] = cap
    return bars


def _augmented_costs(a: np.ndarray, b: np.ndarray, metric: str) -> Tuple[np.ndarray, np.ndarray]:
    """(m+n) square cost matrix of the diagonal-augmented matching and its allowed mask"""
    m, n = a.shape[0], b.shape[0]
    size = m + n
    cost = np.zeros((size, size))
    allowed = np.zeros((size, size), dtype=bool)
    if m and n:
        cost[:m, :n] = _ground_distance(a, b, metric)
        allowed[:m, :n] = True
    if m:
        cost[np.arange(m), n + np.arange(m)] = _diagonal_distance(a, metric)
        allowed[np.arange(m), n + np.arange(m)] = True
    if n:
        cost[m + np.arange(n), np.arange(n)] = _diagonal_distance(b, metric)
        allowed[m + np.arange(n), np.arange(n)] = True
    allowed[m:, n:] = True
    return cost, allowed


def _dimension_wasserstein(a: np.ndarray, b: np.ndarray, p: float, metric: str) -> float:
    if a.shape[0] == 0 and b.shape[0] == 0:
        return 0.0
    cost, allowed = _augmented_costs(a, b, metric)
    powered = np.power(cost, p)
    big = 1.0 + 2.0 * float(powered[allowed].sum())
    powered[~allowed] = big
    rows, cols = linear_sum_assignment(powered)
    return float(np.power(powered[rows, cols].sum(), 1.0 / p))


def wasserstein_distance(A: PersistenceDiagram, B: PersistenceDiagram, cfg: TDConfig,
                         dim: Optional[int] = None) -> float:
    """p_w-Wasserstein distance, summed over dimensions 0..max_dim unless `dim` is given"""
    cap = max(A.max_filtration, B.max_filtration)
    dims = [dim] if dim is not None else range(cfg.max_dim + 1)
    total = 0.0
    for p in dims:
        total += _dimension_wasserstein(_truncate(A.dim(p), cap), _truncate(B.dim(p), cap),
                                        cfg.p_w, cfg.ground_metric)
    return total


def _dimension_bottleneck(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape[0] == 0 and b.shape[0] == 0:
        return 0.0
    cost, allowed = _augmented_costs(a, b, 'inf')
    thresholds = np.unique(cost[allowed])
    lo, hi = 0, len(thresholds) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        graph = csr_matrix((allowed & (cost <= thresholds[mid])).astype(np.int8))
        matching = maximum_bipartite_matching(graph, perm_type='column')
        if np.all(matching >= 0):
            hi = mid
        else:
            lo = mid + 1
    return float(thresholds[lo])


def bottleneck_distance(A: PersistenceDiagram, B: PersistenceDiagram, cfg: TDConfig,
                        dim: Optional[int] = None) -> float:
    """Bottleneck distance (L-inf ground metric), max over dimensions"""
    cap = max(A.max_filtration, B.max_filtration)
    dims = [dim] if dim is not None else range(cfg.max_dim + 1)
    return max(_dimension_bottleneck(_truncate(A.dim(p), cap), _truncate(B.dim(p), cap))
               for p in dims)


def neighborhood_key(points: np.ndarray) -> str:
    """Content hash of a point set, independent of row order"""
    points = np.round(np.asarray(points, dtype=float), 12) + 0.0
    ordered = points[np.lexsort(points.T[::-1])]
    return hashlib.sha1(ordered.tobytes()).hexdigest()


@dataclass
class TDLaplacianCache:
    """
    Diagrams and pairwise distances keyed by neighborhood content. Both maps are
    LRU-bounded; the least recently used entry is evicted first.
    """
    max_diagrams: int = 4096
    max_distances: int = 65536
    diagrams: 'OrderedDict[str, PersistenceDiagram]' = field(default_factory=OrderedDict)
    distances: 'OrderedDict[Tuple[str, str], float]' = field(default_factory=OrderedDict)
    hits: int = 0
    misses: int = 0

    def get_diagram(self, key: str) -> Optional[PersistenceDiagram]:
        diagram = self.diagrams.get(key)
        if diagram is not None:
            self.diagrams.move_to_end(key)
        return diagram

    def put_diagram(self, key: str, diagram: PersistenceDiagram) -> None:
        self.diagrams[key] = diagram
        self.diagrams.move_to_end(key)
        while len(self.diagrams) > self.max_diagrams:
            self.diagrams.popitem(last=False)

    def get_distance(self, pair: Tuple[str, str]) -> Optional[float]:
        w = self.distances.get(pair)
        if w is not None:
            self.distances.move_to_end(pair)
        return w

    def put_distance(self, pair: Tuple[str, str], w: float) -> None:
        self.distances[pair] = w
        self.distances.move_to_end(pair)
        while len(self.distances) > self.max_distances:
            self.distances.popitem(last=False)
    def clear(self) -> None:
        self.diagrams.clear()
        self.distances.clear()
        self.hits = self.misses = 0


def node_diagrams(graph: TaskGraph, cfg: TDConfig,
                  cache: Optional[TDLaplacianCache] = None,
                  executor: Optional[Executor] = None) -> Tuple[List[str], List[PersistenceDiagram]]:
    """Persistence diagram of every node's k-hop neighborhood"""
    clouds = [khop_subgraph(graph, i, cfg) for i in range(graph.N)]
    keys = [neighborhood_key(c) for c in clouds]
    found: Dict[str, PersistenceDiagram] = {}
    todo: Dict[str, np.ndarray] = {}
    for key, cloud in zip(keys, clouds):
        if key in todo:
            continue
        if key not in found:
            diagram = cache.get_diagram(key) if cache is not None else None
            if diagram is None:
                todo[key] = cloud
                continue
            found[key] = diagram
        cache.hits += 1
    if cache is not None:
        cache.misses += len(todo)

    pending = list(todo.items())
    if executor is not None:
        results = executor.map(lambda item: rips_persistence(item[1], cfg.max_dim), pending)
    else:
        results = (rips_persistence(cloud, cfg.max_dim) for _, cloud in pending)
    for (key, _), diagram in zip(pending, results):
        found[key] = diagram
        if cache is not None:
            cache.put_diagram(key, diagram)
    return keys, [found[k] for k in keys]


def td_laplacian(graph: TaskGraph, cfg: TDConfig,
                 cache: Optional[TDLaplacianCache] = None,
                 executor: Optional[Executor] = None) -> np.ndarray:
    """L_TD[i, j] = 1 / (1 + W(PD_i, PD_j)); symmetric with unit diagonal"""
    keys, diagrams = node_diagrams(graph, cfg, cache, executor)
    n = graph.N
    l_td = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            pair = (keys[i], keys[j]) if keys[i] <= keys[j] else (keys[j], keys[i])
            if keys[i] == keys[j]:
                w = 0.0
            else:
                w = cache.get_distance(pair) if cache is not None else None
                if w is None:
                    w = wasserstein_distance(diagrams[i], diagrams[j], cfg)
                    if cache is not None:
                        cache.put_distance(pair, w)
            l_td[i, j] = l_td[j, i] = 1.0 / (1.0 + w)
    return l_td


def encoder_laplacian(graph: TaskGraph, cfg: Optional[TDConfig],
                      cache: Optional[TDLaplacianCache] = None,
                      executor: Optional[Executor] = None) -> np.ndarray:
    """Matrix fed to the encoder: normalized L_TD, or the plain Laplacian when cfg is None"""
    if cfg is None:
        return graph.laplacian
    return graph_laplacian(td_laplacian(graph, cfg, cache, executor))


def dump_diagrams(diagrams: Sequence[PersistenceDiagram], path: str) -> None:
    """Text dump: one `node dim birth death` line per bar"""
    with open(path, 'w') as f:
        f.write("# node dim birth death\n")
        for node, diagram in enumerate(diagrams):
            for p in sorted(diagram.pairs):
                for birth, death in diagram.pairs[p]:
                    f.write(f"{node} {p} {birth:.12g} {death:.12g}\n")
