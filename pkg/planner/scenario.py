"""
MRTA-CT problem instances.

Generates, validates, saves and loads scenarios (tasks with demand and deadline,
a homogeneous fleet, one depot) and builds the per-feature normalization table
used by every distance computed downstream.

Scenario files are versioned JSON:
    {"version": 1, "seed": ..., "N": ..., "M": ...,
     "arena": {"width": ..., "height": ...}, "depot": {"x": ..., "y": ...},
     "fleet": {...}, "tasks": [{"id", "x", "y", "deadline", "demand"}, ...]}
"""

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SCENARIO_FORMAT_VERSION = 1


class ScenarioError(ValueError):
    """Invalid scenario or generation settings"""


class ScenarioParseError(ScenarioError):
    """Malformed scenario file; `location` points at the offending spot"""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{message} (at {location})" if location else message)


@dataclass(frozen=True)
class TaskSpec:
    """One task: position in km, deadline in s, demand in kg"""
    id: int
    x: float
    y: float
    deadline: float
    demand: float


@dataclass(frozen=True)
class FleetSpec:
    """Homogeneous robot fleet parameters"""
    M: int = 7
    C_max: float = 5.0          # kg
    range_max: float = 4.0      # km per tour
    speed: float = 10.0         # m/s
    d_com_thresh: float = 100.0  # m

    def validate(self) -> None:
        if self.M < 1:
            raise ScenarioError(f"fleet needs at least one robot, got M={self.M}")
        for name in ('C_max', 'range_max', 'speed', 'd_com_thresh'):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"fleet.{name} must be strictly positive")

    @property
    def speed_km_s(self) -> float:
        return self.speed / 1000.0

    @property
    def d_com_km(self) -> float:
        return self.d_com_thresh / 1000.0


@dataclass(frozen=True)
class Scenario:
    """Immutable MRTA-CT problem instance"""
    tasks: Tuple[TaskSpec, ...]
    fleet: FleetSpec
    depot: Tuple[float, float] = (0.5, 0.5)
    arena: Tuple[float, float] = (1.0, 1.0)
    seed: int = 0

    @property
    def N(self) -> int:
        return len(self.tasks)

    @property
    def M(self) -> int:
        return self.fleet.M

    def positions(self) -> np.ndarray:
        """Task positions as an N x 2 array, in task-id order"""
        return np.array([[t.x, t.y] for t in self.tasks], dtype=float)

    def deadlines(self) -> np.ndarray:
        return np.array([t.deadline for t in self.tasks], dtype=float)

    def demands(self) -> np.ndarray:
        return np.array([t.demand for t in self.tasks], dtype=float)

    def node_positions(self) -> np.ndarray:
        """(N+1) x 2 positions with the depot as node 0"""
        return np.vstack([np.asarray(self.depot, dtype=float)[None, :], self.positions()])

    def validate(self) -> None:
        self.fleet.validate()
        if not self.tasks:
            raise ScenarioError("empty task list")
        width, height = self.arena
        if not (width > 0 and height > 0):
            raise ScenarioError("arena dimensions must be positive")
        if not (0.0 <= self.depot[0] <= width and 0.0 <= self.depot[1] <= height):
            raise ScenarioError(f"depot {self.depot} outside arena {self.arena}")
        ids = sorted(t.id for t in self.tasks)
        if ids != list(range(1, self.N + 1)):
            raise ScenarioError("task ids must be a permutation of 1..N")
        for t in self.tasks:
            if not (0.0 <= t.x <= width and 0.0 <= t.y <= height):
                raise ScenarioError(f"task {t.id} at ({t.x}, {t.y}) outside arena")
            if not t.deadline > 0:
                raise ScenarioError(f"task {t.id} deadline must be positive")
            if not t.demand > 0:
                raise ScenarioError(f"task {t.id} demand must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'version': SCENARIO_FORMAT_VERSION,
            'seed': self.seed,
            'N': self.N,
            'M': self.M,
            'arena': {'width': self.arena[0], 'height': self.arena[1]},
            'depot': {'x': self.depot[0], 'y': self.depot[1]},
            'fleet': asdict(self.fleet),
            'tasks': [asdict(t) for t in self.tasks],
        }


@dataclass(frozen=True)
class GenerationConfig:
    """Random scenario distribution; N and M follow the lambda scaling rule"""
    lambda_t: float = 1.0
    lambda_r: float = 1.0
    base_N: int = 50
    base_M: int = 6
    demand_range: Tuple[float, float] = (1.0, 10.0)
    deadline_range: Tuple[float, float] = (150.0, 600.0)
    arena: Tuple[float, float] = (1.0, 1.0)
    depot: Optional[Tuple[float, float]] = None
    C_max: float = 5.0
    range_max: float = 4.0
    speed: float = 10.0
    d_com_thresh: float = 100.0

    @property
    def N(self) -> int:
        return int(self.lambda_t * self.base_N)

    @property
    def M(self) -> int:
        return int(self.base_M * self.lambda_t * self.lambda_r) + 1

    def validate(self) -> None:
        if not (self.lambda_t > 0 and self.lambda_r > 0):
            raise ScenarioError(f"lambda values must be positive, got "
                                f"lambda_t={self.lambda_t}, lambda_r={self.lambda_r}")
        if self.N < 1:
            raise ScenarioError(f"lambda_t={self.lambda_t} yields no tasks")
        if self.demand_range[0] <= 0 or self.demand_range[1] < self.demand_range[0]:
            raise ScenarioError(f"bad demand range {self.demand_range}")
        if self.deadline_range[0] <= 0 or self.deadline_range[1] < self.deadline_range[0]:
            raise ScenarioError(f"bad deadline range {self.deadline_range}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GenerationConfig':
        data = dict(data)
        for key in ('demand_range', 'deadline_range', 'arena', 'depot'):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)


def generate_scenario(cfg: GenerationConfig, seed: int) -> Scenario:
    """Draw one scenario: uniform positions, demands and deadlines"""
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = cfg.N
    width, height = cfg.arena
    xs = rng.uniform(0.0, width, size=n)
    ys = rng.uniform(0.0, height, size=n)
    demands = rng.uniform(cfg.demand_range[0], cfg.demand_range[1], size=n)
    deadlines = rng.uniform(cfg.deadline_range[0], cfg.deadline_range[1], size=n)

    tasks = tuple(
        TaskSpec(id=i + 1, x=float(xs[i]), y=float(ys[i]),
                 deadline=float(deadlines[i]), demand=float(demands[i]))
        for i in range(n)
    )
    fleet = FleetSpec(M=cfg.M, C_max=cfg.C_max, range_max=cfg.range_max,
                      speed=cfg.speed, d_com_thresh=cfg.d_com_thresh)
    depot = cfg.depot if cfg.depot is not None else (width / 2.0, height / 2.0)
    scenario = Scenario(tasks=tasks, fleet=fleet, depot=(float(depot[0]), float(depot[1])),
                        arena=(float(width), float(height)), seed=int(seed))
    scenario.validate()
    logger.debug(f"Generated scenario seed={seed}: N={scenario.N}, M={scenario.M}")
    return scenario


def save_scenario(scenario: Scenario, path: str) -> None:
    """Write a scenario file atomically"""
    payload = json.dumps(scenario.to_dict(), indent=2)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix='.tmp')
    try:
        with os.fdopen(fd, 'w') as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except Exception as e:
        logger.error(f"Failed to save scenario to {path}: {e}")
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def load_scenario(path: str) -> Scenario:
    """Read and validate a scenario file"""
    with open(path, 'r') as f:
        text = f.read()
    return scenario_from_json(text)


def scenario_from_json(text: str) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioParseError(f"invalid scenario file: {e.msg}",
                                 f"line {e.lineno}, column {e.colno}") from e
    return scenario_from_dict(data)


def _field(data: Dict[str, Any], key: str, where: str) -> Any:
    if not isinstance(data, dict) or key not in data:
        raise ScenarioParseError(f"missing field '{key}'", where or '<root>')
    return data[key]


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioParseError(f"expected a number, got {value!r}", where)
    return float(value)


def scenario_from_dict(data: Dict[str, Any]) -> Scenario:
    """Build a Scenario from its decoded file representation"""
    version = _field(data, 'version', '')
    if version != SCENARIO_FORMAT_VERSION:
        raise ScenarioParseError(f"unsupported scenario version {version!r}", 'version')

    raw_tasks = _field(data, 'tasks', '')
    if not isinstance(raw_tasks, list):
        raise ScenarioParseError("tasks must be a list", 'tasks')
    if not raw_tasks:
        raise ScenarioParseError("empty task list", 'tasks')

    tasks: List[TaskSpec] = []
    for idx, raw in enumerate(raw_tasks):
        where = f"tasks[{idx}]"
        tid = _field(raw, 'id', where)
        if isinstance(tid, bool) or not isinstance(tid, int):
            raise ScenarioParseError(f"task id must be an integer, got {tid!r}", f"{where}.id")
        tasks.append(TaskSpec(
            id=tid,
            x=_number(_field(raw, 'x', where), f"{where}.x"),
            y=_number(_field(raw, 'y', where), f"{where}.y"),
            deadline=_number(_field(raw, 'deadline', where), f"{where}.deadline"),
            demand=_number(_field(raw, 'demand', where), f"{where}.demand"),
        ))

    raw_fleet = _field(data, 'fleet', '')
    try:
        fleet = FleetSpec(
            M=int(_field(raw_fleet, 'M', 'fleet')),
            C_max=_number(_field(raw_fleet, 'C_max', 'fleet'), 'fleet.C_max'),
            range_max=_number(_field(raw_fleet, 'range_max', 'fleet'), 'fleet.range_max'),
            speed=_number(_field(raw_fleet, 'speed', 'fleet'), 'fleet.speed'),
            d_com_thresh=_number(_field(raw_fleet, 'd_com_thresh', 'fleet'), 'fleet.d_com_thresh'),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ScenarioParseError):
            raise
        raise ScenarioParseError(f"bad fleet record: {e}", 'fleet') from e

    arena = _field(data, 'arena', '')
    depot = _field(data, 'depot', '')
    scenario = Scenario(
        tasks=tuple(sorted(tasks, key=lambda t: t.id)),
        fleet=fleet,
        depot=(_number(_field(depot, 'x', 'depot'), 'depot.x'),
               _number(_field(depot, 'y', 'depot'), 'depot.y')),
        arena=(_number(_field(arena, 'width', 'arena'), 'arena.width'),
               _number(_field(arena, 'height', 'arena'), 'arena.height')),
        seed=int(data.get('seed', 0)),
    )

    if 'N' in data and data['N'] != scenario.N:
        raise ScenarioParseError(f"header N={data['N']} but {scenario.N} task records", 'N')
    if 'M' in data and data['M'] != scenario.M:
        raise ScenarioParseError(f"header M={data['M']} disagrees with fleet.M={scenario.M}", 'M')
    try:
        scenario.validate()
    except ScenarioError as e:
        raise ScenarioParseError(str(e), 'tasks') from e
    return scenario


@dataclass(frozen=True)
class AffineMap:
    """v -> (v - offset) * scale; a degenerate map sends everything to 0"""
    offset: float
    scale: float
    degenerate: bool = False
    constant: float = 0.0

    def forward(self, v):
        if self.degenerate:
            return np.zeros_like(np.asarray(v, dtype=float)) if np.ndim(v) else 0.0
        return (np.asarray(v, dtype=float) - self.offset) * self.scale if np.ndim(v) \
            else (float(v) - self.offset) * self.scale

    def inverse(self, u):
        if self.degenerate:
            return np.full_like(np.asarray(u, dtype=float), self.constant) if np.ndim(u) \
                else self.constant
        return np.asarray(u, dtype=float) / self.scale + self.offset if np.ndim(u) \
            else float(u) / self.scale + self.offset


@dataclass(frozen=True)
class NormalizationTable:
    """Per-feature maps for (x, y, deadline, demand)"""
    x: AffineMap
    y: AffineMap
    deadline: AffineMap
    demand: AffineMap
    warnings: Tuple[str, ...] = field(default_factory=tuple)

    def features(self, xs, ys, deadlines, demands) -> np.ndarray:
        """Stack normalized node features into an N x 4 matrix"""
        return np.column_stack([
            self.x.forward(np.asarray(xs, dtype=float)),
            self.y.forward(np.asarray(ys, dtype=float)),
            self.deadline.forward(np.asarray(deadlines, dtype=float)),
            self.demand.forward(np.asarray(demands, dtype=float)),
        ])

    def to_dict(self) -> Dict[str, Any]:
        return {name: asdict(getattr(self, name)) for name in ('x', 'y', 'deadline', 'demand')}


def _scale_by_max(values: np.ndarray, name: str, warnings: List[str]) -> AffineMap:
    vmax, vmin = float(np.max(values)), float(np.min(values))
    if vmax == vmin:
        warnings.append(name)
        logger.warning(f"Degenerate {name} range (all values {vmax}); normalized feature is constant 0")
        return AffineMap(offset=0.0, scale=0.0, degenerate=True, constant=vmax)
    return AffineMap(offset=0.0, scale=1.0 / vmax)


def normalize_features(scenario: Scenario) -> NormalizationTable:
    """Normalization table: x,y by arena size, deadlines and demands by their maxima"""
    width, height = scenario.arena
    warnings: List[str] = []
    table = NormalizationTable(
        x=AffineMap(offset=0.0, scale=1.0 / width),
        y=AffineMap(offset=0.0, scale=1.0 / height),
        deadline=_scale_by_max(scenario.deadlines(), 'deadline', warnings),
        demand=_scale_by_max(scenario.demands(), 'demand', warnings),
        warnings=tuple(warnings),
    )
    return table
