"""
Non-learning decision makers and the exact oracle.

FEASRND picks a random feasible task. BIGMRTA scores every (robot, task) pair it
knows of with an urgency x fit incentive and solves a maximum-weight bipartite
matching, taking whatever task it is matched to. brute_force_optimal searches
every interleaving of decisions on tiny instances under full communication.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from scenario import Scenario
from simenv import BUDGET_TOL, WorldState

logger = logging.getLogger(__name__)

MATCH_TOL = 1e-9


def feasrnd_action(world: WorldState, robot: int, rng: np.random.Generator) -> int:
    """Uniform over feasible tasks; the depot only when nothing else is feasible"""
    tasks = np.flatnonzero(world.feasible_mask(robot)[1:]) + 1
    if len(tasks) == 0:
        return 0
    return int(rng.choice(tasks))


class FeasRndAgent:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def decide(self, world: WorldState, robot: int) -> int:
        return feasrnd_action(world, robot, self.rng)


@dataclass
class IncentiveMatrix:
    """Suitability of feasible (robot, task) pairs; infeasible pairs are absent"""
    robots: List[int]
    tasks: List[int]
    values: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def get(self, robot: int, task: int) -> Optional[float]:
        return self.values.get((robot, task))

    def dense(self) -> np.ndarray:
        """robots x tasks array with NaN for absent pairs"""
        out = np.full((len(self.robots), len(self.tasks)), np.nan)
        for (r, i), v in self.values.items():
            out[self.robots.index(r), self.tasks.index(i)] = v
        return out


class _Planner(NamedTuple):
    """Where and when a robot is next free, as the decider believes"""
    position: Tuple[float, float]
    t_free: float
    range_left: float
    payload: float


def _distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _believed_planners(world: WorldState, robot: int) -> Dict[int, _Planner]:
    planners: Dict[int, _Planner] = {}
    remaining = world.believed_remaining(robot)
    me = world.robots[robot]
    planners[robot] = _Planner(me.position_at(world.t), world.t, me.range_left, me.payload)
    fleet = world.fleet
    for rid, entry in world.beliefs[robot].robots.items():
        if rid == robot:
            continue
        s = entry.state
        if s.dest_node == 0:
            rng_left, payload = fleet.range_max, fleet.C_max
        else:
            rng_left = max(0.0, s.range_left - _distance(s.origin, s.destination))
            payload = s.payload
            if s.t_next > world.t:
                payload = max(0.0, payload - remaining[s.dest_node - 1])
        planners[rid] = _Planner(s.destination, max(s.t_next, world.t), rng_left, payload)
    return planners


def bigmrta_incentives(world: WorldState, robot: int) -> IncentiveMatrix:
    """urgency x fit for every pair the deciding robot believes feasible"""
    t = world.t
    remaining = world.believed_remaining(robot)
    planners = _believed_planners(world, robot)
    belief = world.beliefs[robot]

    committed: Dict[int, List[Tuple[int, float]]] = {}
    for rid, entry in belief.robots.items():
        s = entry.state
        if rid != robot and s.dest_node > 0 and s.t_next > t:
            committed.setdefault(s.dest_node, []).append((rid, s.payload))

    active = [i + 1 for i in range(world.N) if remaining[i] > 0 and t <= world.deadlines[i]]
    matrix = IncentiveMatrix(robots=sorted(planners), tasks=active)
    for rid in matrix.robots:
        p = planners[rid]
        if p.payload <= 0:
            continue
        for task in active:
            i = task - 1
            node = world.node_xy[task]
            travel = _distance(p.position, node)
            if travel + _distance(node, world.depot) > p.range_left + BUDGET_TOL:
                continue
            arrival = p.t_free + travel / world.speed
            deadline = world.deadlines[i]
            if arrival > deadline:
                continue
            left = remaining[i] - sum(c for other, c in committed.get(task, []) if other != rid)
            if left <= 0:
                continue
            slack = deadline - t
            urgency = 1.0 if slack <= 0 else max(0.0, (deadline - arrival) / slack)
            fit = min(left, p.payload) / left
            matrix.values[(rid, task)] = urgency * fit
    return matrix


def _solve(weights: np.ndarray, allowed: np.ndarray) -> Tuple[float, Dict[int, int]]:
    """Max-weight matching with an 'unmatched' dummy column per row"""
    n_rows, n_cols = weights.shape
    big = 1.0 + float(np.abs(weights[allowed]).sum()) * 2.0 if allowed.any() else 1.0
    cost = np.full((n_rows, n_cols + n_rows), big)
    cost[:, :n_cols][allowed] = -weights[allowed]
    cost[:, n_cols:] = 0.0
    rows, cols = linear_sum_assignment(cost)
    pairs = {int(r): int(c) for r, c in zip(rows, cols) if c < n_cols and allowed[r, c]}
    if any(c < n_cols and not allowed[r, c] for r, c in zip(rows, cols)):
        raise RuntimeError("matching used a forbidden pair")
    return float(sum(weights[r, c] for r, c in pairs.items())), pairs


def max_weight_matching(matrix: IncentiveMatrix) -> Dict[int, int]:
    """Exact maximum-weight matching robot -> task; ties go to the lowest (robot, task)"""
    if not matrix.robots or not matrix.tasks or not matrix.values:
        return {}
    dense = matrix.dense()
    allowed = ~np.isnan(dense)
    weights = np.where(allowed, dense, 0.0)
    best, _ = _solve(weights, allowed)

    fixed = allowed.copy()
    for r in range(len(matrix.robots)):
        options = [c for c in range(len(matrix.tasks)) if fixed[r, c]] + [None]
        for c in options:
            trial = fixed.copy()
            trial[r, :] = False
            if c is not None:
                trial[:, c] = False
                trial[r, c] = True
            value, _ = _solve(weights, trial)
            if value >= best - MATCH_TOL * max(1.0, abs(best)):
                fixed = trial
                break
    _, pairs = _solve(weights, fixed)
    return {matrix.robots[r]: matrix.tasks[c] for r, c in pairs.items()}


def bigmrta_action(world: WorldState, robot: int) -> int:
    mask = world.feasible_mask(robot)
    if not mask[1:].any():
        return 0
    assignment = max_weight_matching(bigmrta_incentives(world, robot))
    task = assignment.get(robot, 0)
    return task if task and mask[task] else 0


class BigMrtaAgent:
    def decide(self, world: WorldState, robot: int) -> int:
        return bigmrta_action(world, robot)


# ---------------------------------------------------------------------------
# exact oracle

ACTIVE, DONE, MISSED = 'A', 'D', 'M'


class _Robot(NamedTuple):
    node: int
    origin: int
    range_left: float
    payload: float
    t_free: float
    kind: Optional[str]   # pending event: start, task, depot, idle; None while deciding
    docked: bool


class _State(NamedTuple):
    t: float
    remaining: Tuple[float, ...]
    status: Tuple[str, ...]
    robots: Tuple[_Robot, ...]


@dataclass
class ExactSolution:
    n_success: int
    schedule: Dict[int, List[int]]
    exhaustive: bool
    nodes: int = 0


def full_communication(scenario: Scenario) -> Scenario:
    return replace(scenario, fleet=replace(scenario.fleet, d_com_thresh=math.inf))


class _Search:
    """Depth-first search over the simulator's decision sequence"""

    def __init__(self, scenario: Scenario, max_nodes: int, max_depth: int):
        self.xy = [tuple(p) for p in scenario.node_positions()]
        self.deadlines = scenario.deadlines()
        self.demands = scenario.demands()
        self.N = scenario.N
        self.fleet = scenario.fleet
        self.speed = scenario.fleet.speed_km_s
        self.max_nodes = max_nodes
        self.max_depth = max_depth
        self.nodes = 0
        self.capped = False
        self.best = -1
        self.best_path: List[Tuple[int, int]] = []
        self.seen: Dict[tuple, List[Tuple[float, ...]]] = {}

    def initial(self) -> _State:
        robot = _Robot(0, 0, self.fleet.range_max, self.fleet.C_max, 0.0, 'start', False)
        return _State(0.0, tuple(float(w) for w in self.demands), (ACTIVE,) * self.N, (robot,) * self.fleet.M)

    def _active(self, state: _State) -> List[int]:
        return [i for i, s in enumerate(state.status) if s == ACTIVE]

    def _expire(self, t: float, status: List[str]) -> None:
        for i, s in enumerate(status):
            if s == ACTIVE and t > self.deadlines[i]:
                status[i] = MISSED

    @staticmethod
    def _at_depot(r: _Robot, t: float) -> bool:
        return r.node == 0 and t >= r.t_free

    def advance(self, state: _State) -> Tuple[_State, Optional[int]]:
        t = state.t
        remaining = list(state.remaining)
        status = list(state.status)
        robots = list(state.robots)
        while True:
            if ACTIVE not in status and all(self._at_depot(r, t) for r in robots):
                return _State(t, tuple(remaining), tuple(status), tuple(robots)), None
            waiting = [(r.t_free, rid) for rid, r in enumerate(robots) if not r.docked]
            if not waiting:
                latest = max(self.deadlines[i] for i, s in enumerate(status) if s == ACTIVE)
                t = float(np.nextafter(max(latest, t), np.inf))
                self._expire(t, status)
                continue
            t, rid = min(waiting)
            self._expire(t, status)
            r = robots[rid]
            if r.kind == 'task':
                i = r.node - 1
                dist = _distance(self.xy[r.origin], self.xy[r.node])
                delivered = 0.0
                if status[i] == ACTIVE and t <= self.deadlines[i]:
                    delivered = min(remaining[i], r.payload)
                    remaining[i] -= delivered
                    if remaining[i] <= 1e-12:
                        remaining[i] = 0.0
                        status[i] = DONE
                r = r._replace(range_left=max(0.0, r.range_left - dist),
                               payload=max(0.0, r.payload - delivered))
            elif r.kind == 'depot':
                r = r._replace(range_left=self.fleet.range_max, payload=self.fleet.C_max)
            r = r._replace(kind=None, t_free=t)
            robots[rid] = r
            if ACTIVE not in status and self._at_depot(r, t):
                robots[rid] = r._replace(docked=True)
                continue
            return _State(t, tuple(remaining), tuple(status), tuple(robots)), rid

    def actions(self, state: _State, rid: int) -> List[int]:
        r = state.robots[rid]
        here = self.xy[r.node]
        moves = []
        if r.payload > 0:
            for i in self._active(state):
                if state.t > self.deadlines[i]:
                    continue
                node = self.xy[i + 1]
                travel = _distance(here, node)
                if travel + _distance(node, self.xy[0]) > r.range_left + BUDGET_TOL:
                    continue
                if state.t + travel / self.speed > self.deadlines[i]:
                    continue
                moves.append(i + 1)
        return moves + [0]

    def apply(self, state: _State, rid: int, action: int) -> _State:
        r = state.robots[rid]
        robots = list(state.robots)
        t = state.t
        if action == 0 and self._at_depot(r, t):
            later = [o.t_free for j, o in enumerate(state.robots) if j != rid and not o.docked and o.t_free > t]
            later += [self.deadlines[i] for i in self._active(state) if self.deadlines[i] > t]
            if later:
                robots[rid] = r._replace(t_free=float(min(later)), kind='idle')
            else:
                robots[rid] = r._replace(docked=True)
        else:
            t_arrive = t + _distance(self.xy[r.node], self.xy[action]) / self.speed
            robots[rid] = r._replace(origin=r.node, node=action, t_free=t_arrive,
                                     kind='depot' if action == 0 else 'task')
        return state._replace(robots=tuple(robots))

    def _dominated(self, state: _State, rid: int) -> bool:
        """Same state except no robot has more range than an already explored one"""
        key = (rid, state.t, state.remaining, state.status,
               tuple((r.node, r.origin, r.payload, r.t_free, r.kind, r.docked) for r in state.robots))
        ranges = tuple(r.range_left for r in state.robots)
        explored = self.seen.setdefault(key, [])
        for other in explored:
            if all(o >= m for o, m in zip(other, ranges)):
                return True
        explored.append(ranges)
        return False

    def run(self, state: _State, rid: Optional[int], depth: int, path: List[Tuple[int, int]]) -> None:
        done = state.status.count(DONE)
        if rid is None:
            if done > self.best:
                self.best = done
                self.best_path = list(path)
            return
        self.nodes += 1
        if self.nodes > self.max_nodes or depth >= self.max_depth:
            self.capped = True
            return
        if done + state.status.count(ACTIVE) <= self.best:
            return
        if self._dominated(state, rid):
            return
        for action in self.actions(state, rid):
            nxt, nrid = self.advance(self.apply(state, rid, action))
            path.append((rid, action))
            self.run(nxt, nrid, depth + 1, path)
            path.pop()
            if self.capped:
                return


def brute_force_optimal(scenario: Scenario, max_nodes: int = 2_000_000,
                        max_depth: int = 64) -> ExactSolution:
    """Best achievable N_success under full communication (N <= 6, M <= 2)"""
    if scenario.N > 6 or scenario.M > 2:
        raise ValueError(f"exact search limited to N<=6, M<=2, got N={scenario.N}, M={scenario.M}")
    search = _Search(scenario, max_nodes, max_depth)
    start, rid = search.advance(search.initial())
    search.run(start, rid, 0, [])
    schedule: Dict[int, List[int]] = {r: [] for r in range(scenario.M)}
    for robot, action in search.best_path:
        schedule[robot].append(action)
    if search.capped:
        logger.warning(f"Exact search capped after {search.nodes} nodes; result is a lower bound")
    return ExactSolution(n_success=max(search.best, 0), schedule=schedule,
                         exhaustive=not search.capped, nodes=search.nodes)
