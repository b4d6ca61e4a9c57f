"""
Event-driven decentralized simulator for MRTA-CT.

Robots leave the depot with full range and payload, travel in straight lines at
constant speed and take a decision every time they arrive somewhere. A task is
served partially: each visit delivers min(remaining demand, payload). Robots
only know what they have seen or heard: every robot keeps a BeliefRecord that is
merged with the records of robots within communication range at every event.

Units are kilometers and seconds. Robot ids are 0..M-1; action 0 is the depot
and action i (1..N) is task i.
"""

import heapq
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field, replace, asdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from scenario import Scenario, NormalizationTable, normalize_features
from taskgraph import task_features

logger = logging.getLogger(__name__)

EPISODE_START = 'episode-start'
ARRIVAL_TASK = 'arrival-task'
ARRIVAL_DEPOT = 'arrival-depot'
IDLE_WAKE = 'idle-wake'

ACTIVE, DONE, MISSED = 'active', 'done', 'missed'

BUDGET_TOL = 1e-9


class ContractViolation(RuntimeError):
    """Raised when a caller breaks the simulator's contract"""


@dataclass(frozen=True)
class RobotState:
    """Snapshot of one robot; positions in km"""
    id: int
    origin: Tuple[float, float]
    destination: Tuple[float, float]
    dest_node: int
    range_left: float
    payload: float
    t_depart: float
    t_next: float
    ts: float

    def position_at(self, t: float) -> Tuple[float, float]:
        if t >= self.t_next or self.t_next <= self.t_depart:
            return self.destination if t >= self.t_next else self.origin
        frac = (t - self.t_depart) / (self.t_next - self.t_depart)
        return (self.origin[0] + frac * (self.destination[0] - self.origin[0]),
                self.origin[1] + frac * (self.destination[1] - self.origin[1]))


@dataclass
class TaskState:
    remaining: float
    status: str = ACTIVE
    completed_at: Optional[float] = None


@dataclass(frozen=True)
class BeliefEntry:
    state: RobotState
    stamp: Tuple[float, int]   # (generation time, per-robot version)


@dataclass
class BeliefRecord:
    """What one robot knows about the fleet and the tasks"""
    robots: Dict[int, BeliefEntry]
    completion: np.ndarray   # fraction of each task's demand known to be delivered
    visited: np.ndarray      # task known to be done

    def copy(self) -> 'BeliefRecord':
        return BeliefRecord(robots=dict(self.robots), completion=self.completion.copy(),
                            visited=self.visited.copy())

    def merge(self, other: 'BeliefRecord') -> None:
        """OR visited, max completion, newer robot entry wins"""
        self.visited |= other.visited
        np.maximum(self.completion, other.completion, out=self.completion)
        for rid, entry in other.robots.items():
            mine = self.robots.get(rid)
            if mine is None or entry.stamp > mine.stamp:
                self.robots[rid] = entry


@dataclass(frozen=True)
class Event:
    time: float
    robot: int
    kind: str


@dataclass
class Leg:
    """One decision of one robot"""
    robot: int
    from_node: int
    to_node: int
    t_depart: float
    t_arrive: float
    kg_delivered: float = 0.0
    kind: str = 'travel'   # travel, idle or dock


@dataclass
class EventLog:
    legs: List[Leg] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.legs)

    def to_frame(self) -> pd.DataFrame:
        columns = ['robot', 'from_node', 'to_node', 't_depart', 't_arrive', 'kg_delivered', 'kind']
        return pd.DataFrame([asdict(leg) for leg in self.legs], columns=columns)

    def save(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format='%.17g')

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> 'EventLog':
        legs = [Leg(robot=int(row.robot), from_node=int(row.from_node), to_node=int(row.to_node),
                    t_depart=float(row.t_depart), t_arrive=float(row.t_arrive),
                    kg_delivered=float(row.kg_delivered), kind=str(row.kind))
                for row in frame.itertuples(index=False)]
        return cls(legs=legs)

    @classmethod
    def load(cls, path: str) -> 'EventLog':
        return cls.from_frame(pd.read_csv(path))


@dataclass
class Observation:
    """The deciding robot's view of the world, read from its own belief"""
    robot: int
    t: float
    features: np.ndarray          # N x 4 normalized
    positions: np.ndarray         # N x 2 km
    deadlines: np.ndarray
    demands: np.ndarray           # initial demands
    remaining: np.ndarray         # believed remaining demand
    mask: np.ndarray              # N+1, index 0 is the depot
    own_position: Tuple[float, float]
    own_destination: Tuple[float, float]
    own_range: float
    own_payload: float
    peer_ids: List[int]
    peer_destinations: np.ndarray  # K x 2
    peer_dest_nodes: List[int]
    peer_ranges: np.ndarray
    peer_payloads: np.ndarray
    peer_next_times: np.ndarray
    peer_stamps: np.ndarray
    depot: Tuple[float, float]
    arena: Tuple[float, float]
    C_max: float
    range_max: float
    speed_km_s: float
    max_deadline: float


@dataclass
class StepResult:
    reward: float
    done: bool
    events: List[Event]


def completion_ratio(remaining: np.ndarray, demands: np.ndarray) -> np.ndarray:
    ratio = 1.0 - np.asarray(remaining, dtype=float) / np.asarray(demands, dtype=float)
    ratio[np.asarray(remaining) <= 0] = 1.0
    return np.clip(ratio, 0.0, 1.0)


def _distance(a: Sequence[float], b: Sequence[float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


class WorldState:
    """Single-owner mutable episode state"""

    def __init__(self, scenario: Scenario, seed: int = 0, record_history: bool = True):
        scenario.validate()
        self.scenario = scenario
        self.seed = seed
        self.fleet = scenario.fleet
        self.N = scenario.N
        self.M = scenario.M
        self.depot = tuple(scenario.depot)
        self.node_xy = scenario.node_positions()
        self.deadlines = scenario.deadlines()
        self.demands = scenario.demands()
        self.table: NormalizationTable = normalize_features(scenario)
        self.speed = self.fleet.speed_km_s
        self.d_com = self.fleet.d_com_km
        self.payload_bytes = (6 * self.M + self.N) * 8

        self.t = 0.0
        self.tasks = [TaskState(remaining=float(w)) for w in self.demands]
        self.robots: Dict[int, RobotState] = {}
        for rid in range(self.M):
            self.robots[rid] = RobotState(
                id=rid, origin=self.depot, destination=self.depot, dest_node=0,
                range_left=self.fleet.range_max, payload=self.fleet.C_max,
                t_depart=0.0, t_next=0.0, ts=0.0)
        self.beliefs: Dict[int, BeliefRecord] = {
            rid: BeliefRecord(robots={k: BeliefEntry(s, (0.0, 0)) for k, s in self.robots.items()},
                              completion=np.zeros(self.N), visited=np.zeros(self.N, dtype=bool))
            for rid in range(self.M)
        }
        self.record_history = record_history
        self.history: Dict[int, List[RobotState]] = {rid: [s] for rid, s in self.robots.items()}
        self.versions: Dict[int, int] = {rid: 0 for rid in self.robots}

        self._queue: List[Tuple[float, int, int, str]] = []
        self._seq = 0
        self.docked = set()
        self.log = EventLog()
        self._open_leg: Dict[int, int] = {}
        self.current_robot: Optional[int] = None
        self.done = False
        self.decisions = 0
        self.messages = 0

        for rid in range(self.M):
            self._push(0.0, rid, EPISODE_START)
        self._advance()

    # ----- queue -----------------------------------------------------------

    def _push(self, t: float, robot: int, kind: str) -> None:
        heapq.heappush(self._queue, (t, robot, self._seq, kind))
        self._seq += 1

    def queued_events(self) -> List[Event]:
        return [Event(t, r, k) for t, r, _, k in sorted(self._queue)]

    # ----- ground truth ----------------------------------------------------

    def _set_robot(self, state: RobotState) -> None:
        self.robots[state.id] = state
        self.versions[state.id] += 1
        if self.record_history:
            self.history[state.id].append(state)

    def robot_at_depot(self, rid: int) -> bool:
        s = self.robots[rid]
        return s.dest_node == 0 and self.t >= s.t_next

    def true_completion(self) -> np.ndarray:
        return completion_ratio(np.array([ts.remaining for ts in self.tasks]), self.demands)

    def remaining(self) -> np.ndarray:
        return np.array([ts.remaining for ts in self.tasks])

    def n_success(self) -> int:
        return sum(1 for ts in self.tasks if ts.status == DONE)

    def active_tasks(self) -> List[int]:
        return [i for i, ts in enumerate(self.tasks) if ts.status == ACTIVE]

    def _expire(self) -> None:
        for i, ts in enumerate(self.tasks):
            if ts.status == ACTIVE and self.t > self.deadlines[i]:
                ts.status = MISSED
                logger.debug(f"t={self.t:.3f}: task {i + 1} missed with {ts.remaining:.3f} kg left")

    def _check_budgets(self, rid: int) -> None:
        s = self.robots[rid]
        if not (-BUDGET_TOL <= s.range_left <= self.fleet.range_max + BUDGET_TOL):
            raise ContractViolation(f"robot {rid} range {s.range_left} outside [0, {self.fleet.range_max}]")
        if not (-BUDGET_TOL <= s.payload <= self.fleet.C_max + BUDGET_TOL):
            raise ContractViolation(f"robot {rid} payload {s.payload} outside [0, {self.fleet.C_max}]")

    # ----- beliefs ---------------------------------------------------------

    def _refresh_self_beliefs(self) -> None:
        for rid, state in self.robots.items():
            self.beliefs[rid].robots[rid] = BeliefEntry(state, (self.t, self.versions[rid]))

    def exchange_information(self) -> int:
        """Single-pass pairwise merge from the pre-exchange snapshot; returns message count"""
        snapshot = {rid: b.copy() for rid, b in self.beliefs.items()}
        positions = {rid: s.position_at(self.t) for rid, s in self.robots.items()}
        messages = 0
        for a in range(self.M):
            for b in range(a + 1, self.M):
                if _distance(positions[a], positions[b]) < self.d_com:
                    self.beliefs[a].merge(snapshot[b])
                    self.beliefs[b].merge(snapshot[a])
                    messages += 2
        self.messages += messages
        return messages

    def believed_remaining(self, rid: int) -> np.ndarray:
        belief = self.beliefs[rid]
        remaining = self.demands * (1.0 - belief.completion)
        remaining[belief.visited | (belief.completion >= 1.0)] = 0.0
        return remaining

    def belief_is_historical(self, rid: int) -> bool:
        """Every peer record held by rid is some true past state of that peer"""
        for k, entry in self.beliefs[rid].robots.items():
            if entry.state not in self.history[k]:
                return False
        return True

    def belief_matches_truth(self, rid: int) -> bool:
        belief = self.beliefs[rid]
        if any(belief.robots[k].state != s for k, s in self.robots.items()):
            return False
        done = np.array([ts.status == DONE for ts in self.tasks])
        return bool(np.array_equal(belief.completion, self.true_completion())
                    and np.array_equal(belief.visited, done))

    # ----- decisions -------------------------------------------------------

    def feasible_mask(self, rid: int) -> np.ndarray:
        """Depot always; task i if believed active, payload left and range for i and back"""
        mask = np.zeros(self.N + 1, dtype=bool)
        mask[0] = True
        s = self.robots[rid]
        if s.payload <= 0:
            return mask
        here = s.position_at(self.t)
        remaining = self.believed_remaining(rid)
        for i in range(self.N):
            if remaining[i] <= 0 or self.t > self.deadlines[i]:
                continue
            node = self.node_xy[i + 1]
            need = _distance(here, node) + _distance(node, self.depot)
            if need <= s.range_left + BUDGET_TOL:
                mask[i + 1] = True
        return mask

    def observe(self, rid: int) -> Observation:
        s = self.robots[rid]
        belief = self.beliefs[rid]
        remaining = self.believed_remaining(rid)
        peers = [k for k in sorted(belief.robots) if k != rid]
        entries = [belief.robots[k] for k in peers]
        return Observation(
            robot=rid, t=self.t,
            features=task_features(self.scenario, remaining, self.table),
            positions=self.node_xy[1:].copy(), deadlines=self.deadlines.copy(),
            demands=self.demands.copy(), remaining=remaining,
            mask=self.feasible_mask(rid),
            own_position=s.position_at(self.t), own_destination=s.destination,
            own_range=s.range_left, own_payload=s.payload,
            peer_ids=peers,
            peer_destinations=np.array([e.state.destination for e in entries], dtype=float).reshape(-1, 2),
            peer_dest_nodes=[e.state.dest_node for e in entries],
            peer_ranges=np.array([e.state.range_left for e in entries], dtype=float),
            peer_payloads=np.array([e.state.payload for e in entries], dtype=float),
            peer_next_times=np.array([e.state.t_next for e in entries], dtype=float),
            peer_stamps=np.array([e.state.ts for e in entries], dtype=float),
            depot=self.depot, arena=self.scenario.arena,
            C_max=self.fleet.C_max, range_max=self.fleet.range_max,
            speed_km_s=self.speed, max_deadline=float(np.max(self.deadlines)),
        )

    def step(self, rid: int, action: int) -> StepResult:
        """Apply one decision, then run the clock to the next decision"""
        if self.done:
            raise ContractViolation("episode already finished")
        if rid != self.current_robot:
            raise ContractViolation(f"robot {rid} has no pending decision (pending: {self.current_robot})")
        action = int(action)
        mask = self.feasible_mask(rid)
        if not (0 <= action <= self.N) or not mask[action]:
            raise ContractViolation(f"infeasible action {action} for robot {rid} at t={self.t}")

        s = self.robots[rid]
        from_node = s.dest_node
        self.decisions += 1
        if action == 0 and self.robot_at_depot(rid):
            self._idle(rid)
        else:
            target = tuple(self.node_xy[action])
            here = s.position_at(self.t)
            t_arrive = self.t + _distance(here, target) / self.speed
            self._set_robot(replace(s, origin=here, destination=target, dest_node=action,
                                    t_depart=self.t, t_next=t_arrive, ts=self.t))
            self._push(t_arrive, rid, ARRIVAL_DEPOT if action == 0 else ARRIVAL_TASK)
            self._open_leg[rid] = len(self.log.legs)
            self.log.legs.append(Leg(rid, from_node, action, self.t, t_arrive))
        self.beliefs[rid].robots[rid] = BeliefEntry(self.robots[rid], (self.t, self.versions[rid]))

        self.current_robot = None
        events = self._advance()
        reward = self.compute_reward() if self.done else 0.0
        return StepResult(reward=reward, done=self.done, events=events)

    def _idle(self, rid: int) -> None:
        """Wait at the depot for the next later event or deadline, or dock"""
        later_events = [t for t, _, _, _ in self._queue if t > self.t]
        later_deadlines = [self.deadlines[i] for i in self.active_tasks() if self.deadlines[i] > self.t]
        candidates = later_events + later_deadlines
        s = self.robots[rid]
        if candidates:
            wake = float(min(candidates))
            self._set_robot(replace(s, origin=self.depot, destination=self.depot, dest_node=0,
                                    t_depart=self.t, t_next=wake, ts=self.t))
            self._push(wake, rid, IDLE_WAKE)
            self.log.legs.append(Leg(rid, 0, 0, self.t, wake, kind='idle'))
        else:
            self._set_robot(replace(s, t_depart=self.t, t_next=self.t, ts=self.t))
            self.docked.add(rid)
            self.log.legs.append(Leg(rid, 0, 0, self.t, self.t, kind='dock'))

    def _arrive(self, event: Event) -> None:
        rid = event.robot
        s = self.robots[rid]
        dist = _distance(s.origin, s.destination)
        if event.kind == ARRIVAL_DEPOT:
            self._set_robot(replace(s, origin=s.destination, range_left=self.fleet.range_max,
                                    payload=self.fleet.C_max, t_depart=self.t, t_next=self.t))
        elif event.kind == ARRIVAL_TASK:
            i = s.dest_node - 1
            task = self.tasks[i]
            delivered = 0.0
            if task.status == ACTIVE and self.t <= self.deadlines[i]:
                delivered = min(task.remaining, s.payload)
                task.remaining -= delivered
                if task.remaining <= 1e-12:
                    task.remaining = 0.0
                    task.status = DONE
                    task.completed_at = self.t
            self._set_robot(replace(s, origin=s.destination, range_left=max(0.0, s.range_left - dist),
                                    payload=max(0.0, s.payload - delivered), t_depart=self.t, t_next=self.t))
            belief = self.beliefs[rid]
            belief.completion[i] = max(belief.completion[i], self.true_completion()[i])
            if task.status == DONE:
                belief.visited[i] = True
            if rid in self._open_leg:
                self.log.legs[self._open_leg[rid]].kg_delivered = delivered
        self._open_leg.pop(rid, None)
        self._check_budgets(rid)

    def _advance(self) -> List[Event]:
        processed: List[Event] = []
        while True:
            if self.is_terminal():
                self.done = True
                self.current_robot = None
                return processed
            if not self._queue:
                pending = self.active_tasks()
                if not pending:
                    raise ContractViolation("event queue empty with robots away from the depot")
                latest = max(self.deadlines[i] for i in pending)
                self.t = float(np.nextafter(max(latest, self.t), np.inf))
                self._expire()
                continue
            t, rid, _, kind = heapq.heappop(self._queue)
            if t < self.t:
                raise ContractViolation(f"clock would move backwards: {t} < {self.t}")
            self.t = t
            event = Event(t, rid, kind)
            processed.append(event)
            self._expire()
            if kind in (ARRIVAL_TASK, ARRIVAL_DEPOT):
                self._arrive(event)
            self._refresh_self_beliefs()
            self.exchange_information()
            if not self.active_tasks() and self.robot_at_depot(rid):
                self.docked.add(rid)
                continue
            self.current_robot = rid
            return processed

    # ----- terminal --------------------------------------------------------

    def is_terminal(self) -> bool:
        if self.active_tasks():
            return False
        return all(self.robot_at_depot(rid) for rid in range(self.M))

    def compute_reward(self) -> float:
        """-(N - N_success) / N, only at the end of an episode"""
        if not self.is_terminal():
            raise ContractViolation("reward requested before the episode ended")
        return -(self.N - self.n_success()) / self.N

    def trace(self) -> EventLog:
        return self.log

    def comm_bytes(self) -> int:
        return self.messages * self.payload_bytes


def reset(scenario: Scenario, seed: int = 0, record_history: bool = True) -> WorldState:
    """Fresh episode; the clock stops at the first robot's episode-start decision"""
    return WorldState(scenario, seed=seed, record_history=record_history)


class ScriptedAgent:
    """Plays fixed per-robot action sequences"""

    def __init__(self, actions: Dict[int, Sequence[int]]):
        self.actions = {rid: deque(seq) for rid, seq in actions.items()}

    def decide(self, world: WorldState, robot: int) -> int:
        queue = self.actions.get(robot)
        if not queue:
            raise ContractViolation(f"script exhausted for robot {robot} at t={world.t}")
        return queue.popleft()


@dataclass
class EpisodeResult:
    reward: float
    n_success: int
    completion: float   # percent
    decisions: int
    decision_time: float
    latencies: List[float]
    comm_bytes: int
    log: EventLog
    world: Optional[WorldState] = None


def run_episode(scenario: Scenario, agent, seed: int = 0,
                clock: Callable[[], float] = time.perf_counter,
                on_decision: Optional[Callable[[WorldState, int], None]] = None,
                keep_world: bool = False) -> EpisodeResult:
    """Drive one episode; only agent.decide calls are timed"""
    world = reset(scenario, seed)
    latencies: List[float] = []
    while not world.done:
        rid = world.current_robot
        if on_decision is not None:
            on_decision(world, rid)
        started = clock()
        action = agent.decide(world, rid)
        latencies.append(clock() - started)
        world.step(rid, action)
    reward = world.compute_reward()
    return EpisodeResult(
        reward=reward, n_success=world.n_success(),
        completion=100.0 * world.n_success() / world.N,
        decisions=world.decisions, decision_time=float(sum(latencies)),
        latencies=latencies, comm_bytes=world.comm_bytes(), log=world.log,
        world=world if keep_world else None,
    )


def replay(scenario: Scenario, log: EventLog, seed: int = 0) -> EpisodeResult:
    """Re-run an episode from its leg log"""
    ordered = sorted(log.legs, key=lambda leg: (leg.t_depart, leg.robot))
    actions: Dict[int, List[int]] = {}
    for leg in ordered:
        actions.setdefault(leg.robot, []).append(leg.to_node)
    return run_episode(scenario, ScriptedAgent(actions), seed=seed)
