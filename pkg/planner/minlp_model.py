"""
Algebraic MRTA-CT model: exporter, text reader/writer, linearized pulp view and
the trace validator that checks simulated trajectories against every
constraint family.

Index conventions: nodes 0..N with 0 the depot, decisions h = 1..H, tours
s = 1..S, robots r = 0..M-1. Variables:

    x_i_j_h_s_r      binary, robot r moves i -> j at decision h of tour s
    e_i_j_h_s_r      kg delivered on that move
    time_i_j_h_s_r   travel time of that move
    w_j_h_s          cumulative kg delivered to node j up to (h, s), all robots
    c_h_s_r          payload after decision h
    range_h_s_r      range left after decision h
    time_complete_j  completion time of task j (j = 1..N)
    Done_j           task j completed by its deadline
    N_success        number of completed tasks

Demand accounting follows the prose of the formulation: deliveries accumulate
over the decisions of a tour and carry from one tour to the next for every tour
index s >= 2. The per-task total is bounded by (not forced to equal) the
demand, and a move's work is bounded by the demand left before that decision.
Both differ from the literal printed equations, which mix task and robot
subscripts and would reject any schedule that misses a task.

File grammar, one statement per line:

    meta N=<int> M=<int> S=<int> H=<int>
    var <name> <binary|continuous> <lb> <ub>
    obj <max|min> const=<float>: <expr>
    con <name> <family>: <lb> <= <expr> <= <ub>
    ind <name> <family>: <var> = 1 -> <lb> <= <expr> <= <ub>

where <expr> is `0` or a sequence of `+ <coef> <var>` and `+ <coef> <var> * <var>`.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pulp

from scenario import Scenario
from simenv import EventLog, Leg

logger = logging.getLogger(__name__)

MODEL_FORMAT_HEADER = "# ct-planner algebraic model v1"
CHECK_TOL = 1e-6

FAMILIES = (
    'tour_start', 'tour_end', 'one_transition', 'flow_continuity',
    'range_init', 'range_bounds', 'capacity_bounds', 'range_update',
    'demand_init', 'demand_tour_carry', 'work_bounds', 'work_capacity', 'work_demand',
    'demand_update', 'capacity_init', 'capacity_update', 'demand_cap', 'demand_complete',
    'travel_time', 'completion_time', 'done_indicator', 'success_count',
)


class ModelFormatError(ValueError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str   # binary or continuous
    lb: float
    ub: float


@dataclass(frozen=True)
class Term:
    coef: float
    var: str
    var2: Optional[str] = None


@dataclass
class Constraint:
    name: str
    family: str
    terms: List[Term]
    lb: float
    ub: float
    indicator: Optional[str] = None

    def evaluate(self, values: Dict[str, float]) -> float:
        total = 0.0
        for t in self.terms:
            v = values.get(t.var, 0.0)
            if t.var2 is not None:
                v *= values.get(t.var2, 0.0)
            total += t.coef * v
        return total


@dataclass
class MinlpModel:
    meta: Dict[str, int]
    variables: Dict[str, Variable] = field(default_factory=dict)
    constraints: List[Constraint] = field(default_factory=list)
    objective: List[Term] = field(default_factory=list)
    objective_constant: float = 0.0
    sense: str = 'max'

    def family_counts(self) -> Dict[str, int]:
        counts = {f: 0 for f in FAMILIES}
        for con in self.constraints:
            counts[con.family] = counts.get(con.family, 0) + 1
        return counts

    def variable_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for name in self.variables:
            if name.startswith('time_complete'):
                prefix = 'time_complete'
            elif name == 'N_success':
                prefix = name
            else:
                prefix = name.split('_')[0]
            counts[prefix] = counts.get(prefix, 0) + 1
        return counts

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, MinlpModel):
            return NotImplemented
        return (self.meta == other.meta and list(self.variables.values()) == list(other.variables.values())
                and self.constraints == other.constraints and self.objective == other.objective
                and self.objective_constant == other.objective_constant and self.sense == other.sense)


def x_name(i, j, h, s, r) -> str:
    return f"x_{i}_{j}_{h}_{s}_{r}"


def e_name(i, j, h, s, r) -> str:
    return f"e_{i}_{j}_{h}_{s}_{r}"


def time_name(i, j, h, s, r) -> str:
    return f"time_{i}_{j}_{h}_{s}_{r}"


def w_name(j, h, s) -> str:
    return f"w_{j}_{h}_{s}"


def c_name(h, s, r) -> str:
    return f"c_{h}_{s}_{r}"


def range_name(h, s, r) -> str:
    return f"range_{h}_{s}_{r}"


def default_bounds(scenario: Scenario) -> Tuple[int, int]:
    """S = ceil(total demand / (M C_max)) + 1 tours, H = N + 1 decisions"""
    total = float(np.sum(scenario.demands()))
    S = int(math.ceil(total / (scenario.M * scenario.fleet.C_max))) + 1
    return S, scenario.N + 1


def _distances(scenario: Scenario) -> np.ndarray:
    xy = scenario.node_positions()
    diff = xy[:, None, :] - xy[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def export_minlp(scenario: Scenario, S: Optional[int] = None, H: Optional[int] = None) -> MinlpModel:
    """Fully index-expanded model for the scenario"""
    dS, dH = default_bounds(scenario)
    S = S or dS
    H = H or dH
    if S < 1 or H < 1:
        raise ValueError(f"S and H must be >= 1, got S={S}, H={H}")
    N, M = scenario.N, scenario.M
    C, D = scenario.fleet.C_max, scenario.fleet.range_max
    V = range(N + 1)
    hs, ss, rs = range(1, H + 1), range(1, S + 1), range(M)
    dist = _distances(scenario)
    travel = dist / scenario.fleet.speed_km_s
    w_act = np.concatenate([[0.0], scenario.demands()])
    deadlines = scenario.deadlines()
    big_t = float(travel.max()) * H * S * M + float(deadlines.max())

    model = MinlpModel(meta={'N': N, 'M': M, 'S': S, 'H': H})

    def var(name, kind, lb, ub):
        model.variables[name] = Variable(name, kind, float(lb), float(ub))

    def con(name, family, terms, lb, ub, indicator=None):
        model.constraints.append(Constraint(name, family, terms, float(lb), float(ub), indicator))

    for s in ss:
        for h in hs:
            for r in rs:
                for i in V:
                    for j in V:
                        var(x_name(i, j, h, s, r), 'binary', 0, 1)
                        var(e_name(i, j, h, s, r), 'continuous', 0, C)
                        var(time_name(i, j, h, s, r), 'continuous', 0, travel[i, j])
    for s in ss:
        for h in hs:
            for j in V:
                var(w_name(j, h, s), 'continuous', 0, w_act[j])
    for s in ss:
        for h in hs:
            for r in rs:
                var(c_name(h, s, r), 'continuous', 0, C)
                var(range_name(h, s, r), 'continuous', 0, D)
    for j in range(1, N + 1):
        var(f"time_complete_{j}", 'continuous', 0, big_t)
        var(f"Done_{j}", 'binary', 0, 1)
    var('N_success', 'continuous', 0, N)

    model.objective = [Term(1.0 / N, 'N_success')]
    model.objective_constant = -1.0

    def moves(h, s, r, coef_fn=lambda i, j: 1.0, name_fn=x_name):
        return [Term(coef_fn(i, j), name_fn(i, j, h, s, r)) for i in V for j in V]

    def work(h, s, r, sign=1.0):
        return [Term(sign, e_name(i, j, h, s, r), x_name(i, j, h, s, r)) for i in V for j in V]

    for s in ss:
        for r in rs:
            con(f"tour_start[s={s},r={r}]", 'tour_start',
                [Term(1.0, x_name(0, j, 1, s, r)) for j in V], 1, 1)
            con(f"tour_end[s={s},r={r}]", 'tour_end',
                [Term(1.0, x_name(j, 0, H, s, r)) for j in V], 1, 1)
            con(f"range_init[s={s},r={r}]", 'range_init',
                [Term(1.0, range_name(1, s, r))] + moves(1, s, r, lambda i, j: dist[i, j]), D, D)
            con(f"capacity_init[s={s},r={r}]", 'capacity_init',
                [Term(1.0, c_name(1, s, r))] + work(1, s, r), C, C)
            for h in hs:
                con(f"one_transition[h={h},s={s},r={r}]", 'one_transition', moves(h, s, r), -math.inf, 1)
                con(f"range_bounds[h={h},s={s},r={r}]", 'range_bounds', [Term(1.0, range_name(h, s, r))], 0, D)
                con(f"capacity_bounds[h={h},s={s},r={r}]", 'capacity_bounds', [Term(1.0, c_name(h, s, r))], 0, C)
                for i in V:
                    for j in V:
                        con(f"work_bounds[i={i},j={j},h={h},s={s},r={r}]", 'work_bounds',
                            [Term(1.0, e_name(i, j, h, s, r))], 0, C)
                        con(f"travel_time[i={i},j={j},h={h},s={s},r={r}]", 'travel_time',
                            [Term(1.0, time_name(i, j, h, s, r)), Term(-travel[i, j], x_name(i, j, h, s, r))], 0, 0)
                if h == 1:
                    continue
                for i in V:
                    con(f"flow_continuity[i={i},h={h},s={s},r={r}]", 'flow_continuity',
                        [Term(1.0, x_name(i, j, h, s, r)) for j in V]
                        + [Term(-1.0, x_name(k, i, h - 1, s, r)) for k in V], 0, 0)
                con(f"range_update[h={h},s={s},r={r}]", 'range_update',
                    [Term(1.0, range_name(h, s, r)), Term(-1.0, range_name(h - 1, s, r))]
                    + moves(h, s, r, lambda i, j: dist[i, j]), 0, 0)
                con(f"capacity_update[h={h},s={s},r={r}]", 'capacity_update',
                    [Term(1.0, c_name(h, s, r)), Term(-1.0, c_name(h - 1, s, r))] + work(h, s, r), 0, 0)
                for i in V:
                    for j in V:
                        con(f"work_capacity[i={i},j={j},h={h},s={s},r={r}]", 'work_capacity',
                            [Term(1.0, e_name(i, j, h, s, r)), Term(-1.0, c_name(h - 1, s, r))], -math.inf, 0)
                        con(f"work_demand[i={i},j={j},h={h},s={s},r={r}]", 'work_demand',
                            [Term(1.0, e_name(i, j, h, s, r)), Term(1.0, w_name(j, h - 1, s))], -math.inf, w_act[j])

    def arrivals(j, h, s):
        return [Term(-1.0, e_name(i, j, h, s, r), x_name(i, j, h, s, r)) for i in V for r in rs]

    for j in V:
        con(f"demand_init[j={j}]", 'demand_init', [Term(1.0, w_name(j, 1, 1))] + arrivals(j, 1, 1), 0, 0)
        for s in range(2, S + 1):
            con(f"demand_tour_carry[j={j},s={s}]", 'demand_tour_carry',
                [Term(1.0, w_name(j, 1, s)), Term(-1.0, w_name(j, H, s - 1))] + arrivals(j, 1, s), 0, 0)
        for s in ss:
            for h in range(2, H + 1):
                con(f"demand_update[j={j},h={h},s={s}]", 'demand_update',
                    [Term(1.0, w_name(j, h, s)), Term(-1.0, w_name(j, h - 1, s))] + arrivals(j, h, s), 0, 0)
            for h in hs:
                con(f"demand_cap[j={j},h={h},s={s}]", 'demand_cap', [Term(1.0, w_name(j, h, s))], -math.inf, w_act[j])
        con(f"demand_complete[j={j}]", 'demand_complete', [Term(1.0, w_name(j, H, S))], -math.inf, w_act[j])

    for j in range(1, N + 1):
        con(f"completion_time[j={j}]", 'completion_time',
            [Term(1.0, f"time_complete_{j}")]
            + [Term(-1.0, time_name(i, j, h, s, r)) for i in V for h in hs for s in ss for r in rs], 0, 0)
        con(f"done_indicator[j={j}]", 'done_indicator',
            [Term(1.0, f"time_complete_{j}")], -math.inf, deadlines[j - 1], indicator=f"Done_{j}")
    con("success_count", 'success_count',
        [Term(1.0, 'N_success')] + [Term(-1.0, f"Done_{j}") for j in range(1, N + 1)], 0, 0)

    logger.info(f"Exported model N={N} M={M} S={S} H={H}: {len(model.variables)} variables, "
                f"{len(model.constraints)} constraints")
    return model


# ----- text format ---------------------------------------------------------

def _fmt(v: float) -> str:
    if math.isinf(v):
        return 'inf' if v > 0 else '-inf'
    return repr(float(v))


def _fmt_expr(terms: Iterable[Term]) -> str:
    parts = []
    for t in terms:
        parts.append(f"+ {_fmt(t.coef)} {t.var}" + (f" * {t.var2}" if t.var2 else ""))
    return ' '.join(parts) if parts else '0'


def format_model(model: MinlpModel) -> str:
    lines = [MODEL_FORMAT_HEADER,
             'meta ' + ' '.join(f"{k}={v}" for k, v in model.meta.items())]
    for v in model.variables.values():
        lines.append(f"var {v.name} {v.kind} {_fmt(v.lb)} {_fmt(v.ub)}")
    lines.append(f"obj {model.sense} const={_fmt(model.objective_constant)}: {_fmt_expr(model.objective)}")
    for c in model.constraints:
        body = f"{_fmt(c.lb)} <= {_fmt_expr(c.terms)} <= {_fmt(c.ub)}"
        if c.indicator:
            lines.append(f"ind {c.name} {c.family}: {c.indicator} = 1 -> {body}")
        else:
            lines.append(f"con {c.name} {c.family}: {body}")
    return '\n'.join(lines) + '\n'


def write_model(model: MinlpModel, path: str) -> None:
    with open(path, 'w') as f:
        f.write(format_model(model))


def _parse_expr(tokens: List[str], line_no: int) -> List[Term]:
    if tokens == ['0']:
        return []
    terms: List[Term] = []
    pos = 0
    while pos < len(tokens):
        if tokens[pos] != '+' or pos + 2 >= len(tokens):
            raise ModelFormatError(line_no, f"expected '+ coef var' at token {pos}")
        try:
            coef = float(tokens[pos + 1])
            var = tokens[pos + 2]
        except (ValueError, IndexError) as e:
            raise ModelFormatError(line_no, f"bad term near token {pos}") from e
        pos += 3
        var2 = None
        if pos < len(tokens) and tokens[pos] == '*':
            if pos + 1 >= len(tokens):
                raise ModelFormatError(line_no, "dangling '*'")
            var2 = tokens[pos + 1]
            pos += 2
        terms.append(Term(coef, var, var2))
    return terms


def _parse_body(text: str, line_no: int) -> Tuple[float, List[Term], float]:
    tokens = text.split()
    if len(tokens) < 5 or tokens[1] != '<=' or tokens[-2] != '<=':
        raise ModelFormatError(line_no, "expected '<lb> <= <expr> <= <ub>'")
    try:
        lb, ub = float(tokens[0]), float(tokens[-1])
    except ValueError as e:
        raise ModelFormatError(line_no, f"bad bound: {e}") from e
    return lb, _parse_expr(tokens[2:-2], line_no), ub


def parse_model(text: str) -> MinlpModel:
    model: Optional[MinlpModel] = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        keyword = line.split(' ', 1)[0]
        if keyword == 'meta':
            try:
                meta = {k: int(v) for k, v in (item.split('=') for item in line.split()[1:])}
            except ValueError as e:
                raise ModelFormatError(line_no, f"bad meta line: {e}") from e
            model = MinlpModel(meta=meta)
            continue
        if model is None:
            raise ModelFormatError(line_no, "statement before meta line")
        if keyword == 'var':
            parts = line.split()
            if len(parts) != 5 or parts[2] not in ('binary', 'continuous'):
                raise ModelFormatError(line_no, "expected 'var <name> <kind> <lb> <ub>'")
            model.variables[parts[1]] = Variable(parts[1], parts[2], float(parts[3]), float(parts[4]))
        elif keyword == 'obj':
            head, _, expr = line.partition(':')
            parts = head.split()
            if len(parts) != 3 or not parts[2].startswith('const='):
                raise ModelFormatError(line_no, "expected 'obj <sense> const=<c>: <expr>'")
            model.sense = parts[1]
            model.objective_constant = float(parts[2][len('const='):])
            model.objective = _parse_expr(expr.split(), line_no)
        elif keyword in ('con', 'ind'):
            head, _, body = line.partition(':')
            parts = head.split()
            if len(parts) != 3:
                raise ModelFormatError(line_no, f"expected '{keyword} <name> <family>:'")
            indicator = None
            if keyword == 'ind':
                cond, arrow, body = body.partition('->')
                cond_tokens = cond.split()
                if not arrow or len(cond_tokens) != 3 or cond_tokens[1:] != ['=', '1']:
                    raise ModelFormatError(line_no, "expected '<var> = 1 -> ...'")
                indicator = cond_tokens[0]
            lb, terms, ub = _parse_body(body, line_no)
            model.constraints.append(Constraint(parts[1], parts[2], terms, lb, ub, indicator))
        else:
            raise ModelFormatError(line_no, f"unknown statement {keyword!r}")
    if model is None:
        raise ModelFormatError(0, "empty model file")
    return model


def read_model(path: str) -> MinlpModel:
    with open(path, 'r') as f:
        return parse_model(f.read())


# ----- linearized MILP -------------------------------------------------------

def _lp_label(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_]", "_", name).rstrip("_")


def to_pulp(model: MinlpModel) -> pulp.LpProblem:
    """MILP view: e*x products become bounded auxiliaries, indicators become big-M rows"""
    sense = pulp.LpMaximize if model.sense == 'max' else pulp.LpMinimize
    prob = pulp.LpProblem("mrta_ct", sense)
    lp_vars: Dict[str, pulp.LpVariable] = {}
    for v in model.variables.values():
        lp_vars[v.name] = pulp.LpVariable(
            v.name, lowBound=None if math.isinf(v.lb) else v.lb,
            upBound=None if math.isinf(v.ub) else v.ub,
            cat='Binary' if v.kind == 'binary' else 'Continuous')

    products: Dict[Tuple[str, str], pulp.LpVariable] = {}

    def product(cont: str, binary: str) -> pulp.LpVariable:
        key = (cont, binary)
        if key not in products:
            ub = model.variables[cont].ub
            z = pulp.LpVariable(f"z_{cont}", lowBound=0, upBound=ub)
            prob.addConstraint(z <= ub * lp_vars[binary], f"mc1_{cont}")
            prob.addConstraint(z <= lp_vars[cont], f"mc2_{cont}")
            prob.addConstraint(z >= lp_vars[cont] - ub * (1 - lp_vars[binary]), f"mc3_{cont}")
            products[key] = z
        return products[key]

    def linear(terms: List[Term]):
        expr = []
        for t in terms:
            if t.var2 is None:
                expr.append(t.coef * lp_vars[t.var])
            else:
                cont, binary = (t.var, t.var2) if model.variables[t.var2].kind == 'binary' else (t.var2, t.var)
                expr.append(t.coef * product(cont, binary))
        return pulp.lpSum(expr)

    prob += linear(model.objective) + model.objective_constant
    for c in model.constraints:
        expr = linear(c.terms)
        label = _lp_label(c.name)
        if c.indicator is not None:
            # big-M from the variable bounds of the guarded expression
            big_m = sum(abs(t.coef) * max(abs(model.variables[t.var].lb), abs(model.variables[t.var].ub))
                        for t in c.terms if t.var2 is None)
            prob.addConstraint(expr - c.ub <= big_m * (1 - lp_vars[c.indicator]), label)
            continue
        if c.lb == c.ub:
            prob.addConstraint(expr == c.lb, label)
        else:
            if not math.isinf(c.lb):
                prob.addConstraint(expr >= c.lb, label + "_lo")
            if not math.isinf(c.ub):
                prob.addConstraint(expr <= c.ub, label + "_hi")
    return prob


def write_lp(model: MinlpModel, path: str) -> None:
    to_pulp(model).writeLP(path)
    logger.info(f"Wrote linearized model to {path}")


# ----- trace validation ------------------------------------------------------

@dataclass
class Violation:
    family: str
    name: str
    value: float
    lb: float
    ub: float


@dataclass
class ValidationReport:
    mappable: bool
    reason: str = ""
    violations: List[Violation] = field(default_factory=list)
    n_success: int = 0
    tours_used: int = 0
    max_decisions: int = 0
    skipped_families: Tuple[str, ...] = ('completion_time',)

    @property
    def passed(self) -> bool:
        return self.mappable and not self.violations

    def families_violated(self) -> List[str]:
        return sorted({v.family for v in self.violations})


def split_tours(log: EventLog, M: int) -> Dict[int, List[List[Leg]]]:
    """Travel legs per robot, cut after every return to the depot"""
    tours: Dict[int, List[List[Leg]]] = {r: [] for r in range(M)}
    for r in range(M):
        legs = sorted((leg for leg in log.legs if leg.robot == r and leg.kind == 'travel'),
                      key=lambda leg: leg.t_depart)
        current: List[Leg] = []
        for leg in legs:
            current.append(leg)
            if leg.to_node == 0:
                tours[r].append(current)
                current = []
        if current:
            tours[r].append(current)
    return tours


def required_bounds(log: EventLog, M: int) -> Tuple[int, int]:
    tours = split_tours(log, M)
    S = max((len(t) for t in tours.values()), default=1)
    H = max((len(tour) for t in tours.values() for tour in t), default=1)
    return max(S, 1), max(H, 1)


def _trace_values(scenario: Scenario, tours: Dict[int, List[List[Leg]]], S: int, H: int,
                  completion: Dict[int, float]) -> Dict[str, float]:
    N, M = scenario.N, scenario.M
    C, D = scenario.fleet.C_max, scenario.fleet.range_max
    dist = _distances(scenario)
    travel = dist / scenario.fleet.speed_km_s
    values: Dict[str, float] = {}
    delivered_at = np.zeros((N + 1, H + 1, S + 1))
    for r in range(M):
        for s in range(1, S + 1):
            legs = tours[r][s - 1] if s - 1 < len(tours[r]) else []
            rng_left, payload = D, C
            for h in range(1, H + 1):
                if h - 1 < len(legs):
                    leg = legs[h - 1]
                    i, j, e = leg.from_node, leg.to_node, leg.kg_delivered
                else:
                    i, j, e = 0, 0, 0.0
                values[x_name(i, j, h, s, r)] = 1.0
                values[e_name(i, j, h, s, r)] = e
                values[time_name(i, j, h, s, r)] = float(travel[i, j])
                rng_left -= dist[i, j]
                payload -= e
                values[range_name(h, s, r)] = rng_left
                values[c_name(h, s, r)] = payload
                delivered_at[j, h, s] += e
    previous = np.zeros(N + 1)
    for s in range(1, S + 1):
        for h in range(1, H + 1):
            previous = previous + delivered_at[:, h, s]
            for j in range(N + 1):
                values[w_name(j, h, s)] = float(previous[j])
    deadlines = scenario.deadlines()
    done = 0
    for j in range(1, N + 1):
        tc = completion.get(j, math.inf)
        values[f"time_complete_{j}"] = tc
        flag = 1.0 if tc <= deadlines[j - 1] else 0.0
        values[f"Done_{j}"] = flag
        done += int(flag)
    values['N_success'] = float(done)
    return values


def _completion_times(log: EventLog, scenario: Scenario) -> Dict[int, float]:
    demands = scenario.demands()
    cumulative = np.zeros(scenario.N + 1)
    completion: Dict[int, float] = {}
    for leg in sorted((l for l in log.legs if l.kind == 'travel'), key=lambda l: (l.t_arrive, l.robot)):
        j = leg.to_node
        if j == 0 or leg.kg_delivered <= 0:
            continue
        cumulative[j] += leg.kg_delivered
        if j not in completion and cumulative[j] >= demands[j - 1] - 1e-9:
            completion[j] = leg.t_arrive
    return completion


def _leg_checks(log: EventLog, scenario: Scenario) -> List[Violation]:
    """Leg durations match distances, robot legs never overlap, no delivery after a deadline"""
    violations: List[Violation] = []
    dist = _distances(scenario)
    speed = scenario.fleet.speed_km_s
    deadlines = scenario.deadlines()
    by_robot: Dict[int, List[Leg]] = {}
    for leg in log.legs:
        by_robot.setdefault(leg.robot, []).append(leg)
    for r, legs in by_robot.items():
        legs.sort(key=lambda l: l.t_depart)
        for k, leg in enumerate(legs):
            if leg.kind == 'travel':
                expected = dist[leg.from_node, leg.to_node] / speed
                duration = leg.t_arrive - leg.t_depart
                if abs(duration - expected) > CHECK_TOL * max(1.0, expected):
                    violations.append(Violation('time_consistency', f"leg[r={r},k={k}]", duration, expected, expected))
                if leg.to_node > 0 and leg.kg_delivered > 0 and leg.t_arrive > deadlines[leg.to_node - 1]:
                    violations.append(Violation('deadline', f"leg[r={r},k={k}]", leg.t_arrive,
                                                -math.inf, float(deadlines[leg.to_node - 1])))
            if k + 1 < len(legs) and legs[k + 1].t_depart < leg.t_arrive - CHECK_TOL:
                violations.append(Violation('time_consistency', f"overlap[r={r},k={k}]",
                                            legs[k + 1].t_depart, leg.t_arrive, math.inf))
    return violations


def trace_validate(log: EventLog, scenario: Scenario, S: Optional[int] = None,
                   H: Optional[int] = None) -> ValidationReport:
    """Map a simulated trajectory onto the model variables and check every family"""
    dS, dH = default_bounds(scenario)
    S, H = S or dS, H or dH
    tours = split_tours(log, scenario.M)
    tours_used = max((len(t) for t in tours.values()), default=0)
    decisions = max((len(tour) for t in tours.values() for tour in t), default=0)
    if tours_used > S or decisions > H:
        reason = f"trace needs S={tours_used}, H={decisions} but model has S={S}, H={H}"
        logger.warning(f"Unmappable trace: {reason}")
        return ValidationReport(mappable=False, reason=reason, tours_used=tours_used, max_decisions=decisions)

    completion = _completion_times(log, scenario)
    values = _trace_values(scenario, tours, S, H, completion)
    model = export_minlp(scenario, S, H)
    report = ValidationReport(mappable=True, n_success=int(values['N_success']),
                              tours_used=tours_used, max_decisions=decisions)
    for con in model.constraints:
        if con.family in report.skipped_families:
            continue
        if con.indicator is not None and values.get(con.indicator, 0.0) < 0.5:
            continue
        lhs = con.evaluate(values)
        tol_lo = CHECK_TOL * max(1.0, abs(con.lb)) if not math.isinf(con.lb) else 0.0
        tol_hi = CHECK_TOL * max(1.0, abs(con.ub)) if not math.isinf(con.ub) else 0.0
        if lhs < con.lb - tol_lo or lhs > con.ub + tol_hi:
            report.violations.append(Violation(con.family, con.name, lhs, con.lb, con.ub))
    report.violations.extend(_leg_checks(log, scenario))
    if report.violations:
        logger.info(f"Trace violates {len(report.violations)} constraints in {report.families_violated()}")
    return report
