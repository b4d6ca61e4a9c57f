"""
Experiment harness: runs every method on shared scenario samples per
(lambda_t, lambda_r) cell, collects completion/timing/communication metrics,
compares methods with Welch t-tests and writes plot-ready result files.
"""

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from itertools import combinations
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from baselines import BigMrtaAgent, FeasRndAgent, brute_force_optimal, full_communication
from policy import CapamPolicy, PolicyAgent, load_checkpoint
from scenario import GenerationConfig, Scenario, generate_scenario
from simenv import run_episode
from topology import TDLaplacianCache

logger = logging.getLogger(__name__)

METHODS = ('capam-td', 'capam', 'mlp', 'feasrnd', 'bigmrta', 'exact')
LEARNED_METHODS = ('capam-td', 'capam', 'mlp')
RESULTS_SCHEMA_VERSION = 1
SAMPLE_COLUMNS = ['method', 'lambda_t', 'lambda_r', 'N', 'M', 'seed', 'scenario_hash', 'completion',
                  'n_success', 'decisions', 'decision_time', 'mean_latency', 'comm_bytes', 'failed', 'error']


@dataclass
class ExperimentSpec:
    """Methods x scenario grid; every method sees the same seeds in every cell"""
    methods: List[str] = field(default_factory=lambda: ['feasrnd', 'bigmrta'])
    lambda_t: List[float] = field(default_factory=lambda: [0.5, 1.0])
    lambda_r: List[float] = field(default_factory=lambda: [1.0])
    samples: int = 100
    seed_base: int = 0
    checkpoints: Dict[str, str] = field(default_factory=dict)
    generation: Dict[str, Any] = field(default_factory=dict)
    full_communication: bool = False
    workers: int = 1
    serial_timing: bool = True

    def validate(self) -> None:
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    def cells(self) -> List[GenerationConfig]:
        return [GenerationConfig.from_dict({**self.generation, 'lambda_t': lt, 'lambda_r': lr})
                for lt in self.lambda_t for lr in self.lambda_r]

    def seeds(self) -> List[int]:
        return [self.seed_base + k for k in range(self.samples)]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentSpec':
        return cls(**data)


@dataclass
class SampleMetrics:
    method: str
    lambda_t: float
    lambda_r: float
    N: int
    M: int
    seed: int
    scenario_hash: str
    completion: float = float('nan')
    n_success: int = 0
    decisions: int = 0
    decision_time: float = float('nan')
    mean_latency: float = float('nan')
    comm_bytes: int = 0
    failed: bool = False
    error: str = ""


@dataclass
class TTestResult:
    p_value: float
    statistic: float
    degenerate: bool = False


class ResultsTable:
    """Per-sample metrics plus the per-(method, N, M) summaries built from them"""

    def __init__(self, samples: pd.DataFrame, spec: Optional[ExperimentSpec] = None):
        self.samples = samples[SAMPLE_COLUMNS].reset_index(drop=True)
        self.spec = spec

    def ok(self) -> pd.DataFrame:
        return self.samples[~self.samples['failed']]

    def cell_keys(self) -> List[Tuple[str, int, int]]:
        keys = self.samples[['method', 'N', 'M']].drop_duplicates()
        return [(str(m), int(n), int(r)) for m, n, r in keys.itertuples(index=False)]

    def cell(self, method: str, N: int, M: int) -> pd.DataFrame:
        s = self.samples
        return s[(s['method'] == method) & (s['N'] == N) & (s['M'] == M)]

    def summary(self) -> pd.DataFrame:
        rows = []
        for method, N, M in self.cell_keys():
            cell = self.cell(method, N, M)
            good = cell[~cell['failed']]
            rows.append({
                'method': method, 'N': N, 'M': M, 'n': len(cell), 'failed': int(cell['failed'].sum()),
                'mean_completion': float(good['completion'].mean()) if len(good) else float('nan'),
                'std_completion': float(good['completion'].std(ddof=1)) if len(good) > 1 else float('nan'),
                'mean_decision_time': float(good['decision_time'].mean()) if len(good) else float('nan'),
                'mean_comm_bytes': float(good['comm_bytes'].mean()) if len(good) else float('nan'),
                'seeds': ' '.join(str(int(s)) for s in cell['seed']),
            })
        return pd.DataFrame(rows)

    def quantiles(self) -> pd.DataFrame:
        """Box-plot inputs per cell"""
        rows = []
        for method, N, M in self.cell_keys():
            good = self.cell(method, N, M)
            values = good[~good['failed']]['completion'].to_numpy(dtype=float)
            if values.size == 0:
                q = [float('nan')] * 5
            else:
                q = np.quantile(values, [0.0, 0.25, 0.5, 0.75, 1.0]).tolist()
            rows.append({'method': method, 'N': N, 'M': M, 'n': int(values.size),
                         'min': q[0], 'q1': q[1], 'median': q[2], 'q3': q[3], 'max': q[4],
                         'mean_decision_time': float(good[~good['failed']]['decision_time'].mean())
                         if values.size else float('nan')})
        return pd.DataFrame(rows)

    def p_values(self) -> pd.DataFrame:
        """Welch test for every method pair within each (N, M)"""
        rows = []
        ok = self.ok()
        for (N, M), group in ok.groupby(['N', 'M']):
            methods = sorted(group['method'].unique())
            for a, b in combinations(methods, 2):
                xa = group[group['method'] == a]['completion'].to_numpy(dtype=float)
                xb = group[group['method'] == b]['completion'].to_numpy(dtype=float)
                if len(xa) < 2 or len(xb) < 2:
                    continue
                res = significance_test(xa, xb)
                rows.append({'N': int(N), 'M': int(M), 'method_a': a, 'method_b': b,
                             'p_value': res.p_value, 'degenerate': res.degenerate})
        return pd.DataFrame(rows, columns=['N', 'M', 'method_a', 'method_b', 'p_value', 'degenerate'])

    def timing_ratios(self) -> pd.DataFrame:
        """Mean decision time of each method relative to the fastest in its cell"""
        summary = self.summary()
        if summary.empty:
            return summary
        fastest = summary.groupby(['N', 'M'])['mean_decision_time'].transform('min')
        out = summary[['method', 'N', 'M', 'mean_decision_time']].copy()
        out['ratio_to_fastest'] = out['mean_decision_time'] / fastest
        return out


def scenario_hash(scenario: Scenario) -> str:
    return hashlib.sha1(json.dumps(scenario.to_dict(), sort_keys=True).encode()).hexdigest()


def significance_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Welch two-sample t-test with conventions for zero-variance samples"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError(f"need at least 2 samples each, got {a.size} and {b.size}")
    if np.var(a) == 0.0 and np.var(b) == 0.0:
        same = bool(a[0] == b[0])
        logger.warning(f"Degenerate t-test: both samples constant ({a[0]} vs {b[0]})")
        return TTestResult(p_value=1.0 if same else 0.0, statistic=0.0 if same else float('inf'),
                           degenerate=True)
    res = stats.ttest_ind(a, b, equal_var=False)
    return TTestResult(p_value=float(res.pvalue), statistic=float(res.statistic))


def _make_agent(method: str, models: Dict[str, CapamPolicy], seed: int):
    if method == 'feasrnd':
        return FeasRndAgent(seed=seed)
    if method == 'bigmrta':
        return BigMrtaAgent()
    return PolicyAgent(models[method], greedy=True, seed=seed, cache=TDLaplacianCache())


def run_sample(method: str, scenario: Scenario, seed: int, models: Dict[str, CapamPolicy],
               clock: Callable[[], float] = time.perf_counter,
               on_decision: Optional[Callable] = None) -> SampleMetrics:
    """One (method, scenario) episode; failures are recorded, not raised"""
    metrics = SampleMetrics(method=method, lambda_t=float('nan'), lambda_r=float('nan'),
                            N=scenario.N, M=scenario.M, seed=seed, scenario_hash=scenario_hash(scenario))
    try:
        if method == 'exact':
            started = clock()
            solution = brute_force_optimal(full_communication(scenario))
            elapsed = clock() - started
            metrics.n_success = solution.n_success
            metrics.completion = 100.0 * solution.n_success / scenario.N
            metrics.decisions = sum(len(v) for v in solution.schedule.values())
            metrics.decision_time = elapsed
            metrics.mean_latency = elapsed / max(metrics.decisions, 1)
        else:
            result = run_episode(scenario, _make_agent(method, models, seed), seed=seed,
                                 clock=clock, on_decision=on_decision)
            metrics.n_success = result.n_success
            metrics.completion = result.completion
            metrics.decisions = result.decisions
            metrics.decision_time = result.decision_time
            metrics.mean_latency = float(np.mean(result.latencies)) if result.latencies else 0.0
            metrics.comm_bytes = result.comm_bytes
    except Exception as e:
        logger.warning(f"Sample failed: method={method} N={scenario.N} seed={seed}: {e}")
        metrics.failed = True
        metrics.error = f"{type(e).__name__}: {e}"
    return metrics


def load_models(spec: ExperimentSpec) -> Dict[str, CapamPolicy]:
    models: Dict[str, CapamPolicy] = {}
    for method in spec.methods:
        if method not in LEARNED_METHODS:
            continue
        path = spec.checkpoints.get(method)
        if not path or not os.path.exists(path):
            raise FileNotFoundError(f"method {method!r} needs a checkpoint, got {path!r}")
        models[method], _ = load_checkpoint(path)
    return models


def run_experiment(spec: ExperimentSpec, models: Optional[Dict[str, CapamPolicy]] = None,
                   clock: Callable[[], float] = time.perf_counter,
                   on_decision: Optional[Callable] = None) -> ResultsTable:
    """Run every method on every cell with shared seeds"""
    spec.validate()
    if models is None:
        models = load_models(spec)
    missing = [m for m in spec.methods if m in LEARNED_METHODS and m not in models]
    if missing:
        raise ValueError(f"no model supplied for {missing}")

    rows: List[Dict[str, Any]] = []
    for gen_cfg in spec.cells():
        scenarios = []
        for seed in spec.seeds():
            scenario = generate_scenario(gen_cfg, seed)
            if spec.full_communication:
                scenario = full_communication(scenario)
            scenarios.append((seed, scenario))
        logger.info(f"Cell lambda_t={gen_cfg.lambda_t} lambda_r={gen_cfg.lambda_r}: "
                    f"N={gen_cfg.N} M={gen_cfg.M}, {len(scenarios)} samples x {len(spec.methods)} methods")
        for method in spec.methods:
            def work(item):
                seed, scenario = item
                return run_sample(method, scenario, seed, models, clock, on_decision)
            if spec.workers > 1 and not spec.serial_timing:
                with ThreadPoolExecutor(max_workers=spec.workers) as pool:
                    results = list(pool.map(work, scenarios))
            else:
                results = [work(item) for item in scenarios]
            for m in results:
                m.lambda_t, m.lambda_r = gen_cfg.lambda_t, gen_cfg.lambda_r
                rows.append(asdict(m))
            failed = sum(m.failed for m in results)
            if failed:
                logger.warning(f"{method}: {failed}/{len(results)} samples failed at N={gen_cfg.N}")
    return ResultsTable(pd.DataFrame(rows, columns=SAMPLE_COLUMNS), spec)


def emit_results(table: ResultsTable, out_dir: str) -> Dict[str, str]:
    """Write samples, per-cell CSVs, quantiles, p-values, a summary and metadata"""
    try:
        os.makedirs(os.path.join(out_dir, 'cells'), exist_ok=True)
        paths = {
            'samples': os.path.join(out_dir, 'samples.csv'),
            'quantiles': os.path.join(out_dir, 'quantiles.csv'),
            'p_values': os.path.join(out_dir, 'p_values.csv'),
            'summary': os.path.join(out_dir, 'summary.txt'),
            'metadata': os.path.join(out_dir, 'metadata.json'),
        }
        table.samples.to_csv(paths['samples'], index=False)
        for method, N, M in table.cell_keys():
            cell_path = os.path.join(out_dir, 'cells', f"{method}_N{N}_M{M}.csv")
            table.cell(method, N, M).to_csv(cell_path, index=False)
        table.quantiles().to_csv(paths['quantiles'], index=False)
        p_values = table.p_values()
        p_values.to_csv(paths['p_values'], index=False)
        with open(paths['summary'], 'w') as f:
            f.write(format_summary(table, p_values))
        with open(paths['metadata'], 'w') as f:
            json.dump({
                'schema_version': RESULTS_SCHEMA_VERSION,
                'created': datetime.now().isoformat(),
                'spec': table.spec.to_dict() if table.spec else None,
            }, f, indent=2)
    except OSError as e:
        logger.error(f"Could not write results to {out_dir}: {e}")
        raise
    logger.info(f"Wrote results for {len(table.cell_keys())} cells to {out_dir}")
    return paths


def format_summary(table: ResultsTable, p_values: Optional[pd.DataFrame] = None) -> str:
    p_values = table.p_values() if p_values is None else p_values
    lines = [f"results schema v{RESULTS_SCHEMA_VERSION}", ""]
    lines.append(f"{'method':<10} {'N':>5} {'M':>4} {'n':>4} {'fail':>4} {'completion %':>14} {'time ratio':>10}")
    ratios = table.timing_ratios()
    for row in table.summary().itertuples(index=False):
        r = ratios[(ratios['method'] == row.method) & (ratios['N'] == row.N) & (ratios['M'] == row.M)]
        ratio = float(r['ratio_to_fastest'].iloc[0]) if len(r) else float('nan')
        lines.append(f"{row.method:<10} {row.N:>5} {row.M:>4} {row.n:>4} {row.failed:>4} "
                     f"{row.mean_completion:>8.2f}±{row.std_completion:<5.2f} {ratio:>10.2f}")
    lines += ["", "pairwise Welch t-tests (completion %)"]
    for row in p_values.itertuples(index=False):
        flag = " (degenerate)" if row.degenerate else ""
        lines.append(f"N={row.N} M={row.M} {row.method_a} vs {row.method_b}: p={row.p_value:.4g}{flag}")
    return '\n'.join(lines) + '\n'


def load_results(out_dir: str) -> ResultsTable:
    with open(os.path.join(out_dir, 'metadata.json'), 'r') as f:
        meta = json.load(f)
    if meta.get('schema_version') != RESULTS_SCHEMA_VERSION:
        raise ValueError(f"unsupported results schema {meta.get('schema_version')!r}")
    samples = pd.read_csv(os.path.join(out_dir, 'samples.csv'), dtype={'scenario_hash': str, 'error': str})
    samples['error'] = samples['error'].fillna('')
    samples['failed'] = samples['failed'].astype(bool)
    spec = ExperimentSpec.from_dict(meta['spec']) if meta.get('spec') else None
    return ResultsTable(samples, spec)


@dataclass
class AblationResult:
    paired: pd.DataFrame
    mean_gap: float
    p_value: float


def td_ablation(models: Dict[str, CapamPolicy], lambda_t: float = 1.0, lambda_r: float = 1.0,
                samples: int = 20, seed_base: int = 0,
                generation: Optional[Dict[str, Any]] = None) -> AblationResult:
    """Paired completion gap of TD-Laplacian vs plain-Laplacian policies on shared seeds"""
    spec = ExperimentSpec(methods=['capam-td', 'capam'], lambda_t=[lambda_t], lambda_r=[lambda_r],
                          samples=samples, seed_base=seed_base, generation=dict(generation or {}))
    table = run_experiment(spec, models=models)
    ok = table.ok()
    paired = ok.pivot_table(index='seed', columns='method', values='completion').dropna()
    paired = paired.rename(columns={'capam-td': 'completion_td', 'capam': 'completion_plain'})
    paired['gap'] = paired['completion_td'] - paired['completion_plain']
    paired = paired.reset_index()
    p_value = significance_test(paired['completion_td'], paired['completion_plain']).p_value \
        if len(paired) >= 2 else float('nan')
    mean_gap = float(paired['gap'].mean()) if len(paired) else float('nan')
    logger.info(f"TD ablation: mean gap {mean_gap:.2f} points over {len(paired)} pairs (p={p_value:.3g})")
    return AblationResult(paired=paired, mean_gap=mean_gap, p_value=p_value)


@dataclass
class LatencyProfile:
    frame: pd.DataFrame
    exponent: float


def latency_profile(model: CapamPolicy, sizes: Sequence[int] = (10, 25, 50, 100), episodes: int = 1,
                    base_M: int = 1, seed_base: int = 0,
                    clock: Callable[[], float] = time.perf_counter) -> LatencyProfile:
    """Per-decision latency against N, with the log-log growth exponent"""
    rows = []
    for n in sizes:
        gen_cfg = GenerationConfig(base_N=n, base_M=base_M)
        latencies: List[float] = []
        cache = TDLaplacianCache()
        for k in range(episodes):
            agent = PolicyAgent(model, greedy=True, seed=seed_base + k, cache=cache)
            result = run_episode(generate_scenario(gen_cfg, seed_base + k), agent,
                                 seed=seed_base + k, clock=clock)
            latencies.extend(result.latencies)
        rows.append({'N': n, 'decisions': len(latencies),
                     'mean_latency': float(np.mean(latencies)) if latencies else float('nan'),
                     'cache_hits': cache.hits, 'cache_misses': cache.misses})
        logger.info(f"Latency N={n}: {rows[-1]['mean_latency']:.4g}s over {len(latencies)} decisions")
    frame = pd.DataFrame(rows)
    valid = frame[frame['mean_latency'] > 0]
    exponent = float(np.polyfit(np.log(valid['N']), np.log(valid['mean_latency']), 1)[0]) \
        if len(valid) >= 2 else float('nan')
    return LatencyProfile(frame=frame, exponent=exponent)
