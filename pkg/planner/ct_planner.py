"""
ct-planner command line

    ct_planner.py generate        --lambda-t 1 --lambda-r 1 --seed 7 --out scenario.json
    ct_planner.py simulate        --scenario scenario.json --method bigmrta --log legs.csv
    ct_planner.py train           --config json_files/desk_profile.json --out-dir runs/desk
    ct_planner.py evaluate        --checkpoint runs/desk/final.pt --episodes 100
    ct_planner.py bench           --methods feasrnd bigmrta capam-td --checkpoint capam-td=runs/desk/final.pt
    ct_planner.py solve-exact     --scenario json_files/sample_scenario_n5.json
    ct_planner.py export-minlp    --scenario scenario.json --out model.txt [--lp model.lp]
    ct_planner.py validate-trace  --scenario scenario.json --log legs.csv
    ct_planner.py ablation        --td runs/td/final.pt --plain runs/plain/final.pt --samples 20
    ct_planner.py latency         --checkpoint runs/desk/final.pt --sizes 10 25 50 100
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from baselines import BigMrtaAgent, FeasRndAgent, brute_force_optimal, full_communication
from bench import (METHODS, ExperimentSpec, emit_results, format_summary, latency_profile, run_experiment,
                   td_ablation)
from minlp_model import export_minlp, trace_validate, write_lp, write_model
from policy import PolicyAgent, PolicyConfig, load_checkpoint
from scenario import GenerationConfig, ScenarioError, generate_scenario, load_scenario, save_scenario
from simenv import EventLog, run_episode
from training import EVAL_SEED_BASE, PPOConfig, load_training_config, train

logger = logging.getLogger(__name__)


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, default=str))


def _agent_for(method: str, checkpoint: Optional[str], seed: int):
    if method == 'feasrnd':
        return FeasRndAgent(seed=seed)
    if method == 'bigmrta':
        return BigMrtaAgent()
    if not checkpoint:
        raise ValueError(f"method {method!r} needs --checkpoint")
    model, _ = load_checkpoint(checkpoint)
    return PolicyAgent(model, greedy=True, seed=seed)


def cmd_generate(args) -> int:
    cfg = GenerationConfig(lambda_t=args.lambda_t, lambda_r=args.lambda_r,
                           base_N=args.base_n, base_M=args.base_m)
    scenario = generate_scenario(cfg, args.seed)
    save_scenario(scenario, args.out)
    logger.info(f"Wrote scenario N={scenario.N} M={scenario.M} to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.full_communication:
        scenario = full_communication(scenario)
    result = run_episode(scenario, _agent_for(args.method, args.checkpoint, args.seed), seed=args.seed)
    if args.log:
        result.log.save(args.log)
    _print_json({'method': args.method, 'N': scenario.N, 'M': scenario.M,
                 'n_success': result.n_success, 'completion': result.completion,
                 'reward': result.reward, 'decisions': result.decisions,
                 'decision_time': result.decision_time, 'comm_bytes': result.comm_bytes})
    return 0


def cmd_train(args) -> int:
    if args.config:
        cfgs = load_training_config(args.config)
    else:
        cfgs = {'generation': GenerationConfig(), 'ppo': PPOConfig(), 'policy': PolicyConfig()}
    policy_cfg = cfgs['policy']
    if args.method:
        policy_cfg = PolicyConfig.for_method(args.method, K=policy_cfg.K, L_e=policy_cfg.L_e,
                                             P=policy_cfg.P, td=policy_cfg.td)
    run = train(cfgs['generation'], cfgs['ppo'], policy_cfg, seed=args.seed,
                out_dir=args.out_dir, resume=args.resume)
    _print_json({'steps': run.steps, 'checkpoints': run.checkpoints[-3:], 'out_dir': args.out_dir})
    return 0


def cmd_evaluate(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    run_config = payload.get('run_config', {})
    gen_cfg = GenerationConfig.from_dict(run_config['generation']) if 'generation' in run_config \
        else GenerationConfig()
    if args.lambda_t is not None or args.lambda_r is not None:
        gen_cfg = GenerationConfig.from_dict({**gen_cfg.to_dict(),
                                              'lambda_t': args.lambda_t or gen_cfg.lambda_t,
                                              'lambda_r': args.lambda_r or gen_cfg.lambda_r})
    agent = PolicyAgent(model, greedy=not args.sample, seed=args.seed_base)
    completions: List[float] = []
    for k in range(args.episodes):
        seed = args.seed_base + k
        completions.append(run_episode(generate_scenario(gen_cfg, seed), agent, seed=seed).completion)
    _print_json({'checkpoint': args.checkpoint, 'N': gen_cfg.N, 'M': gen_cfg.M,
                 'episodes': args.episodes, 'mean_completion': float(np.mean(completions)),
                 'std_completion': float(np.std(completions))})
    return 0


def _parse_checkpoints(items: List[str]) -> Dict[str, str]:
    out = {}
    for item in items or []:
        method, sep, path = item.partition('=')
        if not sep:
            raise ValueError(f"--checkpoint expects method=path, got {item!r}")
        out[method] = path
    return out


def cmd_bench(args) -> int:
    spec = ExperimentSpec(methods=args.methods, lambda_t=args.lambda_t, lambda_r=args.lambda_r,
                          samples=args.samples, seed_base=args.seed_base,
                          checkpoints=_parse_checkpoints(args.checkpoint),
                          full_communication=args.full_communication, workers=args.workers,
                          serial_timing=not args.parallel_timing)
    table = run_experiment(spec)
    emit_results(table, args.out_dir)
    print(format_summary(table))
    return 0


def cmd_solve_exact(args) -> int:
    scenario = full_communication(load_scenario(args.scenario))
    solution = brute_force_optimal(scenario, max_nodes=args.max_nodes)
    _print_json({'n_success': solution.n_success, 'exhaustive': solution.exhaustive,
                 'nodes': solution.nodes, 'schedule': solution.schedule})
    return 0


def cmd_export_minlp(args) -> int:
    scenario = load_scenario(args.scenario)
    model = export_minlp(scenario, args.S, args.H)
    write_model(model, args.out)
    if args.lp:
        write_lp(model, args.lp)
    _print_json({'variables': len(model.variables), 'constraints': len(model.constraints),
                 'meta': model.meta, 'families': model.family_counts()})
    return 0


def cmd_validate_trace(args) -> int:
    scenario = load_scenario(args.scenario)
    report = trace_validate(EventLog.load(args.log), scenario, args.S, args.H)
    _print_json({'passed': report.passed, 'mappable': report.mappable, 'reason': report.reason,
                 'n_success': report.n_success, 'violations': len(report.violations),
                 'families': report.families_violated(),
                 'first': [v.name for v in report.violations[:10]]})
    return 0 if report.passed else 1


def cmd_ablation(args) -> int:
    models = {'capam-td': load_checkpoint(args.td)[0], 'capam': load_checkpoint(args.plain)[0]}
    result = td_ablation(models, lambda_t=args.lambda_t, lambda_r=args.lambda_r,
                         samples=args.samples, seed_base=args.seed_base)
    if args.out:
        result.paired.to_csv(args.out, index=False)
    _print_json({'pairs': len(result.paired), 'mean_gap': result.mean_gap, 'p_value': result.p_value})
    return 0


def cmd_latency(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    profile = latency_profile(model, sizes=args.sizes, episodes=args.episodes)
    _print_json({'exponent': profile.exponent, 'rows': profile.frame.to_dict(orient='records')})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='ct-planner', description='Multi-robot collective-transport task allocation')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate', help='draw a random scenario')
    p.add_argument('--lambda-t', type=float, default=1.0)
    p.add_argument('--lambda-r', type=float, default=1.0)
    p.add_argument('--base-n', type=int, default=50)
    p.add_argument('--base-m', type=int, default=6)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser('simulate', help='run one episode with a method')
    p.add_argument('--scenario', required=True)
    p.add_argument('--method', choices=[m for m in METHODS if m != 'exact'], default='bigmrta')
    p.add_argument('--checkpoint')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--log', help='write the leg log CSV here')
    p.add_argument('--full-communication', action='store_true')
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('train', help='train a policy with PPO')
    p.add_argument('--config', help='JSON with generation/ppo/policy/td sections')
    p.add_argument('--method', choices=['capam-td', 'capam', 'mlp'])
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out-dir', default='runs')
    p.add_argument('--resume')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('evaluate', help='mean completion of a checkpoint on held-out scenarios')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--episodes', type=int, default=100)
    p.add_argument('--lambda-t', type=float)
    p.add_argument('--lambda-r', type=float)
    p.add_argument('--seed-base', type=int, default=EVAL_SEED_BASE)
    p.add_argument('--sample', action='store_true', help='sample actions instead of greedy')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('bench', help='run the comparison experiment')
    p.add_argument('--methods', nargs='+', default=['feasrnd', 'bigmrta'], choices=METHODS)
    p.add_argument('--lambda-t', nargs='+', type=float, default=[0.5, 1.0])
    p.add_argument('--lambda-r', nargs='+', type=float, default=[1.0])
    p.add_argument('--samples', type=int, default=100)
    p.add_argument('--seed-base', type=int, default=0)
    p.add_argument('--checkpoint', action='append', help='method=path, repeatable')
    p.add_argument('--full-communication', action='store_true')
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--parallel-timing', action='store_true',
                   help='allow concurrent samples (timings then include sibling load)')
    p.add_argument('--out-dir', default='results')
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('solve-exact', help='brute-force optimum of a tiny scenario')
    p.add_argument('--scenario', required=True)
    p.add_argument('--max-nodes', type=int, default=2_000_000)
    p.set_defaults(func=cmd_solve_exact)

    p = sub.add_parser('export-minlp', help='write the algebraic model')
    p.add_argument('--scenario', required=True)
    p.add_argument('--S', type=int)
    p.add_argument('--H', type=int)
    p.add_argument('--out', required=True)
    p.add_argument('--lp', help='also write the linearized MILP in LP format')
    p.set_defaults(func=cmd_export_minlp)

    p = sub.add_parser('validate-trace', help='check a leg log against the algebraic model')
    p.add_argument('--scenario', required=True)
    p.add_argument('--log', required=True)
    p.add_argument('--S', type=int)
    p.add_argument('--H', type=int)
    p.set_defaults(func=cmd_validate_trace)

    p = sub.add_parser('ablation', help='paired completion gap, TD vs plain Laplacian')
    p.add_argument('--td', required=True, help='capam-td checkpoint')
    p.add_argument('--plain', required=True, help='capam checkpoint')
    p.add_argument('--lambda-t', type=float, default=1.0)
    p.add_argument('--lambda-r', type=float, default=1.0)
    p.add_argument('--samples', type=int, default=20)
    p.add_argument('--seed-base', type=int, default=0)
    p.add_argument('--out', help='write the paired table as CSV')
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser('latency', help='per-decision latency against N')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--sizes', nargs='+', type=int, default=[10, 25, 50, 100])
    p.add_argument('--episodes', type=int, default=1)
    p.set_defaults(func=cmd_latency)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get('LOG_LEVEL', 'INFO').upper())
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


if __name__ == '__main__':
    sys.exit(main())
