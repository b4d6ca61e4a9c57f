"""
Unit tests for baselines module
FEASRND feasibility, BIGMRTA incentives and matching, exact oracle
"""

import itertools
import os
import sys
import unittest

import numpy as np
import torch

current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
planner_dir = os.path.join(parent_dir, 'planner')
sys.path.insert(0, planner_dir)

import baselines as bl
import policy as pol
import scenario as sc
import simenv as se


def one_task(deadline=100.0, range_max=4.0):
    task = sc.TaskSpec(id=1, x=0.5, y=0.8, deadline=deadline, demand=3.0)
    return sc.Scenario(tasks=(task,), fleet=sc.FleetSpec(M=1, range_max=range_max), depot=(0.5, 0.5))


class CheckingAgent:
    """Wraps an agent and asserts every action it takes is feasible"""

    def __init__(self, test, agent):
        self.test = test
        self.agent = agent

    def decide(self, world, robot):
        mask = world.feasible_mask(robot)
        action = self.agent.decide(world, robot)
        self.test.assertTrue(mask[action], f"action {action} infeasible for robot {robot}")
        if action == 0:
            self.test.assertFalse(mask[1:].any() and isinstance(self.agent, bl.FeasRndAgent))
        return action


def best_by_enumeration(matrix):
    best = 0.0
    n_r, n_t = len(matrix.robots), len(matrix.tasks)
    for k in range(0, min(n_r, n_t) + 1):
        for rows in itertools.combinations(range(n_r), k):
            for cols in itertools.permutations(range(n_t), k):
                total = 0.0
                for r, c in zip(rows, cols):
                    v = matrix.get(matrix.robots[r], matrix.tasks[c])
                    if v is None:
                        break
                    total += v
                else:
                    best = max(best, total)
    return best


class TestFeasRnd(unittest.TestCase):

    def test_actions_always_feasible(self):
        for seed in range(10):
            scenario = sc.generate_scenario(sc.GenerationConfig(base_N=12, base_M=2), seed)
            result = se.run_episode(scenario, CheckingAgent(self, bl.FeasRndAgent(seed=seed)), seed=seed)
            self.assertGreater(result.decisions, 0)

    def test_same_seed_same_episode(self):
        scenario = sc.generate_scenario(sc.GenerationConfig(base_N=10, base_M=1), 2)
        a = se.run_episode(scenario, bl.FeasRndAgent(seed=9))
        b = se.run_episode(scenario, bl.FeasRndAgent(seed=9))
        self.assertEqual(a.log.legs, b.log.legs)


class TestBigMrta(unittest.TestCase):

    def test_incentives_in_unit_interval(self):
        scenario = sc.generate_scenario(sc.GenerationConfig(base_N=15, base_M=2), 4)
        world = se.reset(scenario)
        matrix = bl.bigmrta_incentives(world, world.current_robot)
        self.assertTrue(matrix.values)
        for (rid, task), v in matrix.values.items():
            self.assertIn(rid, matrix.robots)
            self.assertIn(task, matrix.tasks)
            self.assertTrue(0.0 <= v <= 1.0)
        dense = matrix.dense()
        self.assertEqual(dense.shape, (len(matrix.robots), len(matrix.tasks)))
        self.assertEqual(int(np.sum(~np.isnan(dense))), len(matrix.values))

    def test_out_of_range_pair_absent(self):
        world = se.reset(one_task(range_max=0.5))
        matrix = bl.bigmrta_incentives(world, 0)
        self.assertIsNone(matrix.get(0, 1))
        self.assertEqual(bl.bigmrta_action(world, 0), 0)

    def test_late_pair_absent(self):
        world = se.reset(one_task(deadline=20.0))
        self.assertIsNone(bl.bigmrta_incentives(world, 0).get(0, 1))

    def test_lone_robot_takes_reachable_task(self):
        world = se.reset(one_task())
        matrix = bl.bigmrta_incentives(world, 0)
        # urgency (100 - 30) / 100, full fit
        self.assertAlmostEqual(matrix.get(0, 1), 0.7, places=9)
        self.assertEqual(bl.bigmrta_action(world, 0), 1)

    def test_matching_is_optimal(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n_r, n_t = int(rng.integers(1, 5)), int(rng.integers(1, 6))
            matrix = bl.IncentiveMatrix(robots=list(range(n_r)), tasks=list(range(1, n_t + 1)))
            for r in range(n_r):
                for t in range(1, n_t + 1):
                    if rng.uniform() < 0.7:
                        matrix.values[(r, t)] = float(rng.uniform())
            assignment = bl.max_weight_matching(matrix)
            self.assertEqual(len(set(assignment.values())), len(assignment))
            total = sum(matrix.get(r, t) for r, t in assignment.items())
            self.assertAlmostEqual(total, best_by_enumeration(matrix), places=9)

    def test_ties_go_to_lowest_pair(self):
        matrix = bl.IncentiveMatrix(robots=[0, 1], tasks=[3, 5],
                                    values={(0, 3): 1.0, (0, 5): 1.0, (1, 3): 1.0, (1, 5): 1.0})
        self.assertEqual(bl.max_weight_matching(matrix), {0: 3, 1: 5})

    def test_empty_matrix(self):
        self.assertEqual(bl.max_weight_matching(bl.IncentiveMatrix(robots=[0], tasks=[])), {})

    def test_episodes_stay_feasible(self):
        for seed in range(5):
            scenario = sc.generate_scenario(sc.GenerationConfig(base_N=12, base_M=2), seed)
            se.run_episode(scenario, CheckingAgent(self, bl.BigMrtaAgent()), seed=seed)


class TestExactOracle(unittest.TestCase):

    def test_single_task_schedule(self):
        solution = bl.brute_force_optimal(one_task())
        self.assertEqual(solution.n_success, 1)
        self.assertTrue(solution.exhaustive)
        self.assertEqual(solution.schedule, {0: [1, 0]})

    def test_unreachable_task(self):
        self.assertEqual(bl.brute_force_optimal(one_task(deadline=20.0)).n_success, 0)

    def test_dominates_heuristics(self):
        for seed in range(5):
            scenario = bl.full_communication(sc.generate_scenario(sc.GenerationConfig(base_N=4, base_M=1), seed))
            exact = bl.brute_force_optimal(scenario)
            self.assertTrue(exact.exhaustive)
            for agent in (bl.FeasRndAgent(seed=seed), bl.BigMrtaAgent()):
                result = se.run_episode(scenario, agent, seed=seed)
                self.assertGreaterEqual(exact.n_success, result.n_success)

    def test_dominates_every_policy(self):
        torch.manual_seed(0)
        td_policy = pol.CapamPolicy(pol.PolicyConfig(K=2, L_e=2, P=2, hidden=16, heads=4, h_q=16,
                                                     critic_hidden=16, laplacian='td'))
        td_agent = pol.PolicyAgent(td_policy, greedy=True)
        matched = 0
        for seed in range(50):
            config = sc.GenerationConfig(base_N=3 + seed % 3, base_M=1)
            scenario = bl.full_communication(sc.generate_scenario(config, seed))
            self.assertLessEqual(scenario.N, 6)
            self.assertLessEqual(scenario.M, 2)
            exact = bl.brute_force_optimal(scenario)
            self.assertTrue(exact.exhaustive)
            for agent in (bl.FeasRndAgent(seed=seed), bl.BigMrtaAgent(), td_agent):
                result = se.run_episode(scenario, agent, seed=seed)
                self.assertGreaterEqual(exact.n_success, result.n_success,
                                        f"seed {seed}: {type(agent).__name__} beat the exhaustive search")
                if isinstance(agent, bl.BigMrtaAgent) and result.n_success == exact.n_success:
                    matched += 1
        self.assertGreaterEqual(matched, 1)

    def test_size_limit(self):
        big = sc.generate_scenario(sc.GenerationConfig(base_N=7, base_M=1), 0)
        with self.assertRaises(ValueError):
            bl.brute_force_optimal(big)
        crowded = sc.generate_scenario(sc.GenerationConfig(base_N=4, base_M=2), 0)
        with self.assertRaises(ValueError):
            bl.brute_force_optimal(crowded)

    def test_full_communication_only_changes_threshold(self):
        scenario = sc.generate_scenario(sc.GenerationConfig(base_N=4, base_M=1), 1)
        full = bl.full_communication(scenario)
        self.assertEqual(full.tasks, scenario.tasks)
        self.assertEqual(full.fleet.d_com_thresh, float('inf'))
        self.assertEqual(full.fleet.C_max, scenario.fleet.C_max)


if __name__ == '__main__':
    unittest.main()
