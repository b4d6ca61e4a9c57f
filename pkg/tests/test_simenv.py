"""
Unit tests for simenv module
Hand-timed single-robot episodes, belief invariants and replay
"""

import os
import sys
import tempfile
import unittest
from dataclasses import replace

import numpy as np

current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
planner_dir = os.path.join(parent_dir, 'planner')
sys.path.insert(0, planner_dir)

import scenario as sc
import simenv as se
from baselines import FeasRndAgent, full_communication

SAMPLE_PATH = os.path.join(parent_dir, 'json_files', 'sample_scenario_n5.json')


def one_task(deadline=100.0, demand=3.0, M=1):
    """Task 0.3 km north of the depot: 30 s each way at 10 m/s"""
    task = sc.TaskSpec(id=1, x=0.5, y=0.8, deadline=deadline, demand=demand)
    return sc.Scenario(tasks=(task,), fleet=sc.FleetSpec(M=M), depot=(0.5, 0.5))


class TestSingleRobot(unittest.TestCase):

    def test_start_state(self):
        world = se.reset(one_task())
        self.assertEqual(world.t, 0.0)
        self.assertEqual(world.current_robot, 0)
        np.testing.assert_array_equal(world.feasible_mask(0), [True, True])
        obs = world.observe(0)
        self.assertEqual(obs.features.shape, (1, 4))
        self.assertEqual(obs.peer_ids, [])

    def test_serve_and_return(self):
        result = se.run_episode(one_task(), se.ScriptedAgent({0: [1, 0]}), keep_world=True)
        self.assertEqual(result.n_success, 1)
        self.assertEqual(result.reward, 0.0)
        self.assertEqual(result.completion, 100.0)
        legs = result.log.legs
        self.assertEqual([(l.from_node, l.to_node) for l in legs], [(0, 1), (1, 0)])
        self.assertAlmostEqual(legs[0].t_arrive, 30.0, places=9)
        self.assertAlmostEqual(legs[1].t_arrive, 60.0, places=9)
        self.assertEqual(legs[0].kg_delivered, 3.0)
        self.assertAlmostEqual(result.world.tasks[0].completed_at, 30.0, places=9)

    def test_partial_deliveries(self):
        result = se.run_episode(one_task(deadline=1000.0, demand=7.0), se.ScriptedAgent({0: [1, 0, 1, 0]}))
        self.assertEqual([l.kg_delivered for l in result.log.legs], [5.0, 0.0, 2.0, 0.0])
        self.assertEqual(result.n_success, 1)

    def test_empty_payload_only_allows_depot(self):
        world = se.reset(one_task(deadline=1000.0, demand=7.0))
        world.step(0, 1)
        np.testing.assert_array_equal(world.feasible_mask(0), [True, False])
        self.assertAlmostEqual(world.robots[0].range_left, 4.0 - 0.3, places=9)
        with self.assertRaises(se.ContractViolation):
            world.step(0, 1)

    def test_late_arrival_misses(self):
        result = se.run_episode(one_task(deadline=20.0), se.ScriptedAgent({0: [1, 0]}))
        self.assertEqual(result.n_success, 0)
        self.assertEqual(result.reward, -1.0)
        self.assertEqual(result.log.legs[0].kg_delivered, 0.0)

    def test_idle_until_deadline_then_dock(self):
        result = se.run_episode(one_task(), se.ScriptedAgent({0: [0, 0]}))
        kinds = [l.kind for l in result.log.legs]
        self.assertEqual(kinds, ['idle', 'dock'])
        self.assertEqual(result.log.legs[0].t_arrive, 100.0)
        self.assertEqual(result.reward, -1.0)

    def test_idle_then_late_attempt(self):
        result = se.run_episode(one_task(), se.ScriptedAgent({0: [0, 1, 0]}))
        self.assertEqual([l.kind for l in result.log.legs], ['idle', 'travel', 'travel'])
        self.assertEqual(result.n_success, 0)

    def test_contract_violations(self):
        world = se.reset(one_task(M=2))
        with self.assertRaises(se.ContractViolation):
            world.step(1, 1)
        with self.assertRaises(se.ContractViolation):
            world.step(0, 5)
        with self.assertRaises(se.ContractViolation):
            world.compute_reward()

    def test_unreachable_task_masked(self):
        far = sc.Scenario(tasks=(sc.TaskSpec(1, 0.5, 0.8, 100.0, 3.0),),
                          fleet=sc.FleetSpec(M=1, range_max=0.5), depot=(0.5, 0.5))
        world = se.reset(far)
        np.testing.assert_array_equal(world.feasible_mask(0), [True, False])


def fleet(M, d_com_thresh=250.0):
    task = sc.TaskSpec(id=1, x=0.5, y=0.8, deadline=100.0, demand=3.0)
    return sc.Scenario(tasks=(task,), fleet=sc.FleetSpec(M=M, d_com_thresh=d_com_thresh), depot=(0.5, 0.5))


def place(world, rid, xy):
    world.robots[rid] = replace(world.robots[rid], origin=xy, destination=xy,
                                t_depart=world.t, t_next=world.t)


class TestQueueAndTermination(unittest.TestCase):

    def test_reset_queues_one_start_per_robot(self):
        world = se.reset(fleet(3))
        self.assertEqual(world.current_robot, 0)
        queued = world.queued_events()
        self.assertEqual([(e.t, e.robot, e.kind) for e in queued],
                         [(0.0, 1, se.EPISODE_START), (0.0, 2, se.EPISODE_START)])

    def test_not_terminal_while_returning(self):
        world = se.reset(fleet(2))
        world.tasks[0].status, world.tasks[0].remaining = se.DONE, 0.0
        world.robots[1] = replace(world.robots[1], origin=(0.5, 0.8), destination=world.depot,
                                  dest_node=0, t_depart=0.0, t_next=30.0)
        self.assertFalse(world.is_terminal())
        with self.assertRaises(se.ContractViolation):
            world.compute_reward()
        world.t = 30.0
        self.assertTrue(world.is_terminal())
        self.assertEqual(world.compute_reward(), 0.0)


class TestInformationExchange(unittest.TestCase):

    def test_threshold_is_strict(self):
        world = se.reset(fleet(2))
        place(world, 0, (0.25, 0.5))
        place(world, 1, (0.5, 0.5))
        world.beliefs[1].completion[0] = 0.4
        self.assertEqual(world.exchange_information(), 0)
        self.assertEqual(world.beliefs[0].completion[0], 0.0)
        place(world, 0, (0.26, 0.5))
        self.assertEqual(world.exchange_information(), 2)
        self.assertEqual(world.beliefs[0].completion[0], 0.4)

    def test_chain_is_single_hop(self):
        world = se.reset(fleet(3))
        for rid, x in enumerate((0.1, 0.3, 0.5)):
            place(world, rid, (x, 0.5))
        stale = world.beliefs[1].robots[2]
        fresh = replace(world.robots[2], range_left=1.5, ts=5.0)
        world.beliefs[2].robots[2] = se.BeliefEntry(fresh, (5.0, 7))
        world.beliefs[2].completion[0] = 0.5
        self.assertEqual(world.exchange_information(), 4)
        self.assertEqual(world.beliefs[1].robots[2].state, fresh)
        self.assertEqual(world.beliefs[1].completion[0], 0.5)
        # A hears B's record of C from before this exchange
        self.assertEqual(world.beliefs[0].robots[2], stale)
        self.assertEqual(world.beliefs[0].completion[0], 0.0)

    def test_colocated_robots_agree(self):
        world = se.reset(fleet(2))
        world.beliefs[0].completion[0] = 0.3
        newer = replace(world.robots[1], payload=2.0, ts=4.0)
        world.beliefs[1].robots[1] = se.BeliefEntry(newer, (4.0, 3))
        world.exchange_information()
        a, b = world.beliefs[0], world.beliefs[1]
        self.assertEqual(a.robots, b.robots)
        np.testing.assert_array_equal(a.completion, b.completion)
        np.testing.assert_array_equal(a.visited, b.visited)
        self.assertEqual(a.robots[1].state, newer)
        self.assertEqual(b.completion[0], 0.3)


class TestFleetEpisodes(unittest.TestCase):

    def setUp(self):
        self.sample = sc.load_scenario(SAMPLE_PATH)

    def test_budgets_and_leg_chain(self):
        for seed in range(10):
            scenario = sc.generate_scenario(sc.GenerationConfig(base_N=10, base_M=1), seed)
            result = se.run_episode(scenario, FeasRndAgent(seed=seed), seed=seed)
            self.assertEqual(result.reward, -(scenario.N - result.n_success) / scenario.N)
            for rid in range(scenario.M):
                travel = [l for l in result.log.legs if l.robot == rid and l.kind == 'travel']
                for prev, nxt in zip(travel, travel[1:]):
                    self.assertEqual(prev.to_node, nxt.from_node)
                    self.assertLessEqual(prev.t_arrive, nxt.t_depart + 1e-9)
                if travel:
                    self.assertEqual(travel[0].from_node, 0)
                    self.assertEqual(travel[-1].to_node, 0)
            delivered = np.zeros(scenario.N)
            for leg in result.log.legs:
                if leg.to_node:
                    delivered[leg.to_node - 1] += leg.kg_delivered
            self.assertTrue(np.all(delivered <= scenario.demands() + 1e-9))

    def test_beliefs_are_past_states(self):
        def check(world, rid):
            for r in range(world.M):
                self.assertTrue(world.belief_is_historical(r))

        for seed in range(5):
            se.run_episode(self.sample, FeasRndAgent(seed=seed), seed=seed, on_decision=check)

    def test_full_communication_beliefs_are_truth(self):
        def check(world, rid):
            for r in range(world.M):
                self.assertTrue(world.belief_matches_truth(r))

        for seed in range(20):
            scenario = full_communication(sc.generate_scenario(sc.GenerationConfig(base_N=8, base_M=2), seed))
            se.run_episode(scenario, FeasRndAgent(seed=seed), seed=seed, on_decision=check)

    def test_deterministic_and_replayable(self):
        a = se.run_episode(self.sample, FeasRndAgent(seed=4), seed=4)
        b = se.run_episode(self.sample, FeasRndAgent(seed=4), seed=4)
        self.assertEqual(a.log.legs, b.log.legs)
        replayed = se.replay(self.sample, a.log, seed=4)
        self.assertEqual(replayed.log.legs, a.log.legs)
        self.assertEqual(replayed.n_success, a.n_success)

    def test_log_csv_round_trip(self):
        result = se.run_episode(self.sample, FeasRndAgent(seed=1), seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'legs.csv')
            result.log.save(path)
            self.assertEqual(se.EventLog.load(path).legs, result.log.legs)

    def test_comm_bytes(self):
        world = se.reset(self.sample)
        self.assertEqual(world.payload_bytes, (6 * 2 + 5) * 8)
        # both robots start together at the depot
        self.assertGreaterEqual(world.messages, 2)
        self.assertEqual(world.comm_bytes(), world.messages * world.payload_bytes)

    def test_decision_time_excludes_stepping(self):
        ticks = iter(range(10_000))
        result = se.run_episode(self.sample, FeasRndAgent(seed=0), clock=lambda: float(next(ticks)))
        self.assertEqual(result.decision_time, float(result.decisions))


if __name__ == '__main__':
    unittest.main()
