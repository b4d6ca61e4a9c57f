"""
Unit tests for training module
Hand-computed advantages, rollout bookkeeping and short PPO runs
"""

import json
import os
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd
import torch

current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
planner_dir = os.path.join(parent_dir, 'planner')
sys.path.insert(0, planner_dir)

import policy as pol
import scenario as sc
import training as tr

PROFILE_PATH = os.path.join(parent_dir, 'json_files', 'desk_profile.json')


def small_policy(**overrides):
    base = dict(K=1, L_e=1, P=2, hidden=16, heads=4, h_q=16, critic_hidden=16, laplacian='plain')
    base.update(overrides)
    return pol.PolicyConfig(**base)


def tiny_generation():
    return sc.GenerationConfig(base_N=4, base_M=1)


def dummy_input():
    return pol.PolicyInput(np.zeros((2, 4)), np.eye(2), np.zeros(pol.CONTEXT_DIM), np.ones(3, dtype=bool))


class TestAdvantages(unittest.TestCase):

    def setUp(self):
        self.cfg = tr.PPOConfig(gamma=1.0, gae_lambda=0.95)

    def buffer(self, values):
        buf = tr.RolloutBuffer()
        for v in values:
            buf.add(dummy_input(), 0, -0.1, v)
        return buf

    def test_single_episode_by_hand(self):
        buf = self.buffer([0.1, 0.2, 0.3])
        buf.finish_episode(0, -0.5)
        tr.compute_advantages(buf, self.cfg, normalize=False)
        np.testing.assert_allclose(buf.advantages, [-0.527, -0.66, -0.8], atol=1e-12)
        np.testing.assert_allclose(buf.returns, [-0.5, -0.5, -0.5], atol=1e-12)
        self.assertEqual(buf.episode_returns, [-0.5, -0.5, -0.5])

    def test_episode_boundary_and_bootstrap(self):
        buf = self.buffer([0.1, 0.2])
        buf.finish_episode(0, -1.0)
        buf.add(dummy_input(), 0, -0.1, 0.4)
        buf.bootstrap_value = 0.6
        tr.compute_advantages(buf, self.cfg, normalize=False)
        # second episode: 0 + 0.6 - 0.4
        self.assertAlmostEqual(buf.advantages[2], 0.2, places=12)
        # first episode does not see the second one
        self.assertAlmostEqual(buf.advantages[1], -1.2, places=12)
        self.assertAlmostEqual(buf.advantages[0], 0.1 + 0.95 * -1.2, places=12)
        self.assertIsNone(buf.episode_returns[2])
        np.testing.assert_allclose(buf.returns, [-1.0, -1.0, 0.6], atol=1e-12)

    def test_value_targets_are_terminal_reward(self):
        buf = self.buffer([0.0, 0.0, 0.0])
        buf.finish_episode(0, -0.5)
        tr.compute_advantages(buf, self.cfg, normalize=False)
        np.testing.assert_allclose(buf.returns, buf.episode_returns, atol=1e-12)
        # GAE still shapes the advantages
        np.testing.assert_allclose(buf.advantages, [-0.45125, -0.475, -0.5], atol=1e-12)

    def test_normalization(self):
        buf = self.buffer([0.1, 0.2, 0.3, 0.0])
        buf.finish_episode(0, -0.25)
        tr.compute_advantages(buf, self.cfg)
        self.assertAlmostEqual(float(buf.advantages.mean()), 0.0, places=12)
        self.assertAlmostEqual(float(buf.advantages.std()), 1.0, places=12)

    def test_zero_variance_warns(self):
        buf = self.buffer([0.0])
        buf.finish_episode(0, 0.0)
        with self.assertLogs('training', level='WARNING'):
            tr.compute_advantages(buf, self.cfg)
        np.testing.assert_array_equal(buf.advantages, [0.0])

    def test_clipped_surrogate(self):
        ratio = torch.tensor([0.5, 1.5])
        self.assertAlmostEqual(float(tr.clipped_surrogate(ratio, torch.tensor([1.0, 1.0]), 0.2)), 0.85, places=6)
        self.assertAlmostEqual(float(tr.clipped_surrogate(ratio, torch.tensor([-1.0, -1.0]), 0.2)), -1.15, places=6)

    def test_surrogate_at_unit_ratio_is_mean_advantage(self):
        adv = torch.tensor([0.3, -1.2, 0.5, 2.0])
        self.assertAlmostEqual(float(tr.clipped_surrogate(torch.ones(4), adv, 0.2)), float(adv.mean()), places=6)


class TestPPO(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.model = pol.CapamPolicy(small_policy())
        self.cfg = tr.PPOConfig(total_steps=40, rollout_size=20, batch_size=10, lr=1e-3, epochs=2,
                                eval_episodes=2)
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            tr.PPOConfig(rollout_size=100, batch_size=30).validate()
        with self.assertRaises(ValueError):
            tr.PPOConfig(total_steps=10, rollout_size=20, batch_size=10).validate()

    def test_rollout_size_and_rewards(self):
        before = tr.parameter_fingerprint(self.model)
        buf = tr.collect_rollouts(self.model, tiny_generation(), self.cfg, np.random.default_rng(0))
        self.assertEqual(len(buf), 20)
        self.assertEqual(tr.parameter_fingerprint(self.model), before)
        for r in buf.completed_rewards:
            self.assertTrue(-1.0 <= r <= 0.0)
            self.assertAlmostEqual(r * 4, round(r * 4), places=12)
        self.assertEqual(sum(buf.dones), len(buf.completed_rewards))

    def test_update_moves_parameters(self):
        rng = np.random.default_rng(1)
        buf = tr.collect_rollouts(self.model, tiny_generation(), self.cfg, rng)
        tr.compute_advantages(buf, self.cfg)
        optimizer = torch.optim.Adam(self.model.parameters(), lr=self.cfg.lr)
        before = tr.parameter_fingerprint(self.model)
        stats = tr.ppo_update(self.model, optimizer, buf, self.cfg, rng, self.tmp.name)
        self.assertNotEqual(tr.parameter_fingerprint(self.model), before)
        for key in ('loss', 'policy_loss', 'value_loss', 'entropy', 'approx_kl', 'clip_frac'):
            self.assertTrue(np.isfinite(stats[key]))

    def test_fresh_buffer_has_unit_ratio(self):
        buf = tr.collect_rollouts(self.model, tiny_generation(), self.cfg, np.random.default_rng(4))
        tr.compute_advantages(buf, self.cfg, normalize=False)
        _, stats, order = tr.minibatch_loss(self.model, buf, np.arange(len(buf)), self.cfg)
        self.assertAlmostEqual(-stats['policy_loss'], float(buf.advantages[order].mean()), places=5)
        self.assertAlmostEqual(stats['approx_kl'], 0.0, places=5)
        self.assertEqual(stats['clip_frac'], 0.0)

    def test_zero_advantages_leave_decoder_alone(self):
        cfg = tr.PPOConfig(total_steps=20, rollout_size=20, batch_size=10, lr=1e-3, epochs=1, entropy_coef=0.0)
        rng = np.random.default_rng(5)
        buf = tr.collect_rollouts(self.model, tiny_generation(), cfg, rng)
        tr.compute_advantages(buf, cfg)
        buf.advantages = np.zeros(len(buf))
        decoder = {k: v.clone() for k, v in self.model.decoder.state_dict().items()}
        critic = {k: v.clone() for k, v in self.model.critic.state_dict().items()}
        optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        stats = tr.ppo_update(self.model, optimizer, buf, cfg, rng, self.tmp.name)
        self.assertEqual(stats['policy_loss'], 0.0)
        for key, value in self.model.decoder.state_dict().items():
            torch.testing.assert_close(value, decoder[key], rtol=0.0, atol=0.0)
        self.assertTrue(any(not torch.equal(v, critic[k]) for k, v in self.model.critic.state_dict().items()))

    def test_one_update_lowers_surrogate_loss(self):
        cfg = tr.PPOConfig(total_steps=20, rollout_size=20, batch_size=20, lr=1e-5, epochs=1,
                           value_coef=0.0, entropy_coef=0.0)
        rng = np.random.default_rng(6)
        buf = tr.collect_rollouts(self.model, tiny_generation(), cfg, rng)
        tr.compute_advantages(buf, cfg)
        idx = np.arange(len(buf))
        before = tr.minibatch_loss(self.model, buf, idx, cfg)[1]['policy_loss']
        optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        tr.ppo_update(self.model, optimizer, buf, cfg, rng, self.tmp.name)
        after = tr.minibatch_loss(self.model, buf, idx, cfg)[1]['policy_loss']
        self.assertLess(after, before)

    def test_update_requires_advantages(self):
        buf = tr.collect_rollouts(self.model, tiny_generation(), self.cfg, np.random.default_rng(2), size=5)
        optimizer = torch.optim.Adam(self.model.parameters())
        with self.assertRaises(ValueError):
            tr.ppo_update(self.model, optimizer, buf, self.cfg, np.random.default_rng(0))

    def test_non_finite_loss_halts_and_saves_batch(self):
        rng = np.random.default_rng(3)
        buf = tr.collect_rollouts(self.model, tiny_generation(), self.cfg, rng)
        tr.compute_advantages(buf, self.cfg)
        with torch.no_grad():
            self.model.decoder.depot.fill_(float('nan'))
        optimizer = torch.optim.Adam(self.model.parameters())
        with self.assertRaises(tr.TrainingHalted) as ctx:
            tr.ppo_update(self.model, optimizer, buf, self.cfg, rng, self.tmp.name)
        self.assertTrue(os.path.exists(ctx.exception.batch_path))

    def test_trainer_artifacts_and_resume(self):
        out_a = os.path.join(self.tmp.name, 'a')
        run = tr.train(tiny_generation(), self.cfg, small_policy(), seed=5, out_dir=out_a)
        self.assertEqual(run.steps, 40)
        self.assertTrue(os.path.exists(os.path.join(out_a, 'final.pt')))
        curve = pd.read_csv(os.path.join(out_a, 'learning_curve.csv'))
        self.assertEqual(list(curve['step']), [20, 40])
        # held-out score after every iteration
        self.assertTrue(np.isfinite(curve['eval_completion']).all())
        with open(os.path.join(out_a, 'evaluation.json')) as f:
            evaluation = json.load(f)
        self.assertEqual(evaluation['steps'], 40)
        self.assertAlmostEqual(evaluation['mean_completion'], float(curve['eval_completion'].iloc[-1]))

        out_b = os.path.join(self.tmp.name, 'b')
        first = tr.PPOTrainer(tiny_generation(), self.cfg, small_policy(), seed=5, out_dir=out_b)
        first.iteration()
        first.save(os.path.join(out_b, 'mid.pt'))
        second = tr.PPOTrainer(tiny_generation(), self.cfg, small_policy(), seed=5, out_dir=out_b)
        second.resume(os.path.join(out_b, 'mid.pt'))
        self.assertEqual(second.steps, 20)
        second.iteration()
        final_a, _ = pol.load_checkpoint(os.path.join(out_a, 'final.pt'))
        self.assertEqual(tr.parameter_fingerprint(second.model), tr.parameter_fingerprint(final_a))

    def test_evaluation_interval(self):
        cfg = tr.PPOConfig(total_steps=40, rollout_size=20, batch_size=10, lr=1e-3, epochs=1,
                           eval_episodes=2, eval_interval=2)
        run = tr.train(tiny_generation(), cfg, small_policy(), seed=2, out_dir=self.tmp.name)
        scores = run.curve['eval_completion']
        self.assertTrue(np.isnan(scores.iloc[0]))
        self.assertTrue(0.0 <= scores.iloc[1] <= 100.0)
        with self.assertRaises(ValueError):
            tr.PPOConfig(total_steps=20, rollout_size=20, batch_size=10, eval_interval=-1).validate()

    def test_load_training_config(self):
        cfgs = tr.load_training_config(PROFILE_PATH)
        self.assertEqual((cfgs['generation'].N, cfgs['generation'].M), (10, 2))
        self.assertEqual(cfgs['ppo'].total_steps, 200_000)
        self.assertEqual(cfgs['policy'].td['d_thresh'], 0.3)
        cfgs['ppo'].validate()


if __name__ == '__main__':
    unittest.main()
