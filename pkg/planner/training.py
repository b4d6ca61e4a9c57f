"""
PPO training of the shared CAPAM policy on the event-driven environment.

Every robot decision is one buffer step. The episode reward -(N - N_success)/N
is terminal, undiscounted and shared by every step of the episode.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import torch

from policy import (CapamPolicy, PolicyConfig, PolicyInput, PolicyAgent, evaluate_inputs,
                    masked_entropy, prepare_input, save_checkpoint)
from scenario import GenerationConfig, generate_scenario
from simenv import reset, run_episode
from topology import TDLaplacianCache

logger = logging.getLogger(__name__)

EVAL_SEED_BASE = 10_000_000


class TrainingHalted(RuntimeError):
    """Non-finite loss; `batch_path` holds the offending minibatch"""

    def __init__(self, batch_path: str, message: str = ""):
        self.batch_path = batch_path
        super().__init__(message or f"training halted, offending batch saved to {batch_path}")


@dataclass
class PPOConfig:
    total_steps: int = 4_000_000
    rollout_size: int = 40_000
    batch_size: int = 4_000
    lr: float = 1e-6
    entropy_coef: float = 0.01
    clip: float = 0.2
    gamma: float = 1.0
    gae_lambda: float = 0.95
    epochs: int = 10
    value_coef: float = 0.5
    eval_episodes: int = 10
    eval_interval: int = 1      # iterations between held-out evaluations, 0 = only at the end
    greedy_eval: bool = True

    def validate(self) -> None:
        if self.rollout_size % self.batch_size:
            raise ValueError(f"rollout_size={self.rollout_size} not divisible by batch_size={self.batch_size}")
        if self.total_steps < self.rollout_size:
            raise ValueError("total_steps must cover at least one rollout")
        if self.eval_interval < 0:
            raise ValueError("eval_interval must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PPOConfig':
        return cls(**data)


@dataclass
class RolloutBuffer:
    inputs: List[PolicyInput] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)     # nonzero only on an episode's last step
    dones: List[bool] = field(default_factory=list)
    episode_returns: List[Optional[float]] = field(default_factory=list)
    bootstrap_value: float = 0.0
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    completed_rewards: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    def add(self, inp: PolicyInput, action: int, log_prob: float, value: float) -> None:
        self.inputs.append(inp)
        self.actions.append(action)
        self.log_probs.append(log_prob)
        self.values.append(value)
        self.rewards.append(0.0)
        self.dones.append(False)
        self.episode_returns.append(None)

    def finish_episode(self, start: int, reward: float) -> None:
        """Terminal reward on the last step; every step of the episode gets it as its return"""
        self.rewards[-1] = reward
        self.dones[-1] = True
        for idx in range(start, len(self)):
            self.episode_returns[idx] = reward
        self.completed_rewards.append(reward)


def parameter_fingerprint(model: torch.nn.Module) -> str:
    digest = hashlib.sha1()
    for name, p in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, clip: float) -> torch.Tensor:
    """Mean of min(r A, clip(r, 1-e, 1+e) A)"""
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * advantages
    return torch.min(unclipped, clipped).mean()


def collect_rollouts(model: CapamPolicy, gen_cfg: GenerationConfig, cfg: PPOConfig,
                     rng: np.random.Generator, size: Optional[int] = None) -> RolloutBuffer:
    """Fill a buffer with exactly `size` (default cfg.rollout_size) decision steps"""
    size = size or cfg.rollout_size
    buffer = RolloutBuffer()
    cache = TDLaplacianCache()
    model.eval()
    while len(buffer) < size:
        scenario = generate_scenario(gen_cfg, int(rng.integers(0, 2 ** 31 - 1)))
        world = reset(scenario, record_history=False)
        start = len(buffer)
        while not world.done and len(buffer) < size:
            rid = world.current_robot
            inp = prepare_input(world.observe(rid), model.cfg, cache)
            with torch.no_grad():
                log_probs, value = evaluate_inputs(model, [inp])
            probs = log_probs[0].exp().double().numpy()
            action = int(rng.choice(len(probs), p=probs / probs.sum()))
            buffer.add(inp, action, float(log_probs[0, action]), float(value[0]))
            world.step(rid, action)
        if world.done:
            reward = world.compute_reward()
            expected = -(scenario.N - world.n_success()) / scenario.N
            if reward != expected:
                raise RuntimeError(f"episode reward {reward} disagrees with N_success count {expected}")
            buffer.finish_episode(start, reward)
        else:
            inp = prepare_input(world.observe(world.current_robot), model.cfg, cache)
            with torch.no_grad():
                _, value = evaluate_inputs(model, [inp])
            buffer.bootstrap_value = float(value[0])
    logger.debug(f"Collected {len(buffer)} steps, {len(buffer.completed_rewards)} complete episodes, "
                 f"TD cache hits={cache.hits} misses={cache.misses}")
    return buffer


def compute_advantages(buffer: RolloutBuffer, cfg: PPOConfig, normalize: bool = True) -> RolloutBuffer:
    """
    GAE advantages over the step sequence. Value targets are the episode's
    terminal reward (gamma=1); an unfinished last episode bootstraps from the critic.
    """
    n = len(buffer)
    values = np.asarray(buffer.values, dtype=float)
    rewards = np.asarray(buffer.rewards, dtype=float)
    dones = np.asarray(buffer.dones, dtype=bool)
    advantages = np.zeros(n)
    running = 0.0
    for t in reversed(range(n)):
        if dones[t]:
            next_value, running = 0.0, 0.0
        else:
            next_value = values[t + 1] if t + 1 < n else buffer.bootstrap_value
        delta = rewards[t] + cfg.gamma * next_value - values[t]
        running = delta + cfg.gamma * cfg.gae_lambda * running
        advantages[t] = running
    buffer.returns = np.array([buffer.bootstrap_value if ret is None else ret
                               for ret in buffer.episode_returns], dtype=float)
    if not np.all(np.isfinite(advantages)):
        raise FloatingPointError("non-finite advantages")
    if normalize:
        std = advantages.std()
        if std < 1e-12:
            logger.warning("Advantages have zero variance; skipping normalization")
        else:
            advantages = (advantages - advantages.mean()) / std
    buffer.advantages = advantages
    return buffer


def minibatch_loss(model: CapamPolicy, buffer: RolloutBuffer, idx: np.ndarray, cfg: PPOConfig):
    """Total PPO loss of the steps in `idx`, batched by node count; returns (loss, telemetry, step order)"""
    groups: Dict[int, List[int]] = {}
    for i in idx:
        groups.setdefault(buffer.inputs[i].N, []).append(int(i))
    new_lp, values, entropy, order = [], [], [], []
    for members in groups.values():
        log_probs, value = evaluate_inputs(model, [buffer.inputs[i] for i in members])
        actions = torch.as_tensor([buffer.actions[i] for i in members])
        new_lp.append(log_probs.gather(1, actions[:, None]).squeeze(1))
        values.append(value)
        entropy.append(masked_entropy(log_probs))
        order.extend(members)
    new_lp, values, entropy = torch.cat(new_lp), torch.cat(values), torch.cat(entropy)
    dtype = new_lp.dtype
    old_lp = torch.as_tensor([buffer.log_probs[i] for i in order], dtype=dtype)
    adv = torch.as_tensor(buffer.advantages[order], dtype=dtype)
    ret = torch.as_tensor(buffer.returns[order], dtype=dtype)

    ratio = torch.exp(new_lp - old_lp)
    policy_loss = -clipped_surrogate(ratio, adv, cfg.clip)
    value_loss = torch.mean((values - ret) ** 2)
    entropy_mean = entropy.mean()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy_mean
    stats = {
        'loss': float(loss.detach()),
        'policy_loss': float(policy_loss.detach()),
        'value_loss': float(value_loss.detach()),
        'entropy': float(entropy_mean.detach()),
        'approx_kl': float((old_lp - new_lp).mean().detach()),
        'clip_frac': float(((ratio - 1.0).abs() > cfg.clip).float().mean()),
    }
    return loss, stats, order


def ppo_update(model: CapamPolicy, optimizer: torch.optim.Optimizer, buffer: RolloutBuffer,
               cfg: PPOConfig, rng: np.random.Generator, halt_dir: str = '.') -> Dict[str, float]:
    """Clipped-surrogate epochs over shuffled minibatches; returns mean telemetry"""
    if buffer.advantages is None:
        raise ValueError("compute_advantages must run before ppo_update")
    model.train()
    history: List[Dict[str, float]] = []
    n = len(buffer)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, stats, order = minibatch_loss(model, buffer, idx, cfg)
            if not torch.isfinite(loss):
                path = os.path.join(halt_dir, f"halted_batch_epoch{epoch}_start{start}.pt")
                torch.save({
                    'inputs': [buffer.inputs[i] for i in order],
                    'actions': [buffer.actions[i] for i in order],
                    'log_probs': [buffer.log_probs[i] for i in order],
                    'advantages': buffer.advantages[order],
                    'returns': buffer.returns[order],
                    'state_dict': model.state_dict(),
                }, path)
                logger.error(f"Non-finite loss at epoch {epoch}; batch saved to {path}")
                raise TrainingHalted(path)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.append(stats)
    model.eval()
    return {key: float(np.mean([h[key] for h in history])) for key in history[0]}


def evaluate_policy(model: CapamPolicy, gen_cfg: GenerationConfig, episodes: int,
                    greedy: bool = True, seed_base: int = EVAL_SEED_BASE) -> float:
    """Mean completion percent over held-out scenarios"""
    agent = PolicyAgent(model, greedy=greedy, seed=seed_base)
    results = [run_episode(generate_scenario(gen_cfg, seed_base + i), agent, seed=seed_base + i)
               for i in range(episodes)]
    return float(np.mean([r.completion for r in results]))


@dataclass
class TrainingRun:
    config: Dict[str, Any]
    seed: int
    checkpoints: List[str]
    curve: pd.DataFrame
    steps: int = 0


class PPOTrainer:
    """Alternates rollout collection and PPO updates"""

    def __init__(self, gen_cfg: GenerationConfig, ppo_cfg: PPOConfig,
                 policy_cfg: PolicyConfig, seed: int = 0, out_dir: str = 'runs'):
        ppo_cfg.validate()
        self.gen_cfg = gen_cfg
        self.cfg = ppo_cfg
        self.policy_cfg = policy_cfg
        self.seed = seed
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        torch.manual_seed(seed)
        self.model = CapamPolicy(policy_cfg)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=ppo_cfg.lr)
        self.rng = np.random.default_rng(seed)
        self.steps = 0
        self.curve_rows: List[Dict[str, float]] = []
        self.checkpoints: List[str] = []

    def config_dict(self) -> Dict[str, Any]:
        return {'generation': self.gen_cfg.to_dict(), 'ppo': self.cfg.to_dict(),
                'policy': self.policy_cfg.to_dict()}

    def save(self, path: str) -> None:
        save_checkpoint(self.model, path, extra={
            'optimizer': self.optimizer.state_dict(),
            'rng_state': self.rng.bit_generator.state,
            'torch_rng_state': torch.get_rng_state(),
            'steps': self.steps,
            'curve': self.curve_rows,
            'run_config': self.config_dict(),
            'seed': self.seed,
        })
        self.checkpoints.append(path)

    def resume(self, path: str) -> None:
        payload = torch.load(path, map_location='cpu', weights_only=False)
        self.model.load_state_dict(payload['state_dict'])
        self.optimizer.load_state_dict(payload['optimizer'])
        self.rng.bit_generator.state = payload['rng_state']
        torch.set_rng_state(payload['torch_rng_state'])
        self.steps = int(payload['steps'])
        self.curve_rows = list(payload['curve'])
        logger.info(f"Resumed from {path} at step {self.steps}")

    def iteration(self) -> Dict[str, float]:
        before = parameter_fingerprint(self.model)
        buffer = collect_rollouts(self.model, self.gen_cfg, self.cfg, self.rng)
        if parameter_fingerprint(self.model) != before:
            raise RuntimeError("parameters changed during rollout collection")
        compute_advantages(buffer, self.cfg)
        stats = ppo_update(self.model, self.optimizer, buffer, self.cfg, self.rng, self.out_dir)
        self.steps += len(buffer)
        rewards = buffer.completed_rewards
        mean_reward = float(np.mean(rewards)) if rewards else float('nan')
        row = {'step': self.steps, 'mean_reward': mean_reward,
               'mean_completion': 100.0 * (1.0 + mean_reward), 'eval_completion': float('nan'), **stats}
        self.curve_rows.append(row)
        logger.info(f"step {self.steps}: mean reward {mean_reward:.4f}, entropy {stats['entropy']:.4f}, "
                    f"policy loss {stats['policy_loss']:.5f}, value loss {stats['value_loss']:.5f}")
        return row

    def evaluate(self) -> float:
        completion = evaluate_policy(self.model, self.gen_cfg, self.cfg.eval_episodes, self.cfg.greedy_eval)
        logger.info(f"Held-out completion after {self.steps} steps: {completion:.2f}%")
        return completion

    def curve(self) -> pd.DataFrame:
        return pd.DataFrame(self.curve_rows)

    def train(self) -> TrainingRun:
        try:
            while self.steps < self.cfg.total_steps:
                row = self.iteration()
                if self.cfg.eval_episodes and self.cfg.eval_interval \
                        and len(self.curve_rows) % self.cfg.eval_interval == 0:
                    row['eval_completion'] = self.evaluate()
                self.save(os.path.join(self.out_dir, f"checkpoint_{self.steps}.pt"))
                self.curve().to_csv(os.path.join(self.out_dir, 'learning_curve.csv'), index=False)
        except Exception as e:
            logger.error(f"Training stopped at step {self.steps}: {e}")
            raise
        final = os.path.join(self.out_dir, 'final.pt')
        self.save(final)
        if self.cfg.eval_episodes:
            last = self.curve_rows[-1] if self.curve_rows else {}
            completion = last.get('eval_completion', float('nan'))
            if last.get('step') != self.steps or not np.isfinite(completion):
                completion = self.evaluate()
            with open(os.path.join(self.out_dir, 'evaluation.json'), 'w') as f:
                json.dump({'steps': self.steps, 'mean_completion': completion,
                           'episodes': self.cfg.eval_episodes}, f, indent=2)
        return TrainingRun(config=self.config_dict(), seed=self.seed,
                           checkpoints=list(self.checkpoints), curve=self.curve(), steps=self.steps)


def train(gen_cfg: GenerationConfig, ppo_cfg: PPOConfig, policy_cfg: PolicyConfig,
          seed: int = 0, out_dir: str = 'runs', resume: Optional[str] = None) -> TrainingRun:
    trainer = PPOTrainer(gen_cfg, ppo_cfg, policy_cfg, seed, out_dir)
    if resume:
        trainer.resume(resume)
    return trainer.train()


def load_training_config(path: str) -> Dict[str, Any]:
    """JSON file with optional generation, ppo, policy and td sections"""
    with open(path, 'r') as f:
        data = json.load(f)
    gen_cfg = GenerationConfig.from_dict(data.get('generation', {}))
    ppo_cfg = PPOConfig.from_dict(data.get('ppo', {}))
    policy_data = dict(data.get('policy', {}))
    if 'td' in data:
        policy_data['td'] = data['td']
    return {'generation': gen_cfg, 'ppo': ppo_cfg, 'policy': PolicyConfig.from_dict(policy_data)}
