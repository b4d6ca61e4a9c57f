"""
CAPAM policy network.

Graph-capsule encoder over a (TD or plain) Laplacian, a context encoder for the
deciding robot's state and its beliefs about peers, and an attention decoder
that scores the depot plus every task. A small critic head shares the encoder
for PPO. Works on batches of graphs with the same node count.
"""

import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from simenv import Observation, WorldState
from taskgraph import build_task_graph
from topology import TDConfig, TDLaplacianCache, encoder_laplacian

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CONTEXT_DIM = 9


class GradientError(FloatingPointError):
    """Non-finite gradient; `path` names the parameter"""

    def __init__(self, path: str, message: str = ""):
        self.path = path
        super().__init__(message or f"non-finite gradient in {path}")


@dataclass
class PolicyConfig:
    """Network shape; defaults are the full-size model"""
    K: int = 3
    L_e: int = 3
    P: int = 3
    hidden: int = 128
    heads: int = 8
    h_q: int = 128
    critic_hidden: int = 128
    clip_logits: float = 10.0
    encoder: str = 'capsule'    # capsule or mlp
    laplacian: str = 'td'       # td or plain
    mlp_hidden: int = 512
    bias: bool = True
    td: Dict[str, Any] = field(default_factory=lambda: TDConfig().to_dict())

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.encoder not in ('capsule', 'mlp'):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.laplacian not in ('td', 'plain'):
            raise ValueError(f"unknown laplacian {self.laplacian!r}")
        if self.K < 0 or self.L_e < 1 or self.P < 1:
            raise ValueError(f"bad encoder shape K={self.K}, L_e={self.L_e}, P={self.P}")

    def td_config(self) -> Optional[TDConfig]:
        return TDConfig.from_dict(self.td) if self.laplacian == 'td' else None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PolicyConfig':
        return cls(**data)

    @classmethod
    def for_method(cls, method: str, **overrides) -> 'PolicyConfig':
        """capam-td, capam or mlp"""
        presets = {
            'capam-td': dict(encoder='capsule', laplacian='td'),
            'capam': dict(encoder='capsule', laplacian='plain'),
            'mlp': dict(encoder='mlp', laplacian='plain'),
        }
        if method not in presets:
            raise ValueError(f"no learned policy for method {method!r}")
        return cls(**{**presets[method], **overrides})


@dataclass
class PolicyInput:
    """Everything the network reads for one decision"""
    features: np.ndarray    # N x 4
    laplacian: np.ndarray   # N x N
    context: np.ndarray     # CONTEXT_DIM
    mask: np.ndarray        # N + 1

    @property
    def N(self) -> int:
        return self.features.shape[0]


def context_features(obs: Observation) -> np.ndarray:
    """Elapsed time, own range/payload/location, mean peer destination/range/payload"""
    width, height = obs.arena
    if len(obs.peer_ids):
        peer_dest = obs.peer_destinations.mean(axis=0)
        peer = [peer_dest[0] / width, peer_dest[1] / height,
                float(obs.peer_ranges.mean()) / obs.range_max,
                float(obs.peer_payloads.mean()) / obs.C_max]
    else:
        peer = [0.0, 0.0, 0.0, 0.0]
    return np.array([
        obs.t / obs.max_deadline,
        obs.own_range / obs.range_max,
        obs.own_payload / obs.C_max,
        obs.own_position[0] / width,
        obs.own_position[1] / height,
        *peer,
    ], dtype=float)


def prepare_input(obs: Observation, cfg: PolicyConfig,
                  cache: Optional[TDLaplacianCache] = None,
                  executor: Optional[Executor] = None) -> PolicyInput:
    graph = build_task_graph(obs.features)
    lap = encoder_laplacian(graph, cfg.td_config(), cache, executor)
    return PolicyInput(features=obs.features, laplacian=lap,
                       context=context_features(obs), mask=obs.mask.copy())


class CapsuleLayer(nn.Module):
    """f_p = relu(sum_k L^k F^p W_pk), concatenated over p and projected back"""

    def __init__(self, hidden: int, K: int, P: int, bias: bool = True):
        super().__init__()
        self.K, self.P = K, P
        self.weights = nn.ModuleList(
            nn.ModuleList(nn.Linear(hidden, hidden, bias=False) for _ in range(K + 1))
            for _ in range(P)
        )
        self.moment_bias = nn.Parameter(torch.zeros(P, hidden)) if bias else None
        self.project = nn.Linear(P * hidden, hidden, bias=bias)

    def forward(self, feats: torch.Tensor, powers: List[torch.Tensor]) -> torch.Tensor:
        moments = []
        for p in range(self.P):
            raised = feats ** (p + 1)
            total = self.weights[p][0](raised)
            for k in range(1, self.K + 1):
                total = total + torch.matmul(powers[k], self.weights[p][k](raised))
            if self.moment_bias is not None:
                total = total + self.moment_bias[p]
            moments.append(F.relu(total))
        return self.project(torch.cat(moments, dim=-1))


class CapsuleEncoder(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.K = cfg.K
        self.embed = nn.Linear(4, cfg.hidden, bias=cfg.bias)
        self.layers = nn.ModuleList(CapsuleLayer(cfg.hidden, cfg.K, cfg.P, cfg.bias)
                                    for _ in range(cfg.L_e))

    def forward(self, feats: torch.Tensor, lap: torch.Tensor) -> torch.Tensor:
        powers = [None]
        current = lap
        for k in range(1, self.K + 1):
            powers.append(current)
            current = torch.matmul(current, lap)
        h = self.embed(feats)
        for layer in self.layers:
            h = layer(h, powers)
        return h


class MLPEncoder(nn.Module):
    """Per-node perceptron; ignores the graph"""

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(4, cfg.mlp_hidden, bias=cfg.bias), nn.ReLU(),
            nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden, bias=cfg.bias), nn.ReLU(),
            nn.Linear(cfg.mlp_hidden, cfg.hidden, bias=cfg.bias),
        )

    def forward(self, feats: torch.Tensor, lap: torch.Tensor) -> torch.Tensor:
        return self.net(feats)


class AttentionDecoder(nn.Module):
    """Masked multi-head glimpse followed by clipped compatibility scores"""

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        h = cfg.hidden
        self.heads = cfg.heads
        self.head_dim = h // cfg.heads
        self.clip = cfg.clip_logits
        self.depot = nn.Parameter(torch.randn(h) / math.sqrt(h))
        self.query = nn.Linear(h, h, bias=False)
        self.keys = nn.Linear(h, h, bias=False)
        self.values = nn.Linear(h, h, bias=False)
        self.out = nn.Linear(h, h, bias=False)
        self.score_query = nn.Linear(h, h, bias=False)
        self.score_keys = nn.Linear(h, h, bias=False)

    def forward(self, emb: torch.Tensor, q: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Log-probabilities over [depot, task 1..N]; masked entries are -inf"""
        if not bool(mask[:, 0].all()):
            raise AssertionError("depot must always be feasible")
        batch, n, h = emb.shape
        nodes = torch.cat([self.depot.expand(batch, 1, h), emb], dim=1)

        qh = self.query(q).view(batch, self.heads, self.head_dim)
        kh = self.keys(nodes).view(batch, n + 1, self.heads, self.head_dim).transpose(1, 2)
        vh = self.values(nodes).view(batch, n + 1, self.heads, self.head_dim).transpose(1, 2)
        scores = torch.einsum('bhd,bhnd->bhn', qh, kh) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None, :], float('-inf'))
        attn = torch.softmax(scores, dim=-1)
        glimpse = self.out(torch.einsum('bhn,bhnd->bhd', attn, vh).reshape(batch, h))

        logits = torch.einsum('bh,bnh->bn', self.score_query(glimpse), self.score_keys(nodes))
        logits = self.clip * torch.tanh(logits / math.sqrt(h))
        logits = logits.masked_fill(~mask, float('-inf'))
        return torch.log_softmax(logits, dim=-1)


class CapamPolicy(nn.Module):
    """Shared actor-critic used by every robot"""

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = CapsuleEncoder(cfg) if cfg.encoder == 'capsule' else MLPEncoder(cfg)
        self.context = nn.Sequential(
            nn.Linear(CONTEXT_DIM, cfg.h_q, bias=cfg.bias),
            nn.Linear(cfg.h_q, cfg.hidden, bias=cfg.bias),
        )
        self.decoder = AttentionDecoder(cfg)
        self.critic = nn.Sequential(
            nn.Linear(2 * cfg.hidden, cfg.critic_hidden), nn.ReLU(),
            nn.Linear(cfg.critic_hidden, 1),
        )

    def encode(self, feats: torch.Tensor, lap: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != 4 or lap.shape[-1] != feats.shape[-2] or lap.shape[-2] != feats.shape[-2]:
            raise ValueError(f"shape mismatch: features {tuple(feats.shape)}, laplacian {tuple(lap.shape)}")
        return self.encoder(feats, lap)

    def build_context(self, ctx: torch.Tensor) -> torch.Tensor:
        return self.context(ctx)

    def decode(self, emb: torch.Tensor, q: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.decoder(emb, q, mask)

    def forward(self, feats: torch.Tensor, lap: torch.Tensor, ctx: torch.Tensor,
                mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(log-probs B x N+1, values B)"""
        emb = self.encode(feats, lap)
        q = self.build_context(ctx)
        log_probs = self.decode(emb, q, mask)
        value = self.critic(torch.cat([q, emb.mean(dim=1)], dim=-1)).squeeze(-1)
        return log_probs, value

    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def collate(inputs: List[PolicyInput], dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, ...]:
    """Stack inputs that share a node count"""
    sizes = {inp.N for inp in inputs}
    if len(sizes) != 1:
        raise ValueError(f"cannot batch graphs of different sizes {sorted(sizes)}")
    feats = torch.as_tensor(np.stack([inp.features for inp in inputs]), dtype=dtype)
    lap = torch.as_tensor(np.stack([inp.laplacian for inp in inputs]), dtype=dtype)
    ctx = torch.as_tensor(np.stack([inp.context for inp in inputs]), dtype=dtype)
    mask = torch.as_tensor(np.stack([inp.mask for inp in inputs]), dtype=torch.bool)
    return feats, lap, ctx, mask


def masked_entropy(log_probs: torch.Tensor) -> torch.Tensor:
    # masked entries have p = 0; zero their log first so backward stays finite
    safe = log_probs.masked_fill(~torch.isfinite(log_probs), 0.0)
    return -(safe.exp() * safe).sum(dim=-1)


def evaluate_inputs(model: CapamPolicy, inputs: List[PolicyInput]) -> Tuple[torch.Tensor, torch.Tensor]:
    return model(*collate(inputs, model.dtype()))


def forward_observation(model: CapamPolicy, obs: Observation,
                        cache: Optional[TDLaplacianCache] = None) -> Tuple[np.ndarray, float]:
    """Action distribution and value estimate for one observation"""
    inp = prepare_input(obs, model.cfg, cache)
    with torch.no_grad():
        log_probs, value = evaluate_inputs(model, [inp])
    return log_probs[0].exp().double().numpy(), float(value[0])


def compute_gradients(loss: torch.Tensor,
                      named_params: Iterable[Tuple[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter"""
    named = [(name, p) for name, p in named_params if p.requires_grad]
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
        return {name: torch.zeros_like(p) for name, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True, retain_graph=True)
    result: Dict[str, torch.Tensor] = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            logger.error(f"Non-finite gradient for parameter {name}")
            raise GradientError(name)
        result[name] = g
    return result


def save_checkpoint(model: CapamPolicy, path: str, extra: Optional[Dict[str, Any]] = None) -> None:
    payload = {
        'version': CHECKPOINT_VERSION,
        'config': model.cfg.to_dict(),
        'state_dict': model.state_dict(),
        'shapes': {name: list(t.shape) for name, t in model.state_dict().items()},
    }
    payload.update(extra or {})
    torch.save(payload, path)
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: str) -> Tuple[CapamPolicy, Dict[str, Any]]:
    payload = torch.load(path, map_location='cpu', weights_only=False)
    version = payload.get('version')
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r} in {path}")
    model = CapamPolicy(PolicyConfig.from_dict(payload['config']))
    model.load_state_dict(payload['state_dict'])
    model.eval()
    return model, payload


class PolicyAgent:
    """Decides with a trained or untrained network, greedily or by sampling"""

    def __init__(self, model: CapamPolicy, greedy: bool = True, seed: int = 0,
                 cache: Optional[TDLaplacianCache] = None):
        self.model = model
        self.greedy = greedy
        self.rng = np.random.default_rng(seed)
        self.cache = cache if cache is not None else TDLaplacianCache()

    def decide(self, world: WorldState, robot: int) -> int:
        probs, _ = forward_observation(self.model, world.observe(robot), self.cache)
        if self.greedy:
            return int(np.argmax(probs))
        probs = probs / probs.sum()
        return int(self.rng.choice(len(probs), p=probs))
