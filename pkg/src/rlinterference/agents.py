"""Learning agents: tile-coding Q-learning, DQN, and SBCD Q-learning (with SR-NN)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np

from .approx import RLN, VLN, MlpQ, Optimizer, TileCoderQ, srnn_penalty
from .envs import Env, StepResult

BUFFER_SIZES = (100, 1000, 2000)
BATCH_SIZES = (16, 64, 256)
HIDDEN_SIZES = (128, 256, 512)
TARGET_FREQS = (0, 100, 200, 400, 800)
TC_STEP_SIZES = (0.2, 0.1, 0.05, 0.025)
SRNN_LAMBDAS = (0.01, 0.001, 0.0001)


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    terminal: bool
    episode_step: int


@dataclass
class AgentConfig:
    kind: str = "dqn"  # dqn | tile | sbcd
    optimizer: str = "adam"
    lr: float = 1e-3
    buffer_size: int = 1000
    batch_size: int = 64
    hidden: int = 128
    target_freq: int = 0
    gamma: float = 0.99
    epsilon: float = 0.1
    lr_rln: float = 1e-3
    lr_vln: float = 1e-3
    srnn_lambda: float = 0.0
    srnn_beta: float = 0.1
    tc_step: float = 0.1

    @classmethod
    def from_dict(cls, data: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown agent config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


class ReplayBuffer:
    """FIFO transition store with uniform (with-replacement) mini-batch sampling."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.episode_steps = np.zeros(capacity, dtype=int)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, tr: Transition) -> None:
        i = self._next
        self.obs[i] = tr.obs
        self.next_obs[i] = tr.next_obs
        self.actions[i] = tr.action
        self.rewards[i] = tr.reward
        self.terminals[i] = tr.terminal
        self.episode_steps[i] = tr.episode_step
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ordered_indices(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(self.size, size=n)

    def batch(self, idx: np.ndarray):
        return (self.obs[idx], self.actions[idx], self.rewards[idx],
                self.next_obs[idx], self.terminals[idx])


class Agent:
    """Episode bookkeeping shared by all agents; subclasses implement learn()."""

    q = None

    def __init__(self, config: AgentConfig, n_actions: int, seed=None):
        self.config = config
        self.n_actions = n_actions
        self.rng = np.random.default_rng(seed)
        self.env: Optional[Env] = None
        self.obs: Optional[np.ndarray] = None
        self.steps = 0
        self.episode_step = 0
        self.episode_return = 0.0
        self.completed_returns: list[float] = []
        self.last_transition: Optional[Transition] = None

    def attach(self, env: Env) -> None:
        """Start a fresh episode in env (used when the training room changes)."""
        self.env = env
        self.obs = env.reset()
        self.episode_step = 0
        self.episode_return = 0.0

    def greedy(self, obs) -> int:
        return int(np.argmax(self.q.forward(obs)[0]))

    def act(self, obs) -> int:
        if self.rng.random() < self.config.epsilon:
            return int(self.rng.integers(self.n_actions))
        return self.greedy(obs)

    def step(self, env: Optional[Env] = None) -> StepResult:
        if env is not None and env is not self.env:
            self.attach(env)
        action = self.act(self.obs)
        res = self.env.step(action)
        tr = Transition(self.obs, action, res.reward, res.obs, res.terminal, self.episode_step)
        self.last_transition = tr
        self.steps += 1
        self.learn(tr)
        self.episode_return += res.reward
        self.episode_step += 1
        if res.terminal or res.truncated:
            self.completed_returns.append(self.episode_return)
            self.obs = self.env.reset()
            self.episode_step = 0
            self.episode_return = 0.0
        else:
            self.obs = res.obs
        return res

    def learn(self, tr: Transition) -> None:
        raise NotImplementedError


class TileCodingAgent(Agent):
    """Online semi-gradient Q-learning on tile features with a constant step size."""

    def __init__(self, config: AgentConfig, n_actions: int = 4, seed=None):
        super().__init__(config, n_actions, seed)
        self.q = TileCoderQ(n_actions)
        self.alpha = config.tc_step / self.q.n_tilings

    def learn(self, tr: Transition) -> None:
        idx = self.q.active(tr.obs)[0]
        value = self.q.weights[tr.action, idx].sum()
        target = tr.reward
        if not tr.terminal:
            target += self.config.gamma * self.q.forward(tr.next_obs)[0].max()
        delta = target - value
        if delta != 0.0:
            self.q.weights[tr.action, idx] += self.alpha * delta


BlockHook = Callable[[str, MlpQ], None]


class DQNAgent(Agent):
    """Semi-gradient Q-learning with replay and an optional target network.

    With ``config.kind == "sbcd"`` each update is split in two: the hidden
    layers (RLN block) move first with step size ``lr_rln``, then the linear
    head (VLN block) moves with ``lr_vln`` using the already-updated hidden
    layers.  ``srnn_lambda > 0`` adds the sparsity penalty to the RLN block.
    ``on_block_update`` is called after each block with ("rln" | "vln" |
    "full", q).
    """

    def __init__(self, config: AgentConfig, obs_dim: int, n_actions: int, seed=None):
        super().__init__(config, n_actions, seed)
        init_rng, self.rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
        self.q = MlpQ(obs_dim, n_actions, config.hidden, seed=init_rng)
        self.target = self.q.copy() if config.target_freq > 0 else None
        self.buffer = ReplayBuffer(config.buffer_size, obs_dim)
        if config.kind == "sbcd":
            self.opt_rln = Optimizer(config.optimizer, config.lr_rln)
            self.opt_vln = Optimizer(config.optimizer, config.lr_vln)
        elif config.kind == "dqn":
            self.opt = Optimizer(config.optimizer, config.lr)
        else:
            raise ValueError(f"DQNAgent cannot run kind {config.kind!r}")
        self.on_block_update: Optional[BlockHook] = None
        self.updates = 0

    def bootstrap_net(self) -> MlpQ:
        return self.target if self.target is not None else self.q

    def targets(self, rewards, next_obs, terminals) -> np.ndarray:
        nxt = self.bootstrap_net().forward(next_obs).max(axis=1)
        return rewards + self.config.gamma * np.where(terminals, 0.0, nxt)

    def _td_grads(self, obs, actions, y) -> list[np.ndarray]:
        """Gradient of 0.5 * mean (y - Q(s, a))^2 with y held fixed."""
        cache = self.q.forward_cache(obs)
        rows = np.arange(obs.shape[0])
        delta = y - cache.out[rows, actions]
        d_out = np.zeros_like(cache.out)
        d_out[rows, actions] = -delta / obs.shape[0]
        return self.q.backward_cache(cache, d_out)

    def update(self, obs, actions, rewards, next_obs, terminals) -> None:
        y = self.targets(rewards, next_obs, terminals)
        params = self.q.params
        if self.config.kind == "dqn":
            self.opt.apply(params, self._td_grads(obs, actions, y))
            self._notify("full")
            return
        grads = self._td_grads(obs, actions, y)
        rln_grads = [grads[i] for i in RLN]
        if self.config.srnn_lambda > 0:
            _, pen = srnn_penalty(self.q, obs, self.config.srnn_lambda, self.config.srnn_beta)
            rln_grads = [g + p for g, p in zip(rln_grads, pen)]
        self.opt_rln.apply([params[i] for i in RLN], rln_grads)
        self._notify("rln")
        grads = self._td_grads(obs, actions, y)
        self.opt_vln.apply([params[i] for i in VLN], [grads[i] for i in VLN])
        self._notify("vln")

    def _notify(self, block: str) -> None:
        if self.on_block_update is not None:
            self.on_block_update(block, self.q)

    def learn(self, tr: Transition) -> None:
        self.buffer.add(tr)
        if len(self.buffer) >= self.config.batch_size:
            idx = self.buffer.sample_indices(self.rng, self.config.batch_size)
            self.update(*self.buffer.batch(idx))
            self.updates += 1
        freq = self.config.target_freq
        if freq > 0 and self.steps % freq == 0:
            self.target = self.q.copy()


def make_agent(config: AgentConfig, env: Env, seed=None) -> Agent:
    if config.kind == "tile":
        return TileCodingAgent(config, env.n_actions, seed)
    return DQNAgent(config, env.obs_dim, env.n_actions, seed)
