"""Study environments: Two-Rooms, Cart-pole, and a finite-MDP simulator.

Each environment is written around a vectorised core so that rollouts used
for optimality-residual estimates can be batched:

    sample_start(rng, n)               -> states (n, k)
    transition(states, actions, rng)   -> next_states, rewards, terminals
    observe(states)                    -> observations (n, obs_dim)

The single-episode API (reset / step / snapshot / restore) is layered on top
and is what the agents use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tabular import TabularMdp


@dataclass(frozen=True)
class StepResult:
    obs: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


@dataclass(frozen=True)
class EnvSnapshot:
    state: np.ndarray
    t: int
    rng_state: dict


class Env:
    n_actions: int
    obs_dim: int
    max_steps: int
    deterministic: bool

    def __init__(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self._state: np.ndarray | None = None
        self._t = 0

    # vectorised core, overridden by subclasses
    def sample_start(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def transition(self, states, actions, rng):
        raise NotImplementedError

    def observe(self, states) -> np.ndarray:
        raise NotImplementedError

    def reset(self) -> np.ndarray:
        self._state = self.sample_start(self.rng, 1)
        self._t = 0
        return self.observe(self._state)[0]

    def step(self, action: int) -> StepResult:
        if self._state is None:
            raise RuntimeError("call reset() before step()")
        if not 0 <= int(action) < self.n_actions:
            raise ValueError(f"action {action} out of range [0, {self.n_actions})")
        nxt, reward, term = self.transition(self._state, np.array([int(action)]), self.rng)
        self._state = nxt
        self._t += 1
        terminal = bool(term[0])
        truncated = (not terminal) and self._t >= self.max_steps
        return StepResult(self.observe(nxt)[0], float(reward[0]), terminal, truncated)

    @property
    def state(self) -> np.ndarray:
        return self._state[0].copy()

    def snapshot(self) -> EnvSnapshot:
        if self._state is None:
            raise RuntimeError("nothing to snapshot before reset()")
        return EnvSnapshot(self._state.copy(), self._t, self.rng.bit_generator.state)

    def restore(self, snap: EnvSnapshot) -> None:
        self._state = snap.state.copy()
        self._t = snap.t
        self.rng.bit_generator.state = snap.rng_state

    def config(self) -> dict:
        raise NotImplementedError


# actions: up, down, left, right
_MOVES = np.array([[0, 1], [0, -1], [-1, 0], [1, 0]])


class TwoRooms(Env):
    """One room of the Two-Rooms task on a size x size grid.

    Room 0 starts at (0, 0) with its goal at the top-right corner; room 1 is
    mirrored.  Moves off the grid are no-ops and every step costs -1, the one
    entering the goal included; nothing accrues after the goal, so the optimal
    return is -18.  Observation: (x, y) scaled to [0, 1] plus the room flag.
    """

    n_actions = 4
    obs_dim = 3
    deterministic = True

    def __init__(self, room: int = 0, size: int = 10, max_steps: int = 200, seed=None):
        if room not in (0, 1):
            raise ValueError(f"room must be 0 or 1, got {room!r}")
        super().__init__(seed)
        self.room = room
        self.size = size
        self.max_steps = max_steps
        far = size - 1
        self.start = np.array([0, 0]) if room == 0 else np.array([far, far])
        self.goal = np.array([far, far]) if room == 0 else np.array([0, 0])

    def sample_start(self, rng, n):
        return np.tile(self.start, (n, 1))

    def transition(self, states, actions, rng):
        nxt = np.clip(states + _MOVES[actions], 0, self.size - 1)
        at_goal = np.all(nxt == self.goal, axis=1)
        return nxt, np.full(len(nxt), -1.0), at_goal

    def observe(self, states):
        states = np.asarray(states)
        obs = np.empty((states.shape[0], 3))
        obs[:, :2] = states / (self.size - 1)
        obs[:, 2] = self.room
        return obs

    def config(self):
        return {"name": "two_rooms", "room": self.room, "size": self.size, "max_steps": self.max_steps}

    def finite_model(self):
        """Enumerated dynamics: (states (N, 2), next index (N, A), rewards (N, A), terminal (N, A))."""
        xs, ys = np.meshgrid(np.arange(self.size), np.arange(self.size), indexing="ij")
        states = np.stack([xs.ravel(), ys.ravel()], axis=1)
        n = states.shape[0]
        rep = np.repeat(states, self.n_actions, axis=0)
        acts = np.tile(np.arange(self.n_actions), n)
        nxt, rewards, term = self.transition(rep, acts, None)
        next_idx = (nxt[:, 0] * self.size + nxt[:, 1]).reshape(n, self.n_actions)
        return states, next_idx, rewards.reshape(n, -1), term.reshape(n, -1)

    def state_index(self, states) -> np.ndarray:
        states = np.asarray(states)
        return states[:, 0] * self.size + states[:, 1]


class CartPole(Env):
    """Classic cart-pole with Euler integration and the customary constants."""

    n_actions = 2
    obs_dim = 4
    deterministic = True

    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5  # half the pole length
    force_mag = 10.0
    tau = 0.02
    theta_limit = 12 * 2 * math.pi / 360
    x_limit = 2.4

    def __init__(self, seed=None, max_steps: int = 500):
        super().__init__(seed)
        self.max_steps = max_steps
        self.total_mass = self.masspole + self.masscart
        self.polemass_length = self.masspole * self.length

    def sample_start(self, rng, n):
        return rng.uniform(-0.05, 0.05, size=(n, 4))

    def transition(self, states, actions, rng):
        x, x_dot, theta, theta_dot = states.T
        force = np.where(actions == 1, self.force_mag, -self.force_mag)
        cos, sin = np.cos(theta), np.sin(theta)
        temp = (force + self.polemass_length * theta_dot ** 2 * sin) / self.total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos ** 2 / self.total_mass))
        x_acc = temp - self.polemass_length * theta_acc * cos / self.total_mass
        nxt = np.stack([
            x + self.tau * x_dot,
            x_dot + self.tau * x_acc,
            theta + self.tau * theta_dot,
            theta_dot + self.tau * theta_acc,
        ], axis=1)
        done = (np.abs(nxt[:, 0]) > self.x_limit) | (np.abs(nxt[:, 2]) > self.theta_limit)
        return nxt, np.ones(states.shape[0]), done

    def observe(self, states):
        return np.array(states, dtype=float)

    def config(self):
        return {"name": "cartpole", "max_steps": self.max_steps}


class TabularEnv(Env):
    """Simulator for a TabularMdp with start distribution nu; observation is [s]."""

    obs_dim = 1
    deterministic = False

    def __init__(self, mdp: TabularMdp, nu, seed=None, max_steps: int = 10 ** 9):
        super().__init__(seed)
        self.mdp = mdp
        self.nu = np.asarray(nu, dtype=float)
        self.n_actions = mdp.n_actions
        self.max_steps = max_steps
        self._cum = np.cumsum(mdp.trans, axis=2)
        self._cum[:, :, -1] = 1.0
        self.deterministic = bool(np.all((mdp.trans == 0) | (mdp.trans == 1)))

    def sample_start(self, rng, n):
        return rng.choice(self.mdp.n_states, size=(n, 1), p=self.nu)

    def transition(self, states, actions, rng):
        s = states[:, 0]
        u = rng.random(s.shape[0])
        cum = self._cum[s, actions]
        nxt = (u[:, None] >= cum).sum(axis=1)
        rewards = self.mdp.reward[s, actions, nxt]
        return nxt[:, None], rewards, np.zeros(s.shape[0], dtype=bool)

    def observe(self, states):
        return np.asarray(states, dtype=float)

    def config(self):
        return {"name": "tabular", "n_states": self.mdp.n_states, "n_actions": self.mdp.n_actions}


def two_rooms_new(room: int, **kwargs) -> TwoRooms:
    return TwoRooms(room, **kwargs)


def cartpole_new(seed=None, **kwargs) -> CartPole:
    return CartPole(seed=seed, **kwargs)


def make_env(name: str, seed=None, room: int = 0) -> Env:
    if name == "two_rooms":
        return TwoRooms(room, seed=seed)
    if name == "cartpole":
        return CartPole(seed=seed)
    raise ValueError(f"unknown environment {name!r}")


def sample_start_pairs(env: Env, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """n draws of (s, a) with s from the start distribution and a uniform."""
    states = env.sample_start(rng, n)
    actions = rng.integers(env.n_actions, size=n)
    return states, actions


def start_distribution_sampler(env: Env, seed=None) -> Iterator[tuple[EnvSnapshot, int]]:
    """Endless stream of (snapshot at a fresh start state, uniform action)."""
    rng = np.random.default_rng(seed)
    while True:
        states, actions = sample_start_pairs(env, rng, 1)
        yield EnvSnapshot(states.copy(), 0, env.rng.bit_generator.state), int(actions[0])
