"""Interference measures for control.

Expected interference (EI) of an update is the change in optimality residual
between the parameters before and after the update.  The optimality residual
is estimated from greedy-policy rollouts started from (s, a) pairs drawn from
the start-state distribution with uniform actions.  Because Q* is the same
for both parameter sets it cancels in the difference, so the rollout
estimator reports -E_d[Q^pi] as an OR proxy and the EI is exact in its
differences.

The approximate EI (AEI) replaces rollouts with the change in mean squared
TD error over an evaluation set of stored transitions.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .approx import MlpQ, Optimizer, TableQ, TileCoderQ
from .envs import Env, sample_start_pairs
from .metrics import percentile

STRATEGIES = ("buffer", "reservoir", "discounted")


def default_horizon(gamma: float, tail: float = 1e-4) -> int:
    """Smallest H with gamma**H < tail (917 at gamma = 0.99)."""
    h = math.ceil(math.log(tail) / math.log(gamma))
    while gamma ** h >= tail:
        h += 1
    return h


# ---------------------------------------------------------------- rollouts


@dataclass(frozen=True)
class StartPairs:
    states: np.ndarray
    actions: np.ndarray

    @property
    def key(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.states, dtype=float).tobytes())
        h.update(np.ascontiguousarray(self.actions, dtype=np.int64).tobytes())
        return h.hexdigest()

    def __len__(self):
        return len(self.actions)


def sample_pairs(env: Env, n_pairs: int, seed) -> StartPairs:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    states, actions = sample_start_pairs(env, rng, n_pairs)
    return StartPairs(states, actions)


def _greedy(q, obs) -> np.ndarray:
    return np.argmax(q.forward(obs), axis=1)


def rollout_returns(q, env: Env, states, first_actions, gamma: float, horizon: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Discounted returns of batched rollouts that follow the greedy policy of q.

    ``first_actions`` forces the first action of each rollout; pass None to act
    greedily from the start.  Rollouts stop at a terminal state or after
    ``horizon`` steps.
    """
    states = np.array(states, copy=True)
    n = states.shape[0]
    returns = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    actions = (np.asarray(first_actions, dtype=int).copy() if first_actions is not None
               else _greedy(q, env.observe(states)))
    discount = 1.0
    for t in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        if t > 0:
            actions[idx] = _greedy(q, env.observe(states[idx]))
        nxt, rewards, term = env.transition(states[idx], actions[idx], rng)
        returns[idx] += discount * rewards
        states[idx] = nxt
        alive[idx[term]] = False
        discount *= gamma
    return returns


def finite_pair_returns(q, env: Env, states, first_actions, gamma: float, horizon: int) -> np.ndarray:
    """Horizon-truncated greedy returns by backward recursion over an enumerable state set.

    Gives the same numbers as ``rollout_returns`` on deterministic finite
    environments at a cost independent of how long the policy wanders.
    """
    all_states, next_idx, rewards, term = env.finite_model()
    policy = _greedy(q, env.observe(all_states))
    rows = np.arange(len(policy))
    sink = len(policy)  # absorbing zero-reward state standing in for termination
    step_value = np.append(rewards[rows, policy], 0.0)
    step_next = np.append(np.where(term[rows, policy], sink, next_idx[rows, policy]), sink)
    v = _k_step_values(step_value, step_next, gamma, horizon - 1) if horizon > 0 else None
    idx = env.state_index(states)
    if horizon == 0:
        return np.zeros(len(idx))
    a = policy[idx] if first_actions is None else np.asarray(first_actions, dtype=int)
    nxt = np.where(term[idx, a], sink, next_idx[idx, a])
    return rewards[idx, a] + gamma * v[nxt]


def _k_step_values(step_value: np.ndarray, step_next: np.ndarray, gamma: float, k: int) -> np.ndarray:
    """k-step discounted return of a deterministic chain by path doubling.

    Uses V_{a+b}(s) = V_a(s) + gamma^a V_b(N_a(s)) and N_{a+b} = N_b(N_a(s)).
    """
    total = np.zeros_like(step_value)
    total_next = np.arange(len(step_value))
    total_len = 0
    block, block_next, block_len = step_value.copy(), step_next.copy(), 1
    while k:
        if k & 1:
            total = total + gamma ** total_len * block[total_next]
            total_next = block_next[total_next]
            total_len += block_len
        k >>= 1
        if k:
            block = block + gamma ** block_len * block[block_next]
            block_next = block_next[block_next]
            block_len *= 2
    return total


def _unique_rows(states: np.ndarray, actions: np.ndarray | None):
    key = states.reshape(states.shape[0], -1).astype(float)
    if actions is not None:
        key = np.concatenate([key, np.asarray(actions, dtype=float)[:, None]], axis=1)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    return first, inverse.reshape(-1)


@dataclass
class ORResult:
    or_proxy: float
    pair_returns: np.ndarray  # mean rollout return per (s, a) pair
    key: str
    seed: int


def pair_returns(q, env: Env, states, actions, n_rollouts: int, horizon: int, gamma: float,
                 seed: int) -> np.ndarray:
    """Mean return of n_rollouts rollouts per start pair, shape (n_pairs,).

    Deterministic environments run each distinct pair once, since repeated
    rollouts would be identical.
    """
    rng = np.random.default_rng(seed)
    if env.deterministic and hasattr(env, "finite_model"):
        return finite_pair_returns(q, env, states, actions, gamma, horizon)
    if env.deterministic:
        first, inverse = _unique_rows(states, actions)
        acts = None if actions is None else np.asarray(actions)[first]
        ret = rollout_returns(q, env, states[first], acts, gamma, horizon, rng)
        return ret[inverse]
    reps = np.repeat(states, n_rollouts, axis=0)
    acts = None if actions is None else np.repeat(actions, n_rollouts)
    ret = rollout_returns(q, env, reps, acts, gamma, horizon, rng)
    return ret.reshape(-1, n_rollouts).mean(axis=1)


def estimate_or(q, env: Env, pairs: StartPairs, n_rollouts: int = 10, horizon: int | None = None,
                gamma: float = 0.99, seed: int = 0) -> ORResult:
    """OR proxy -E_d[Q^pi(S, A)] for the greedy policy of q, by rollouts."""
    if horizon is None:
        horizon = default_horizon(gamma)
    ret = pair_returns(q, env, pairs.states, pairs.actions, n_rollouts, horizon, gamma, seed)
    return ORResult(-float(ret.mean()), ret, pairs.key, seed)


class MismatchedSamples(ValueError):
    pass


def expected_interference(or_before: ORResult, or_after: ORResult) -> float:
    """Signed EI = OR(after) - OR(before); positive means the update degraded the policy."""
    if or_before.key != or_after.key or or_before.seed != or_after.seed:
        raise MismatchedSamples("EI needs both OR estimates on the same pairs and rollout seeds")
    return or_after.or_proxy - or_before.or_proxy


@dataclass
class EIEstimate:
    ei: float
    se: float
    diffs: np.ndarray
    or_before: ORResult
    or_after: ORResult


def measure_ei(q_before, q_after, env: Env, pairs: StartPairs, n_rollouts: int = 10,
               horizon: int | None = None, gamma: float = 0.99, seed: int = 0) -> EIEstimate:
    """EI with common random numbers, plus its standard error over pairs."""
    before = estimate_or(q_before, env, pairs, n_rollouts, horizon, gamma, seed)
    after = estimate_or(q_after, env, pairs, n_rollouts, horizon, gamma, seed)
    diffs = before.pair_returns - after.pair_returns
    se = float(diffs.std(ddof=1) / math.sqrt(diffs.size)) if diffs.size > 1 else math.nan
    return EIEstimate(expected_interference(before, after), se, diffs, before, after)


def offline_return(q, env: Env, n_rollouts: int, seed: int, gamma: float = 1.0) -> float:
    """Mean episodic return of the frozen greedy policy from fresh start states."""
    rng = np.random.default_rng(seed)
    states = env.sample_start(rng, n_rollouts)
    ret = pair_returns(q, env, states, None, 1, env.max_steps, gamma, seed + 1)
    return float(ret.mean())


# ------------------------------------------------------------- TD-error proxy


def td_errors(q, obs, actions, rewards, next_obs, terminals, gamma: float) -> np.ndarray:
    rows = np.arange(len(actions))
    boot = q.forward(next_obs).max(axis=1)
    return rewards + gamma * np.where(terminals, 0.0, boot) - q.forward(obs)[rows, actions]


def td_error(q, tr, gamma: float) -> float:
    """delta = r + gamma max_a' Q(s', a') - Q(s, a); terminal transitions do not bootstrap."""
    value = q.forward(tr.obs)[0, tr.action]
    target = tr.reward if tr.terminal else tr.reward + gamma * q.forward(tr.next_obs)[0].max()
    return float(target - value)


class EvalSet:
    """Transitions used to evaluate TD errors for the approximate EI.

    buffer      most recent ``capacity`` transitions, uniform weights
    reservoir   uniform sample of everything seen, uniform weights
    discounted  reservoir contents re-weighted by (1 - gamma) gamma^t, where t
                is the step index of the transition inside its episode
    """

    def __init__(self, strategy: str, obs_dim: int, capacity: int = 1000, gamma: float = 0.99,
                 seed=None):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.strategy = strategy
        self.capacity = capacity
        self.gamma = gamma
        self.rng = np.random.default_rng(seed)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.episode_steps = np.zeros(capacity, dtype=int)
        self.size = 0
        self.items_seen = 0
        self._next = 0

    def __len__(self):
        return self.size

    def _store(self, i: int, tr) -> None:
        self.obs[i] = tr.obs
        self.next_obs[i] = tr.next_obs
        self.actions[i] = tr.action
        self.rewards[i] = tr.reward
        self.terminals[i] = tr.terminal
        self.episode_steps[i] = tr.episode_step

    def add(self, tr) -> None:
        if self.strategy == "buffer":
            self.items_seen += 1
            self._store(self._next, tr)
            self._next = (self._next + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
        else:
            reservoir_update(self, tr)

    def weights(self) -> np.ndarray:
        if self.strategy == "discounted":
            w = (1.0 - self.gamma) * self.gamma ** self.episode_steps[:self.size].astype(float)
        else:
            w = np.ones(self.size)
        return w / w.sum()

    def arrays(self):
        n = self.size
        return (self.obs[:n], self.actions[:n], self.rewards[:n], self.next_obs[:n],
                self.terminals[:n])


def reservoir_update(eval_set: EvalSet, tr) -> None:
    """Keep tr with probability capacity / items_seen, replacing a uniform victim."""
    eval_set.items_seen += 1
    if eval_set.size < eval_set.capacity:
        eval_set._store(eval_set.size, tr)
        eval_set.size += 1
        return
    j = int(eval_set.rng.integers(eval_set.items_seen))
    if j < eval_set.capacity:
        eval_set._store(j, tr)


def aei(q_prev, q_curr, eval_set: EvalSet, gamma: float = 0.99) -> float:
    """Weighted mean over the evaluation set of delta_curr^2 - delta_prev^2."""
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    data = eval_set.arrays()
    d_prev = td_errors(q_prev, *data, gamma)
    d_curr = td_errors(q_curr, *data, gamma)
    return float(eval_set.weights() @ (d_curr ** 2 - d_prev ** 2))


# ------------------------------------------------------------ summary stats


def _non_empty(series) -> np.ndarray:
    x = np.asarray(series, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("series must be non-empty")
    return x


def eti(series, alpha: float = 0.1) -> float:
    """Expected tail interference: mean of the values >= the (1 - alpha) percentile."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    x = _non_empty(series)
    cut = percentile(x, 1.0 - alpha)
    return float(np.mean(x[x >= cut]))


def interference_dispersion(series) -> float:
    """Interquartile range of the EI values."""
    x = _non_empty(series)
    return percentile(x, 0.75) - percentile(x, 0.25)


def grad_alignment(grad_i: Sequence[np.ndarray], grad_j: Sequence[np.ndarray]) -> float:
    """Dot product of two per-sample loss gradients; > 0 reads as positive generalisation."""
    if len(grad_i) != len(grad_j) or any(np.shape(a) != np.shape(b) for a, b in zip(grad_i, grad_j)):
        raise ValueError("gradient shapes differ")
    return float(sum(np.vdot(a, b) for a, b in zip(grad_i, grad_j)))


# --------------------------------------------------------------- records


@dataclass
class InterferenceRecord:
    step: int
    ei: float
    aei: dict = field(default_factory=dict)
    or_before: float = 0.0
    or_after: float = 0.0


class InterferenceSeries(list):
    """InterferenceRecords with strictly increasing steps."""

    def append(self, rec: InterferenceRecord) -> None:
        if self and rec.step <= self[-1].step:
            raise ValueError(f"step {rec.step} does not follow {self[-1].step}")
        super().append(rec)

    def values(self) -> np.ndarray:
        return np.array([r.ei for r in self])


# ------------------------------------------------------------ OPE baseline


def _regress(q, opt: Optimizer | None, obs, actions, y, lr: float) -> None:
    rows = np.arange(len(actions))
    if isinstance(q, MlpQ):
        cache = q.forward_cache(obs)
        d_out = np.zeros_like(cache.out)
        d_out[rows, actions] = -(y - cache.out[rows, actions]) / len(actions)
        opt.apply(q.params, q.backward_cache(cache, d_out))
    elif isinstance(q, TableQ):
        s = obs[:, 0].astype(int)
        err = np.zeros_like(q.values)
        np.add.at(err, (s, actions), y - q.values[s, actions])
        count = np.zeros_like(q.values)
        np.add.at(count, (s, actions), 1.0)
        q.values += lr * err / np.maximum(count, 1.0)
    elif isinstance(q, TileCoderQ):
        idx = q.active(obs)
        err = (y - q.forward(obs)[rows, actions]) * lr / q.n_tilings
        np.add.at(q.weights, (actions[:, None], idx), err[:, None])
    else:
        raise TypeError(f"cannot regress {type(q).__name__}")


def _sarsa_fit(policy_q, data, epochs: int, gamma: float, lr: float, batch_size: int,
               rng: np.random.Generator):
    obs, actions, rewards, next_obs, terminals = data
    q_hat = policy_q.copy()
    next_actions = _greedy(policy_q, next_obs)
    opt = Optimizer("adam", lr) if isinstance(q_hat, MlpQ) else None
    n = len(actions)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            b = order[start:start + batch_size]
            boot = q_hat.forward(next_obs[b])[np.arange(len(b)), next_actions[b]]
            y = rewards[b] + gamma * np.where(terminals[b], 0.0, boot)
            _regress(q_hat, opt, obs[b], actions[b], y, lr)
    return q_hat


def ope_ei_baseline(buffer, q_prev, q_curr, d_obs, d_actions, epochs: int = 10, gamma: float = 0.99,
                    lr: float = 1e-3, batch_size: int = 64, seed: int = 0) -> float:
    """EI estimated by off-policy SARSA evaluation of both greedy policies.

    Each evaluation network starts from the parameters whose greedy policy it
    evaluates; the result is the mean over the d-samples of
    Q_hat^{pi_prev} - Q_hat^{pi_curr}.  ``buffer`` is anything exposing
    ``batch(indices)`` and ``len`` (a ReplayBuffer) or an EvalSet.
    """
    if len(buffer) == 0:
        raise ValueError("buffer is empty")
    data = buffer.arrays() if isinstance(buffer, EvalSet) else buffer.batch(buffer.ordered_indices())
    fits = []
    for q in (q_prev, q_curr):
        fits.append(_sarsa_fit(q, data, epochs, gamma, lr, batch_size, np.random.default_rng(seed)))
    rows = np.arange(len(d_actions))
    prev_vals = fits[0].forward(d_obs)[rows, d_actions]
    curr_vals = fits[1].forward(d_obs)[rows, d_actions]
    return float(np.mean(prev_vals - curr_vals))


def mean_std_err(values: Iterable[float]) -> tuple[float, float]:
    x = np.asarray(list(values), dtype=float)
    if x.size < 2:
        return float(x.mean()) if x.size else math.nan, math.nan
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))
