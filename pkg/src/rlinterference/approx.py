"""Action-value approximators and optimizers, written directly against numpy.

All approximators share a small duck-typed surface used by agents and
measures:

    n_actions          number of actions
    forward(obs)       (B, obs_dim) -> (B, n_actions); a single observation
                       vector is promoted to a batch of one
    copy()             independent deep copy

``MlpQ`` additionally exposes exact reverse-mode gradients and the split of
its parameters into the representation block (hidden layers) and the value
block (linear head).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RLN = (0, 1, 2, 3)  # W1, b1, W2, b2
VLN = (4, 5)  # W3, b3
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


def _batch(obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    return obs[None, :] if obs.ndim == 1 else obs


def he_init(shape: tuple[int, int], seed) -> tuple[np.ndarray, np.ndarray]:
    """He-normal weights of shape (fan_in, fan_out) and zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fan_in, fan_out = shape
    weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return weights, np.zeros(fan_out)


@dataclass
class ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    out: np.ndarray


class MlpQ:
    """Two hidden ReLU layers and a linear head: [obs_dim, h, h, n_actions]."""

    def __init__(self, obs_dim: int, n_actions: int, hidden: int = 128, seed=0, params=None):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.hidden = hidden
        if params is not None:
            self.params = [np.array(p, dtype=float) for p in params]
            self._check_shapes()
            return
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params = []
        for shape in ((obs_dim, hidden), (hidden, hidden), (hidden, n_actions)):
            self.params.extend(he_init(shape, rng))

    def _check_shapes(self):
        expected = [(self.obs_dim, self.hidden), (self.hidden,), (self.hidden, self.hidden),
                    (self.hidden,), (self.hidden, self.n_actions), (self.n_actions,)]
        got = [p.shape for p in self.params]
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match architecture {expected}")

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "MlpQ":
        return MlpQ(self.obs_dim, self.n_actions, self.hidden, params=self.params)

    def forward_cache(self, obs) -> ForwardCache:
        x = _batch(obs)
        if x.shape[1] != self.obs_dim:
            raise ValueError(f"observation dim {x.shape[1]} != {self.obs_dim}")
        w1, b1, w2, b2, w3, b3 = self.params
        z1 = x @ w1 + b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ w2 + b2
        h2 = np.maximum(z2, 0.0)
        return ForwardCache(x, z1, h1, z2, h2, h2 @ w3 + b3)

    def forward(self, obs) -> np.ndarray:
        return self.forward_cache(obs).out

    __call__ = forward

    def features(self, obs) -> np.ndarray:
        """Last hidden layer activations phi_beta(s)."""
        return self.forward_cache(obs).h2

    def backward_cache(self, cache: ForwardCache, d_out, d_h2=None) -> list[np.ndarray]:
        """Gradients of sum(d_out * out) (+ sum(d_h2 * h2)) w.r.t. every parameter.

        The ReLU derivative at exactly zero is taken as zero.
        """
        w1, _, w2, _, w3, _ = self.params
        d_out = np.asarray(d_out, dtype=float)
        g_w3 = cache.h2.T @ d_out
        g_b3 = d_out.sum(axis=0)
        dh2 = d_out @ w3.T
        if d_h2 is not None:
            dh2 = dh2 + d_h2
        dz2 = dh2 * (cache.z2 > 0)
        g_w2 = cache.h1.T @ dz2
        g_b2 = dz2.sum(axis=0)
        dz1 = (dz2 @ w2.T) * (cache.z1 > 0)
        g_w1 = cache.x.T @ dz1
        g_b1 = dz1.sum(axis=0)
        return [g_w1, g_b1, g_w2, g_b2, g_w3, g_b3]

    def backward(self, obs, action: int) -> list[np.ndarray]:
        """Gradient of Q(obs, action) with respect to all parameters."""
        cache = self.forward_cache(obs)
        if cache.x.shape[0] != 1:
            raise ValueError("backward expects a single observation")
        d_out = np.zeros((1, self.n_actions))
        d_out[0, action] = 1.0
        return self.backward_cache(cache, d_out)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def digest(self) -> str:
        return hashlib.sha256(self.flat().tobytes()).hexdigest()

    def to_dict(self) -> dict:
        return {"kind": "mlp", "obs_dim": self.obs_dim, "n_actions": self.n_actions,
                "hidden": self.hidden, "params": {n: p.tolist() for n, p in zip(PARAM_NAMES, self.params)}}

    @classmethod
    def from_dict(cls, data: dict) -> "MlpQ":
        params = [np.asarray(data["params"][n], dtype=float) for n in PARAM_NAMES]
        return cls(data["obs_dim"], data["n_actions"], data["hidden"], params=params)


class TileCoderQ:
    """Linear Q over tile-coded Two-Rooms observations (x, y, room).

    Each of the 16 tilings lays a 4x4 grid of tiles over [0, 1]^2, shifted by
    k/16 of a tile width on both axes, which needs a 5x5 index range per
    tiling.  Each room owns its own index block, so the rooms share nothing.
    """

    def __init__(self, n_actions: int = 4, n_tilings: int = 16, n_tiles: int = 4, n_rooms: int = 2):
        self.n_actions = n_actions
        self.n_tilings = n_tilings
        self.n_tiles = n_tiles
        self.n_rooms = n_rooms
        self.side = n_tiles + 1
        self.per_room = n_tilings * self.side ** 2
        self.weights = np.zeros((n_actions, n_rooms * self.per_room))
        self._offsets = np.arange(n_tilings) / n_tilings / n_tiles

    def copy(self) -> "TileCoderQ":
        other = TileCoderQ(self.n_actions, self.n_tilings, self.n_tiles, self.n_rooms)
        other.weights = self.weights.copy()
        return other

    def active(self, obs) -> np.ndarray:
        """(B, n_tilings) active feature indices."""
        x = _batch(obs)
        if x.shape[1] != 3:
            raise ValueError("tile coder expects (x, y, room) observations")
        shifted = x[:, None, :2] + self._offsets[None, :, None]
        tiles = np.floor(shifted * self.n_tiles).astype(int)
        tiles = np.clip(tiles, 0, self.side - 1)
        room = x[:, 2].astype(int)
        return (room[:, None] * self.per_room + np.arange(self.n_tilings)[None, :] * self.side ** 2
                + tiles[:, :, 0] * self.side + tiles[:, :, 1])

    def forward(self, obs) -> np.ndarray:
        idx = self.active(obs)
        return self.weights[:, idx].sum(axis=2).T

    __call__ = forward

    def digest(self) -> str:
        return hashlib.sha256(self.weights.tobytes()).hexdigest()

    def to_dict(self) -> dict:
        return {"kind": "tile", "n_actions": self.n_actions, "n_tilings": self.n_tilings,
                "n_tiles": self.n_tiles, "n_rooms": self.n_rooms, "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "TileCoderQ":
        q = cls(data["n_actions"], data["n_tilings"], data["n_tiles"], data["n_rooms"])
        q.weights = np.asarray(data["weights"], dtype=float)
        return q


class TableQ:
    """Lookup-table Q for tabular environments; observations are [state_index]."""

    def __init__(self, values):
        self.values = np.array(values, dtype=float)
        self.n_actions = self.values.shape[1]

    def copy(self) -> "TableQ":
        return TableQ(self.values)

    def forward(self, obs) -> np.ndarray:
        states = _batch(obs)[:, 0].astype(int)
        return self.values[states]

    __call__ = forward


@dataclass
class Optimizer:
    """SGD, Adam or RMSProp over a list of parameter arrays (updated in place)."""

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def apply(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
            raise ValueError("parameter and gradient shapes differ")
        if self.kind != "sgd" and not self.v:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if self.v and any(p.shape != v.shape for p, v in zip(params, self.v)):
            raise ValueError("optimizer state does not match parameters")
        self.t += 1
        if self.kind == "sgd":
            for p, g in zip(params, grads):
                p -= self.lr * g
        elif self.kind == "adam":
            c1 = 1.0 - self.beta1 ** self.t
            c2 = 1.0 - self.beta2 ** self.t
            for p, g, m, v in zip(params, grads, self.m, self.v):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        else:
            for p, g, v in zip(params, grads, self.v):
                v *= self.decay
                v += (1.0 - self.decay) * g * g
                p -= self.lr * g / (np.sqrt(v) + self.eps)


def skl(x, beta: float = 0.1) -> np.ndarray:
    """KL divergence between exponentials with means x and beta (zero at x = beta)."""
    r = np.asarray(x, dtype=float) / beta
    return r - np.log(r) - 1.0


def srnn_penalty(q: MlpQ, obs, lam: float, beta: float = 0.1,
                 floor: float = 1e-6) -> tuple[float, list[np.ndarray]]:
    """Sparsity penalty lam * sum_j SKL(mean_i phi_j(s_i)) and its gradient.

    The gradient is returned for the representation parameters (W1, b1, W2, b2)
    only.  Units whose mean activation is zero are evaluated at ``floor``.
    """
    cache = q.forward_cache(obs)
    n = cache.x.shape[0]
    if n == 0:
        raise ValueError("srnn_penalty needs a non-empty batch")
    mean_act = np.maximum(cache.h2.mean(axis=0), floor)
    value = float(lam * skl(mean_act, beta).sum())
    d_mean = lam * (1.0 / beta - 1.0 / mean_act)
    d_h2 = np.broadcast_to(d_mean / n, cache.h2.shape)
    grads = q.backward_cache(cache, np.zeros_like(cache.out), d_h2=d_h2)
    return value, [grads[i] for i in RLN]


def save_checkpoint(q, path: Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(q.to_dict()))
    tmp.replace(path)


def load_checkpoint(path: Path):
    data = json.loads(Path(path).read_text())
    return {"mlp": MlpQ, "tile": TileCoderQ}[data["kind"]].from_dict(data)
