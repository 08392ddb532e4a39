"""Exact finite-MDP engine.

Bellman operators, exact solvers and numerical certificates for the
Bellman-error bounds on the optimality residual.  Everything here is dense
linear algebra and is meant for verification-sized problems (a few hundred
state-action pairs at most).

Conventions: state-action quantities are ``(n_states, n_actions)`` arrays; the
matrix forms flatten them row-major, so index ``s * n_actions + a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ContractViolation(ValueError):
    """Raised when an argument breaks an operation's precondition."""


class NumericalFailure(RuntimeError):
    """Raised when a linear solve or inversion misses its residual budget."""


@dataclass(frozen=True)
class TabularMdp:
    trans: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        trans = np.asarray(self.trans, dtype=float)
        reward = np.asarray(self.reward, dtype=float)
        if trans.ndim != 3 or trans.shape[0] != trans.shape[2]:
            raise ContractViolation(f"trans must be (S, A, S), got {trans.shape}")
        if reward.shape != trans.shape:
            raise ContractViolation(f"reward shape {reward.shape} != trans shape {trans.shape}")
        if np.any(trans < 0) or np.any(trans > 1):
            raise ContractViolation("transition probabilities must lie in [0, 1]")
        if np.max(np.abs(trans.sum(axis=2) - 1.0)) > 1e-12:
            raise ContractViolation("transition rows must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation(f"gamma must be in [0, 1), got {self.gamma}")
        object.__setattr__(self, "trans", trans)
        object.__setattr__(self, "reward", reward)

    @property
    def n_states(self) -> int:
        return self.trans.shape[0]

    @property
    def n_actions(self) -> int:
        return self.trans.shape[1]

    @property
    def expected_reward(self) -> np.ndarray:
        """r(s, a) = sum_s' Pr(s'|s,a) R(s,a,s')."""
        return np.einsum("ijk,ijk->ij", self.trans, self.reward)

    @property
    def p_matrix(self) -> np.ndarray:
        """P as an (SA x S) matrix."""
        return self.trans.reshape(self.n_states * self.n_actions, self.n_states)


@dataclass
class BoundReport:
    """Outcome of checking one bound on one MDP."""

    lhs: float
    rhs: float
    max_violation: float
    slack: float
    componentwise_violation: float = 0.0
    min_componentwise_slack: float = math.inf
    identity_residual: float = 0.0
    stochastic_error: float = 0.0
    concentration: float = math.nan
    vacuous: bool = False

    @property
    def holds(self) -> bool:
        return self.vacuous or (self.max_violation <= 1e-8 and self.componentwise_violation <= 1e-8)


@dataclass
class IdentityReport:
    expected_td_sq: float
    bellman_error_sq: float
    target_variance: float
    residual: float = field(init=False)

    def __post_init__(self):
        self.residual = abs(self.expected_td_sq - (self.bellman_error_sq + self.target_variance))


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float,
               deterministic: bool = False) -> TabularMdp:
    """Seeded random MDP: flat-Dirichlet transition rows, rewards uniform in [-1, 1]."""
    if deterministic:
        nxt = rng.integers(n_states, size=(n_states, n_actions))
        trans = np.zeros((n_states, n_actions, n_states))
        trans[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], nxt] = 1.0
    else:
        trans = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        # renormalise so rows pass the 1e-12 contract after float summation
        trans /= trans.sum(axis=2, keepdims=True)
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions, n_states))
    return TabularMdp(trans, reward, gamma)


def _check_q(mdp: TabularMdp, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ContractViolation(f"Q shape {q.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})")
    return q


def _check_policy(mdp: TabularMdp, pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ContractViolation(f"policy shape {pi.shape} does not match MDP")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-12:
        raise ContractViolation("policy rows must be distributions")
    return pi


def bellman_optimality(mdp: TabularMdp, q) -> np.ndarray:
    q = _check_q(mdp, q)
    target = mdp.reward + mdp.gamma * q.max(axis=1)[None, None, :]
    return np.einsum("ijk,ijk->ij", mdp.trans, target)


def bellman_policy(mdp: TabularMdp, q, pi) -> np.ndarray:
    q = _check_q(mdp, q)
    pi = _check_policy(mdp, pi)
    v = (pi * q).sum(axis=1)
    return mdp.expected_reward + mdp.gamma * mdp.trans @ v


def policy_matrix(pi: np.ndarray) -> np.ndarray:
    """Block-diagonal Pi^pi of shape (S x SA): row s holds pi(.|s) in its own block."""
    n_states, n_actions = pi.shape
    mat = np.zeros((n_states, n_states * n_actions))
    for s in range(n_states):
        mat[s, s * n_actions:(s + 1) * n_actions] = pi[s]
    return mat


def greedy_policy(q) -> np.ndarray:
    """Deterministic greedy policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return pi


def solve_q_star(mdp: TabularMdp, tol: float = 1e-10) -> np.ndarray:
    """Value iteration until ||Q - Q*||_inf < tol is guaranteed."""
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    if mdp.gamma == 0.0:
        return bellman_optimality(mdp, q)
    stop = tol * (1.0 - mdp.gamma) / mdp.gamma
    while True:
        q_next = bellman_optimality(mdp, q)
        if np.max(np.abs(q_next - q)) < stop:
            return q_next
        q = q_next


def _transition_operator(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """I - gamma P Pi^pi as an (SA x SA) matrix."""
    n = mdp.n_states * mdp.n_actions
    return np.eye(n) - mdp.gamma * mdp.p_matrix @ policy_matrix(pi)


def solve_q_pi(mdp: TabularMdp, pi) -> np.ndarray:
    """Exact Q^pi from (I - gamma P Pi^pi) Q = r by a dense solve."""
    pi = _check_policy(mdp, pi)
    op = _transition_operator(mdp, pi)
    r = mdp.expected_reward.reshape(-1)
    q = np.linalg.solve(op, r)
    residual = np.max(np.abs(op @ q - r))
    if residual > 1e-8:
        raise NumericalFailure(f"policy evaluation residual {residual:.3e} exceeds 1e-8")
    return q.reshape(mdp.n_states, mdp.n_actions)


def exact_q_star(mdp: TabularMdp) -> np.ndarray:
    """Q* to linear-solve precision: value iteration warm start, then policy iteration."""
    q = solve_q_star(mdp, tol=1e-6)
    pi = greedy_policy(q)
    for _ in range(10 * mdp.n_states * mdp.n_actions + 10):
        q = solve_q_pi(mdp, pi)
        improved = greedy_policy(q)
        # only switch when the gain is real, otherwise float noise can cycle
        gain = bellman_optimality(mdp, q) - q
        if np.max(gain) <= 1e-12 or np.array_equal(improved, pi):
            return q
        pi = improved
    return q


def lemma1_matrix(mdp: TabularMdp, pi, pi_star) -> np.ndarray:
    """A = (I - gamma P Pi^{pi*})^-1 + (I - gamma P Pi^pi)^-1.

    Raises NumericalFailure if either inverse misses the 1e-8 residual budget or
    if (1 - gamma)/2 A is not a stochastic matrix to within 1e-10.
    """
    pi = _check_policy(mdp, pi)
    pi_star = _check_policy(mdp, pi_star)
    n = mdp.n_states * mdp.n_actions
    total = np.zeros((n, n))
    for policy in (pi_star, pi):
        op = _transition_operator(mdp, policy)
        inv = np.linalg.inv(op)
        residual = np.max(np.abs(op @ inv - np.eye(n)))
        if residual > 1e-8:
            raise NumericalFailure(f"inversion residual {residual:.3e} exceeds 1e-8")
        total += inv
    scaled = 0.5 * (1.0 - mdp.gamma) * total
    if scaled.min() < -1e-10 or np.max(np.abs(scaled.sum(axis=1) - 1.0)) > 1e-10:
        raise NumericalFailure("(1 - gamma)/2 A is not stochastic")
    return total


def stochastic_error(mdp: TabularMdp, a_matrix: np.ndarray) -> float:
    scaled = 0.5 * (1.0 - mdp.gamma) * a_matrix
    return float(max(np.max(np.abs(scaled.sum(axis=1) - 1.0)), max(0.0, -scaled.min())))


def verify_lemma1(mdp: TabularMdp, q, d) -> BoundReport:
    """Check Q* - Q^pi <= A |TQ - Q| componentwise and under the weighting d.

    ``d`` is a non-negative (S, A) weighting.  The report also carries the
    residual of the proof identity (I - gamma P Pi^pi)(Q^pi - Q) = TQ - Q.
    """
    q = _check_q(mdp, q)
    d = np.asarray(d, dtype=float).reshape(-1)
    q_star = exact_q_star(mdp)
    pi = greedy_policy(q)
    pi_star = greedy_policy(q_star)
    q_pi = solve_q_pi(mdp, pi)
    residual = bellman_optimality(mdp, q) - q
    a_matrix = lemma1_matrix(mdp, pi, pi_star)

    lhs_vec = (q_star - q_pi).reshape(-1)
    rhs_vec = a_matrix @ np.abs(residual).reshape(-1)
    lhs, rhs = float(d @ lhs_vec), float(d @ rhs_vec)
    identity = _transition_operator(mdp, pi) @ (q_pi - q).reshape(-1) - residual.reshape(-1)
    return BoundReport(
        lhs=lhs,
        rhs=rhs,
        max_violation=max(0.0, lhs - rhs),
        slack=rhs - lhs,
        componentwise_violation=float(max(0.0, np.max(lhs_vec - rhs_vec))),
        min_componentwise_slack=float(np.min(rhs_vec - lhs_vec)),
        identity_residual=float(np.max(np.abs(identity))),
        stochastic_error=stochastic_error(mdp, a_matrix),
    )


def _check_behavior(mdp: TabularMdp, b) -> np.ndarray:
    b = _check_policy(mdp, b)
    if np.any(b <= 0):
        raise ContractViolation("behaviour policy must have full support over actions")
    return b


def _concentration_terms(mdp: TabularMdp, nu, mu, b):
    """Yield c(1), c(2), ... forever (each may be inf)."""
    nu = np.asarray(nu, dtype=float)
    denom = np.asarray(mu, dtype=float)[:, None] * b  # (S, A)
    # the supremum picks pi_m(a|s) = 1, so only the smallest b(a|s) matters per state
    worst = denom.min(axis=1)
    # reach[x, s]: best probability of sitting in s after k transitions from x
    reach = np.eye(mdp.n_states)
    p_matrix = mdp.p_matrix
    while True:
        numer = nu @ reach
        ratios = np.zeros(mdp.n_states)
        positive = worst > 0
        ratios[positive] = numer[positive] / worst[positive]
        if np.any((~positive) & (numer > 0)):
            yield math.inf
        else:
            yield float(ratios.max())
        # one more transition: the free per-state action choice maximises reach
        reach = (p_matrix @ reach).reshape(mdp.n_states, mdp.n_actions, -1).max(axis=1)


def concentration_c(mdp: TabularMdp, nu, mu, b, m: int) -> float:
    """Concentration coefficient c(m); c(0) = 1 by definition.

    The supremum over policy sequences is attained by deterministic
    non-stationary policies, so it is computed by a backward recursion that
    maximises the probability of reaching each target state.
    """
    if m < 0:
        raise ContractViolation("m must be non-negative")
    b = _check_behavior(mdp, b)
    if m == 0:
        return 1.0
    for k, value in enumerate(_concentration_terms(mdp, nu, mu, b), start=1):
        if k == m:
            return value
    raise AssertionError("unreachable")


def concentration_C(mdp: TabularMdp, nu, mu, b, tol: float = 1e-6) -> float:
    """C(nu, mu, b) = (1 - gamma) sum_m gamma^m c(m), truncated once the tail is below tol."""
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    b = _check_behavior(mdp, b)
    g = mdp.gamma
    denom = np.asarray(mu, dtype=float)[:, None] * b
    positive = denom[denom > 0]
    if positive.size == 0:
        return math.inf
    c_max = max(1.0, 1.0 / positive.min())
    total = 1.0 - g  # m = 0 term, c(0) = 1
    m = 1
    for value in _concentration_terms(mdp, nu, mu, b):
        if math.isinf(value):
            return math.inf
        total += (1.0 - g) * g ** m * value
        if g ** (m + 1) / (1.0 - g) * c_max < tol:
            break
        m += 1
    return total


def verify_theorem1(mdp: TabularMdp, q, nu, mu, b, p: float = 1.0, tol: float = 1e-6,
                    concentration: float | None = None) -> BoundReport:
    """Check sum d |Q* - Q^pi|^p <= (2/(1-gamma))^p C sum mu b |TQ - Q|^p with d = nu x uniform.

    ``concentration`` may carry a precomputed C(nu, mu, b) to share across p.
    """
    if p < 1:
        raise ContractViolation("p must be >= 1")
    q = _check_q(mdp, q)
    b = _check_behavior(mdp, b)
    nu = np.asarray(nu, dtype=float)
    mu = np.asarray(mu, dtype=float)
    d = nu[:, None] * np.full(mdp.n_actions, 1.0 / mdp.n_actions)[None, :]
    q_star = exact_q_star(mdp)
    q_pi = solve_q_pi(mdp, greedy_policy(q))
    lhs = float(np.sum(d * np.abs(q_star - q_pi) ** p))
    conc = concentration_C(mdp, nu, mu, b, tol) if concentration is None else concentration
    if math.isinf(conc):
        return BoundReport(lhs=lhs, rhs=math.inf, max_violation=0.0, slack=math.inf,
                           concentration=conc, vacuous=True)
    residual = np.abs(bellman_optimality(mdp, q) - q) ** p
    rhs = float((2.0 / (1.0 - mdp.gamma)) ** p * conc * np.sum(mu[:, None] * b * residual))
    return BoundReport(lhs=lhs, rhs=rhs, max_violation=max(0.0, lhs - rhs), slack=rhs - lhs,
                       concentration=conc)


def verify_bias_variance(mdp: TabularMdp, q, d) -> IdentityReport:
    """Exact E[delta^2] = E[(TQ - Q)^2] + E[(target - TQ)^2] under (s, a) ~ d, s' ~ P.

    The sampled target is r + gamma max_a' Q(s', a'), so the decomposition is
    exact; ``residual`` on the report is the absolute gap between both sides.
    """
    q = _check_q(mdp, q)
    d = np.asarray(d, dtype=float)
    target = mdp.reward + mdp.gamma * q.max(axis=1)[None, None, :]  # (S, A, S')
    tq = np.einsum("ijk,ijk->ij", mdp.trans, target)
    td = target - q[:, :, None]
    e_td = float(np.sum(d * np.einsum("ijk,ijk->ij", mdp.trans, td ** 2)))
    be = float(np.sum(d * (tq - q) ** 2))
    var = float(np.sum(d * np.einsum("ijk,ijk->ij", mdp.trans, (target - tq[:, :, None]) ** 2)))
    return IdentityReport(e_td, be, var)
