"""Exact successor measures, occupancies and density ratios on finite MDPs.

State-action pairs are flattened row-major: pair ``(s, a)`` has index
``s * n_actions + a``. All quantities are obtained by dense linear solves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, PreconditionError

_TOL = 1e-12


@dataclass(frozen=True)
class TabularMDP:
    transitions: np.ndarray  # P[s, a, s']
    gamma: float
    rho0: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=np.float64)
        rho0 = np.asarray(self.rho0, dtype=np.float64)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rho0", rho0)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transitions must have shape (S, A, S), got {P.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > _TOL:
            raise ValueError("each P[s, a, :] must be a probability vector")
        if rho0.shape != (P.shape[0],) or np.any(rho0 < 0) or abs(rho0.sum() - 1.0) > _TOL:
            raise ValueError("rho0 must be a probability vector over states")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # pi[s, a]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2 or np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > _TOL:
            raise ValueError("policy rows must be probability vectors")

    @classmethod
    def deterministic(cls, actions, n_actions) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    @classmethod
    def uniform(cls, n_states, n_actions) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))


@dataclass(frozen=True)
class TabularReward:
    values: np.ndarray  # r[s, a]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise ValueError("reward must be a finite (S, A) matrix")


def _check(mdp: TabularMDP, policy: TabularPolicy):
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {policy.probs.shape} does not match MDP "
                         f"({mdp.n_states}, {mdp.n_actions})")


def pair_transition_matrix(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """P^pi[(s,a), (s',a')] = P(s'|s,a) pi(a'|s')."""
    _check(mdp, policy)
    S, A = mdp.n_states, mdp.n_actions
    return (mdp.transitions[:, :, :, None] * policy.probs[None, None, :, :]).reshape(S * A, S * A)


def _solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular system: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise NumericError("linear solve produced non-finite values")
    return x


def successor_measure_exact(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """M = (I - gamma P^pi)^{-1}; counts the starting pair at t = 0."""
    P = pair_transition_matrix(mdp, policy)
    n = P.shape[0]
    return _solve(np.eye(n) - mdp.gamma * P, np.eye(n))


def initial_pair_distribution(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """rho0 extended to pairs with the evaluated policy, flattened."""
    _check(mdp, policy)
    return (mdp.rho0[:, None] * policy.probs).ravel()


def occupancy_exact(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Discounted occupancy d^pi over flattened pairs.

    Solved from the flow equation d = (1-gamma) rho0 pi + gamma (P^pi)^T d,
    which is independent of the successor-measure solve.
    """
    P = pair_transition_matrix(mdp, policy)
    rho = initial_pair_distribution(mdp, policy)
    n = P.shape[0]
    d = _solve(np.eye(n) - mdp.gamma * P.T, (1.0 - mdp.gamma) * rho)
    return np.clip(d, 0.0, None)


def density_ratio_exact(mdp: TabularMDP, pi: TabularPolicy, beta: TabularPolicy) -> np.ndarray:
    """w = d^pi / d^beta, with w = 0 wherever d^beta = 0."""
    d_pi = occupancy_exact(mdp, pi)
    d_beta = occupancy_exact(mdp, beta)
    w = np.zeros_like(d_pi)
    support = d_beta > 0
    w[support] = d_pi[support] / d_beta[support]
    return w


def successor_density(mdp: TabularMDP, pi: TabularPolicy, reference: np.ndarray) -> np.ndarray:
    """m^pi = M^pi divided columnwise by a reference distribution over pairs."""
    reference = np.asarray(reference, dtype=np.float64)
    if np.any(reference <= 0):
        raise PreconditionError("reference distribution must be strictly positive")
    return successor_measure_exact(mdp, pi) / reference[None, :]


def verify_ratio_identity(mdp: TabularMDP, pi: TabularPolicy, beta: TabularPolicy) -> float:
    """max |w - (1-gamma) E_rho0[m^pi]| over pairs; needs full-support d^beta."""
    d_beta = occupancy_exact(mdp, beta)
    if np.any(d_beta <= 0):
        raise PreconditionError("d^beta has a zero entry; the ratio identity needs full support")
    w = density_ratio_exact(mdp, pi, beta)
    m = successor_density(mdp, pi, d_beta)
    rhs = (1.0 - mdp.gamma) * initial_pair_distribution(mdp, pi) @ m
    return float(np.max(np.abs(w - rhs)))


def _full_support(mdp, beta):
    d_beta = occupancy_exact(mdp, beta)
    if np.any(d_beta <= 0):
        raise PreconditionError("behavior occupancy must have full support")
    return d_beta


def check_centered_reweighting(mdp: TabularMDP, pi: TabularPolicy, beta: TabularPolicy,
                               reward: TabularReward) -> tuple[float, float, float]:
    d_beta = _full_support(mdp, beta)
    d_pi = occupancy_exact(mdp, pi)
    w = density_ratio_exact(mdp, pi, beta)
    r = reward.values.ravel()
    r_bar = float(d_beta @ r)
    lhs = float(d_beta @ (w * (r - r_bar)))
    rhs = float(d_pi @ r) - r_bar
    return lhs, rhs, abs(lhs - rhs)


def check_chi2_identity(mdp: TabularMDP, pi: TabularPolicy,
                        beta: TabularPolicy) -> tuple[float, float, float]:
    d_beta = _full_support(mdp, beta)
    d_pi = occupancy_exact(mdp, pi)
    w = density_ratio_exact(mdp, pi, beta)
    lhs = float(d_beta @ (w - 1.0) ** 2)
    rhs = float(np.sum((d_pi - d_beta) ** 2 / d_beta))
    return lhs, rhs, abs(lhs - rhs)


def check_on_policy_flat(mdp: TabularMDP, beta: TabularPolicy,
                         reward: TabularReward) -> tuple[float, float]:
    """Evaluating beta against itself: (max |w - 1| on the support, |centered objective|)."""
    d_beta = occupancy_exact(mdp, beta)
    w = density_ratio_exact(mdp, beta, beta)
    support = d_beta > 0
    r = reward.values.ravel()
    r_bar = float(d_beta @ r)
    dev = float(np.max(np.abs(w[support] - 1.0))) if support.any() else 0.0
    return dev, abs(float(d_beta @ (w * (r - r_bar))))


def q_from_successor(mdp: TabularMDP, policy: TabularPolicy, reward: TabularReward) -> np.ndarray:
    M = successor_measure_exact(mdp, policy)
    return (M @ reward.values.ravel()).reshape(mdp.n_states, mdp.n_actions)


def behavior_supported_policy(mdp: TabularMDP, beta: TabularPolicy,
                              w_logits: np.ndarray) -> TabularPolicy:
    """pi(a|s) proportional to max(w(s,a), 0) beta(a|s); falls back to beta on all-zero rows."""
    _check(mdp, beta)
    w = np.asarray(w_logits, dtype=np.float64).reshape(mdp.n_states, mdp.n_actions)
    if not np.all(np.isfinite(w)):
        raise ValueError("w_logits must be finite")
    num = np.maximum(w, 0.0) * beta.probs
    z = num.sum(axis=1, keepdims=True)
    probs = np.where(z > 0, num / np.where(z > 0, z, 1.0), beta.probs)
    return TabularPolicy(probs)


def random_mdp(n_states: int, n_actions: int, gamma: float,
               rng: np.random.Generator) -> TabularMDP:
    """Dense random MDP with Dirichlet transition rows and initial distribution."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    rho0 = rng.dirichlet(np.ones(n_states))
    return TabularMDP(P, gamma, rho0)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator,
                  concentration: float = 1.0) -> TabularPolicy:
    """Random full-support policy (Dirichlet rows are strictly positive a.s.)."""
    probs = rng.dirichlet(np.full(n_actions, concentration), size=n_states)
    probs = np.maximum(probs, 1e-6)
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))
