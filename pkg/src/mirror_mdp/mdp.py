"""Tabular discounted MDPs: data model, Bellman operators, exact evaluation and value iteration.

Policies are plain ``(n_states, n_actions)`` arrays whose rows are distributions
over actions; value vectors are length-``n_states`` arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .prox import Regularizer, ZERO

PROB_TOL = 1e-12
EVAL_RESIDUAL_TOL = 1e-10


class ConvergenceError(RuntimeError):
    """Raised when an iterative routine or a solve misses its tolerance."""


@dataclass(frozen=True)
class TabularMdp:
    kernel: np.ndarray  # (S, A, S)
    cost: np.ndarray  # (S, A), entries in [0, 1]
    gamma: float

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=float)
        cost = np.asarray(self.cost, dtype=float)
        if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[2]:
            raise ValueError(f"kernel must have shape (S, A, S), got {kernel.shape}")
        if cost.shape != kernel.shape[:2]:
            raise ValueError(f"cost shape {cost.shape} does not match kernel {kernel.shape}")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]

    def value_bound(self, reg: Regularizer = ZERO) -> float:
        """Upper end of the range every value function lives in: (1 + hbar) / (1 - gamma)."""
        return (1.0 + reg.hbar(self.n_actions)) / (1.0 - self.gamma)

    def policy_kernel(self, pi: np.ndarray) -> np.ndarray:
        return np.einsum("sa,sat->st", pi, self.kernel)

    def policy_cost(self, pi: np.ndarray, reg: Regularizer = ZERO) -> np.ndarray:
        """c_pi + h(pi) per state."""
        return np.einsum("sa,sa->s", pi, self.cost) + reg.value(pi)

    def q_values(self, v: np.ndarray) -> np.ndarray:
        """c(s, a) + gamma * P_{s,a}^T v."""
        return self.cost + self.gamma * (self.kernel @ v)


def validate_mdp(mdp: TabularMdp) -> list[str]:
    """Return a human-readable description of every broken invariant (empty when valid)."""
    problems = []
    P, c = mdp.kernel, mdp.cost
    if not np.all(np.isfinite(P)):
        problems.append("kernel contains non-finite entries")
    if not np.all(np.isfinite(c)):
        problems.append("cost contains non-finite entries")
    for s, a in zip(*np.nonzero((P < 0).any(axis=2))):
        problems.append(f"kernel[{s},{a}] has negative entries")
    sums = P.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > PROB_TOL)):
        problems.append(f"kernel[{s},{a}] sums to {sums[s, a]!r}, expected 1")
    for s, a in zip(*np.nonzero((c < 0) | (c > 1))):
        problems.append(f"cost[{s},{a}] = {c[s, a]!r} outside [0, 1]")
    if not 0.0 < mdp.gamma < 1.0:
        problems.append(f"gamma = {mdp.gamma!r} outside (0, 1)")
    return problems


def validate_policy(pi: np.ndarray, n_states: int, n_actions: int) -> None:
    pi = np.asarray(pi)
    if pi.shape != (n_states, n_actions):
        raise ValueError(f"policy shape {pi.shape} != ({n_states}, {n_actions})")
    if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > PROB_TOL):
        raise ValueError("policy rows must be probability distributions")


def uniform_policy(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Deterministic argmin policy; ties go to the lowest action index."""
    pi = np.zeros_like(q, dtype=float)
    pi[np.arange(q.shape[0]), np.argmin(q, axis=1)] = 1.0
    return pi


def _check_value(mdp: TabularMdp, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,):
        raise ValueError(f"value vector shape {v.shape} != ({mdp.n_states},)")
    return v


def bellman_policy(mdp: TabularMdp, reg: Regularizer, pi: np.ndarray, v) -> np.ndarray:
    """Gamma_pi v = c_pi + gamma P_pi v + h(pi)."""
    v = _check_value(mdp, v)
    validate_policy(pi, mdp.n_states, mdp.n_actions)
    return np.einsum("sa,sa->s", mdp.q_values(v), pi) + reg.value(pi)


def bellman_optimal(mdp: TabularMdp, reg: Regularizer, v) -> tuple[np.ndarray, np.ndarray]:
    """Optimal Bellman operator and the per-state minimizing policy."""
    v = _check_value(mdp, v)
    q = mdp.q_values(v)
    return reg.simplex_min(q)


def evaluate_policy_exact(mdp: TabularMdp, reg: Regularizer, pi: np.ndarray) -> np.ndarray:
    """Solve (I - gamma P_pi) V = c_pi + h(pi) with a dense LU solve."""
    validate_policy(pi, mdp.n_states, mdp.n_actions)
    P_pi = mdp.policy_kernel(pi)
    rhs = mdp.policy_cost(pi, reg)
    A = np.eye(mdp.n_states) - mdp.gamma * P_pi
    v = np.linalg.solve(A, rhs)
    residual = np.max(np.abs(v - (rhs + mdp.gamma * P_pi @ v)))
    if residual > EVAL_RESIDUAL_TOL:
        raise ConvergenceError(f"policy evaluation residual {residual:.3e} exceeds {EVAL_RESIDUAL_TOL}")
    return v


def vi_stop_threshold(epsilon: float, gamma: float) -> float:
    return epsilon * (1.0 - gamma) / (2.0 * gamma)


def value_iteration(mdp: TabularMdp, reg: Regularizer, epsilon: float, max_iter: int = 10**6,
                    v0=None) -> tuple[np.ndarray, np.ndarray, int]:
    """Classical value iteration from V_0 = 0.

    Stops once ||V_{k+1} - V_k||_inf <= epsilon (1 - gamma) / (2 gamma), which makes
    the greedy (or Gibbs) policy of the last iterate epsilon-optimal.

    Returns ``(v, pi, iterations)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    tol = vi_stop_threshold(epsilon, mdp.gamma)
    v = np.zeros(mdp.n_states) if v0 is None else _check_value(mdp, v0).copy()
    for k in range(1, max_iter + 1):
        v_next, pi = bellman_optimal(mdp, reg, v)
        done = np.max(np.abs(v_next - v)) <= tol
        v = v_next
        if done:
            return v, pi, k
    raise ConvergenceError(f"value iteration did not reach tolerance {tol:.3e} in {max_iter} iterations")


def policy_value_gap(mdp: TabularMdp, reg: Regularizer, pi: np.ndarray, v_star) -> float:
    """||V^pi - V*||_inf."""
    return float(np.max(np.abs(evaluate_policy_exact(mdp, reg, pi) - np.asarray(v_star))))


def save_mdp(mdp: TabularMdp, path) -> None:
    doc = {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "cost": mdp.cost.ravel().tolist(),
        "kernel": mdp.kernel.ravel().tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_mdp(path) -> TabularMdp:
    doc = json.loads(Path(path).read_text())
    try:
        S, A = int(doc["n_states"]), int(doc["n_actions"])
        cost = np.asarray(doc["cost"], dtype=float).reshape(S, A)
        kernel = np.asarray(doc["kernel"], dtype=float).reshape(S, A, S)
        gamma = float(doc["gamma"])
    except KeyError as exc:
        raise ValueError(f"{path}: missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    return TabularMdp(kernel=kernel, cost=cost, gamma=gamma)


def two_state_chain(gamma: float = 0.5) -> TabularMdp:
    """State 0: action 0 stays (cost 1), action 1 moves to absorbing state 1 (cost 0.5).

    State 1 is absorbing at zero cost under both actions.
    """
    kernel = np.zeros((2, 2, 2))
    kernel[0, 0, 0] = 1.0
    kernel[0, 1, 1] = 1.0
    kernel[1, :, 1] = 1.0
    cost = np.array([[1.0, 0.5], [0.0, 0.0]])
    return TabularMdp(kernel=kernel, cost=cost, gamma=gamma)


@dataclass(frozen=True)
class Reference:
    """Ground truth for experiments: optimal values, Q-values and an optimal policy."""

    v_star: np.ndarray
    q_star: np.ndarray
    pi_star: np.ndarray
    ties: np.ndarray  # (S, A) bool, actions within ``tie_tol`` of optimal (h = 0 only)
    epsilon: float

    @property
    def unique(self) -> bool:
        return bool(np.all(self.ties.sum(axis=1) == 1))


def reference_solution(mdp: TabularMdp, reg: Regularizer, epsilon: float = 1e-9,
                       tie_tol: float = 1e-9) -> Reference:
    """Run value iteration to ``epsilon`` and package V*, Q* and pi*.

    With h = 0 pi* is greedy (lowest index among ties); with the entropic
    regularizer it is the Gibbs policy of Q*, which is unique.
    """
    v, _, _ = value_iteration(mdp, reg, epsilon)
    q = mdp.q_values(v)
    _, pi = reg.simplex_min(q)
    if reg.kind == "zero":
        ties = q - q.min(axis=1, keepdims=True) <= tie_tol
    else:
        ties = np.ones_like(q, dtype=bool)
    return Reference(v_star=v, q_star=q, pi_star=pi, ties=ties, epsilon=epsilon)
