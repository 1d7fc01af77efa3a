"""Shared fixtures-by-function for the test suite."""
from __future__ import annotations

import numpy as np

from mirror_mdp.mdp import TabularMdp


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float,
               sparse: bool = False) -> TabularMdp:
    kernel = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparse:
        keep = rng.random(kernel.shape) < 0.5
        keep[..., 0] = True
        kernel = np.where(keep, kernel, 0.0)
        kernel /= kernel.sum(axis=2, keepdims=True)
    cost = rng.uniform(size=(n_states, n_actions))
    return TabularMdp(kernel=kernel, cost=cost, gamma=gamma)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)


def single_state_mdp(costs, gamma: float) -> TabularMdp:
    costs = np.asarray(costs, dtype=float)
    return TabularMdp(kernel=np.ones((1, len(costs), 1)), cost=costs[None, :], gamma=gamma)


def policy_iteration(mdp: TabularMdp) -> tuple[np.ndarray, np.ndarray]:
    """Howard's policy iteration (h = 0); an oracle independent of value iteration."""
    S, A = mdp.n_states, mdp.n_actions
    act = np.zeros(S, dtype=int)
    while True:
        P = mdp.kernel[np.arange(S), act]
        c = mdp.cost[np.arange(S), act]
        v = np.linalg.solve(np.eye(S) - mdp.gamma * P, c)
        q = mdp.cost + mdp.gamma * mdp.kernel @ v
        best = np.argmin(q, axis=1)
        improve = q[np.arange(S), best] < q[np.arange(S), act] - 1e-13
        if not improve.any():
            return v, act
        act = np.where(improve, best, act)


def simplex_grid(n: int, h: float) -> np.ndarray:
    """All points of the n-simplex (n in {2, 3}) on a lattice of spacing h."""
    k = int(round(1.0 / h))
    if n == 2:
        x = np.arange(k + 1) / k
        return np.stack([x, 1.0 - x], axis=1)
    i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    mask = i + j <= k
    i, j = i[mask], j[mask]
    return np.stack([i / k, j / k, (k - i - j) / k], axis=1)
