"""Garnet random MDPs: a fixed number of reachable successors per state-action pair."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp


@dataclass(frozen=True)
class GarnetSpec:
    n_states: int
    n_actions: int
    branching: int
    seed: int
    gamma: float = 0.9

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise ValueError("Garnet needs at least one state and one action")
        if not 1 <= self.branching <= self.n_states:
            raise ValueError(f"branching factor {self.branching} must lie in [1, {self.n_states}]")


def generate_garnet(spec: GarnetSpec) -> TabularMdp:
    """Each (s, a) reaches ``branching`` distinct states with probabilities cut from [0, 1]
    at ``branching - 1`` uniform points; costs are i.i.d. uniform on [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    S, A, b = spec.n_states, spec.n_actions, spec.branching
    kernel = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            succ = rng.choice(S, size=b, replace=False)
            cuts = np.sort(rng.uniform(size=b - 1))
            kernel[s, a, succ] = np.diff(np.concatenate(([0.0], cuts, [1.0])))
    cost = rng.uniform(size=(S, A))
    return TabularMdp(kernel=kernel, cost=cost, gamma=spec.gamma)
