"""Generative sampling model and the empirical / variance-reduced kernel estimators.

Every (s, a) row is sampled from its own counter-based random stream keyed by
``(master_seed, epoch, phase, t, s, a)``, so results do not depend on the order
in which rows are drawn. Counts are drawn as one multinomial per row, which has
exactly the law of ``m`` independent next-state observations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp

PHASE_BASE = 0  # m_{k,1} draws for the epoch's base estimate
PHASE_DELTA = 1  # m_{k,2} draws for the correction at iteration t
PHASE_SELFTEST = 2


@dataclass(frozen=True)
class EmpiricalKernel:
    counts: np.ndarray  # (S, A, S) int64
    m: int

    @property
    def probs(self) -> np.ndarray:
        return self.counts / self.m

    def apply(self, v) -> np.ndarray:
        """(P_hat v)_{s,a}."""
        return (self.counts @ np.asarray(v, dtype=float)) / self.m


class GenerativeModel:
    """Sampling oracle around a hidden MDP, with an exact per-(s, a) observation ledger.

    ``exact=True`` hands out the true kernel instead of samples while still
    charging the ledger, which isolates algorithmic behavior from sampling noise.
    """

    def __init__(self, mdp: TabularMdp, master_seed: int, exact: bool = False):
        self.mdp = mdp
        self.master_seed = int(master_seed)
        self.exact = exact
        self.counts = np.zeros((mdp.n_states, mdp.n_actions), dtype=np.int64)
        self._key = np.random.SeedSequence(self.master_seed).generate_state(2, dtype=np.uint64)
        self._bitgen = np.random.Philox(key=self._key)
        self._gen = np.random.Generator(self._bitgen)
        # multinomials are drawn over each row's support only
        self._support = [[np.flatnonzero(mdp.kernel[s, a] > 0) for a in range(mdp.n_actions)]
                         for s in range(mdp.n_states)]
        self._support_p = [[mdp.kernel[s, a, idx] for a, idx in enumerate(row)]
                           for s, row in enumerate(self._support)]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    @property
    def cost(self) -> np.ndarray:
        return self.mdp.cost

    @property
    def gamma(self) -> float:
        return self.mdp.gamma

    def stream(self, epoch: int, phase: int, t: int, s: int, a: int) -> np.random.Generator:
        """Generator positioned at the start of the (epoch, phase, t, s, a) stream.

        The stream id occupies the upper three words of the Philox counter and
        draws advance the lowest word, so distinct streams never overlap. The
        returned generator is shared; it is repositioned by the next call.
        """
        counter = np.array([0, (s << 32) | a, t, (epoch << 8) | phase], dtype=np.uint64)
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {"counter": counter, "key": self._key},
            "buffer": np.zeros(4, dtype=np.uint64),
            "buffer_pos": 4,
            "has_uint32": 0,
            "uinteger": 0,
        }
        return self._gen

    def draw_counts(self, s: int, a: int, m: int, epoch: int = 0, phase: int = PHASE_BASE,
                    t: int = 0, size: int | None = None) -> np.ndarray:
        """Next-state counts from ``m`` observations at (s, a); ``size`` repeats that independently."""
        n = 1 if size is None else size
        self.counts[s, a] += m * n
        row = self.mdp.kernel[s, a]
        shape = (self.n_states,) if size is None else (size, self.n_states)
        if self.exact:
            # the ledger is still charged; return the expectation scaled to m
            return np.broadcast_to(row * m, shape).copy()
        out = np.zeros(shape, dtype=np.int64)
        out[..., self._support[s][a]] = self._draw_support(s, a, m, epoch, phase, t, size)
        return out

    def _draw_support(self, s, a, m, epoch, phase, t, size=None):
        idx = self._support[s][a]
        if len(idx) == 1:
            return m
        return self.stream(epoch, phase, t, s, a).multinomial(m, self._support_p[s][a], size=size)

    def sample_counts(self, m: int, epoch: int, phase: int, t: int) -> np.ndarray:
        """(S, A, S) next-state counts with ``m`` observations at every (s, a)."""
        S, A = self.mdp.n_states, self.mdp.n_actions
        self.counts += m
        if self.exact:
            return self.mdp.kernel * m
        out = np.zeros((S, A, S), dtype=np.int64)
        for s in range(S):
            for a in range(A):
                out[s, a, self._support[s][a]] = self._draw_support(s, a, m, epoch, phase, t)
        return out


def sample_empirical_kernel(model: GenerativeModel, m: int, epoch: int = 0, phase: int = PHASE_BASE,
                            t: int = 0) -> EmpiricalKernel:
    """P_hat^(m): empirical next-state frequencies from m observations per (s, a)."""
    m = int(m)
    if m < 1:
        raise ValueError("need at least one observation per state-action pair")
    return EmpiricalKernel(counts=model.sample_counts(m, epoch, phase, t), m=m)


def vr_assemble(base: np.ndarray, delta_kernel: EmpiricalKernel, v_t, v_0) -> np.ndarray:
    """Variance-reduced estimate of P V_t: base + P_hat (V_t - V_0)."""
    base = np.asarray(base, dtype=float)
    diff = np.asarray(v_t, dtype=float) - np.asarray(v_0, dtype=float)
    if base.shape != delta_kernel.counts.shape[:2] or diff.shape != (delta_kernel.counts.shape[2],):
        raise ValueError("shape mismatch in variance-reduced assembly")
    return base + delta_kernel.apply(diff)
