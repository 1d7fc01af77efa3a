"""Deterministic value mirror descent with its epoch schedule and per-iteration audit."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._util import AuditError, ceil_int, fmt_cell
from .mdp import TabularMdp, evaluate_policy_exact, uniform_policy
from .prox import ProxGeometry, Regularizer, check_pairing, d0_bound, prox_step

AUDIT_TOL = 1e-9


@dataclass(frozen=True)
class VmdSchedule:
    K: int
    T: int
    eta: np.ndarray  # (K, T)
    u: np.ndarray  # (K + 1,) epoch targets
    D0: float
    epsilon: float

    @property
    def n_prox_steps(self) -> int:
        return self.K * self.T


def epoch_targets(hbar: float, gamma: float, K: int) -> np.ndarray:
    """u_k = (1 + hbar) / (2^k (1 - gamma)), k = 0..K."""
    return (1.0 + hbar) / (2.0 ** np.arange(K + 1) * (1.0 - gamma))


def vmd_schedule(mdp: TabularMdp, reg: Regularizer, geom: ProxGeometry, epsilon: float,
                 eta_scale: float = 1.0) -> VmdSchedule:
    """K = ceil(log2((1+hbar)/((1-gamma) eps))), T = ceil(4/(1-gamma)), eta_{k,t} = 2^k D0 / u_k.

    ``eta_scale`` multiplies every stepsize; 1.0 gives the schedule with the
    epsilon-optimality guarantee.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    gamma = mdp.gamma
    hbar = reg.hbar(mdp.n_actions)
    ratio = (1.0 + hbar) / ((1.0 - gamma) * epsilon)
    K = ceil_int(math.log2(ratio)) if ratio > 1.0 else 0
    if K < 1:
        warnings.warn(f"epsilon={epsilon} already covers the initial gap bound; running a single epoch")
        K = 1
    T = ceil_int(4.0 / (1.0 - gamma))
    D0 = d0_bound(geom, mdp.n_actions) if mdp.n_actions > 1 else 1.0
    u = epoch_targets(hbar, gamma, K)
    eta_k = eta_scale * (2.0 ** np.arange(K)) * D0 / u[:K]
    eta = np.repeat(eta_k[:, None], T, axis=1)
    return VmdSchedule(K=K, T=T, eta=eta, u=u, D0=D0, epsilon=float(epsilon))


@dataclass
class VmdTrace:
    """Per-iteration and per-epoch telemetry of a run.

    ``iterations`` holds one dict per (epoch, iter) with iter = 1..T counting
    completed updates; ``epochs`` holds one summary per epoch.
    """

    iterations: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    CSV_COLUMNS = ("epoch", "iter", "sup_gap_value", "sup_gap_policy", "monotone_ok", "audit_ok", "halving_ok")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_COLUMNS)
            for row in self.iterations:
                writer.writerow([fmt_cell(row.get(c)) for c in self.CSV_COLUMNS])


def _sup(x) -> float:
    return float(np.max(np.abs(x)))


def run_vmd(mdp: TabularMdp, reg: Regularizer, geom: ProxGeometry, schedule: VmdSchedule,
            audit: bool = True, v_star=None, policy_eval_every: int | None = None):
    """Run value mirror descent and return ``(policy, value, trace)``.

    Starts from the uniform policy and V = (1 + hbar)/(1 - gamma). Each iteration
    takes one prox step per state against q = c + gamma P V_t and sets
    V_{t+1} = Gamma_{pi_{t+1}} V_t.

    With ``audit`` the run raises :class:`AuditError` at the first (k, t, s) where
    V_t < V_{t+1} or V_t < Gamma_{pi_t} V_t (both up to 1e-9), or, when ``v_star``
    is given, where an epoch ends outside its target ||V - V*|| <= u_{k+1}.
    ``policy_eval_every`` additionally evaluates V^{pi_t} exactly every that many
    iterations and audits V_t >= V^{pi_t}.
    """
    check_pairing(geom, reg)
    S, A = mdp.n_states, mdp.n_actions
    trace = VmdTrace()
    pi_hat = uniform_policy(S, A)
    v_hat = np.full(S, mdp.value_bound(reg))
    v_star = None if v_star is None else np.asarray(v_star, dtype=float)

    def fail(msg, **where):
        trace.violations.append(msg)
        if audit:
            raise AuditError(msg, where)

    if v_star is not None and audit and _sup(v_hat - v_star) > schedule.u[0] + AUDIT_TOL:
        fail("initial value outside the u_0 ball", epoch=0)

    for k in range(schedule.K):
        v = v_hat.copy()
        pi = pi_hat.copy()
        for t in range(schedule.T):
            q = mdp.q_values(v)
            deficit = None
            audit_ok = True
            if audit:
                # V_t >= Gamma_{pi_t} V_t
                g = np.einsum("sa,sa->s", q, pi) + reg.value(pi)
                deficit = float(np.max(g - v))
                if deficit > AUDIT_TOL:
                    s = int(np.argmax(g - v))
                    fail(f"V_t < Gamma_pi V_t at epoch {k}, iter {t}, state {s} (by {deficit:.3e})",
                         epoch=k, iter=t, state=s)
                    audit_ok = False
            pi_next = prox_step(geom, reg, pi, q, schedule.eta[k, t])
            v_next = np.einsum("sa,sa->s", q, pi_next) + reg.value(pi_next)
            drop = v_next - v
            monotone_ok = bool(np.all(drop <= AUDIT_TOL))
            if audit and not monotone_ok:
                s = int(np.argmax(drop))
                fail(f"V_(t+1) > V_t at epoch {k}, iter {t}, state {s} (by {drop[s]:.3e})",
                     epoch=k, iter=t, state=s)
                audit_ok = False
            v, pi = v_next, pi_next
            gap_policy = None
            if policy_eval_every and (t + 1) % policy_eval_every == 0:
                v_pi = evaluate_policy_exact(mdp, reg, pi)
                if audit and np.any(v_pi - v > AUDIT_TOL):
                    s = int(np.argmax(v_pi - v))
                    fail(f"V_t < V^pi_t at epoch {k}, iter {t + 1}, state {s}", epoch=k, iter=t + 1, state=s)
                    audit_ok = False
                if v_star is not None:
                    gap_policy = _sup(v_pi - v_star)
            trace.iterations.append({
                "epoch": k,
                "iter": t + 1,
                "sup_gap_value": None if v_star is None else _sup(v - v_star),
                "sup_gap_policy": gap_policy,
                "deficit": deficit,
                "monotone_ok": monotone_ok,
                "audit_ok": audit_ok,
            })
        v_hat, pi_hat = v.copy(), pi.copy()
        summary = {"epoch": k, "u_next": float(schedule.u[k + 1])}
        if v_star is not None:
            gap_v = _sup(v_hat - v_star)
            gap_p = _sup(evaluate_policy_exact(mdp, reg, pi_hat) - v_star)
            ok = gap_v <= schedule.u[k + 1] + AUDIT_TOL
            summary.update(sup_gap_value=gap_v, sup_gap_policy=gap_p, halving_ok=ok)
            # the epoch's last row carries its summary
            trace.iterations[-1].update(sup_gap_policy=gap_p, halving_ok=ok)
            if not ok:
                fail(f"epoch {k} ended with ||V - V*|| = {gap_v:.3e} > u_{k + 1} = {schedule.u[k + 1]:.3e}", epoch=k)
        trace.epochs.append(summary)
    return pi_hat, v_hat, trace
