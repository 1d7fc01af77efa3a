"""Stochastic value mirror descent under a generative model.

``run_svmd`` handles general convex regularizers (two policy sequences plus an
acceptance test); ``run_svmd_sc`` is the strongly convex variant without the
acceptance test. Both use the variance-reduced estimate
P~^t V_t = P~^0 V_0 + P_hat^(m2) (V_t - V_0) and the element-wise min update on V.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._util import AuditError, ceil_int, fmt_cell
from .generative import (PHASE_BASE, PHASE_DELTA, EmpiricalKernel, GenerativeModel,
                         sample_empirical_kernel, vr_assemble)
from .mdp import EVAL_RESIDUAL_TOL, ConvergenceError, Reference, evaluate_policy_exact, reference_solution, \
    uniform_policy
from .prox import ProxGeometry, Regularizer, check_pairing, d0_bound, divergence, project_simplex, prox_step

BASE_CONST = (250.0 * math.sqrt(2.0)) ** 2
DELTA_CONST = (100.0 * math.sqrt(2.0)) ** 2


# --------------------------------------------------------------------------- schedules


@dataclass(frozen=True)
class SvmdSchedule:
    K: int
    T: list[int]
    eta: list[float]  # constant within each epoch
    m1: list[int]
    m2: list[int]
    u: list[float]
    k0: int
    D0: float
    epsilon: float
    delta: float
    scale: float = 1.0

    @property
    def downscaled(self) -> bool:
        return self.scale < 1.0

    def eta_at(self, k: int, t: int) -> float:
        return self.eta[k]

    def samples_per_epoch(self, n_states: int, n_actions: int) -> list[int]:
        return [n_states * n_actions * (self.m1[k] + (self.T[k] - 1) * self.m2[k]) for k in range(self.K)]

    def to_dict(self) -> dict:
        return {"variant": "svmd", **asdict(self), "downscaled": self.downscaled}


@dataclass(frozen=True)
class SvmdScSchedule:
    K: int
    T: int
    mu: float
    m1: list[int]
    m2: list[int]
    u: list[float]
    b: float
    D0: float
    epsilon: float
    delta: float
    scale: float = 1.0

    @property
    def downscaled(self) -> bool:
        return self.scale < 1.0

    def eta_at(self, k: int, t: int) -> float:
        return 2.0 / (self.mu * (t + 1))

    def samples_per_epoch(self, n_states: int, n_actions: int) -> list[int]:
        return [n_states * n_actions * (self.m1[k] + (self.T - 1) * self.m2[k]) for k in range(self.K)]

    def to_dict(self) -> dict:
        return {"variant": "svmd_sc", **asdict(self), "downscaled": self.downscaled}


def _check_unit(name, x):
    if not 0.0 < x < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {x!r}")


def _scaled(m: float, scale: float) -> int:
    # plain ceiling: float fuzz can only add one sample, never drop one
    return max(1, math.ceil(scale * m))


def _log_eps_factor(epsilon: float) -> int:
    # ceil(log2(1/eps))^2, clamped to 1 for eps >= 1/2
    return max(1, ceil_int(math.log2(1.0 / epsilon))) ** 2


def svmd_schedule(n_states: int, n_actions: int, gamma: float, hbar: float, geom: ProxGeometry,
                  epsilon: float, delta: float, scale: float = 1.0) -> SvmdSchedule:
    """Epoch counts, lengths, stepsizes and sample sizes of the general convex method.

    With ``scale`` = 1 the sample sizes are the smallest integers meeting the
    high-probability bounds; smaller values shrink m_{k,1}, m_{k,2} (ceiled,
    at least 1) and void the guarantee.
    """
    _check_unit("epsilon", epsilon)
    _check_unit("delta", delta)
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must lie in (0, 1], got {scale!r}")
    span = (1.0 + hbar) / (1.0 - gamma)
    K = max(1, ceil_int(math.log2(span / epsilon)))
    k0 = ceil_int(math.log2(span)) if span > 1.0 else 0
    D0 = d0_bound(geom, n_actions) if n_actions > 1 else 1.0
    u = [span / 2.0**k for k in range(K + 1)]
    SA = n_states * n_actions
    L = _log_eps_factor(epsilon)
    T, eta, m1, m2 = [], [], [], []
    for k in range(K):
        uk = min(u[k], 1.0)
        Tk = ceil_int(28.0 / ((1.0 - gamma) * uk))
        T.append(Tk)
        eta.append(2.0 ** min(k, k0) * D0 / (7.0 * uk))
        base = BASE_CONST * (1.0 + hbar) ** 2 * math.log(12 * K * SA / delta) * L / ((1.0 - gamma) ** 3 * uk**2)
        corr = DELTA_CONST * math.log(4 * K * (Tk - 1) * SA / delta) * L / (1.0 - gamma) ** 2
        m1.append(_scaled(base, scale))
        m2.append(_scaled(corr, scale))
    return SvmdSchedule(K=K, T=T, eta=eta, m1=m1, m2=m2, u=u, k0=k0, D0=D0, epsilon=epsilon,
                        delta=delta, scale=scale)


def sc_schedule(n_states: int, n_actions: int, gamma: float, hbar: float, mu: float, D0: float,
                epsilon: float, delta: float, scale: float = 1.0) -> SvmdScSchedule:
    """Parameters of the strongly convex method; eta_{k,t} = 2 / (mu (t + 1))."""
    _check_unit("epsilon", epsilon)
    _check_unit("delta", delta)
    if not mu > 0:
        raise ValueError("the strongly convex schedule needs mu > 0")
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must lie in (0, 1], got {scale!r}")
    u0 = max((1.0 + hbar) / (1.0 - gamma), mu * D0)
    K = max(1, ceil_int(math.log2(u0 / epsilon)))
    u = [u0 / 2.0**k for k in range(K + 1)]
    T = ceil_int(18.0 / (1.0 - gamma))
    log_T = math.log(T) + 1.0
    SA = n_states * n_actions
    m1, m2 = [], []
    for k in range(K):
        base = 200.0 * max(64.0 * (1.0 + hbar) ** 2 / mu * (1.0 - gamma) ** -5 / u[k] * log_T, 1.0) \
            * math.log(24 * K * SA / delta)
        corr = (400.0 * (1.0 + hbar + mu * D0) / mu * log_T + 16.0) * (1.0 - gamma) ** -4 \
            * math.log(4 * K * (T - 1) * SA / delta)
        m1.append(_scaled(base, scale))
        m2.append(_scaled(corr, scale))
    b = math.sqrt(mu / (16.0 * log_T))
    return SvmdScSchedule(K=K, T=T, mu=mu, m1=m1, m2=m2, u=u, b=b, D0=D0, epsilon=epsilon,
                          delta=delta, scale=scale)


# --------------------------------------------------------------------------- building blocks


def solve_initial_value(emp: EmpiricalKernel, cost, reg: Regularizer, pi0: np.ndarray,
                        gamma: float) -> np.ndarray:
    """V_0 = (I - gamma P~_pi0)^{-1} (c_pi0 + h(pi0)) on the estimated kernel; draws no samples."""
    P = emp.probs
    P_pi = np.einsum("sa,sat->st", pi0, P)
    rhs = np.einsum("sa,sa->s", pi0, cost) + reg.value(pi0)
    v = np.linalg.solve(np.eye(P.shape[0]) - gamma * P_pi, rhs)
    residual = float(np.max(np.abs(v - rhs - gamma * P_pi @ v)))
    if residual > EVAL_RESIDUAL_TOL:
        raise ConvergenceError(f"initial value solve residual {residual:.3e}")
    return v


def bregman_to_optimal(geom: ProxGeometry, pi: np.ndarray, ref: Reference, reg: Regularizer) -> float:
    """||D(pi, pi*)||_inf.

    With h = 0 and tied optimal actions, pi* ranges over the face of the simplex
    spanned by the tied actions and the per-state minimum over that face is
    used: exact for KL (-ln pi(ties)) and Euclidean (projection), the best tied
    vertex for Tsallis.
    """
    if reg.kind != "zero":
        return float(np.max(divergence(geom, pi, ref.pi_star)))
    ties = ref.ties
    if geom.kind == "kl":
        mass = np.where(ties, pi, 0.0).sum(axis=1)
        with np.errstate(divide="ignore"):
            d = -np.log(np.minimum(mass, 1.0))
        return float(np.max(np.maximum(d, 0.0)))
    if geom.kind == "euclidean":
        d = np.empty(pi.shape[0])
        for s in range(pi.shape[0]):
            on = ties[s]
            p = project_simplex(pi[s, on][None, :])[0]
            d[s] = 0.5 * (np.sum((p - pi[s, on]) ** 2) + np.sum(pi[s, ~on] ** 2))
        return float(np.max(d))
    A = pi.shape[1]
    eye = np.eye(A)
    d = np.stack([divergence(geom, pi, np.broadcast_to(eye[a], pi.shape)) for a in range(A)], axis=1)
    d = np.where(ties, d, np.inf)
    return float(np.max(np.min(d, axis=1)))


# --------------------------------------------------------------------------- run record


@dataclass
class RunRecord:
    algorithm: str
    schedule: dict
    rows: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    initial_gap_policy: float = float("nan")
    samples_total: int = 0
    expected_samples: int = 0
    final_gap_policy: float = float("nan")
    final_bregman: float = float("nan")
    pi_star_unique: bool = True
    downscaled: bool = False
    violations: list[str] = field(default_factory=list)

    CSV_COLUMNS = ("epoch", "iter", "samples_epoch", "samples_total", "sup_gap_policy", "sup_gap_value",
                   "bregman_to_opt", "halving_ok", "downscaled_flag")

    @property
    def epoch_gaps(self) -> list[float]:
        """||V^{pi_hat_k} - V*||_inf for k = 0..K (k = 0 is the uniform start)."""
        return [self.initial_gap_policy] + [e["sup_gap_policy"] for e in self.epochs]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([fmt_cell(row.get(c)) for c in self.CSV_COLUMNS])

    def write_schedule(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.schedule, fh, indent=2, sort_keys=True)


# --------------------------------------------------------------------------- algorithms


def run_svmd(model: GenerativeModel, reg: Regularizer, geom: ProxGeometry, schedule: SvmdSchedule,
             audit: bool = True, reference: Reference | None = None, record_iterations: bool = True):
    """General convex SVMD. Returns ``(pi_hat_K, RunRecord)``.

    Gaps in the record are measured against the model's hidden MDP; the
    algorithm itself only touches it through ``model`` sampling.

    With ``audit`` the run raises :class:`AuditError` when the min step ever
    raises V, when the accepted policy rows disagree with the candidate, when
    the observation ledger misses its closed form, or (exact-kernel models only)
    when V_t < Gamma_{pi_t} V_t - 1e-9.
    """
    return _run(model, reg, geom, schedule, audit, reference, record_iterations, accept_step=True)


def run_svmd_sc(model: GenerativeModel, reg: Regularizer, geom: ProxGeometry, schedule: SvmdScSchedule,
                audit: bool = True, reference: Reference | None = None, record_iterations: bool = True):
    """Strongly convex SVMD (single policy sequence, eta_t = 2 / (mu (t + 1)))."""
    if not reg.mu > 0:
        raise ValueError("run_svmd_sc needs a strongly convex regularizer (mu > 0)")
    if geom.norm != "l1":
        raise ValueError("run_svmd_sc needs a geometry tied to the l1 norm")
    return _run(model, reg, geom, schedule, audit, reference, record_iterations, accept_step=False)


def _run(model, reg, geom, schedule, audit, reference, record_iterations, accept_step):
    check_pairing(geom, reg)
    mdp = model.mdp
    S, A, gamma, cost = mdp.n_states, mdp.n_actions, mdp.gamma, mdp.cost
    K = schedule.K
    Ts = schedule.T if isinstance(schedule.T, list) else [schedule.T] * K
    if min(Ts) < 1 or min(schedule.m1) < 1 or min(schedule.m2) < 1:
        raise ValueError("schedule needs T_k >= 1 and sample sizes >= 1")
    ref = reference if reference is not None else reference_solution(mdp, reg)
    v_star = ref.v_star

    record = RunRecord(algorithm="svmd" if accept_step else "svmd_sc", schedule=schedule.to_dict(),
                       downscaled=schedule.downscaled, pi_star_unique=ref.unique)

    def fail(msg, **where):
        record.violations.append(msg)
        if audit:
            raise AuditError(msg, where)

    def gap(pi):
        return float(np.max(np.abs(evaluate_policy_exact(mdp, reg, pi) - v_star)))

    pi_hat = uniform_policy(S, A)
    pi_tilde_hat = pi_hat.copy()
    v_hat0 = np.full(S, mdp.value_bound(reg))
    record.initial_gap_policy = gap(pi_hat)
    start_total = model.total
    expected = schedule.samples_per_epoch(S, A)

    for k in range(K):
        epoch_start = model.total
        pi = pi_hat.copy()
        pi_tilde = pi_tilde_hat.copy()
        P0 = sample_empirical_kernel(model, schedule.m1[k], epoch=k, phase=PHASE_BASE)
        v0 = v_hat0.copy() if k == 0 else solve_initial_value(P0, cost, reg, pi, gamma)
        base = P0.apply(v0)
        v = v0
        for t in range(Ts[k]):
            if t == 0:
                pv = base
            else:
                Pd = sample_empirical_kernel(model, schedule.m2[k], epoch=k, phase=PHASE_DELTA, t=t)
                pv = vr_assemble(base, Pd, v, v0)
            q = cost + gamma * pv
            if audit and model.exact:
                # with the true kernel the iterates obey the deterministic bound V_t >= Gamma_pi V_t
                deficit = np.einsum("sa,sa->s", q, pi) + reg.value(pi) - v
                if np.max(deficit) > 1e-9:
                    s = int(np.argmax(deficit))
                    fail(f"V_t < Gamma_pi V_t under the exact kernel at epoch {k}, iter {t}, state {s}",
                         epoch=k, iter=t, state=s)
            eta = schedule.eta_at(k, t)
            if accept_step:
                cand = prox_step(geom, reg, pi_tilde, q, eta)
            else:
                cand = prox_step(geom, reg, pi, q, eta)
            v_tilde = np.einsum("sa,sa->s", q, cand) + reg.value(cand)
            take = v_tilde <= v
            v_next = np.where(take, v_tilde, v)
            if accept_step:
                pi_next = np.where(take[:, None], cand, pi)
                pi_tilde = cand
            else:
                pi_next = cand
            if audit:
                if np.any(v_next > v):
                    s = int(np.argmax(v_next - v))
                    fail(f"min step increased V at epoch {k}, iter {t}, state {s}", epoch=k, iter=t, state=s)
                if accept_step and not np.array_equal(pi_next[take], cand[take]):
                    fail(f"acceptance mismatch at epoch {k}, iter {t}", epoch=k, iter=t)
            v, pi = v_next, pi_next
            if record_iterations and t + 1 < Ts[k]:
                record.rows.append({
                    "epoch": k, "iter": t + 1,
                    "samples_epoch": model.total - epoch_start,
                    "samples_total": model.total - start_total,
                    "sup_gap_value": float(np.max(np.abs(v - v_star))),
                    "downscaled_flag": schedule.downscaled,
                })
        pi_hat, pi_tilde_hat = pi.copy(), pi_tilde.copy()
        samples_epoch = model.total - epoch_start
        if samples_epoch != expected[k]:
            fail(f"epoch {k} drew {samples_epoch} observations, expected {expected[k]}", epoch=k)
        g = gap(pi_hat)
        summary = {
            "epoch": k, "iter": Ts[k],
            "samples_epoch": samples_epoch,
            "samples_total": model.total - start_total,
            "sup_gap_policy": g,
            "sup_gap_value": float(np.max(np.abs(v - v_star))),
            "bregman_to_opt": bregman_to_optimal(geom, pi_hat, ref, reg),
            "halving_ok": g <= schedule.u[k + 1],
            "downscaled_flag": schedule.downscaled,
        }
        record.epochs.append(summary)
        record.rows.append(summary)

    record.samples_total = model.total - start_total
    record.expected_samples = sum(expected)
    if record.samples_total != record.expected_samples:
        fail(f"ledger mismatch: {record.samples_total} != {record.expected_samples}")
    record.final_gap_policy = record.epochs[-1]["sup_gap_policy"]
    record.final_bregman = record.epochs[-1]["bregman_to_opt"]
    return pi_hat, record
