"""One-step and return variances, the total-variance bound, and concentration bounds.

The return variance solved here is that of the discounted regularized cost
sum_t gamma^t (c(s_t, a_t) + h(pi(.|s_t))) with actions drawn from pi. Its
Bellman equation is Sigma = nu + gamma^2 P_pi Sigma where nu(s) is the one-step
variance of c(s, a) + gamma V^pi(s') over a ~ pi, s' ~ P. For deterministic
policies (or when c(s, .) + gamma P_s V^pi is flat on the support of pi) nu equals
gamma^2 sigma^pi_{V^pi}; ``action_noise=False`` always uses that reduced source.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .generative import PHASE_SELFTEST, GenerativeModel
from .mdp import EVAL_RESIDUAL_TOL, ConvergenceError, TabularMdp, evaluate_policy_exact
from .prox import Regularizer


def one_step_variance(mdp: TabularMdp, v) -> np.ndarray:
    """sigma_V(s, a) = P_{s,a}^T V^2 - (P_{s,a}^T V)^2, clamped at zero."""
    v = np.asarray(v, dtype=float)
    mean = mdp.kernel @ v
    return np.maximum(mdp.kernel @ (v * v) - mean * mean, 0.0)


def policy_variance(mdp: TabularMdp, pi: np.ndarray, v) -> np.ndarray:
    """sigma^pi_V = P_pi V^2 - (P_pi V)^2, clamped at zero."""
    v = np.asarray(v, dtype=float)
    P_pi = mdp.policy_kernel(pi)
    mean = P_pi @ v
    return np.maximum(P_pi @ (v * v) - mean * mean, 0.0)


def return_variance_source(mdp: TabularMdp, reg: Regularizer, pi: np.ndarray, v_pi=None,
                           action_noise: bool = True) -> np.ndarray:
    """One-step term of the variance Bellman equation."""
    if v_pi is None:
        v_pi = evaluate_policy_exact(mdp, reg, pi)
    g2 = mdp.gamma**2
    if not action_noise:
        return g2 * policy_variance(mdp, pi, v_pi)
    # E_a[Var(gamma V(s') | a)] + Var_a(c(s, a) + gamma P_{s,a} V)
    q = mdp.q_values(v_pi)
    within = g2 * np.einsum("sa,sa->s", pi, one_step_variance(mdp, v_pi))
    q_mean = np.einsum("sa,sa->s", pi, q)
    between = np.einsum("sa,sa->s", pi, (q - q_mean[:, None]) ** 2)
    return within + between


@dataclass
class ReturnVariance:
    sigma: np.ndarray
    residual: float


def solve_return_variance(mdp: TabularMdp, reg: Regularizer, pi: np.ndarray,
                          action_noise: bool = True) -> ReturnVariance:
    """Solve (I - gamma^2 P_pi) Sigma = source for the per-state return variance."""
    v_pi = evaluate_policy_exact(mdp, reg, pi)
    src = return_variance_source(mdp, reg, pi, v_pi, action_noise=action_noise)
    P_pi = mdp.policy_kernel(pi)
    g2 = mdp.gamma**2
    sigma = np.linalg.solve(np.eye(mdp.n_states) - g2 * P_pi, src)
    residual = float(np.max(np.abs(sigma - src - g2 * P_pi @ sigma)))
    if residual > EVAL_RESIDUAL_TOL:
        raise ConvergenceError(f"variance Bellman residual {residual:.3e}")
    sigma = np.maximum(sigma, 0.0)
    cap = mdp.value_bound(reg) ** 2
    if np.any(sigma > cap * (1.0 + 1e-9)):
        raise ConvergenceError(f"return variance {sigma.max():.6g} exceeds the range bound {cap:.6g}")
    return ReturnVariance(sigma=sigma, residual=residual)


def rollout_returns(mdp: TabularMdp, reg: Regularizer, pi: np.ndarray, start: int, n: int,
                    rng: np.random.Generator, tail: float = 1e-8) -> np.ndarray:
    """Discounted regularized cost of ``n`` independent trajectories from ``start``.

    Trajectories are cut at the first horizon H with gamma^H <= ``tail``.
    """
    H = math.ceil(math.log(tail) / math.log(mdp.gamma))
    S, A = mdp.n_states, mdp.n_actions
    h = reg.value(pi)
    pi_cdf = np.cumsum(pi, axis=1)
    P_cdf = np.cumsum(mdp.kernel, axis=2)
    s = np.full(n, start)
    total = np.zeros(n)
    disc = 1.0
    for _ in range(H):
        a = np.minimum((rng.random(n)[:, None] > pi_cdf[s]).sum(axis=1), A - 1)
        total += disc * (mdp.cost[s, a] + h[s])
        s = np.minimum((rng.random(n)[:, None] > P_cdf[s, a]).sum(axis=1), S - 1)
        disc *= mdp.gamma
    return total


def variance_standard_error(x: np.ndarray) -> float:
    """Standard error of the sample variance, from the sample fourth central moment."""
    n = len(x)
    d = x - x.mean()
    m2 = np.mean(d**2)
    m4 = np.mean(d**4)
    return math.sqrt(max(m4 - m2 * m2, 0.0) / n)


def total_variance_check(mdp: TabularMdp, reg: Regularizer, pi: np.ndarray, tol: float = 1e-9):
    """Compare ||(I - gamma P_pi)^{-1} sqrt(sigma^pi_{V^pi})||_inf^2 with
    (1 + hbar)^2 (1 + gamma) / (gamma^2 (1 - gamma)^3).

    Returns ``(lhs, rhs, passed)``; below gamma = 0.1 the bound is not checked and
    ``passed`` is None.
    """
    gamma = mdp.gamma
    hbar = reg.hbar(mdp.n_actions)
    v_pi = evaluate_policy_exact(mdp, reg, pi)
    root = np.sqrt(policy_variance(mdp, pi, v_pi))
    w = np.linalg.solve(np.eye(mdp.n_states) - gamma * mdp.policy_kernel(pi), root)
    lhs = float(np.max(np.abs(w))) ** 2
    rhs = (1.0 + hbar) ** 2 * (1.0 + gamma) / (gamma**2 * (1.0 - gamma) ** 3)
    if gamma < 0.1:
        return lhs, rhs, None
    return lhs, rhs, lhs <= rhs + tol


def _check_m_delta(m, delta):
    if m < 1:
        raise ValueError("m must be at least 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")


def hoeffding_bound(v_inf_norm: float, m: int, delta: float) -> float:
    """||V|| sqrt(2 ln(2/delta) / m)."""
    _check_m_delta(m, delta)
    return v_inf_norm * math.sqrt(2.0 * math.log(2.0 / delta) / m)


def bernstein_bound(variance: float, v_inf_norm: float, m: int, delta: float) -> float:
    """sqrt(2 Var ln(2/delta) / m) + (2/3) ||V|| ln(2/delta) / m."""
    _check_m_delta(m, delta)
    log_term = math.log(2.0 / delta)
    return math.sqrt(2.0 * max(variance, 0.0) * log_term / m) + 2.0 / 3.0 * v_inf_norm * log_term / m


def concentration_selftest(model: GenerativeModel, v, m: int, delta: float, trials: int,
                           s: int = 0, a: int = 0) -> dict:
    """Empirical failure rates of both bounds for ``trials`` estimates P_hat^(m)_{s,a}^T v."""
    if trials < 1000:
        raise ValueError("the self-test needs at least 1000 trials")
    v = np.asarray(v, dtype=float)
    row = model.mdp.kernel[s, a]
    mean = row @ v
    var = max(row @ (v * v) - mean * mean, 0.0)
    v_norm = float(np.max(np.abs(v)))
    counts = model.draw_counts(s, a, m, phase=PHASE_SELFTEST, size=trials)
    err = np.abs(counts @ v / m - mean)
    hb = hoeffding_bound(v_norm, m, delta)
    bb = bernstein_bound(var, v_norm, m, delta)
    return {
        "hoeffding": float(np.mean(err > hb)),
        "bernstein": float(np.mean(err > bb)),
        "hoeffding_bound": hb,
        "bernstein_bound": bb,
        "m": m, "delta": delta, "trials": trials,
    }


def write_selftest_csv(results: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bound", "m", "delta", "trials", "failure_rate", "pass"])
        for r in results:
            for name in ("hoeffding", "bernstein"):
                rate = r[name]
                writer.writerow([name, r["m"], r["delta"], r["trials"], repr(rate),
                                 "true" if rate <= r["delta"] else "false"])
