from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from helpers import single_state_mdp
from mirror_mdp._util import AuditError
from mirror_mdp.garnet import GarnetSpec, generate_garnet
from mirror_mdp.generative import GenerativeModel
from mirror_mdp.mdp import Reference, evaluate_policy_exact, reference_solution, two_state_chain
from mirror_mdp.prox import EUCLIDEAN, KL, ZERO, divergence, negentropy, tsallis
from mirror_mdp.svmd import bregman_to_optimal, run_svmd, run_svmd_sc, sc_schedule, svmd_schedule


def raw_svmd_m(S, A, gamma, hbar, eps, delta, K, T, u):
    L = max(1, math.ceil(math.log2(1 / eps) - 1e-12)) ** 2
    base = 125000 * (1 + hbar) ** 2 * math.log(12 * K * S * A / delta) * L / ((1 - gamma) ** 3 * min(u, 1) ** 2)
    corr = 20000 * math.log(4 * K * (T - 1) * S * A / delta) * L / (1 - gamma) ** 2
    return base, corr


def test_svmd_schedule_tiny_instance():
    s = svmd_schedule(2, 2, 0.5, 0.0, KL, 0.25, 0.1)
    assert s.K == 3 and s.k0 == 1 and s.T[0] == 56
    assert s.u[0] == 2.0
    assert s.T == [56, 56, 112]
    assert s.eta[0] == pytest.approx(math.log(2) / 7)
    assert s.eta[2] == pytest.approx(2 * math.log(2) / (7 * 0.5))
    for k in range(s.K):
        base, corr = raw_svmd_m(2, 2, 0.5, 0.0, 0.25, 0.1, s.K, s.T[k], s.u[k])
        assert s.m1[k] == math.ceil(base) and s.m2[k] == math.ceil(corr)


def test_downscaling_shrinks_and_ceils():
    full = svmd_schedule(20, 4, 0.9, 0.0, KL, 0.5, 0.1)
    small = svmd_schedule(20, 4, 0.9, 0.0, KL, 0.5, 0.1, scale=1e-4)
    assert small.downscaled and not full.downscaled
    assert small.T == full.T and small.eta == full.eta
    for k in range(full.K):
        base, corr = raw_svmd_m(20, 4, 0.9, 0.0, 0.5, 0.1, full.K, full.T[k], full.u[k])
        assert (full.m1[k], full.m2[k]) == (math.ceil(base), math.ceil(corr))
        assert (small.m1[k], small.m2[k]) == (max(1, math.ceil(1e-4 * base)), max(1, math.ceil(1e-4 * corr)))


def test_schedule_argument_checks():
    with pytest.raises(ValueError):
        svmd_schedule(2, 2, 0.5, 0.0, KL, 1.5, 0.1)
    with pytest.raises(ValueError):
        svmd_schedule(2, 2, 0.5, 0.0, KL, 0.1, 0.0)
    with pytest.raises(ValueError):
        svmd_schedule(2, 2, 0.5, 0.0, KL, 0.1, 0.1, scale=2.0)
    with pytest.raises(ValueError):
        sc_schedule(2, 2, 0.5, 0.0, 0.0, 1.0, 0.1, 0.1)


def test_sc_schedule_constants():
    s = sc_schedule(5, 2, 0.9, math.log(2), 1.0, math.log(2), 0.1, 0.1)
    assert s.T == 180
    assert s.b == pytest.approx(math.sqrt(1 / (16 * (math.log(180) + 1))), rel=1e-15)
    assert s.b == pytest.approx(0.10046, abs=1e-5)
    u0 = max((1 + math.log(2)) / 0.1, math.log(2))
    assert s.u[0] == pytest.approx(u0)
    assert s.K == math.ceil(math.log2(u0 / 0.1))
    assert s.eta_at(0, 0) == 2.0 and s.eta_at(3, 9) == pytest.approx(0.2)


def test_tiny_chain_full_constants():
    mdp = two_state_chain(0.5)
    ref = reference_solution(mdp, ZERO)
    s = svmd_schedule(2, 2, 0.5, 0.0, KL, 0.25, 0.1)
    pi, rec = run_svmd(GenerativeModel(mdp, master_seed=0), ZERO, KL, s, reference=ref)
    assert np.max(np.abs(evaluate_policy_exact(mdp, ZERO, pi) - ref.v_star)) <= 0.25
    assert rec.samples_total == 4 * sum(s.m1[k] + (s.T[k] - 1) * s.m2[k] for k in range(s.K))
    assert not rec.violations and all(e["halving_ok"] for e in rec.epochs)


def test_stochastic_tiny_instance_full_constants():
    # a 2-state, 2-action instance with genuinely random transitions
    kernel = np.array([[[0.7, 0.3], [0.2, 0.8]], [[0.5, 0.5], [0.9, 0.1]]])
    from mirror_mdp.mdp import TabularMdp
    mdp = TabularMdp(kernel=kernel, cost=np.array([[0.9, 0.2], [0.4, 0.6]]), gamma=0.5)
    ref = reference_solution(mdp, ZERO)
    s = svmd_schedule(2, 2, 0.5, 0.0, KL, 0.25, 0.1)
    pi, rec = run_svmd(GenerativeModel(mdp, master_seed=1), ZERO, KL, s, reference=ref, record_iterations=False)
    assert rec.final_gap_policy <= 0.25
    assert rec.samples_total == rec.expected_samples


@pytest.mark.parametrize("geom", [KL, EUCLIDEAN, tsallis(0.5)])
def test_deterministic_mdp_reaches_the_optimum(geom):
    mdp = generate_garnet(GarnetSpec(8, 3, 1, seed=2, gamma=0.8))
    ref = reference_solution(mdp, ZERO)
    s = svmd_schedule(8, 3, 0.8, 0.0, geom, 0.05, 0.1, scale=1e-6)
    pi, rec = run_svmd(GenerativeModel(mdp, master_seed=0), ZERO, geom, s, reference=ref)
    assert rec.final_gap_policy <= 0.05
    assert all(e["halving_ok"] for e in rec.epochs)


def test_exact_sampling_on_garnet_converges():
    mdp = generate_garnet(GarnetSpec(10, 3, 3, seed=6, gamma=0.8))
    ref = reference_solution(mdp, ZERO)
    s = svmd_schedule(10, 3, 0.8, 0.0, KL, 0.05, 0.1, scale=1e-6)
    _, rec = run_svmd(GenerativeModel(mdp, master_seed=0, exact=True), ZERO, KL, s, reference=ref)
    assert rec.final_gap_policy <= 0.05


def test_downscaled_run_is_monotone_and_records(tmp_path):
    mdp = generate_garnet(GarnetSpec(20, 4, 3, seed=3, gamma=0.9))
    ref = reference_solution(mdp, ZERO)
    s = svmd_schedule(20, 4, 0.9, 0.0, KL, 0.5, 0.1, scale=1e-4)
    _, rec = run_svmd(GenerativeModel(mdp, master_seed=4), ZERO, KL, s, reference=ref)
    assert not rec.violations
    assert len(rec.epoch_gaps) == s.K + 1
    assert rec.epoch_gaps[-1] < rec.epoch_gaps[0]
    path = tmp_path / "r.csv"
    rec.write_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(rec.CSV_COLUMNS)
    assert len(rows) == sum(s.T)
    assert int(rows[-1]["samples_total"]) == rec.samples_total
    assert all(r["downscaled_flag"] == "true" for r in rows)
    rec.write_schedule(tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["m1"] == s.m1 and doc["scale"] == 1e-4 and doc["downscaled"] is True


def test_ledger_mismatch_is_an_audit_failure():
    class Leaky(GenerativeModel):
        def sample_counts(self, m, epoch, phase, t):
            self.counts[0, 0] += 1
            return super().sample_counts(m, epoch, phase, t)

    mdp = two_state_chain(0.5)
    s = svmd_schedule(2, 2, 0.5, 0.0, KL, 0.25, 0.1, scale=1e-6)
    with pytest.raises(AuditError):
        run_svmd(Leaky(mdp, 0), ZERO, KL, s)
    _, rec = run_svmd(Leaky(mdp, 0), ZERO, KL, s, audit=False)
    assert rec.violations


def test_sc_rejects_bad_pairings():
    mdp = two_state_chain(0.5)
    s = sc_schedule(2, 2, 0.5, math.log(2) * 0.1, 0.1, math.log(2), 0.25, 0.1, scale=1e-6)
    with pytest.raises(ValueError):
        run_svmd_sc(GenerativeModel(mdp, 0), ZERO, KL, s)
    with pytest.raises(ValueError):
        run_svmd_sc(GenerativeModel(mdp, 0), negentropy(0.1), EUCLIDEAN, s)


def test_sc_single_state_closed_form():
    mu, gamma, eps = 1.0, 0.9, 0.1
    c = np.array([0.0, 0.5])
    mdp = single_state_mdp(c, gamma)
    reg = negentropy(mu)
    gibbs = np.exp(-c / mu) / np.exp(-c / mu).sum()
    v_star = (-mu * np.log(np.mean(np.exp(-c / mu)))) / (1 - gamma)
    ref = reference_solution(mdp, reg, 1e-12)
    np.testing.assert_allclose(ref.pi_star[0], gibbs, atol=1e-12)
    assert ref.v_star[0] == pytest.approx(v_star, abs=1e-10)
    s = sc_schedule(1, 2, gamma, reg.hbar(2), mu, math.log(2), eps, 0.1)
    pi, rec = run_svmd_sc(GenerativeModel(mdp, 0), reg, KL, s, reference=ref, record_iterations=False)
    assert abs(evaluate_policy_exact(mdp, reg, pi)[0] - v_star) <= eps
    assert divergence(KL, pi[0], gibbs) <= eps / (mu * (1 - gamma))
    assert rec.final_bregman == pytest.approx(divergence(KL, pi[0], gibbs))


def test_bregman_to_optimal_uses_the_optimal_face():
    ties = np.array([[True, True, False]])
    ref = Reference(v_star=np.zeros(1), q_star=np.zeros((1, 3)), pi_star=np.array([[1.0, 0.0, 0.0]]), ties=ties,
                    epsilon=1e-9)
    pi = np.array([[0.3, 0.5, 0.2]])
    assert bregman_to_optimal(KL, pi, ref, ZERO) == pytest.approx(-math.log(0.8))
    # projection of (0.3, 0.5) onto the segment is (0.4, 0.6)
    assert bregman_to_optimal(EUCLIDEAN, pi, ref, ZERO) == pytest.approx(0.5 * (0.01 + 0.01 + 0.04))
    g = tsallis(0.5)
    vertex = min(divergence(g, pi[0], np.eye(3)[a]) for a in (0, 1))
    assert bregman_to_optimal(g, pi, ref, ZERO) == pytest.approx(vertex)
    assert bregman_to_optimal(KL, np.array([[0.5, 0.5, 0.0]]), ref, ZERO) == 0.0


@pytest.mark.parametrize("variant", ["svmd", "svmd_sc"])
def test_exact_kernel_iterates_keep_the_deterministic_bound(variant):
    mdp = generate_garnet(GarnetSpec(12, 3, 3, seed=8, gamma=0.9))
    if variant == "svmd":
        reg = ZERO
        s = svmd_schedule(12, 3, 0.9, 0.0, KL, 0.1, 0.1, scale=1e-6)
        runner = run_svmd
    else:
        reg = negentropy(0.2)
        s = sc_schedule(12, 3, 0.9, reg.hbar(3), 0.2, math.log(3), 0.1, 0.1, scale=1e-6)
        runner = run_svmd_sc
    ref = reference_solution(mdp, reg)
    # the audit raises on any V_t < Gamma_pi V_t - 1e-9
    _, rec = runner(GenerativeModel(mdp, master_seed=0, exact=True), reg, KL, s, reference=ref)
    assert not rec.violations
    assert rec.final_gap_policy <= 0.1


def test_reruns_give_identical_records():
    mdp = generate_garnet(GarnetSpec(10, 3, 3, seed=1, gamma=0.9))
    s = svmd_schedule(10, 3, 0.9, 0.0, KL, 0.5, 0.1, scale=1e-4)
    ref = reference_solution(mdp, ZERO)
    a = run_svmd(GenerativeModel(mdp, master_seed=5), ZERO, KL, s, reference=ref)[1]
    b = run_svmd(GenerativeModel(mdp, master_seed=5), ZERO, KL, s, reference=ref)[1]
    assert a.rows == b.rows
    c = run_svmd(GenerativeModel(mdp, master_seed=6), ZERO, KL, s, reference=ref)[1]
    assert a.rows != c.rows
