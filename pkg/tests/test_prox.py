from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from helpers import simplex_grid
from mirror_mdp.prox import (EUCLIDEAN, KL, ZERO, ProxGeometry, Regularizer, d0_bound, divergence, kkt_residual,
                             negentropy, parse_geometry, parse_regularizer, project_simplex, prox_objective,
                             prox_step, tsallis)

GEOMS = [EUCLIDEAN, KL, tsallis(0.3), tsallis(0.5), tsallis(0.8)]


def pairs(geom):
    regs = [ZERO]
    if geom.kind == "kl":
        regs.append(negentropy(0.5))
    return [(geom, r) for r in regs]


CASES = [c for g in GEOMS for c in pairs(g)]


def test_divergence_examples():
    for g in GEOMS:
        assert divergence(g, [0.3, 0.7], [0.3, 0.7]) == pytest.approx(0.0, abs=1e-15)
    assert divergence(EUCLIDEAN, [1, 0], [0, 1]) == pytest.approx(1.0)
    assert divergence(KL, [0.9, 0.1], [0.5, 0.5]) == pytest.approx(0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(5), rel=1e-14)
    assert divergence(KL, [0.9, 0.1], [0.5, 0.5]) == pytest.approx(0.5108256, abs=1e-7)


def test_divergence_matches_definition():
    rng = np.random.default_rng(0)
    for g in GEOMS:
        x, y = rng.dirichlet(np.ones(4), size=2)
        manual = g.omega(y) - g.omega(x) - g.grad(x) @ (y - x)
        assert divergence(g, x, y) == pytest.approx(manual, abs=1e-12)


def test_kl_divergence_infinite_off_support():
    assert divergence(KL, [1.0, 0.0], [0.5, 0.5]) == math.inf
    assert divergence(KL, [0.5, 0.5], [1.0, 0.0]) == pytest.approx(math.log(2))


def test_d0_values():
    assert d0_bound(EUCLIDEAN, 7) == 1.0
    assert d0_bound(KL, 4) == pytest.approx(1.386294, abs=1e-6)
    assert d0_bound(tsallis(0.5), 4) == pytest.approx(4.0)


@pytest.mark.parametrize("geom", GEOMS)
def test_d0_bounds_divergence_from_uniform(geom):
    rng = np.random.default_rng(1)
    for n in (2, 3, 5, 8):
        uni = np.full(n, 1.0 / n)
        pts = np.vstack([rng.dirichlet(np.full(n, 0.3), size=200), np.eye(n)])
        assert np.max(divergence(geom, uni, pts)) <= d0_bound(geom, n) + 1e-12


@pytest.mark.parametrize("geom", GEOMS)
def test_strong_convexity_over_random_pairs(geom):
    # D(x, y) >= half squared norm of y - x, e.g. Pinsker for KL
    rng = np.random.default_rng(2)
    n = rng.integers(2, 6, size=1000)
    worst = 0.0
    for k in n:
        x, y = rng.dirichlet(np.full(k, 0.7), size=2)
        worst = min(worst, divergence(geom, x, y) - geom.distance(x, y))
    assert worst >= -1e-12


def test_prox_examples():
    np.testing.assert_allclose(prox_step(EUCLIDEAN, ZERO, [0.5, 0.5], [1.0, 0.0], 0.1), [0.45, 0.55], atol=1e-15)
    np.testing.assert_allclose(prox_step(KL, ZERO, [0.5, 0.5], [math.log(3), 0.0], 1.0), [0.25, 0.75], atol=1e-15)


def test_kl_example_against_fine_grid():
    grid = simplex_grid(2, 1e-5)
    obj = prox_objective(KL, ZERO, [0.5, 0.5], [math.log(3), 0.0], 1.0, grid)
    assert grid[np.argmin(obj)] == pytest.approx([0.25, 0.75], abs=1e-5)


@pytest.mark.parametrize("geom,reg", CASES)
def test_symmetric_input_gives_uniform(geom, reg):
    np.testing.assert_allclose(prox_step(geom, reg, np.full(3, 1 / 3), np.full(3, 2.0), 0.7), np.full(3, 1 / 3),
                               atol=1e-12)


def test_large_step_negentropy_tends_to_gibbs():
    q = np.array([0.2, 1.0, 0.5])
    reg = negentropy(1.0)
    x = prox_step(KL, reg, [0.6, 0.3, 0.1], q, 1e4)
    gibbs = np.exp(-q) / np.exp(-q).sum()
    grid = simplex_grid(3, 1e-3)
    brute = grid[np.argmin(prox_objective(KL, reg, [0.6, 0.3, 0.1], q, 1e4, grid))]
    np.testing.assert_allclose(x, gibbs, atol=1e-3)
    np.testing.assert_allclose(brute, gibbs, atol=2e-3)


@pytest.mark.parametrize("geom,reg", CASES)
def test_small_step_stays_put(geom, reg):
    cur = np.array([0.2, 0.5, 0.3])
    x = prox_step(geom, reg, cur, np.array([1.0, -2.0, 0.5]), 1e-9)
    np.testing.assert_allclose(x, cur, atol=1e-7)


@pytest.mark.parametrize("geom,reg", CASES)
def test_three_point_inequality(geom, reg):
    # eta(<q,x+> + h(x+)) + D(c,x+) + (1 + eta mu) D(x+,y) <= eta(<q,y> + h(y)) + D(c,y)
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(2, 6))
        cur = rng.dirichlet(np.ones(n))
        q = rng.uniform(-3, 3, size=n)
        eta = float(np.exp(rng.uniform(-3, 3)))
        x = prox_step(geom, reg, cur, q, eta)
        ys = np.vstack([rng.dirichlet(np.ones(n), size=20), np.eye(n)])
        lhs = prox_objective(geom, reg, cur, q, eta, x) + (1 + eta * reg.mu) * divergence(geom, x, ys)
        rhs = prox_objective(geom, reg, cur, q, eta, ys)
        assert np.all(lhs <= rhs + 1e-9 * (1 + np.abs(rhs)))


@pytest.mark.parametrize("geom,reg", CASES)
def test_kkt_residual_small_on_random_inputs(geom, reg):
    rng = np.random.default_rng(4)
    cur = rng.dirichlet(np.ones(5), size=300)
    q = rng.uniform(0, 10, size=(300, 5))
    for eta in (1e-2, 1.0, 50.0):
        x = prox_step(geom, reg, cur, q, eta)
        np.testing.assert_allclose(x.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(x >= 0)
        res = kkt_residual(geom, reg, cur, q, eta, x)
        interior = np.all(x > 1e-9, axis=1) | (geom.kind == "euclidean")
        assert np.all(res[interior] <= 1e-10)
        assert np.all(kkt_residual(geom, reg, cur, q, eta, x, relative=True) <= 1e-12)


def test_kkt_residual_detects_a_wrong_point():
    cur = np.array([0.5, 0.5])
    x = prox_step(KL, ZERO, cur, [1.0, 0.0], 1.0)
    assert kkt_residual(KL, ZERO, cur, [1.0, 0.0], 1.0, x) <= 1e-12
    assert kkt_residual(KL, ZERO, cur, [1.0, 0.0], 1.0, np.array([0.5, 0.5])) > 0.1


def test_tsallis_extreme_steps_hold_to_float_precision():
    # a coordinate of current near 1e-6 puts gradient terms near 1e5, so only a
    # relative residual is meaningful at machine precision
    rng = np.random.default_rng(5)
    cur = rng.dirichlet(np.ones(4), size=100)
    q = rng.uniform(0, 1, size=(100, 4))
    for p in (0.1, 0.5, 0.9):
        g = tsallis(p)
        for eta in (1e-6, 1e3):
            x = prox_step(g, ZERO, cur, q, eta)
            assert np.max(kkt_residual(g, ZERO, cur, q, eta, x, relative=True)) <= 1e-13


@settings(max_examples=200, deadline=None)
@given(y=st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_project_simplex_against_bisection(y):
    y = np.array(y)
    x = project_simplex(y)
    # theta solves sum(max(y - theta, 0)) = 1
    theta = brentq(lambda t: np.maximum(y - t, 0).sum() - 1.0, y.min() - 1.5, y.max())
    np.testing.assert_allclose(x, np.maximum(y - theta, 0), atol=1e-9)


def test_prox_input_errors():
    with pytest.raises(ValueError):
        prox_step(KL, ZERO, [0.5, 0.5], [1.0, 2.0, 3.0], 1.0)
    with pytest.raises(ValueError):
        prox_step(KL, ZERO, [0.5, 0.5], [np.nan, 0.0], 1.0)
    with pytest.raises(ValueError):
        prox_step(KL, ZERO, [0.5, 0.5], [1.0, 0.0], 0.0)
    with pytest.raises(ValueError):
        prox_step(EUCLIDEAN, negentropy(0.1), [0.5, 0.5], [1.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        prox_step(tsallis(0.5), negentropy(0.1), [0.5, 0.5], [1.0, 0.0], 1.0)


def test_tag_parsing():
    assert parse_geometry("euclidean") == EUCLIDEAN
    assert parse_geometry("KL") == KL
    assert parse_geometry("tsallis:p=0.5") == tsallis(0.5)
    assert parse_regularizer("zero") == ZERO
    assert parse_regularizer("negentropy:mu=0.1") == negentropy(0.1)
    for g in GEOMS:
        assert parse_geometry(g.tag) == g
    for bad in ("tsallis", "tsallis:p=1.5", "tsallis:q=0.5", "kl:p=1", "l2", "tsallis:p=x"):
        with pytest.raises(ValueError):
            parse_geometry(bad)
    for bad in ("negentropy", "negentropy:mu=0", "entropy", "zero:mu=1"):
        with pytest.raises(ValueError):
            parse_regularizer(bad)


def test_regularizer_basics():
    reg = negentropy(0.4)
    assert reg.hbar(5) == pytest.approx(0.4 * math.log(5))
    assert reg.value(np.full(5, 0.2)) == pytest.approx(0.0, abs=1e-15)
    assert reg.value(np.eye(5)[0]) == pytest.approx(reg.hbar(5))
    with pytest.raises(ValueError):
        Regularizer("zero", 1.0)
    with pytest.raises(ValueError):
        ProxGeometry("kl", 0.5)


@pytest.mark.parametrize("reg", [ZERO, negentropy(0.3)])
def test_simplex_min_against_grid(reg):
    q = np.array([0.4, 0.1, 0.3])
    value, pi = reg.simplex_min(q)
    grid = simplex_grid(3, 1e-3)
    vals = grid @ q + reg.value(grid)
    assert value <= vals.min() + 1e-12
    assert value >= vals.min() - 5e-3
    assert float(pi @ q + reg.value(pi)) == pytest.approx(float(value), abs=1e-12)
