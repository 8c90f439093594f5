import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phaseseg import sot
from phaseseg.sot import CostBundle, SOTConfig


def random_bundle(r, T, K, cfg=SOTConfig()):
    X = r.normal(size=(T, 5))
    Aproto = r.normal(size=(K, 5))
    return sot.build_costs(X, Aproto, cfg)


def random_plan(r, T, K):
    P = r.uniform(0.1, 1.0, (T, K))
    return P / (T * P.sum(axis=1, keepdims=True))


def kl_loop(P, q):
    T, K = P.shape
    total = 0.0
    for k in range(K):
        m = sum(P[i, k] for i in range(T))
        if m > 0:
            total += m * np.log(m / q[k])
    return total


def objective_loop(P, b, cfg):
    T, K = P.shape
    gw = 0.0
    for i in range(T):
        for j in range(T):
            for k in range(K):
                for l in range(K):
                    gw += b.C_temp[i, j] * b.C_cat[k, l] * P[i, k] * P[j, l]
    lin = sum(b.C_vis[i, k] * P[i, k] for i in range(T) for k in range(K))
    return cfg.alpha * gw + (1 - cfg.alpha) * lin + cfg.lambda_kl * kl_loop(P, cfg.prior(K))


def test_visual_cost_examples():
    a = np.array([[1.0, 2.0, -0.5]])
    orth = np.array([[2.0, -1.0, 0.0]])
    C = sot.visual_cost(np.vstack([a, orth, -3 * a]), a)
    np.testing.assert_allclose(C[:, 0], [0.0, 1.0, 2.0], atol=1e-12)


def test_visual_cost_zero_row_named():
    with pytest.raises(ValueError, match="row 1"):
        sot.visual_cost(np.array([[1.0, 0.0], [0.0, 0.0]]), np.eye(2))
    with pytest.raises(ValueError, match="prototype at row 0"):
        sot.visual_cost(np.eye(2), np.array([[0.0, 0.0], [1.0, 1.0]]))


def test_temporal_cost_examples():
    C = sot.temporal_cost(100, 0.04)
    assert C[10, 11] == pytest.approx(0.75)
    assert C[10, 14] == 0.0 and C[10, 30] == 0.0
    assert np.array_equal(C, C.T) and np.all(np.diag(C) == 0)
    assert np.all(C >= 0)


def test_temporal_cost_min_radius():
    # r*T below one frame would make the kernel vanish; the floor keeps neighbours coupled
    assert np.all(sot.temporal_cost(6, 0.04) == 0)
    C = sot.temporal_cost(6, 0.04, min_radius=2.0)
    assert C[0, 1] == 0.5 and C[0, 2] == 0.0


def test_category_cost():
    assert np.array_equal(sot.category_cost(1), [[0.0]])
    assert np.array_equal(sot.category_cost(4), np.ones((4, 4)) - np.eye(4))


def test_kl_examples():
    q = np.array([0.2, 0.3, 0.5])
    P = np.array([[0.1, 0.1, 0.3], [0.1, 0.2, 0.2]])
    assert sot.kl_marginal(P, q) == pytest.approx(0.0, abs=1e-15)
    assert sot.kl_marginal(np.full((1, 4), 0.25), np.full(4, 0.25)) == 0.0
    with pytest.raises(ValueError):
        sot.kl_marginal(P, np.array([0.5, 0.5, 0.0]))


@pytest.mark.parametrize("seed", range(10))
def test_kl_and_objective_loop_oracles(seed):
    r = np.random.default_rng(seed)
    T, K = r.integers(1, 7), r.integers(1, 5)
    cfg = SOTConfig(alpha=r.uniform(), lambda_kl=r.uniform(), radius=0.5)
    b = random_bundle(r, T, K, cfg)
    P = random_plan(r, T, K)
    q = r.uniform(0.1, 1, K)
    q /= q.sum()
    assert sot.kl_marginal(P, q) == pytest.approx(kl_loop(P, q), abs=1e-12)
    assert sot.objective(P, b, cfg) == pytest.approx(objective_loop(P, b, cfg), abs=1e-10)


def test_objective_boundaries():
    r = np.random.default_rng(0)
    b = random_bundle(r, 5, 3, SOTConfig(radius=1.0))
    P = random_plan(r, 5, 3)
    cfg = SOTConfig(alpha=0.0, lambda_kl=0.0)
    assert sot.objective(P, b, cfg) == pytest.approx(np.sum(b.C_vis * P), abs=1e-15)
    one_class = np.zeros((5, 3))
    one_class[:, 1] = 0.2
    assert sot.objective(one_class, b, SOTConfig(alpha=1.0, lambda_kl=0.0)) == 0.0


def test_gradient_examples():
    r = np.random.default_rng(1)
    b = random_bundle(r, 6, 3, SOTConfig(radius=0.5))
    P = random_plan(r, 6, 3)
    g = sot.objective_gradient(P, b, SOTConfig(alpha=0.0, lambda_kl=0.0))
    np.testing.assert_array_equal(g, b.C_vis)
    cfg = SOTConfig(alpha=1.0, lambda_kl=0.0)
    np.testing.assert_allclose(sot.objective_gradient(P, b, cfg), 2 * b.C_temp @ P @ b.C_cat, atol=1e-15)


def fd_gradient(P, b, cfg, h=1e-7):
    G = np.zeros_like(P)
    for idx in np.ndindex(P.shape):
        Pp, Pm = P.copy(), P.copy()
        Pp[idx] += h
        Pm[idx] -= h
        G[idx] = (sot.objective(Pp, b, cfg) - sot.objective(Pm, b, cfg)) / (2 * h)
    return G


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 10), st.integers(1, 4))
def test_gradient_matches_finite_differences(seed, T, K):
    r = np.random.default_rng(seed)
    cfg = SOTConfig(alpha=r.uniform(), lambda_kl=r.uniform(0, 1), radius=r.uniform(0.1, 1.0), min_radius=1.5)
    b = random_bundle(r, T, K, cfg)
    P = random_plan(r, T, K)
    g = sot.objective_gradient(P, b, cfg)
    num = fd_gradient(P, b, cfg)
    assert np.max(np.abs(g - num) / np.maximum(1.0, np.abs(num))) < 1e-6


def test_gradient_zero_mass_error():
    b = random_bundle(np.random.default_rng(0), 3, 2)
    P = np.array([[1 / 3, 0.0]] * 3)
    with pytest.raises(ValueError, match="class 1"):
        sot.objective_gradient(P, b, SOTConfig(lambda_kl=0.1))


def _bundle_from_vis(C_vis, cfg):
    T, K = C_vis.shape
    return CostBundle(C_vis, sot.temporal_cost(T, cfg.radius, cfg.min_radius), sot.category_cost(K))


def test_solve_follows_visual_costs():
    cfg = SOTConfig(alpha=0.0, lambda_kl=0.0)
    C_vis = np.array([[0.0, 2.0], [0.1, 1.9], [1.8, 0.2], [2.0, 0.0]])
    labels = sot.decode(sot.solve(_bundle_from_vis(C_vis, cfg), cfg).plan)
    best = min(itertools.product(range(2), repeat=4), key=lambda lab: sum(C_vis[i, k] for i, k in enumerate(lab)))
    assert labels.tolist() == list(best) == [0, 0, 1, 1]


def transitions(labels):
    return int(np.sum(np.diff(labels) != 0))


def alternating_instance():
    """T=6, K=2, visual costs weakly preferring labels 0,1,0,1,0,1."""
    pref = np.array([0, 1, 0, 1, 0, 1])
    C_vis = np.full((6, 2), 0.55)
    C_vis[np.arange(6), pref] = 0.45
    return C_vis


def test_structure_term_smooths_labels():
    C_vis = alternating_instance()
    plain = SOTConfig(alpha=0.0)
    structured = SOTConfig(alpha=0.5)
    lab0 = sot.decode(sot.solve(_bundle_from_vis(C_vis, plain), plain).plan)
    lab5 = sot.decode(sot.solve(_bundle_from_vis(C_vis, structured), structured).plan)
    assert transitions(lab0) == 5
    assert transitions(lab5) < transitions(lab0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12), st.integers(1, 4))
def test_plan_rows_and_positivity(seed, T, K):
    r = np.random.default_rng(seed)
    cfg = SOTConfig(alpha=r.uniform(), lambda_kl=r.uniform(0, 1))
    res = sot.solve(random_bundle(r, T, K, cfg), cfg)
    np.testing.assert_allclose(res.plan.sum(axis=1), 1.0 / T, atol=1e-6)
    assert np.all(res.plan > 0)
    assert len(res.trace) == res.iterations + 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 10), st.integers(2, 4))
def test_small_steps_do_not_increase_objective(seed, T, K):
    r = np.random.default_rng(seed)
    cfg = SOTConfig(alpha=r.uniform(), lambda_kl=r.uniform(0, 1), step_size=0.05, max_iters=50)
    res = sot.solve(random_bundle(r, T, K, cfg), cfg)
    assert res.trace[-1] <= res.trace[0] + 1e-12


def test_solver_stops_on_tolerance():
    cfg = SOTConfig(alpha=0.0, lambda_kl=0.0, tol=1e-3, max_iters=500)
    res = sot.solve(_bundle_from_vis(alternating_instance(), cfg), cfg)
    assert res.iterations < 500


def test_decode_examples():
    assert sot.decode(np.array([[0.1, 0.7, 0.2]])).tolist() == [1]
    assert sot.decode(np.array([[0.5, 0.5]])).tolist() == [0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_decode_row_scale_invariance(seed):
    r = np.random.default_rng(seed)
    P = r.uniform(size=(7, 3))
    assert np.array_equal(sot.decode(P), sot.decode(P * r.uniform(0.1, 10, (7, 1))))


def test_pseudo_labels():
    np.testing.assert_allclose(sot.pseudo_labels(np.array([[0.2, 0.2]])), [[0.5, 0.5]])
    r = np.random.default_rng(3)
    P = random_plan(r, 8, 4)
    Q = sot.pseudo_labels(P)
    np.testing.assert_allclose(Q.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(sot.pseudo_labels(Q), Q, atol=1e-15)
    with pytest.raises(ValueError, match="row 1"):
        sot.pseudo_labels(np.array([[0.5, 0.5], [0.0, 0.0]]))


def test_hard_plan_rows():
    P = sot.hard_plan(np.array([0, 2, 1]), 3)
    np.testing.assert_allclose(P.sum(axis=1), 1 / 3)
    assert sot.decode(P).tolist() == [0, 2, 1]


def test_config_validation():
    with pytest.raises(ValueError):
        SOTConfig(alpha=1.5)
    with pytest.raises(ValueError):
        SOTConfig(q=(0.5, 0.6))
    with pytest.raises(ValueError):
        SOTConfig(q=(1.0, 0.0))
    assert SOTConfig(q=[0.25, 0.75]).prior(2).tolist() == [0.25, 0.75]
    with pytest.raises(ValueError):
        SOTConfig(q=(0.5, 0.5)).prior(3)
    with pytest.raises(ValueError):
        CostBundle(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
