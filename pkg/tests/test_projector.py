import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phaseseg import metrics, projector as pj
from phaseseg import tape as ad
from phaseseg.sot import SOTConfig


def _params(r, cfg=pj.ProjectorConfig(), K=4):
    w = pj.init_mlp(cfg, seed=int(r.integers(1000)))
    w["prototypes"] = r.normal(size=(K, cfg.latent_dim))
    return pj.ProjectorParams(w, cfg.temperature)


def loss_loop(probs, pseudo):
    total = 0.0
    for f, P in zip(probs, pseudo):
        for i in range(P.shape[0]):
            for j in range(P.shape[1]):
                total -= P[i, j] * np.log(max(f[i, j], 1e-12))
    return total


def test_project_shapes_and_zero_weights():
    r = np.random.default_rng(0)
    p = _params(r)
    x = r.normal(size=(7, 64))
    assert pj.project(x, p).shape == (7, 40)
    zero = {k: np.zeros_like(v) for k, v in p.weights.items()}
    assert np.all(pj.project(x, zero) == 0)
    twin = pj.project(np.vstack([x[0], x[0]]), p)
    assert np.array_equal(twin[0], twin[1])
    with pytest.raises(ad.ShapeError):
        pj.project(r.normal(size=(3, 10)), p)


def test_classify_limit_and_symmetry():
    e = np.eye(4, 40)
    p = pj.ProjectorParams({"prototypes": e}, temperature=1e-3)
    assert pj.classify(e[0] * 3.0, p)[0] == pytest.approx(1.0, abs=1e-12)
    same = pj.ProjectorParams({"prototypes": np.tile(e[:1] + 0.5, (4, 1))}, 0.1)
    np.testing.assert_allclose(pj.classify(np.random.default_rng(1).normal(size=40), same), 0.25, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100))
def test_classify_normalized_and_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    p = _params(r)
    x = r.normal(size=(5, 40))
    out = pj.classify(x, p)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(pj.classify(c * x, p), out, atol=1e-9)


def test_classify_errors():
    p = _params(np.random.default_rng(0))
    with pytest.raises(ValueError):
        pj.classify(np.zeros(40), p)
    with pytest.raises(ValueError):
        pj.classify(np.ones(40), pj.ProjectorParams(p.weights, temperature=0.0))


def test_loss_pseudo_examples():
    onehot = np.eye(4)[[0, 2, 1]]
    assert pj.loss_pseudo([onehot], [onehot]) == 0.0
    u = np.full((1, 4), 0.25)
    assert pj.loss_pseudo([u], [u]) == pytest.approx(np.log(4), abs=1e-15)
    with pytest.raises(ValueError):
        pj.loss_pseudo([u], [u - 0.5])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(1, 6), st.integers(2, 5))
def test_loss_pseudo_loop_oracle(seed, B, T, K):
    r = np.random.default_rng(seed)
    probs = [r.dirichlet(np.ones(K), T) for _ in range(B)]
    probs[0][0, 0] = 0.0  # exercises the log clamp
    pseudo = [r.dirichlet(np.ones(K), T) for _ in range(B)]
    got = pj.loss_pseudo(probs, pseudo)
    assert got == pytest.approx(loss_loop(probs, pseudo), abs=1e-12, rel=1e-12)
    assert got >= 0


def test_loss_pseudo_node_matches_array():
    r = np.random.default_rng(2)
    f, P = r.dirichlet(np.ones(4), 6), r.dirichlet(np.ones(4), 6)
    t = ad.Tape()
    assert pj.loss_pseudo(t.const(f), P).value == pytest.approx(pj.loss_pseudo([f], [P]), abs=1e-14)


def test_pseudo_loss_gradient_through_head():
    r = np.random.default_rng(3)
    cfg = pj.ProjectorConfig(input_dim=6, hidden_dim=5, latent_dim=4)
    p = _params(r, cfg, K=3)
    xs = [r.normal(size=(5, 6)), r.normal(size=(4, 6))]
    Ps = [r.dirichlet(np.ones(3), 5), r.dirichlet(np.ones(3), 4)]

    def f(t, w):
        total = None
        for x, P in zip(xs, Ps):
            term = pj.loss_pseudo(pj.classify_nodes(pj.project_nodes(t.const(x), w), w["prototypes"], 0.1), P)
            total = term if total is None else total + term
        return total

    assert ad.grad_check(f, p.weights) < 1e-4


def test_small_step_decreases_loss():
    r = np.random.default_rng(4)
    p = _params(r)
    xs = [r.normal(size=(5, 64))]
    Ps = [r.dirichlet(np.ones(4), 5)]
    before, grads = pj.batch_loss(p.weights, xs, Ps, p.temperature)
    new, _ = ad.adam_step(p.weights, grads, ad.AdamState(), lr=1e-4)
    after, _ = pj.batch_loss(new, xs, Ps, p.temperature)
    assert after < before


def gaussian_phase_features(n_videos=8, seed=0, dim=64):
    """Four well separated clusters visited in temporal order."""
    r = np.random.default_rng(seed)
    means = r.normal(size=(4, dim)) * 3
    feats, labels = [], []
    for _ in range(n_videos):
        lengths = r.integers(15, 30, 4)
        lab = np.repeat(np.arange(4), lengths)
        feats.append(means[lab] + r.normal(size=(len(lab), dim)))
        labels.append(lab)
    return feats, labels


def test_fit_on_separated_clusters():
    feats, labels = gaussian_phase_features()
    cfg = pj.ProjectorConfig(epochs=10)
    sot_cfg = SOTConfig()
    res = pj.fit(feats, cfg, sot_cfg)
    preds, plans = zip(*(pj.segment(f, res.params, sot_cfg) for f in feats))
    report = metrics.evaluate(preds, labels, plans, 4)
    assert report.mof >= 0.8
    assert [r["epoch"] for r in res.log] == list(range(1, 11))
    assert res.log[-1]["loss"] < res.log[0]["loss"]


def test_fit_zero_learning_rate_is_identity():
    feats, _ = gaussian_phase_features(n_videos=3)
    cfg = pj.ProjectorConfig(epochs=1, learning_rate=0.0)
    init = pj.initial_params(feats, cfg)
    res = pj.fit(feats, cfg, SOTConfig(), params=init)
    for k in init.weights:
        assert np.array_equal(res.params.weights[k], init.weights[k])


def test_fit_is_deterministic():
    feats, _ = gaussian_phase_features(n_videos=4)
    cfg = pj.ProjectorConfig(epochs=2)
    a, b = pj.fit(feats, cfg), pj.fit(feats, cfg)
    assert a.log == b.log
    for k in a.params.weights:
        assert np.array_equal(a.params.weights[k], b.params.weights[k])


def test_collapsed_prototypes_abort():
    feats, _ = gaussian_phase_features(n_videos=2)
    cfg = pj.ProjectorConfig(epochs=1)
    init = pj.initial_params(feats, cfg)
    init.weights["prototypes"][1] = init.weights["prototypes"][0] * 2.0
    with pytest.raises(FloatingPointError, match="collapsed"):
        pj.fit(feats, cfg, params=init)


def test_segment_rows_and_labels():
    feats, _ = gaussian_phase_features(n_videos=1)
    p = pj.initial_params(feats, pj.ProjectorConfig())
    labels, plan = pj.segment(feats[0], p)
    assert labels.shape == (len(feats[0]),) and plan.shape == (len(feats[0]), 4)
    np.testing.assert_allclose(plan.sum(axis=1), 1 / len(feats[0]), atol=1e-6)


def test_defaults():
    cfg = pj.ProjectorConfig()
    assert (cfg.input_dim, cfg.latent_dim, cfg.num_classes, cfg.n_bins) == (64, 40, 4, 5)
    assert (cfg.learning_rate, cfg.weight_decay) == (1e-3, 1e-4)
