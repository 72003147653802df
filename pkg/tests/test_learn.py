import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastdco.learn import (Cascade, LabeledSamples, LinearClassifier, audit_cascade, bce_grad,
                           bce_loss, build_cascade, calibrate_beta, collect_quant_training,
                           collect_training, fold_standardization, label0_recall, load_cascade,
                           load_classifier, pruned_rate, save_cascade, save_classifier,
                           stage_target, train_logistic, train_quant_classifier)
from fastdco.quant import opq_train
from fastdco.transform import fit_pca

from conftest import anisotropic


def _samples(rng, n=400, extras=0):
    tau = rng.uniform(5, 10, n)
    dis = rng.uniform(0, 20, n)
    exact = dis + rng.normal(0, 1, n)
    ex = rng.standard_normal((n, extras)) if extras else np.zeros((0, 0))
    return LabeledSamples(dis, tau, (exact > tau).astype(np.int8), exact, ex)


def finite_diff(w, X, y, h=1e-6):
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (bce_loss(w + e, X, y) - bce_loss(w - e, X, y)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((10, 3))
    y = rng.integers(0, 2, 10).astype(float)
    w = rng.standard_normal(4)
    g, fd = bce_grad(w, X, y), finite_diff(w, X, y)
    assert np.abs(g - fd).max() / np.abs(fd).max() <= 1e-4


def test_separable_toy_set():
    dis = np.linspace(0, 10, 1000)
    tau = np.full(1000, 5.0)
    keep = np.abs(dis - 5.0) > 0.1
    s = LabeledSamples(dis[keep], tau[keep], (dis[keep] > 5).astype(np.int8), dis[keep])
    clf = train_logistic(s, seed=0)
    acc = (clf.predict(s.dis_prime, s.tau) == s.label).mean()
    assert acc >= 0.99


def test_tau_varies_and_reduction_is_scale_free(rng):
    s = _samples(rng, 3000)
    clf = train_logistic(s, seed=0, epochs=30)
    assert clf.m1 > 0
    acc = (clf.predict(s.dis_prime, s.tau) == s.label).mean()
    assert acc >= 0.85


def test_single_class_rejected():
    s = LabeledSamples(np.ones(4), np.ones(4), np.zeros(4, np.int8), np.ones(4))
    with pytest.raises(ValueError):
        train_logistic(s)


def test_fold_standardization_identity(rng):
    X = rng.standard_normal((50, 3)) * [10, 0.1, 3] + [4, -2, 0]
    mu, sd = X.mean(0), X.std(0)
    w, b = rng.standard_normal(3), 0.7
    coef, bias = fold_standardization(w, b, mu, sd)
    np.testing.assert_allclose(((X - mu) / sd) @ w + b, X @ coef + bias, rtol=1e-12, atol=1e-12)


def test_training_deterministic(rng):
    s = _samples(rng, 1000, extras=1)
    assert train_logistic(s, seed=3) == train_logistic(s, seed=3)


def test_loss_history_decreases_on_average(rng):
    hist: list = []
    train_logistic(_samples(rng, 2000), seed=0, loss_history=hist)
    assert len(hist) == 20
    assert hist[-1] < hist[0]


def test_calibrate_full_recall(rng):
    s = _samples(rng)
    clf = calibrate_beta(train_logistic(s), s, 1.0)
    assert label0_recall(clf, s) == 1.0
    assert np.all(clf.predict(s.dis_prime[s.label == 0], s.tau[s.label == 0]) == 0)


@pytest.mark.parametrize("r", [0.9, 0.99, 0.995])
def test_calibrate_reaches_target_and_is_tight(rng, r):
    s = _samples(rng, 5000)
    clf = calibrate_beta(train_logistic(s), s, r)
    assert label0_recall(clf, s) >= r
    looser = clf.with_beta(clf.beta + 1e-3 * np.median(s.tau))
    assert label0_recall(looser, s) < r or looser.beta > s.tau.max()


def test_calibrate_rejects_bad_target(rng):
    s = _samples(rng)
    with pytest.raises(ValueError):
        calibrate_beta(LinearClassifier(1.0, 0.0), s, 1.2)
    with pytest.raises(ValueError):
        calibrate_beta(LinearClassifier(1.0, 0.0), s, 0.0)


@given(st.integers(0, 2**31), st.floats(-5, 5), st.floats(-5, 5))
def test_beta_monotone_recall_and_pruned_rate(seed, b1, b2):
    rng = np.random.default_rng(seed)
    s = _samples(rng, 200, extras=1)
    clf = LinearClassifier(rng.uniform(0.2, 2), 0.0, (rng.normal(),))
    lo, hi = min(b1, b2), max(b1, b2)
    assert label0_recall(clf.with_beta(lo), s) >= label0_recall(clf.with_beta(hi), s)
    assert pruned_rate(clf.with_beta(lo), s) <= pruned_rate(clf.with_beta(hi), s)


def test_stage_target_arithmetic():
    assert stage_target(0.995, 4) == pytest.approx(0.99875, abs=1e-15)
    assert stage_target(1.0, 3) == 1.0


def test_decide_matches_predict(rng):
    clf = LinearClassifier(1.3, -2.0, (0.5,))
    for _ in range(100):
        d, t, e = rng.uniform(0, 10, 3)
        assert clf.decide(d, t, (e,)) == bool(clf.predict(d, t, [[e]]))


def test_bsa_weights_reproduce_corrected_test(rng):
    # m1=1, beta=-m*sigma is the rearranged "dis' - m*sigma > tau"
    for _ in range(1000):
        dis, tau, sigma = rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0, 5)
        clf = LinearClassifier(1.0, -3.0 * sigma)
        assert clf.decide(dis, tau) == (dis - 3.0 * sigma > tau)


@pytest.fixture(scope="module")
def small_training():
    x = anisotropic(3000, 32, seed=4)
    rotor = fit_pca(x)
    q = x[:60] + np.random.default_rng(9).normal(0, 0.05, (60, 32)).astype(np.float32)
    ts = collect_training(x, rotor, q, 10, per_query_visits=40, seed=0, delta_d=8)
    return x, rotor, q, ts


def test_collect_training_labels(small_training):
    x, _, q, ts = small_training
    assert np.array_equal(ts.label, (ts.exact_dis > ts.tau).astype(np.int8))
    for qi in range(len(q)):
        rows = ts.query == qi
        assert np.count_nonzero(ts.label[rows] == 0) == 10
        # independent exact oracle for tau
        d = ((x.astype(np.float64) - q[qi]) ** 2).sum(1)
        assert ts.tau[rows][0] == pytest.approx(np.sort(d)[9], rel=1e-9)
    neg = ts.label == 1
    assert np.all(ts.exact_dis[neg] > ts.tau[neg])
    assert ts.checkpoints.tolist() == [8, 16, 24]


def test_collect_training_projection_feature(small_training):
    x, rotor, q, ts = small_training
    from fastdco.transform import apply

    i = 17
    xr = apply(rotor, x[ts.candidate[i]]).astype(np.float64)
    qr = apply(rotor, q[ts.query[i]]).astype(np.float64)
    expect = xr @ xr + qr @ qr - 2 * xr[:16] @ qr[:16]
    assert ts.dis_prime[i, 1] == pytest.approx(expect, rel=1e-6)


def test_collect_training_too_few_points():
    x = np.zeros((5, 4), np.float32)
    from fastdco.transform import identity_rotor

    with pytest.raises(ValueError):
        collect_training(x, identity_rotor(4), x[:1], 5)


def test_cascade_shape_and_stage_recall(small_training):
    x, rotor, q, ts = small_training
    audit: dict = {}
    c = build_cascade(x, rotor, 8, 10, 0.995, training=ts, audit=audit)
    assert c.checkpoints == (8, 16, 24)
    assert all(r == pytest.approx(1 - 0.005 / 4) for r in c.stage_targets)
    assert "holdout_false_prune_rate" in audit
    assert audit["train_false_prune_rate"] <= 3 * (1 - c.stage_targets[0]) + 1e-12


def test_cascade_d128_has_three_stages():
    x = anisotropic(1200, 128, seed=2)
    c = build_cascade(x, fit_pca(x), 32, 10, 0.995, n_train_queries=40, per_query_visits=20)
    assert c.checkpoints == (32, 64, 96)
    assert all(r == pytest.approx(0.99875, abs=1e-12) for r in c.stage_targets)


def test_cascade_holdout_false_prune_rate():
    x = anisotropic(20000, 64, seed=6)
    audit: dict = {}
    build_cascade(x, fit_pca(x), 16, 10, 0.995, n_train_queries=1000, per_query_visits=50,
                  audit=audit, seed=1)
    assert audit["holdout_false_prune_rate"] <= 1 - 0.995 + 0.005
    assert audit["holdout_pruned_rate"] > 0.5


def test_cascade_validation():
    clf = LinearClassifier(1.0, 0.0)
    with pytest.raises(ValueError):
        Cascade(16, (8, 8), (clf, clf), 0.99, (0.99, 0.99))
    with pytest.raises(ValueError):
        Cascade(16, (16,), (clf,), 0.99, (0.99,))


def test_quant_training_and_classifier():
    x = anisotropic(4000, 16, seed=3)
    cb = opq_train(x, 4, nbits=6, outer_iters=2)
    q = x[:100] + np.random.default_rng(1).normal(0, 0.05, (100, 16)).astype(np.float32)
    s = collect_quant_training(x, cb, q, 10, per_query_visits=50)
    assert s.extras.shape == (len(s), 1)
    clf = train_quant_classifier(s, 0.995)
    assert len(clf.extra_weights) == 1
    assert label0_recall(clf, s) >= 0.995


def test_serialization_round_trip(tmp_path, small_training):
    x, rotor, _, ts = small_training
    c = build_cascade(x, rotor, 8, 10, training=ts)
    save_cascade(c, tmp_path / "c.txt")
    assert load_cascade(tmp_path / "c.txt") == c
    clf = LinearClassifier(0.1 + 0.2, -1 / 3, (np.pi,))
    save_classifier(clf, tmp_path / "k.txt")
    assert load_classifier(tmp_path / "k.txt") == clf
    with pytest.raises(ValueError):
        load_classifier(tmp_path / "c.txt")
    with pytest.raises(ValueError):
        load_cascade(tmp_path / "k.txt")


def test_audit_matches_manual_count(small_training):
    x, rotor, _, ts = small_training
    c = build_cascade(x, rotor, 8, 10, training=ts, holdout=0)
    out = audit_cascade(c, ts)
    manual = np.zeros(len(ts.tau), bool)
    for j, clf in enumerate(c.classifiers):
        for i in range(len(ts.tau)):
            manual[i] |= clf.decide(ts.dis_prime[i, j], ts.tau[i])
    assert out["pruned_rate"] == pytest.approx(manual[ts.label == 1].mean())
    assert out["false_prune_rate"] == pytest.approx(manual[ts.label == 0].mean())
