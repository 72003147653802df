import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given
from hypothesis import strategies as st

from fastdco.dco import (CLI_NAMES, DcoStrategy, ads_scale, dco_ads, dco_bsa_res,
                         dco_bsa_res_incremental, dco_exact, dco_learned_proj, dco_learned_quant)
from fastdco.learn import Cascade, LinearClassifier
from fastdco.quant import Codebook, adc, build_lut, pq_encode
from fastdco.transform import (apply, fit_pca, fit_random_rotor, identity_rotor,
                               make_query_context, measure_sigma2)

from conftest import anisotropic


@pytest.fixture(scope="module")
def workload():
    """Anisotropic Gaussian, D=64, PCA-rotated, with per-query 10-NN radii."""
    base = anisotropic(10000, 64, ratio=0.95, seed=21)
    queries = anisotropic(10, 64, ratio=0.95, seed=22)
    rot = fit_pca(base)
    xr = apply(rot, base)
    xn = (xr * xr).sum(1)
    return base, queries, rot, xr, xn


def _direct(x, q):
    return float(((np.asarray(x, np.float64) - q) ** 2).sum())


def test_exact_matches_direct_sum(workload):
    _, queries, rot, xr, xn = workload
    for qi in range(3):
        ctx = make_query_context(rot, queries[qi], 32)
        for i in range(0, 10000, 97):
            r = dco_exact(xr[i], ctx, xn[i])
            assert not r.pruned and r.used_exact and r.dims_scanned == 64
            assert r.distance == pytest.approx(_direct(xr[i], ctx.q_rot), rel=1e-4)


def test_exact_self_distance_zero():
    rot = identity_rotor(3)
    v = np.array([1.0, 2.0, 3.0])
    ctx = make_query_context(rot, v, 1)
    assert dco_exact(v, ctx, v @ v).distance == pytest.approx(0, abs=1e-12)


def test_bsa_res_full_dim_equals_exact(workload):
    _, queries, rot, xr, xn = workload
    ctx = make_query_context(rot, queries[0], 32)
    rng = np.random.default_rng(0)
    for i in rng.choice(10000, 500, replace=False):
        e = dco_exact(xr[i], ctx, xn[i])
        for tau in (-1.0, 0.5 * e.distance, 2 * e.distance):
            r = dco_bsa_res(xr[i], ctx, xn[i], tau, 3.0, 64)
            assert (r.pruned, r.distance) == (e.pruned, e.distance)


def test_bsa_res_never_prunes_huge_or_negative_tau(workload):
    _, queries, rot, xr, xn = workload
    ctx = make_query_context(rot, queries[1], 32)
    for tau in (1e12, -1.0):
        for i in range(0, 10000, 331):
            r = dco_bsa_res(xr[i], ctx, xn[i], tau, 3.0, 32)
            assert not r.pruned and r.dims_scanned == 64
            assert r.distance == pytest.approx(_direct(xr[i], ctx.q_rot), rel=1e-4)


def test_bsa_res_prune_returns_uncorrected_projection(workload):
    _, queries, rot, xr, xn = workload
    ctx = make_query_context(rot, queries[2], 32)
    d2 = ((xr - ctx.q_rot) ** 2).sum(1)
    tau = float(np.sort(d2)[9])
    hits = 0
    for i in range(0, 10000, 7):
        r = dco_bsa_res(xr[i], ctx, xn[i], tau, 3.0, 32)
        if r.pruned:
            hits += 1
            assert r.dims_scanned == 32 and not r.used_exact
            c1c2 = xn[i] + ctx.q_norm2 - 2 * float(xr[i, :32] @ ctx.q_rot[:32])
            assert r.distance == pytest.approx(c1c2, rel=1e-9)
            assert c1c2 - 3.0 * np.sqrt(ctx.sigma_suffix[0]) > tau
    assert hits > 100


def test_bsa_res_rejects_non_checkpoint(workload):
    _, queries, rot, xr, xn = workload
    ctx = make_query_context(rot, queries[0], 32)
    with pytest.raises(ValueError):
        dco_bsa_res(xr[0], ctx, xn[0], 1.0, 3.0, 20)


def _false_prune_rate(workload, op, m):
    _, queries, rot, xr, xn = workload
    calls = false = 0
    for q in queries:
        ctx = make_query_context(rot, q, 32)
        d2 = ((xr - ctx.q_rot) ** 2).sum(1)
        tau = float(np.sort(d2)[9])
        for i in range(10000):
            r = op(xr[i], ctx, xn[i], tau, m)
            calls += 1
            false += r.pruned and d2[i] <= tau
    return false / calls, calls


def test_bsa_res_false_prune_rate_m3(workload):
    rate, calls = _false_prune_rate(workload, lambda x, c, n, t, m: dco_bsa_res(x, c, n, t, m, 32), 3.0)
    assert calls == 100_000
    assert rate <= 0.01


def test_incremental_final_checkpoint_semantics(workload):
    _, queries, rot, xr, xn = workload
    ctx = make_query_context(rot, queries[3], 16)
    d2 = ((xr - ctx.q_rot) ** 2).sum(1)
    tau = float(np.median(d2))
    seen_full = 0
    for i in range(0, 10000, 3):
        r = dco_bsa_res_incremental(xr[i], ctx, xn[i], tau, 3.0, 16)
        assert r.dims_scanned <= 64
        if r.dims_scanned == 64:
            seen_full += 1
            assert r.used_exact
            assert r.pruned == (r.distance > tau)
            assert r.distance == pytest.approx(d2[i], rel=1e-4)
        else:
            assert r.pruned
    assert seen_full > 0


def test_incremental_scans_under_half_at_knn_radius(workload):
    _, queries, rot, xr, xn = workload
    dims = []
    for q in queries:
        ctx = make_query_context(rot, q, 16)
        d2 = ((xr - ctx.q_rot) ** 2).sum(1)
        tau = float(np.sort(d2)[9])
        for i in range(0, 10000, 5):
            r = dco_bsa_res_incremental(xr[i], ctx, xn[i], tau, 3.0, 16)
            # oracle: a kept candidate is never farther than tau
            if not r.pruned:
                assert d2[i] <= tau * (1 + 1e-9)
            dims.append(r.dims_scanned)
    assert np.mean(dims) < 0.5 * 64


def test_incremental_delta_mismatch(workload):
    _, queries, rot, xr, xn = workload
    ctx = make_query_context(rot, queries[0], 16)
    with pytest.raises(ValueError):
        dco_bsa_res_incremental(xr[0], ctx, xn[0], 1.0, 3.0, 32)


def test_ads_semantics_and_false_prunes():
    base = anisotropic(10000, 64, ratio=0.95, seed=31)
    queries = anisotropic(10, 64, ratio=0.95, seed=32)
    rot = fit_random_rotor(64, seed=3)
    xr = apply(rot, base)
    false = calls = 0
    for q in queries:
        ctx = make_query_context(rot, q, 32)
        d2 = ((xr - ctx.q_rot) ** 2).sum(1)
        tau = float(np.sort(d2)[9])
        for i in range(10000):
            r = dco_ads(xr[i], ctx, 0.0, tau, 2.1, 32)
            calls += 1
            false += r.pruned and d2[i] <= tau
            if r.used_exact:
                assert r.distance == pytest.approx(d2[i], rel=1e-9)
                assert r.pruned == (d2[i] > tau)
            else:
                ps = float(((xr[i, :32] - ctx.q_rot[:32]) ** 2).sum())
                assert r.distance == pytest.approx(ps * 2, rel=1e-9)
                assert ps * 2 > ads_scale(32, 2.1) * tau
    assert false / calls <= 0.01


def test_ads_scale_value():
    assert ads_scale(32, 2.1) == pytest.approx((1 + 2.1 / np.sqrt(32)) ** 2)


def test_learned_proj_with_bsa_weights_matches_bsa(workload):
    _, queries, rot, xr, xn = workload
    m = 3.0
    for q in queries[:4]:
        ctx = make_query_context(rot, q, 32)
        beta = -m * np.sqrt(ctx.sigma_suffix[0])
        cas = Cascade(64, (32,), (LinearClassifier(1.0, float(beta)),), 0.995, (0.99,))
        d2 = ((xr - ctx.q_rot) ** 2).sum(1)
        tau = float(np.sort(d2)[50])
        for i in range(0, 10000, 11):
            a = dco_bsa_res(xr[i], ctx, xn[i], tau, m, 32)
            b = dco_learned_proj(xr[i], ctx, xn[i], tau, cas)
            if a.pruned:
                assert b.pruned and b.distance == a.distance and b.dims_scanned == 32
            else:
                # bsa_res reports kept with the exact value; the cascade makes the exact decision
                assert b.distance == pytest.approx(a.distance, rel=1e-12)
                assert b.pruned == (a.distance > tau)


def test_learned_proj_misaligned_cascade(workload):
    _, queries, rot, xr, xn = workload
    ctx = make_query_context(rot, queries[0], 32)
    cas = Cascade(64, (16,), (LinearClassifier(1.0, 0.0),), 0.995, (0.99,))
    with pytest.raises(ValueError):
        dco_learned_proj(xr[0], ctx, xn[0], 1.0, cas)


def _grid_codebook():
    # 2 subspaces of 2 dims, 4 centroids each
    c = np.array([[[0, 0], [1, 0], [0, 1], [1, 1]], [[0, 0], [2, 0], [0, 2], [2, 2]]], np.float32)
    return Codebook(2, 2, c, None)


def test_learned_quant_on_centroid_vector():
    cb = _grid_codebook()
    v = np.array([1.0, 0.0, 2.0, 2.0])
    code = pq_encode(cb, v)
    assert code.tolist() == [1, 3]
    lut = build_lut(cb, v)
    assert adc(lut, code) == 0.0
    clf = LinearClassifier(1.0, 0.0, (0.5,))
    for tau in (0.0, 1.0, 10.0):
        r = dco_learned_quant(code, lut, 0.0, tau, clf, v, v)
        assert not r.pruned and r.distance == 0.0


def test_learned_quant_prune_and_keep():
    cb = _grid_codebook()
    x = np.array([1.0, 1.0, 2.0, 0.0])
    q = np.zeros(4)
    lut = build_lut(cb, q)
    code = pq_encode(cb, x)
    clf = LinearClassifier(1.0, 0.0, (0.0,))
    r = dco_learned_quant(code, lut, 0.0, 1.0, clf, x, q)
    assert r.pruned and r.distance == pytest.approx(6.0) and r.dims_scanned == 0
    r = dco_learned_quant(code, lut, 0.0, 10.0, clf, x, q)
    assert not r.pruned and r.distance == pytest.approx(6.0) and r.dims_scanned == 4
    with pytest.raises(ValueError):
        dco_learned_quant(code, lut, 0.0, 1.0, LinearClassifier(1.0, 0.0), x, q)


@given(st.integers(0, 100_000), st.sampled_from(["exact", "ads", "bsa", "bsa-inc", "learned-pca"]),
       st.floats(0.0, 3.0))
def test_operator_contract(seed, name, tau_scale):
    rng = np.random.default_rng(seed)
    D = 24
    data = (rng.standard_normal((300, D)) * 0.85 ** np.arange(D)).astype(np.float32)
    rot = fit_pca(data) if name != "ads" else measure_sigma2(fit_random_rotor(D, seed), data)
    ctx = make_query_context(rot, data[0] + rng.standard_normal(D).astype(np.float32) * 0.1, 8)
    i = int(rng.integers(300))
    x = apply(rot, data[i])
    xn = float(x @ x)
    exact = _direct(x, ctx.q_rot)
    tau = tau_scale * exact if tau_scale > 0 else -1.0
    if name == "exact":
        r = dco_exact(x, ctx, xn)
    elif name == "ads":
        r = dco_ads(x, ctx, xn, tau, 2.1, 8)
    elif name == "bsa":
        r = dco_bsa_res(x, ctx, xn, tau, 3.0, 8)
    elif name == "bsa-inc":
        r = dco_bsa_res_incremental(x, ctx, xn, tau, 3.0, 8)
    else:
        cas = Cascade(D, (8, 16), (LinearClassifier(1.0, -1.0), LinearClassifier(0.9, 0.5)),
                      0.99, (0.995, 0.995))
        r = dco_learned_proj(x, ctx, xn, tau, cas)
    assert 0 <= r.dims_scanned <= D
    if r.used_exact:
        assert r.dims_scanned == D
        assert r.distance == pytest.approx(exact, rel=1e-4, abs=1e-6)
    if not r.pruned:
        assert r.distance == pytest.approx(exact, rel=1e-4, abs=1e-6)
    if tau < 0:
        assert not r.pruned
    # safety at full dimension: a near point that survived to D is never pruned
    if r.used_exact and tau >= 0 and exact <= tau:
        assert not r.pruned


def test_strategy_validation():
    with pytest.raises(ValueError):
        DcoStrategy(kind="nope")
    with pytest.raises(ValueError):
        DcoStrategy(kind="bsa_res")
    with pytest.raises(ValueError):
        DcoStrategy(kind="bsa_res_inc", m=0)
    with pytest.raises(ValueError):
        DcoStrategy(kind="ads", eps0=-1)
    with pytest.raises(ValueError):
        DcoStrategy(kind="exact", delta_d=0)
    with pytest.raises(ValueError):
        DcoStrategy(kind="learned_proj")
    with pytest.raises(ValueError):
        DcoStrategy(kind="learned_quant", classifier=LinearClassifier(1.0, 0.0))
    with pytest.raises(ValueError):
        DcoStrategy(kind="bsa_res_inc", delta_d=65).validate_dim(64)
    DcoStrategy(kind="exact", delta_d=65).validate_dim(64)  # exact ignores delta_d
    with pytest.raises(ValueError):
        DcoStrategy.from_cli("bogus")


def test_cli_names_round_trip():
    for name in CLI_NAMES:
        extra = {}
        kind = CLI_NAMES[name]
        if kind == "bsa_res":
            extra["d"] = 8
        if kind == "learned_proj":
            extra["cascade"] = Cascade(16, (8,), (LinearClassifier(1.0, 0.0),), 0.99, (0.99,))
        if kind == "learned_quant":
            extra["classifier"] = LinearClassifier(1.0, 0.0, (0.1,))
        assert DcoStrategy.from_cli(name, **extra).label == name
