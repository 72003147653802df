import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastdco.quant import (Codebook, adc, adc_batch, assign, build_lut, code_residual, decode,
                           default_num_subspaces, encode_batch, kmeans, kmeans_fit,
                           load_codebook, opq_train, pack_codes, pq_encode, pq_train,
                           quantization_error, save_codebook, unpack_codes)

from conftest import anisotropic


def test_kmeans_k_equals_n(rng):
    x = rng.standard_normal((12, 3))
    res = kmeans_fit(x, 12, seed=1)
    assert res.objective[-1] == pytest.approx(0.0, abs=1e-12)


def test_kmeans_two_blobs(rng):
    a = rng.normal(-5, 0.5, (300, 2))
    b = rng.normal(5, 0.5, (300, 2))
    c = kmeans(np.vstack([a, b]), 2, seed=0)
    c = c[np.argsort(c[:, 0])]
    np.testing.assert_allclose(c[0], a.mean(0), atol=0.1)
    np.testing.assert_allclose(c[1], b.mean(0), atol=0.1)


@given(st.integers(0, 10_000), st.integers(1, 12))
def test_kmeans_objective_non_increasing(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((80, 3)) * [3, 1, 0.2]
    res = kmeans_fit(x, k, max_iters=15, seed=seed)
    obj = np.asarray(res.objective)
    assert np.all(np.diff(obj) <= 1e-9 * max(obj[0], 1.0))


def test_kmeans_deterministic(rng):
    x = rng.standard_normal((200, 4))
    a, b = kmeans_fit(x, 5, seed=7), kmeans_fit(x, 5, seed=7)
    assert np.array_equal(a.centroids, b.centroids)
    assert np.array_equal(a.assignment, b.assignment)


def test_kmeans_more_clusters_than_distinct_points():
    x = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]] * 5)
    c = kmeans(x, 4, seed=0)
    assert c.shape == (4, 2)
    _, d = assign(x, c)
    assert d.sum() == 0


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans(np.zeros((0, 2)), 1)
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 0)


def test_assign_ties_to_lower_centroid():
    labels, _ = assign(np.array([[0.0]]), np.array([[1.0], [-1.0]]))
    assert labels[0] == 0


def test_pq_defaults_and_errors():
    assert default_num_subspaces(128) == 32
    x = np.zeros((10, 6), np.float32)
    with pytest.raises(ValueError):
        pq_train(x, 4)
    with pytest.raises(ValueError):
        pq_train(x, 3, nbits=9)
    with pytest.raises(ValueError):
        opq_train(x, 3, outer_iters=0)


def test_pq_zero_error_on_repeated_vectors(rng):
    nbits = 3
    proto = rng.standard_normal((1 << nbits, 8)).astype(np.float32)
    x = np.repeat(proto, 5, axis=0)
    cb = pq_train(x, 2, nbits=nbits, seed=0)
    assert quantization_error(cb, x) == pytest.approx(0.0, abs=1e-8)


def test_lut_adc_direct_sum_and_reconstruction(rng):
    x = anisotropic(2000, 16)
    cb = opq_train(x, 4, nbits=4, outer_iters=3, seed=0)
    q = rng.standard_normal(16)
    lut = build_lut(cb, q)
    assert np.all(lut >= 0)
    codes = encode_batch(cb, x[:300])
    recon = decode(cb, codes)
    qr = cb.rotate(q)
    for i in range(300):
        # oracle 1: naive per-subspace sum, same order
        naive = 0.0
        for s in range(4):
            naive += float(((qr[4 * s : 4 * s + 4] - cb.centroids[s, codes[i, s]]) ** 2).sum())
        assert adc(lut, codes[i]) == pytest.approx(naive, rel=1e-12)
        # oracle 2: distance to the full reconstruction
        assert adc(lut, codes[i]) == pytest.approx(float(((qr - recon[i]) ** 2).sum()), rel=1e-4)
    np.testing.assert_array_equal(adc_batch(lut, codes), [adc(lut, c) for c in codes])


def test_triangle_bound(rng):
    x = anisotropic(3000, 16, seed=5)
    cb = pq_train(x, 4, nbits=5, seed=1)
    for i in range(1000):
        v = x[i]
        q = x[(i * 7 + 1) % 3000]
        code = pq_encode(cb, v)
        a = adc(build_lut(cb, q), code)
        r = code_residual(cb, v, code)
        exact = float(((v.astype(np.float64) - q) ** 2).sum())
        assert np.sqrt(exact) <= np.sqrt(a) + np.sqrt(r) + 1e-6


def test_centroid_vector_zero_residual():
    c = np.array([[[0, 0], [1, 1]], [[2, 2], [3, 3]]], np.float32)
    cb = Codebook(2, 1, c, None)
    v = np.array([1.0, 1.0, 2.0, 2.0])
    code = pq_encode(cb, v)
    assert code.tolist() == [1, 0]
    assert code_residual(cb, v, code) == 0.0
    assert adc(build_lut(cb, v), code) == 0.0


def test_code_range_checks():
    c = np.zeros((2, 2, 2), np.float32)
    cb = Codebook(2, 1, c, None)
    lut = build_lut(cb, np.zeros(4))
    with pytest.raises(IndexError):
        adc(lut, np.array([0, 2]))
    with pytest.raises(ValueError):
        adc(lut, np.array([0]))
    with pytest.raises(IndexError):
        decode(cb, np.array([[0, 5]]))


def test_opq_monotone_orthogonal_and_beats_pq():
    x = anisotropic(4000, 32, ratio=0.9, seed=8)
    hist: list = []
    opq = opq_train(x, 8, nbits=4, outer_iters=10, seed=0, history=hist)
    assert len(hist) == 10
    assert all(b <= a * (1 + 1e-9) for a, b in zip(hist, hist[1:]))
    R = opq.rotation.astype(np.float64)
    assert np.abs(R @ R.T - np.eye(32)).max() <= 1e-4
    pq = pq_train(x, 8, nbits=4, seed=0)
    assert quantization_error(opq, x) <= quantization_error(pq, x)


def test_opq_single_pass_is_pq_on_pca_rotated_data():
    from fastdco.transform import fit_pca

    x = anisotropic(1500, 16, seed=3)
    opq = opq_train(x, 4, nbits=3, outer_iters=1, seed=2)
    R = fit_pca(x, seed=2).R
    xr = (x.astype(np.float64) @ R.astype(np.float64).T).astype(np.float32)
    pq = pq_train(xr, 4, nbits=3, seed=2)
    np.testing.assert_allclose(opq.centroids, pq.centroids, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("nbits", [1, 3, 5, 8])
def test_pack_codes_storage_bound(rng, nbits):
    n, S = 37, 6
    codes = rng.integers(0, 1 << nbits, size=(n, S)).astype(np.uint8)
    blob = pack_codes(codes, nbits)
    assert len(blob) == (n * S * nbits + 7) // 8
    np.testing.assert_array_equal(unpack_codes(blob, n, S, nbits), codes)


@pytest.mark.parametrize("rotated", [False, True])
def test_codebook_round_trip(tmp_path, rotated):
    x = anisotropic(600, 8)
    cb = opq_train(x, 2, nbits=3, outer_iters=2) if rotated else pq_train(x, 2, nbits=3)
    save_codebook(cb, tmp_path / "cb.bin")
    assert (tmp_path / "cb.bin").read_bytes()[:4] == b"FDCB"
    assert load_codebook(tmp_path / "cb.bin") == cb
    (tmp_path / "bad.bin").write_bytes((tmp_path / "cb.bin").read_bytes()[:-3])
    with pytest.raises(ValueError):
        load_codebook(tmp_path / "bad.bin")
