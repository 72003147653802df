"""Inverted-file index: k-means buckets over rotated vectors, flat scan with a DCO."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..dco import DcoStrategy
from ..quant import (Codebook, assign, codebook_from_bytes, codebook_to_bytes, encode_batch,
                     kmeans_fit, residuals_batch)
from ..transform import Rotor, apply, rotate_dataset, rotor_from_bytes, rotor_to_bytes
from ..vecio import as_dataset
from .common import (Reader, SearchResult, kernel_quant_args, kernels, pack_array, pack_blob,
                     query_setup, to_result)

_MAGIC = b"FDIV"
_VERSION = 1
KMEANS_SAMPLE_PER_LIST = 256


@dataclass(eq=False)
class IvfIndex:
    rotor: Rotor
    centroids: np.ndarray  # (nlist, D) float32, rotated space
    offsets: np.ndarray  # (nlist + 1,) int64, CSR into ``ids``
    ids: np.ndarray  # (n,) int64 grouped by bucket, ascending within a bucket
    data: np.ndarray  # (n, D) float32 rotated vectors, row i is vector i
    norms: np.ndarray  # (n,) float64 squared norms of the stored rows
    codebook: Codebook | None = None
    codes: np.ndarray | None = None  # (n, S) uint8
    resid: np.ndarray | None = None  # (n,) float64 reconstruction error

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.data.shape[0]

    def bucket(self, j: int) -> np.ndarray:
        return self.ids[self.offsets[j] : self.offsets[j + 1]]


def _row_norms(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    return np.einsum("ij,ij->i", x64, x64)


def _attach_codes(codebook: Codebook | None, raw: np.ndarray):
    if codebook is None:
        return None, None
    if codebook.dim != raw.shape[1]:
        raise ValueError("codebook dimension does not match the dataset")
    codes = encode_batch(codebook, raw)
    return codes, residuals_batch(codebook, raw, codes)


def ivf_build(dataset, rotor: Rotor, nlist: int, seed: int = 0,
              codebook: Codebook | None = None, max_iters: int = 25) -> IvfIndex:
    raw = as_dataset(dataset)
    n, D = raw.shape
    if D != rotor.dim:
        raise ValueError(f"dataset dimension {D} != rotor dimension {rotor.dim}")
    if not 1 <= nlist <= n:
        raise ValueError(f"nlist must be in [1, n={n}], got {nlist}")
    data = rotate_dataset(rotor, raw)
    rng = np.random.default_rng(seed)
    sample_size = min(n, KMEANS_SAMPLE_PER_LIST * nlist)
    sample = data if sample_size == n else data[np.sort(rng.choice(n, sample_size, replace=False))]
    centroids = kmeans_fit(sample, nlist, max_iters=max_iters, seed=seed).centroids
    labels, _ = assign(data, centroids)
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=nlist)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    codes, resid = _attach_codes(codebook, raw)
    return IvfIndex(rotor, centroids.astype(np.float32), offsets, order.astype(np.int64), data,
                    _row_norms(data), codebook, codes, resid)


def _probe_order(index: IvfIndex, q_rot: np.ndarray, nprobe: int) -> np.ndarray:
    diff = index.centroids.astype(np.float64) - q_rot
    d = np.einsum("ij,ij->i", diff, diff)
    return np.argsort(d, kind="stable")[:nprobe]


def ivf_candidates(index: IvfIndex, q, nprobe: int) -> np.ndarray:
    """Ids of the ``nprobe`` nearest buckets, nearest bucket first."""
    if not 1 <= nprobe <= index.nlist:
        raise ValueError(f"nprobe must be in [1, {index.nlist}]")
    q_rot = apply(index.rotor, np.asarray(q, dtype=np.float32))
    probes = _probe_order(index, q_rot, nprobe)
    return np.concatenate([index.bucket(j) for j in probes])


def ivf_search(index: IvfIndex, q, K: int, nprobe: int, strategy: DcoStrategy,
               backend: str | None = None) -> SearchResult:
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 1 <= nprobe <= index.nlist:
        raise ValueError(f"nprobe must be in [1, {index.nlist}]")
    ctx, plan = query_setup(index.rotor, strategy, q, index.codebook)
    probes = _probe_order(index, ctx.q_rot, nprobe)
    cand = np.concatenate([index.bucket(j) for j in probes])
    codes, resid, lut = kernel_quant_args(plan, index.codes, index.resid)
    ids, dists, counters = kernels(backend).scan(
        index.data, index.norms, cand, ctx.q_rot, ctx.q_norm2, K, plan.mode,
        plan.stage_dims, plan.stage_m1, plan.stage_off, codes, resid, lut, plan.qparams)
    return to_result(ids, dists, counters)


def save_ivf(index: IvfIndex, path: os.PathLike | str) -> None:
    """Layout (little-endian): b"FDIV", int32 version, int32 n, int32 D, int32 nlist,
    int32 has_codes, rotor record, [codebook record], float32 centroids[nlist*D],
    int64 offsets[nlist+1], int64 ids[n], float32 data[n*D], float64 norms[n],
    [uint8 codes[n*S], float64 resid[n]].  Records are int64 length + bytes."""
    n, D = index.data.shape
    has_codes = index.codebook is not None
    parts = [_MAGIC, np.array([_VERSION, n, D, index.nlist, int(has_codes)], "<i4").tobytes(),
             pack_blob(rotor_to_bytes(index.rotor))]
    if has_codes:
        parts.append(pack_blob(codebook_to_bytes(index.codebook)))
    parts += [pack_array(index.centroids, "<f4"), pack_array(index.offsets, "<i8"),
              pack_array(index.ids, "<i8"), pack_array(index.data, "<f4"),
              pack_array(index.norms, "<f8")]
    if has_codes:
        parts += [pack_array(index.codes, "u1"), pack_array(index.resid, "<f8")]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_ivf(path: os.PathLike | str) -> IvfIndex:
    with open(path, "rb") as fh:
        r = Reader(fh.read(), str(path))
    r.magic(_MAGIC)
    version, n, D, nlist, has_codes = r.ints("<5i")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported IVF file version {version}")
    rotor = rotor_from_bytes(r.blob_record(), str(path))
    codebook = codebook_from_bytes(r.blob_record(), str(path)) if has_codes else None
    centroids = r.array("<f4", (nlist, D))
    offsets = r.array("<i8", (nlist + 1,))
    ids = r.array("<i8", (n,))
    data = r.array("<f4", (n, D))
    norms = r.array("<f8", (n,))
    codes = resid = None
    if has_codes:
        codes = r.array("u1", (n, codebook.num_subspaces))
        resid = r.array("<f8", (n,))
    r.done()
    if offsets[0] != 0 or offsets[-1] != n or np.any(np.diff(offsets) < 0):
        raise ValueError(f"{path}: corrupt bucket offsets")
    return IvfIndex(rotor, centroids, offsets, ids, data, norms, codebook, codes, resid)
