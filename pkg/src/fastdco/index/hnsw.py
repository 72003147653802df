"""Layered navigable small-world graph over rotated vectors.

Construction uses exact distances and plain closest-M neighbour selection;
the base-layer beam search routes result-queue admission through a DCO.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..dco import DcoStrategy
from ..quant import Codebook, codebook_from_bytes, codebook_to_bytes
from ..transform import Rotor, rotate_dataset, rotor_from_bytes, rotor_to_bytes
from ..vecio import as_dataset
from .common import (Reader, SearchResult, kernel_quant_args, kernels, pack_array, pack_blob,
                     query_setup, to_result)
from .ivf import _attach_codes, _row_norms

_MAGIC = b"FDHN"
_VERSION = 1


@dataclass(eq=False)
class HnswIndex:
    rotor: Rotor
    M: int
    ef_construction: int
    levels: np.ndarray  # (n,) int32
    entry: int
    max_level: int
    links0: np.ndarray  # (n, 2M) int32, first deg0[i] entries valid
    deg0: np.ndarray  # (n,) int32
    upper_off: np.ndarray  # (n,) int64 first row of node i in links_up
    links_up: np.ndarray  # (rows, M) int32; row upper_off[i] + l - 1 is layer l of node i
    deg_up: np.ndarray  # (rows,) int32
    data: np.ndarray  # (n, D) float32 rotated
    norms: np.ndarray  # (n,) float64
    codebook: Codebook | None = None
    codes: np.ndarray | None = None
    resid: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.data.shape[0]

    def neighbors(self, node: int, level: int = 0) -> np.ndarray:
        if level == 0:
            return self.links0[node, : self.deg0[node]]
        if level > self.levels[node]:
            raise ValueError(f"node {node} has no layer {level}")
        row = self.upper_off[node] + level - 1
        return self.links_up[row, : self.deg_up[row]]


def draw_levels(n: int, M: int, seed: int) -> np.ndarray:
    """floor(-ln(1 - U) / ln M): geometric level distribution with normaliser 1/ln M."""
    u = np.random.default_rng(seed).random(n)
    return np.floor(-np.log1p(-u) / np.log(M)).astype(np.int32)


def _upper_offsets(levels: np.ndarray) -> tuple[np.ndarray, int]:
    lv = levels.astype(np.int64)
    off = np.concatenate([[0], np.cumsum(lv)[:-1]]).astype(np.int64)
    return off, int(lv.sum())


def _empty_graph(levels: np.ndarray, M: int):
    n = levels.shape[0]
    upper_off, rows = _upper_offsets(levels)
    # the kernels take the address of row 0, so keep at least one row
    links0 = np.full((n, 2 * M), -1, dtype=np.int32)
    deg0 = np.zeros(n, dtype=np.int32)
    links_up = np.full((max(rows, 1), M), -1, dtype=np.int32)
    deg_up = np.zeros(max(rows, 1), dtype=np.int32)
    return upper_off, links0, deg0, links_up, deg_up


def hnsw_build(dataset, rotor: Rotor, M: int = 16, ef_construction: int = 200, seed: int = 0,
               codebook: Codebook | None = None, backend: str | None = None) -> HnswIndex:
    raw = as_dataset(dataset)
    n, D = raw.shape
    if D != rotor.dim:
        raise ValueError(f"dataset dimension {D} != rotor dimension {rotor.dim}")
    if M < 2:
        raise ValueError("M must be >= 2")
    if ef_construction < 1:
        raise ValueError("ef_construction must be >= 1")
    data = rotate_dataset(rotor, raw)
    levels = draw_levels(n, M, seed)
    upper_off, links0, deg0, links_up, deg_up = _empty_graph(levels, M)
    entry, max_level = kernels(backend).hnsw_build(
        data, levels, M, ef_construction, upper_off, links0, deg0, links_up, deg_up)
    codes, resid = _attach_codes(codebook, raw)
    return HnswIndex(rotor, M, ef_construction, levels, int(entry), int(max_level), links0, deg0,
                     upper_off, links_up, deg_up, data, _row_norms(data), codebook, codes, resid)


def hnsw_search(index: HnswIndex, q, K: int, ef: int, strategy: DcoStrategy,
                backend: str | None = None) -> SearchResult:
    if K < 1:
        raise ValueError("K must be >= 1")
    if ef < K:
        raise ValueError(f"ef ({ef}) must be >= K ({K})")
    ctx, plan = query_setup(index.rotor, strategy, q, index.codebook)
    codes, resid, lut = kernel_quant_args(plan, index.codes, index.resid)
    ids, dists, counters = kernels(backend).hnsw_search(
        index.data, index.norms, index.links0, index.deg0, index.upper_off, index.links_up,
        index.deg_up, index.entry, index.max_level, ctx.q_rot, ctx.q_norm2, K, ef, plan.mode,
        plan.stage_dims, plan.stage_m1, plan.stage_off, codes, resid, lut, plan.qparams)
    return to_result(ids, dists, counters)


def save_hnsw(index: HnswIndex, path: os.PathLike | str) -> None:
    """Layout (little-endian): b"FDHN", int32 version, n, D, M, ef_construction, entry,
    max_level, has_codes, rotor record, [codebook record], int32 levels[n],
    int32 deg0[n], int32 links0[n*2M], int32 deg_up[rows], int32 links_up[rows*M],
    float32 data[n*D], float64 norms[n], [uint8 codes[n*S], float64 resid[n]].
    ``rows = max(1, sum(levels))``; upper-layer rows are ordered by node then layer."""
    n, D = index.data.shape
    has_codes = index.codebook is not None
    header = [_VERSION, n, D, index.M, index.ef_construction, index.entry, index.max_level,
              int(has_codes)]
    parts = [_MAGIC, np.array(header, "<i4").tobytes(), pack_blob(rotor_to_bytes(index.rotor))]
    if has_codes:
        parts.append(pack_blob(codebook_to_bytes(index.codebook)))
    parts += [pack_array(index.levels, "<i4"), pack_array(index.deg0, "<i4"),
              pack_array(index.links0, "<i4"), pack_array(index.deg_up, "<i4"),
              pack_array(index.links_up, "<i4"), pack_array(index.data, "<f4"),
              pack_array(index.norms, "<f8")]
    if has_codes:
        parts += [pack_array(index.codes, "u1"), pack_array(index.resid, "<f8")]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_hnsw(path: os.PathLike | str) -> HnswIndex:
    with open(path, "rb") as fh:
        r = Reader(fh.read(), str(path))
    r.magic(_MAGIC)
    version, n, D, M, efc, entry, max_level, has_codes = r.ints("<8i")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported HNSW file version {version}")
    rotor = rotor_from_bytes(r.blob_record(), str(path))
    codebook = codebook_from_bytes(r.blob_record(), str(path)) if has_codes else None
    levels = r.array("<i4", (n,))
    if np.any(levels < 0) or not 0 <= entry < n:
        raise ValueError(f"{path}: corrupt level table")
    upper_off, rows = _upper_offsets(levels)
    rows = max(rows, 1)
    deg0 = r.array("<i4", (n,))
    links0 = r.array("<i4", (n, 2 * M))
    deg_up = r.array("<i4", (rows,))
    links_up = r.array("<i4", (rows, M))
    data = r.array("<f4", (n, D))
    norms = r.array("<f8", (n,))
    codes = resid = None
    if has_codes:
        codes = r.array("u1", (n, codebook.num_subspaces))
        resid = r.array("<f8", (n,))
    r.done()
    if np.any(deg0 < 0) or np.any(deg0 > 2 * M) or np.any(deg_up < 0) or np.any(deg_up > M):
        raise ValueError(f"{path}: corrupt degree table")
    return HnswIndex(rotor, M, efc, levels, entry, max_level, links0, deg0, upper_off, links_up,
                     deg_up, data, norms, codebook, codes, resid)
