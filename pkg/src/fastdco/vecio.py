"""Reading and writing ``.fvecs`` / ``.ivecs`` files and exact k-NN ground truth.

Both formats are a flat sequence of records: a little-endian int32 dimension
``d`` followed by ``d`` little-endian float32 (fvecs) or int32 (ivecs) values.
There is no header and no padding.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "VecFileError",
    "GroundTruth",
    "as_dataset",
    "read_fvecs",
    "write_fvecs",
    "read_ivecs",
    "write_ivecs",
    "brute_force_knn",
    "write_ground_truth",
    "read_ground_truth",
]


class VecFileError(ValueError):
    """Raised for malformed vector files (truncation, mixed dimensions, NaN/Inf)."""


@dataclass(frozen=True)
class GroundTruth:
    """Exact K nearest neighbours per query, ascending by squared distance."""

    ids: np.ndarray  # (nq, K) int64
    dists: np.ndarray  # (nq, K) float64, squared Euclidean

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]


def as_dataset(x, name: str = "dataset") -> np.ndarray:
    """Validate and return ``x`` as a C-contiguous float32 ``(n, D)`` matrix."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _read_records(path: os.PathLike | str, dtype: str) -> np.ndarray:
    raw = np.fromfile(path, dtype="<i4")
    if raw.size == 0:
        raise VecFileError(f"{path}: empty or truncated file")
    d = int(raw[0])
    if d < 1:
        raise VecFileError(f"{path}: invalid record dimension {d}")
    if raw.size % (d + 1) != 0:
        # Either a short tail or a record with a different dimension; walk the
        # headers to report which.
        _raise_for_layout(path, raw, d)
    recs = raw.reshape(-1, d + 1)
    if not (recs[:, 0] == d).all():
        _raise_for_layout(path, raw, d)
    body = np.ascontiguousarray(recs[:, 1:])
    return body.view(dtype)


def _raise_for_layout(path, raw: np.ndarray, d0: int) -> None:
    pos = 0
    while pos < raw.size:
        d = int(raw[pos])
        if d != d0:
            raise VecFileError(f"{path}: dimension mismatch between records ({d} after {d0})")
        if pos + 1 + d > raw.size:
            break
        pos += 1 + d
    raise VecFileError(f"{path}: truncated file")


def read_fvecs(path: os.PathLike | str) -> np.ndarray:
    """Load an ``.fvecs`` file as a float32 ``(n, D)`` array.

    Raises :class:`VecFileError` on truncation, mixed record dimensions or
    non-finite values.
    """
    if os.path.getsize(path) % 4 != 0:
        raise VecFileError(f"{path}: truncated file")
    data = _read_records(path, "<f4").astype(np.float32, copy=False)
    if not np.isfinite(data).all():
        raise VecFileError(f"{path}: non-finite value in file")
    return data


def read_ivecs(path: os.PathLike | str) -> np.ndarray:
    if os.path.getsize(path) % 4 != 0:
        raise VecFileError(f"{path}: truncated file")
    return _read_records(path, "<i4").astype(np.int32, copy=False)


def _write_records(path, arr: np.ndarray, dtype: str) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    n, d = arr.shape
    out = np.empty((n, d + 1), dtype="<i4")
    out[:, 0] = d
    out[:, 1:] = np.ascontiguousarray(arr, dtype=dtype).view("<i4")
    out.tofile(path)


def write_fvecs(data, path: os.PathLike | str) -> None:
    data = np.asarray(data, dtype=np.float32)
    if not np.isfinite(data).all():
        raise ValueError("refusing to write non-finite values")
    _write_records(path, data, "<f4")


def write_ivecs(data, path: os.PathLike | str) -> None:
    _write_records(path, np.asarray(data), "<i4")


def _exact_sqdist(data: np.ndarray, q: np.ndarray, ids: np.ndarray) -> np.ndarray:
    diff = data[ids].astype(np.float64) - q
    return np.einsum("ij,ij->i", diff, diff)


def brute_force_knn(dataset, queries, k: int, chunk: int = 64) -> GroundTruth:
    """Exact squared-L2 k-NN, ties broken by lower id.

    Candidates are shortlisted with the BLAS expansion ``|x|^2 + |q|^2 - 2<x,q>``
    and then re-scored with the direct sum of squared differences, so the final
    ordering does not depend on cancellation in the expansion.
    """
    data = as_dataset(dataset)
    qs = as_dataset(queries, "queries")
    n, dim = data.shape
    if qs.shape[1] != dim:
        raise ValueError(f"query dimension {qs.shape[1]} != dataset dimension {dim}")
    if k < 1 or k > n:
        raise ValueError(f"K={k} must be in [1, n={n}]")

    data64 = data.astype(np.float64)
    xn = np.einsum("ij,ij->i", data64, data64)
    ids_out = np.empty((qs.shape[0], k), dtype=np.int64)
    d_out = np.empty((qs.shape[0], k), dtype=np.float64)
    for start in range(0, qs.shape[0], chunk):
        qb = qs[start : start + chunk].astype(np.float64)
        approx = xn[None, :] - 2.0 * qb @ data64.T + np.einsum("ij,ij->i", qb, qb)[:, None]
        for r in range(qb.shape[0]):
            row = approx[r]
            kth = np.partition(row, k - 1)[k - 1]
            # widen by a relative slack so expansion error cannot evict a true neighbour
            slack = 1e-9 * (abs(kth) + xn.max() + 1.0)
            cand = np.flatnonzero(row <= kth + slack)
            exact = _exact_sqdist(data, qb[r], cand)
            order = np.lexsort((cand, exact))[:k]
            ids_out[start + r] = cand[order]
            d_out[start + r] = exact[order]
    return GroundTruth(ids=ids_out, dists=d_out)


def write_ground_truth(gt: GroundTruth, path: os.PathLike | str) -> None:
    """Write ids to ``path`` (ivecs) and squared distances to ``path + '.dist'`` (fvecs)."""
    write_ivecs(gt.ids.astype(np.int32), path)
    write_fvecs(gt.dists.astype(np.float32), f"{path}.dist")


def read_ground_truth(path: os.PathLike | str) -> GroundTruth:
    ids = read_ivecs(path).astype(np.int64)
    dist_path = f"{path}.dist"
    if os.path.exists(dist_path):
        dists = read_fvecs(dist_path).astype(np.float64)
    else:
        dists = np.full(ids.shape, np.nan)
    return GroundTruth(ids=ids, dists=dists)
