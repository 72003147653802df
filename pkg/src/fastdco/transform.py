"""Orthogonal rotations (PCA / random / identity) and per-query precomputation.

A :class:`Rotor` maps a raw vector ``v`` to ``R @ (v - mean)``.  Rows of ``R``
are ordered projection directions, so the first ``d`` rotated coordinates are
the "projected" part and the rest the "residual" part.  ``sigma2[i]`` is the
variance of rotated coordinate ``i`` over the data, which drives the residual
error bound used by the pruning operators.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .vecio import as_dataset

__all__ = [
    "Rotor",
    "QueryContext",
    "fit_pca",
    "fit_random_rotor",
    "identity_rotor",
    "apply",
    "measure_sigma2",
    "make_query_context",
    "checkpoints",
    "norms2",
    "save_rotor",
    "rotor_to_bytes",
    "rotor_from_bytes",
    "load_rotor",
]

KINDS = ("pca", "random", "identity")
_MAGIC = b"FDRT"
DEFAULT_PCA_SAMPLE = 100_000


@dataclass(frozen=True, eq=False)
class Rotor:
    R: np.ndarray  # (D, D) float32, rows are directions
    mean: np.ndarray  # (D,) float32
    sigma2: np.ndarray  # (D,) float32
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown rotor kind {self.kind!r}")
        D = self.R.shape[0]
        if self.R.shape != (D, D) or self.mean.shape != (D,) or self.sigma2.shape != (D,):
            raise ValueError("inconsistent rotor shapes")

    @property
    def dim(self) -> int:
        return self.R.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Rotor):
            return NotImplemented
        return (
            self.kind == other.kind
            and np.array_equal(self.R, other.R)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.sigma2, other.sigma2)
        )


@dataclass(frozen=True)
class QueryContext:
    """Per-query state shared by all operators.

    ``sigma_suffix[j]`` is ``4 * sum_{i >= checkpoints[j]} q_i^2 sigma2_i``, the
    variance of the residual error term once ``checkpoints[j]`` coordinates have
    been scanned.
    """

    q_rot: np.ndarray  # (D,) float64
    q_norm2: float
    checkpoints: np.ndarray  # (c,) int64, ascending, last == D
    sigma_suffix: np.ndarray  # (c,) float64

    @property
    def dim(self) -> int:
        return self.q_rot.shape[0]

    def sigma_at(self, d: int) -> float:
        """Standard deviation of the residual error after ``d`` scanned dims."""
        j = self.checkpoint_index(d)
        return float(np.sqrt(self.sigma_suffix[j]))

    def checkpoint_index(self, d: int) -> int:
        j = int(np.searchsorted(self.checkpoints, d))
        if j >= len(self.checkpoints) or self.checkpoints[j] != d:
            raise ValueError(f"d={d} is not a checkpoint of this query context")
        return j


def _orient(vecs: np.ndarray) -> np.ndarray:
    # deterministic sign: largest-magnitude entry of each row positive
    idx = np.argmax(np.abs(vecs), axis=1)
    signs = np.sign(vecs[np.arange(vecs.shape[0]), idx])
    signs[signs == 0] = 1.0
    return vecs * signs[:, None]


def fit_pca(dataset, sample_size: int | None = None, seed: int = 0) -> Rotor:
    """Fit a PCA rotor on (a sample of) ``dataset``.

    Directions are eigenvectors of the population covariance sorted by
    decreasing eigenvalue; ``sigma2`` holds those eigenvalues, clipped at 0.
    """
    data = as_dataset(dataset)
    n, D = data.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 vectors")
    if sample_size is None:
        sample_size = min(n, DEFAULT_PCA_SAMPLE)
    if not 2 <= sample_size <= n:
        raise ValueError(f"sample_size must be in [2, {n}]")
    if sample_size < n:
        rng = np.random.default_rng(seed)
        data = data[np.sort(rng.choice(n, sample_size, replace=False))]
    x = data.astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    R = _orient(evecs[:, order].T)
    return Rotor(
        R=R.astype(np.float32),
        mean=mean.astype(np.float32),
        sigma2=evals.astype(np.float32),
        kind="pca",
    )


def fit_random_rotor(D: int, seed: int = 0) -> Rotor:
    """Haar-random orthogonal rotor (QR of a seeded Gaussian matrix), zero mean."""
    if D < 1:
        raise ValueError("D must be >= 1")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((D, D))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)[None, :]
    return Rotor(
        R=q.T.astype(np.float32),
        mean=np.zeros(D, np.float32),
        sigma2=np.zeros(D, np.float32),
        kind="random",
    )


def identity_rotor(D: int) -> Rotor:
    return Rotor(
        R=np.eye(D, dtype=np.float32),
        mean=np.zeros(D, np.float32),
        sigma2=np.zeros(D, np.float32),
        kind="identity",
    )


def apply(rotor: Rotor, v) -> np.ndarray:
    """Return ``R @ (v - mean)`` in float64; accepts a vector or an ``(n, D)`` batch."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != rotor.dim:
        raise ValueError(f"vector length {v.shape[-1]} != rotor dimension {rotor.dim}")
    centered = v - rotor.mean.astype(np.float64)
    return centered @ rotor.R.astype(np.float64).T


def rotate_dataset(rotor: Rotor, dataset, chunk: int = 65536) -> np.ndarray:
    """Rotate a whole dataset into a float32 matrix, chunked to bound memory."""
    data = as_dataset(dataset)
    out = np.empty(data.shape, dtype=np.float32)
    for s in range(0, data.shape[0], chunk):
        out[s : s + chunk] = apply(rotor, data[s : s + chunk])
    return out


def measure_sigma2(rotor: Rotor, dataset) -> Rotor:
    """Return a copy of ``rotor`` whose ``sigma2`` is the empirical variance of
    each rotated coordinate over ``dataset``."""
    data = as_dataset(dataset)
    if data.shape[1] != rotor.dim:
        raise ValueError("dimension mismatch")
    acc = np.zeros(rotor.dim)
    acc2 = np.zeros(rotor.dim)
    for s in range(0, data.shape[0], 65536):
        y = apply(rotor, data[s : s + 65536])
        acc += y.sum(axis=0)
        acc2 += (y * y).sum(axis=0)
    n = data.shape[0]
    mu = acc / n
    var = np.clip(acc2 / n - mu * mu, 0.0, None)
    return replace(rotor, sigma2=var.astype(np.float32))


def checkpoints(D: int, delta_d: int) -> np.ndarray:
    """``delta_d, 2*delta_d, ...`` capped with a final checkpoint at exactly ``D``."""
    if delta_d < 1:
        raise ValueError("delta_d must be >= 1")
    cps = list(range(delta_d, D, delta_d))
    cps.append(D)
    return np.asarray(cps, dtype=np.int64)


def make_query_context(rotor: Rotor, q, delta_d: int) -> QueryContext:
    q_rot = apply(rotor, q)
    if q_rot.ndim != 1:
        raise ValueError("make_query_context expects a single query vector")
    D = rotor.dim
    cps = checkpoints(D, delta_d)
    w = q_rot * q_rot * rotor.sigma2.astype(np.float64)
    # suffix[i] = sum_{j >= i} w[j], with suffix[D] = 0
    suffix = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])
    sig = 4.0 * suffix[cps]
    # cumulative sums can leave tiny negative/non-monotone noise; enforce the invariant
    sig = np.minimum.accumulate(np.clip(sig, 0.0, None))
    sig[-1] = 0.0
    return QueryContext(
        q_rot=q_rot,
        q_norm2=float(q_rot @ q_rot),
        checkpoints=cps,
        sigma_suffix=sig,
    )


def norms2(dataset, rotor: Rotor) -> np.ndarray:
    """Squared norm of each centred vector, ``|x - mean|^2``."""
    data = as_dataset(dataset)
    c = data.astype(np.float64) - rotor.mean.astype(np.float64)
    return np.einsum("ij,ij->i", c, c)


def rotor_to_bytes(rotor: Rotor) -> bytes:
    """Layout (little-endian): b"FDRT", int32 D, int32 kind index,
    float32 mean[D], float32 R[D*D] row-major, float32 sigma2[D]."""
    return b"".join([
        _MAGIC,
        struct.pack("<ii", rotor.dim, KINDS.index(rotor.kind)),
        rotor.mean.astype("<f4").tobytes(),
        np.ascontiguousarray(rotor.R, dtype="<f4").tobytes(),
        rotor.sigma2.astype("<f4").tobytes(),
    ])


def rotor_from_bytes(blob: bytes, source: str = "rotor") -> Rotor:
    if blob[:4] != _MAGIC:
        raise ValueError(f"{source}: not a rotor record")
    D, kind = struct.unpack_from("<ii", blob, 4)
    expected = 12 + 4 * (2 * D + D * D)
    if len(blob) != expected or not 0 <= kind < len(KINDS):
        raise ValueError(f"{source}: truncated or corrupt rotor record")
    body = np.frombuffer(blob, dtype="<f4", offset=12)
    mean = body[:D].astype(np.float32)
    R = body[D : D + D * D].reshape(D, D).astype(np.float32)
    sigma2 = body[D + D * D :].astype(np.float32)
    return Rotor(R=R, mean=mean, sigma2=sigma2, kind=KINDS[kind])


def save_rotor(rotor: Rotor, path: os.PathLike | str) -> None:
    with open(path, "wb") as fh:
        fh.write(rotor_to_bytes(rotor))


def load_rotor(path: os.PathLike | str) -> Rotor:
    with open(path, "rb") as fh:
        return rotor_from_bytes(fh.read(), str(path))
