"""k-means, product quantization and OPQ.

Codes index ``2**nbits`` centroids in each of ``num_subspaces`` contiguous
sub-vectors of the (optionally rotated) input.  The asymmetric distance of a
code to a query is the sum of per-subspace squared distances read from a
lookup table built once per query.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .vecio import as_dataset

__all__ = [
    "KMeansResult",
    "Codebook",
    "PqCode",
    "kmeans",
    "kmeans_fit",
    "assign",
    "pq_train",
    "opq_train",
    "pq_encode",
    "encode_batch",
    "decode",
    "build_lut",
    "adc",
    "adc_batch",
    "code_residual",
    "quantization_error",
    "pack_codes",
    "unpack_codes",
    "save_codebook",
    "load_codebook",
    "codebook_to_bytes",
    "codebook_from_bytes",
]

PqCode = np.ndarray  # (num_subspaces,) integer centroid ids
DEFAULT_OPQ_SAMPLE = 65_536
_MAGIC = b"FDCB"


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, dim) float64
    assignment: np.ndarray  # (n,) int64
    objective: list[float] = field(default_factory=list)  # per Lloyd iteration


def _sqdist(x: np.ndarray, c: np.ndarray, x_sq: np.ndarray | None = None) -> np.ndarray:
    if x_sq is None:
        x_sq = np.einsum("ij,ij->i", x, x)
    d = x_sq[:, None] - 2.0 * (x @ c.T) + np.einsum("ij,ij->i", c, c)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def assign(points, centroids, chunk: int = 16384) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per point (ties to the lower centroid id) and its squared distance."""
    x = np.asarray(points, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    labels = np.empty(x.shape[0], dtype=np.int64)
    dists = np.empty(x.shape[0], dtype=np.float64)
    for s in range(0, x.shape[0], chunk):
        d = _sqdist(x[s : s + chunk], c)
        labels[s : s + chunk] = np.argmin(d, axis=1)
        dists[s : s + chunk] = d[np.arange(d.shape[0]), labels[s : s + chunk]]
    return labels, dists


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sqdist(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than k: duplicate existing points
            centers[i] = x[rng.integers(n)]
            continue
        idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
        centers[i] = x[min(idx, n - 1)]
        np.minimum(closest, _sqdist(x, centers[i : i + 1])[:, 0], out=closest)
    return centers


def _cluster_sums(x: np.ndarray, labels: np.ndarray, counts: np.ndarray) -> np.ndarray:
    sums = np.zeros((counts.shape[0], x.shape[1]))
    order = np.argsort(labels, kind="stable")
    nonempty = np.flatnonzero(counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])[nonempty]
    sums[nonempty] = np.add.reduceat(x[order], starts, axis=0)
    return sums


def kmeans_fit(points, k: int, max_iters: int = 25, seed: int = 0,
               init: np.ndarray | None = None) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    ``objective[t]`` is the sum of squared distances to the nearest centroid
    under the centroids of iteration ``t``; it is non-increasing.  A centroid
    left without points is moved onto the point farthest from its centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("points must be a non-empty 2-D array")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    c = _kmeanspp(x, k, rng) if init is None else np.array(init, dtype=np.float64)
    objective: list[float] = []
    labels, dists = assign(x, c)
    for _ in range(max_iters):
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # farthest points, distinct, one per empty cluster
            far = np.argsort(-dists, kind="stable")[: empty.size]
            for e, p in zip(empty, far):
                if dists[p] > 0:
                    c[e] = x[p]
            labels, dists = assign(x, c)
            counts = np.bincount(labels, minlength=k)
        objective.append(float(dists.sum()))
        sums = _cluster_sums(x, labels, counts)
        nonempty = counts > 0
        new_c = c.copy()
        new_c[nonempty] = sums[nonempty] / counts[nonempty, None]
        new_labels, new_dists = assign(x, new_c)
        c = new_c
        converged = np.array_equal(new_labels, labels)
        labels, dists = new_labels, new_dists
        if converged:
            break
    objective.append(float(dists.sum()))
    return KMeansResult(centroids=c, assignment=labels, objective=objective)


def kmeans(points, k: int, max_iters: int = 25, seed: int = 0) -> np.ndarray:
    return kmeans_fit(points, k, max_iters=max_iters, seed=seed).centroids


@dataclass(frozen=True, eq=False)
class Codebook:
    num_subspaces: int
    nbits: int
    centroids: np.ndarray  # (num_subspaces, 2**nbits, sub_dim) float32
    rotation: np.ndarray | None = None  # (D, D) float32, applied as rotation @ v

    @property
    def ksub(self) -> int:
        return 1 << self.nbits

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.num_subspaces * self.sub_dim

    def rotate(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dim:
            raise ValueError(f"vector length {v.shape[-1]} != codebook dimension {self.dim}")
        if self.rotation is None:
            return v
        return v @ self.rotation.astype(np.float64).T

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        rot_eq = (self.rotation is None and other.rotation is None) or (
            self.rotation is not None
            and other.rotation is not None
            and np.array_equal(self.rotation, other.rotation)
        )
        return (
            self.num_subspaces == other.num_subspaces
            and self.nbits == other.nbits
            and np.array_equal(self.centroids, other.centroids)
            and rot_eq
        )


def _check_pq_args(D: int, num_subspaces: int, nbits: int) -> None:
    if num_subspaces < 1 or D % num_subspaces != 0:
        raise ValueError(f"num_subspaces={num_subspaces} must divide D={D}")
    if not 1 <= nbits <= 8:
        raise ValueError("nbits must be in [1, 8]")


def default_num_subspaces(D: int) -> int:
    return D // 4 if D % 4 == 0 else D


def _train_subspaces(x: np.ndarray, num_subspaces: int, nbits: int, seed: int, max_iters: int,
                     init: np.ndarray | None = None) -> np.ndarray:
    sub = x.shape[1] // num_subspaces
    k = 1 << nbits
    cents = np.empty((num_subspaces, k, sub))
    for s in range(num_subspaces):
        part = x[:, s * sub : (s + 1) * sub]
        warm = None if init is None else init[s]
        cents[s] = kmeans_fit(part, k, max_iters=max_iters, seed=seed + s, init=warm).centroids
    return cents


def pq_train(dataset, num_subspaces: int, nbits: int = 8, seed: int = 0,
             max_iters: int = 25) -> Codebook:
    """Per-subspace k-means with ``2**nbits`` centroids, no rotation."""
    x = as_dataset(dataset).astype(np.float64)
    _check_pq_args(x.shape[1], num_subspaces, nbits)
    cents = _train_subspaces(x, num_subspaces, nbits, seed, max_iters)
    return Codebook(num_subspaces, nbits, cents.astype(np.float32), None)


def _encode_rotated(xr: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    S, _, sub = centroids.shape
    codes = np.empty((xr.shape[0], S), dtype=np.int64)
    for s in range(S):
        codes[:, s], _ = assign(xr[:, s * sub : (s + 1) * sub], centroids[s])
    return codes


def _reconstruct(codes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    S = centroids.shape[0]
    return np.concatenate([centroids[s][codes[:, s]] for s in range(S)], axis=1)


def opq_train(dataset, num_subspaces: int, nbits: int = 8, outer_iters: int = 10, seed: int = 0,
              sample_size: int | None = None, max_iters: int = 25, refine_iters: int = 4,
              history: list | None = None) -> Codebook:
    """Non-parametric OPQ: alternate PQ training and an orthogonal Procrustes
    rotation update, starting from the PCA rotation.

    The first pass trains PQ from scratch (``max_iters`` Lloyd steps); later
    passes warm-start from the previous centroids for ``refine_iters`` steps,
    which keeps the total reconstruction error non-increasing across passes.
    If ``history`` is given, the error after each pass is appended to it.
    """
    from .transform import fit_pca

    data = as_dataset(dataset)
    n, D = data.shape
    _check_pq_args(D, num_subspaces, nbits)
    if outer_iters < 1:
        raise ValueError("outer_iters must be >= 1")
    if sample_size is None:
        sample_size = min(n, DEFAULT_OPQ_SAMPLE)
    if sample_size < n:
        rng = np.random.default_rng(seed)
        data = data[np.sort(rng.choice(n, sample_size, replace=False))]
    x = data.astype(np.float64)
    R = fit_pca(data, seed=seed).R.astype(np.float64) if data.shape[0] >= 2 else np.eye(D)

    cents = None
    codes = None
    for t in range(outer_iters):
        if t > 0:
            # R minimises |x R^T - y| for fixed reconstructions y
            y = _reconstruct(codes, cents)
            u, _, vt = np.linalg.svd(x.T @ y)
            R = (u @ vt).T
        xr = x @ R.T
        if cents is None:
            cents = _train_subspaces(xr, num_subspaces, nbits, seed, max_iters)
        else:
            cents = _train_subspaces(xr, num_subspaces, nbits, seed, refine_iters, init=cents)
        codes = _encode_rotated(xr, cents)
        if history is not None:
            history.append(float(((xr - _reconstruct(codes, cents)) ** 2).sum()))
    return Codebook(num_subspaces, nbits, cents.astype(np.float32), R.astype(np.float32))


def encode_batch(codebook: Codebook, vectors) -> np.ndarray:
    """Encode rows of ``vectors`` into an ``(n, num_subspaces)`` uint8 (nbits<=8) array."""
    xr = codebook.rotate(np.atleast_2d(np.asarray(vectors, dtype=np.float64)))
    codes = _encode_rotated(xr, codebook.centroids.astype(np.float64))
    return codes.astype(np.uint8)


def pq_encode(codebook: Codebook, v) -> PqCode:
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError("pq_encode expects a single vector; use encode_batch")
    return encode_batch(codebook, v[None, :])[0]


def decode(codebook: Codebook, codes) -> np.ndarray:
    """Reconstruction in the rotated space."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    _check_codes(codebook, codes)
    return _reconstruct(codes, codebook.centroids.astype(np.float64))


def _check_codes(codebook: Codebook, codes: np.ndarray) -> None:
    if codes.shape[-1] != codebook.num_subspaces:
        raise ValueError("code length does not match num_subspaces")
    if codes.size and (codes.min() < 0 or codes.max() >= codebook.ksub):
        raise IndexError("code entry out of range")


def build_lut(codebook: Codebook, q) -> np.ndarray:
    """``lut[s, c] = |q_rot[s-th block] - centroid[s][c]|^2`` as float64."""
    qr = codebook.rotate(q)
    if qr.ndim != 1:
        raise ValueError("build_lut expects a single query vector")
    S, k, sub = codebook.centroids.shape
    blocks = qr.reshape(S, 1, sub)
    diff = codebook.centroids.astype(np.float64) - blocks
    return np.einsum("skj,skj->sk", diff, diff)


def adc(lut: np.ndarray, code) -> float:
    """Asymmetric distance: sequential sum of ``lut[s, code[s]]`` over subspaces."""
    code = np.asarray(code)
    if code.shape != (lut.shape[0],):
        raise ValueError("code length does not match the lookup table")
    if code.min() < 0 or code.max() >= lut.shape[1]:
        raise IndexError("code entry out of range")
    total = 0.0
    for s in range(lut.shape[0]):
        total += float(lut[s, code[s]])
    return total


def adc_batch(lut: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Vectorised :func:`adc` with the same left-to-right summation order."""
    codes = np.asarray(codes, dtype=np.int64)
    out = np.zeros(codes.shape[0])
    for s in range(lut.shape[0]):
        out += lut[s, codes[:, s]]
    return out


def code_residual(codebook: Codebook, v, code) -> float:
    """Squared distance between the rotated vector and its reconstruction."""
    r = codebook.rotate(v) - decode(codebook, code)[0]
    return float(r @ r)


def residuals_batch(codebook: Codebook, vectors, codes) -> np.ndarray:
    xr = codebook.rotate(np.atleast_2d(np.asarray(vectors, dtype=np.float64)))
    r = xr - decode(codebook, codes)
    return np.einsum("ij,ij->i", r, r)


def quantization_error(codebook: Codebook, dataset) -> float:
    """Total squared reconstruction error over ``dataset``."""
    data = as_dataset(dataset)
    codes = encode_batch(codebook, data)
    return float(residuals_batch(codebook, data, codes).sum())


def pack_codes(codes: np.ndarray, nbits: int) -> bytes:
    """Pack codes MSB-first into ``ceil(n*S*nbits/8)`` bytes (1 byte/code at nbits=8)."""
    codes = np.asarray(codes, dtype=np.uint8)
    if nbits == 8:
        return codes.tobytes()
    bits = np.unpackbits(codes.reshape(-1, 1), axis=1)[:, 8 - nbits :]
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_codes(blob: bytes, n: int, num_subspaces: int, nbits: int) -> np.ndarray:
    raw = np.frombuffer(blob, dtype=np.uint8)
    if nbits == 8:
        return raw[: n * num_subspaces].reshape(n, num_subspaces).copy()
    total = n * num_subspaces
    bits = np.unpackbits(raw)[: total * nbits].reshape(total, nbits)
    padded = np.zeros((total, 8), dtype=np.uint8)
    padded[:, 8 - nbits :] = bits
    return np.packbits(padded, axis=1).reshape(n, num_subspaces)


def codebook_to_bytes(codebook: Codebook) -> bytes:
    """Layout (little-endian): b"FDCB", int32 num_subspaces, int32 nbits,
    int32 sub_dim, int32 has_rotation, [float32 rotation D*D row-major],
    float32 centroids[num_subspaces][2**nbits][sub_dim]."""
    has_rot = codebook.rotation is not None
    parts = [_MAGIC, struct.pack("<iiii", codebook.num_subspaces, codebook.nbits,
                                 codebook.sub_dim, int(has_rot))]
    if has_rot:
        parts.append(np.ascontiguousarray(codebook.rotation, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())
    return b"".join(parts)


def codebook_from_bytes(blob: bytes, source: str = "codebook") -> Codebook:
    if blob[:4] != _MAGIC:
        raise ValueError(f"{source}: not a codebook record")
    S, nbits, sub, has_rot = struct.unpack_from("<iiii", blob, 4)
    if S < 1 or sub < 1 or not 1 <= nbits <= 8:
        raise ValueError(f"{source}: corrupt codebook header")
    D = S * sub
    k = 1 << nbits
    body = np.frombuffer(blob, dtype="<f4", offset=20)
    expected = (D * D if has_rot else 0) + S * k * sub
    if body.size != expected:
        raise ValueError(f"{source}: truncated codebook record")
    rot = None
    if has_rot:
        rot = body[: D * D].reshape(D, D).astype(np.float32)
        body = body[D * D :]
    cents = body.reshape(S, k, sub).astype(np.float32)
    return Codebook(S, nbits, cents, rot)


def save_codebook(codebook: Codebook, path: os.PathLike | str) -> None:
    with open(path, "wb") as fh:
        fh.write(codebook_to_bytes(codebook))


def load_codebook(path: os.PathLike | str) -> Codebook:
    with open(path, "rb") as fh:
        return codebook_from_bytes(fh.read(), str(path))
