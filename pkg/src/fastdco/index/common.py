from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .. import _backend
from ..dco import DcoStrategy, ads_scale
from ..quant import build_lut
from ..transform import QueryContext, Rotor, make_query_context

# kernel operator modes
MODE_PROJ = 1  # C1 - C2 test, exact when no stages
MODE_ADS = 2
MODE_QUANT = 3

_NO_CODES = np.zeros((1, 1), dtype=np.uint8)
_NO_RESID = np.zeros(1)
_NO_LUT = np.zeros((1, 1))


@dataclass
class SearchResult:
    ids: np.ndarray  # (K,) int64 ascending by distance
    dists: np.ndarray  # (K,) float64 squared distances
    dco_calls: int = 0
    dims_scanned_total: int = 0
    pruned_count: int = 0
    exact_count: int = 0
    rejected_exact: int = 0  # exact distance computed and found > tau
    lookups: int = 0  # PQ table lookups

    def scan_rate(self, D: int) -> float:
        """Fraction of vector coordinates touched per DCO call."""
        return self.dims_scanned_total / (self.dco_calls * D) if self.dco_calls else 0.0

    def pruned_rate(self) -> float:
        """Pruned calls over calls that were rejected (pruned or exact with dis > tau)."""
        neg = self.pruned_count + self.rejected_exact
        return self.pruned_count / neg if neg else 0.0


@dataclass
class KernelPlan:
    mode: int
    stage_dims: np.ndarray  # int32
    stage_m1: np.ndarray
    stage_off: np.ndarray
    qparams: np.ndarray  # (m1, w, beta) for MODE_QUANT
    lut: np.ndarray


def plan_query(strategy: DcoStrategy, ctx: QueryContext, q_raw=None, codebook=None) -> KernelPlan:
    """Flatten a strategy into per-stage ``m1*dis' + off > tau`` tests for the kernels."""
    D = ctx.dim
    cps = ctx.checkpoints
    empty_i = np.zeros(0, dtype=np.int32)
    empty_f = np.zeros(0)
    kind = strategy.kind
    qparams = np.zeros(3)
    lut = _NO_LUT
    if kind == "exact":
        return KernelPlan(MODE_PROJ, empty_i, empty_f, empty_f, qparams, lut)
    if kind in ("bsa_res", "bsa_res_inc"):
        if kind == "bsa_res":
            if strategy.d >= D:
                return KernelPlan(MODE_PROJ, empty_i, empty_f, empty_f, qparams, lut)
            idx = np.array([ctx.checkpoint_index(strategy.d)])
        else:
            idx = np.arange(len(cps) - 1)
        dims = cps[idx].astype(np.int32)
        off = -strategy.m * np.sqrt(ctx.sigma_suffix[idx])
        return KernelPlan(MODE_PROJ, dims, np.ones(len(dims)), off, qparams, lut)
    if kind == "ads":
        dims = cps[:-1].astype(np.int32)
        m1 = np.array([D / (d * ads_scale(int(d), strategy.eps0)) for d in dims], dtype=np.float64)
        return KernelPlan(MODE_ADS, dims, m1, np.zeros(len(dims)), qparams, lut)
    if kind == "learned_proj":
        cas = strategy.cascade
        for d in cas.checkpoints:
            ctx.checkpoint_index(d)
        dims = np.asarray(cas.checkpoints, dtype=np.int32)
        m1 = np.array([c.m1 for c in cas.classifiers], dtype=np.float64)
        off = np.array([c.beta for c in cas.classifiers], dtype=np.float64)
        return KernelPlan(MODE_PROJ, dims, m1, off, qparams, lut)
    if kind == "learned_quant":
        if codebook is None:
            raise ValueError("learned_quant needs an index built with a codebook")
        clf = strategy.classifier
        qparams = np.array([clf.m1, clf.extra_weights[0], clf.beta])
        lut = np.ascontiguousarray(build_lut(codebook, q_raw))
        return KernelPlan(MODE_QUANT, empty_i, empty_f, empty_f, qparams, lut)
    raise ValueError(kind)


def query_setup(rotor: Rotor, strategy: DcoStrategy, q, codebook=None):
    q = np.asarray(q, dtype=np.float32)
    strategy.validate_dim(rotor.dim)
    if strategy.kind == "ads" and rotor.kind != "random":
        raise ValueError("the ADSampling operator requires an index built with a random rotor")
    if strategy.kind in ("bsa_res", "bsa_res_inc") and rotor.kind != "pca" and not rotor.sigma2.any():
        raise ValueError("residual bounds need sigma2; call measure_sigma2 on the random rotor")
    delta = min(strategy.delta_d, rotor.dim)
    if strategy.kind == "learned_proj" and strategy.cascade.checkpoints:
        delta = strategy.cascade.checkpoints[0]
    elif strategy.kind == "bsa_res":
        delta = min(strategy.d, rotor.dim)
    ctx = make_query_context(rotor, q, delta)
    plan = plan_query(strategy, ctx, q, codebook)
    return ctx, plan


def kernel_quant_args(plan: KernelPlan, codes, resid):
    if plan.mode == MODE_QUANT:
        return codes, resid, plan.lut
    return _NO_CODES, _NO_RESID, _NO_LUT


def to_result(ids, dists, counters) -> SearchResult:
    c = [int(v) for v in counters]
    return SearchResult(np.asarray(ids, dtype=np.int64), np.asarray(dists, dtype=np.float64),
                        dco_calls=c[0], dims_scanned_total=c[1], pruned_count=c[2],
                        exact_count=c[3], rejected_exact=c[4], lookups=c[5])


def kernels(backend: str | None):
    return _backend.get(backend)


# -- little-endian record IO shared by the index files --------------------------


def pack_blob(blob: bytes) -> bytes:
    """Length-prefixed (int64) opaque record."""
    return struct.pack("<q", len(blob)) + blob


def pack_array(arr: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(arr, dtype=dtype).tobytes()


class Reader:
    """Sequential reader over a file image; every read is bounds-checked."""

    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.pos = 0
        self.source = source

    def _take(self, nbytes: int) -> int:
        start = self.pos
        if nbytes < 0 or start + nbytes > len(self.blob):
            raise ValueError(f"{self.source}: truncated file")
        self.pos += nbytes
        return start

    def magic(self, expected: bytes) -> None:
        start = self._take(len(expected))
        if self.blob[start : start + len(expected)] != expected:
            raise ValueError(f"{self.source}: bad magic, not a {expected.decode()} file")

    def ints(self, fmt: str) -> tuple:
        start = self._take(struct.calcsize(fmt))
        return struct.unpack_from(fmt, self.blob, start)

    def array(self, dtype: str, shape) -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape))
        start = self._take(count * dt.itemsize)
        out = np.frombuffer(self.blob, dtype=dt, count=count, offset=start)
        return out.astype(dt.newbyteorder("="), copy=True).reshape(shape)

    def blob_record(self) -> bytes:
        (size,) = self.ints("<q")
        start = self._take(size)
        return self.blob[start : start + size]

    def done(self) -> None:
        if self.pos != len(self.blob):
            raise ValueError(f"{self.source}: trailing bytes")
