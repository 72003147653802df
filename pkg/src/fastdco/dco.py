"""Distance comparison operators (DCOs).

Each operator answers "is ``dis(x, q) > tau``?" for one candidate, touching as
few coordinates as it can.  A pruned candidate comes back with an approximate
distance; a kept one with the exact squared distance.  These functions work on
one candidate at a time and are the reference semantics; the index kernels in
``_kernels`` / ``_pykernels`` implement the same decisions in batch.

Conventions shared by all operators:

* ``x_rot`` / ``ctx.q_rot`` are rotated, centred vectors (see ``transform``).
* ``tau < 0`` means the result queue is not full yet: nothing is pruned.
* At the last checkpoint (``d == D``) every incremental operator falls back
  to the exact decision ``dis > tau``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .learn import Cascade, LinearClassifier
from .quant import PqCode, adc
from .transform import QueryContext

__all__ = [
    "DcoResult",
    "DcoStrategy",
    "STRATEGY_KINDS",
    "dco_exact",
    "dco_bsa_res",
    "dco_bsa_res_incremental",
    "dco_ads",
    "dco_learned_proj",
    "dco_learned_quant",
    "ads_scale",
]

STRATEGY_KINDS = ("exact", "ads", "bsa_res", "bsa_res_inc", "learned_proj", "learned_quant")

# CLI spelling -> internal kind
CLI_NAMES = {
    "exact": "exact",
    "ads": "ads",
    "bsa": "bsa_res",
    "bsa-inc": "bsa_res_inc",
    "learned-pca": "learned_proj",
    "learned-opq": "learned_quant",
}


@dataclass(frozen=True)
class DcoResult:
    pruned: bool
    distance: float
    dims_scanned: int
    used_exact: bool


@dataclass(frozen=True)
class DcoStrategy:
    """Which operator to run inside an index, plus its parameters."""

    kind: str = "exact"
    m: float = 8.0
    eps0: float = 2.1
    delta_d: int = 32
    d: int | None = None
    cascade: Cascade | None = None
    classifier: LinearClassifier | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown DCO strategy {self.kind!r}")
        if self.m <= 0:
            raise ValueError("multiplier m must be > 0")
        if self.eps0 <= 0:
            raise ValueError("eps0 must be > 0")
        if self.delta_d < 1:
            raise ValueError("delta_d must be >= 1")
        if self.kind == "bsa_res" and (self.d is None or self.d < 1):
            raise ValueError("bsa_res needs a projected dimension d >= 1")
        if self.kind == "learned_proj" and self.cascade is None:
            raise ValueError("learned_proj needs a classifier cascade")
        if self.kind == "learned_quant":
            if self.classifier is None:
                raise ValueError("learned_quant needs a classifier")
            if len(self.classifier.extra_weights) != 1:
                raise ValueError("learned_quant classifier must have exactly one extra feature")

    @classmethod
    def from_cli(cls, name: str, **kw) -> "DcoStrategy":
        if name not in CLI_NAMES:
            raise ValueError(f"--dco must be one of {sorted(CLI_NAMES)}")
        return cls(kind=CLI_NAMES[name], **kw)

    def validate_dim(self, D: int) -> None:
        if self.kind in ("bsa_res_inc", "ads") and self.delta_d > D:
            raise ValueError(f"delta_d={self.delta_d} exceeds D={D}")
        if self.kind == "bsa_res" and self.d > D:
            raise ValueError(f"d={self.d} exceeds D={D}")
        if self.kind == "learned_proj" and self.cascade.dim != D:
            raise ValueError("cascade was trained for a different dimension")

    @property
    def label(self) -> str:
        inv = {v: k for k, v in CLI_NAMES.items()}
        return inv[self.kind]


def _c1(ctx: QueryContext, x_norm2: float) -> float:
    return float(x_norm2) + ctx.q_norm2


def _finish(x: np.ndarray, ctx: QueryContext, c1: float, ip: float, start: int, tau: float,
            final_prunes: bool) -> DcoResult:
    ip += float(x[start:] @ ctx.q_rot[start:])
    dis = max(c1 - 2.0 * ip, 0.0)
    pruned = final_prunes and tau >= 0 and dis > tau
    return DcoResult(pruned=pruned, distance=dis, dims_scanned=ctx.dim, used_exact=True)


def dco_exact(x_rot, ctx: QueryContext, x_norm2: float) -> DcoResult:
    """Exact squared distance via ``C1 - 2<x, q>`` (never prunes)."""
    x = np.asarray(x_rot, dtype=np.float64)
    if x.shape != ctx.q_rot.shape:
        raise ValueError("dimension mismatch")
    return _finish(x, ctx, _c1(ctx, x_norm2), 0.0, 0, -1.0, False)


def dco_bsa_res(x_rot, ctx: QueryContext, x_norm2: float, tau: float, m: float, d: int) -> DcoResult:
    """Single-shot residual-bound test at projected dimension ``d``.

    Prunes when ``C1 - C2 - m*sigma_d > tau``; otherwise computes the exact
    distance and reports the candidate as kept, regardless of ``tau``.  With
    ``d == D`` there is nothing left to bound and the call is ``dco_exact``.
    """
    x = np.asarray(x_rot, dtype=np.float64)
    j = ctx.checkpoint_index(d)
    if d == ctx.dim:
        return dco_exact(x, ctx, x_norm2)
    c1 = _c1(ctx, x_norm2)
    ip = float(x[:d] @ ctx.q_rot[:d])
    if tau >= 0:
        approx = c1 - 2.0 * ip
        if approx - m * np.sqrt(ctx.sigma_suffix[j]) > tau:
            return DcoResult(pruned=True, distance=approx, dims_scanned=d, used_exact=False)
    return _finish(x, ctx, c1, ip, d, tau, False)


def dco_bsa_res_incremental(x_rot, ctx: QueryContext, x_norm2: float, tau: float, m: float,
                            delta_d: int) -> DcoResult:
    """Residual-bound test repeated every ``delta_d`` dims until pruned or exhausted."""
    x = np.asarray(x_rot, dtype=np.float64)
    cps = ctx.checkpoints
    if len(cps) > 1 and cps[0] != delta_d:
        raise ValueError("delta_d does not match the query context checkpoints")
    c1 = _c1(ctx, x_norm2)
    ip = 0.0
    prev = 0
    if tau >= 0:
        for j in range(len(cps) - 1):
            d = int(cps[j])
            ip += float(x[prev:d] @ ctx.q_rot[prev:d])
            prev = d
            approx = c1 - 2.0 * ip
            if approx - m * np.sqrt(ctx.sigma_suffix[j]) > tau:
                return DcoResult(pruned=True, distance=approx, dims_scanned=d, used_exact=False)
    return _finish(x, ctx, c1, ip, prev, tau, True)


def ads_scale(d: int, eps0: float) -> float:
    """Squared-level multiplicative slack ``(1 + eps0/sqrt(d))^2``."""
    return (1.0 + eps0 / np.sqrt(d)) ** 2


def dco_ads(x_rot, ctx: QueryContext, x_norm2: float, tau: float, epsilon0: float,
            delta_d: int) -> DcoResult:
    """Random-projection hypothesis test.

    At checkpoint ``d`` the partial distance is rescaled to ``(D/d)*|x_d - q_d|^2``
    and compared with ``(1 + eps0/sqrt(d))^2 * tau``.  ``x_norm2`` is unused and
    kept for a uniform operator signature.
    """
    del x_norm2
    x = np.asarray(x_rot, dtype=np.float64)
    D = ctx.dim
    cps = ctx.checkpoints
    ps = 0.0
    prev = 0
    if tau >= 0:
        for j in range(len(cps) - 1):
            d = int(cps[j])
            diff = x[prev:d] - ctx.q_rot[prev:d]
            ps += float(diff @ diff)
            prev = d
            est = ps * D / d
            if est > ads_scale(d, epsilon0) * tau:
                return DcoResult(pruned=True, distance=est, dims_scanned=d, used_exact=False)
    diff = x[prev:] - ctx.q_rot[prev:]
    ps += float(diff @ diff)
    pruned = tau >= 0 and ps > tau
    return DcoResult(pruned=pruned, distance=ps, dims_scanned=D, used_exact=True)


def dco_learned_proj(x_rot, ctx: QueryContext, x_norm2: float, tau: float,
                     cascade: Cascade) -> DcoResult:
    """Run the classifier cascade on the uncorrected projected distance ``C1 - C2``."""
    x = np.asarray(x_rot, dtype=np.float64)
    for d in cascade.checkpoints:
        ctx.checkpoint_index(d)  # raises on misalignment
    c1 = _c1(ctx, x_norm2)
    ip = 0.0
    prev = 0
    if tau >= 0:
        for d, clf in zip(cascade.checkpoints, cascade.classifiers):
            ip += float(x[prev:d] @ ctx.q_rot[prev:d])
            prev = d
            approx = c1 - 2.0 * ip
            if clf.decide(approx, tau):
                return DcoResult(pruned=True, distance=approx, dims_scanned=d, used_exact=False)
    return _finish(x, ctx, c1, ip, prev, tau, True)


def dco_learned_quant(code: PqCode, lut: np.ndarray, resid_feat: float, tau: float,
                      clf: LinearClassifier, x_raw, q_raw) -> DcoResult:
    """Classifier over (ADC distance, tau, code residual); exact on raw vectors if kept.

    A pruned call touches no vector coordinates, only ``len(code)`` table entries.
    """
    if len(clf.extra_weights) != 1:
        raise ValueError("classifier must take exactly one extra feature")
    if tau >= 0:
        approx = adc(lut, code)
        if clf.decide(approx, tau, (resid_feat,)):
            return DcoResult(pruned=True, distance=approx, dims_scanned=0, used_exact=False)
    diff = np.asarray(x_raw, dtype=np.float64) - np.asarray(q_raw, dtype=np.float64)
    dis = float(diff @ diff)
    return DcoResult(pruned=False, distance=dis, dims_scanned=diff.shape[0], used_exact=True)
