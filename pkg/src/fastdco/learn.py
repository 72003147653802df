"""Learned linear pruning classifiers.

A classifier predicts label 1 ("dis > tau, safe to prune") when

    m1 * dis' + sum(extra_weights * extras) + beta > tau

It is fitted by logistic regression on ``(dis', tau, extras...)`` and then its
intercept is shifted so that at least a target fraction of label-0 training
samples (true neighbours) are kept.  A :class:`Cascade` holds one classifier
per projection checkpoint for incremental use.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LabeledSamples",
    "TrainingSet",
    "LinearClassifier",
    "Cascade",
    "bce_loss",
    "bce_grad",
    "train_logistic",
    "calibrate_beta",
    "label0_recall",
    "pruned_rate",
    "stage_target",
    "collect_training",
    "collect_quant_training",
    "build_cascade",
    "cascade_prunes",
    "audit_cascade",
    "train_quant_classifier",
    "save_cascade",
    "load_cascade",
    "save_classifier",
    "load_classifier",
]


@dataclass(frozen=True)
class LabeledSamples:
    """Features for one approximate distance: label 1 iff ``exact_dis > tau``."""

    dis_prime: np.ndarray  # (N,)
    tau: np.ndarray  # (N,)
    label: np.ndarray  # (N,) int8
    exact_dis: np.ndarray  # (N,)
    extras: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (N, e)

    def __post_init__(self):
        if self.extras.size == 0:
            object.__setattr__(self, "extras", np.zeros((len(self.tau), 0)))

    def __len__(self) -> int:
        return len(self.tau)

    def features(self) -> np.ndarray:
        """Design matrix ``[dis', tau, extras...]``."""
        return np.column_stack([self.dis_prime, self.tau, self.extras])

    def subset(self, idx) -> "LabeledSamples":
        return LabeledSamples(self.dis_prime[idx], self.tau[idx], self.label[idx],
                              self.exact_dis[idx], self.extras[idx])


@dataclass(frozen=True)
class TrainingSet:
    """Pairs (query, candidate) with one ``dis'`` column per checkpoint."""

    query: np.ndarray  # (N,) query index
    candidate: np.ndarray  # (N,) dataset id
    tau: np.ndarray
    exact_dis: np.ndarray
    label: np.ndarray
    checkpoints: np.ndarray  # (c,)
    dis_prime: np.ndarray  # (N, c)

    def at(self, j: int) -> LabeledSamples:
        return LabeledSamples(self.dis_prime[:, j], self.tau, self.label, self.exact_dis)

    def split(self, holdout: float, seed: int) -> tuple["TrainingSet", "TrainingSet"]:
        """Split by query so that held-out queries are unseen during training."""
        queries = np.unique(self.query)
        rng = np.random.default_rng(seed)
        n_out = int(round(holdout * len(queries)))
        out_q = rng.choice(queries, n_out, replace=False)
        mask = np.isin(self.query, out_q)
        return self._take(~mask), self._take(mask)

    def _take(self, mask) -> "TrainingSet":
        return TrainingSet(self.query[mask], self.candidate[mask], self.tau[mask],
                           self.exact_dis[mask], self.label[mask], self.checkpoints,
                           self.dis_prime[mask])


@dataclass(frozen=True)
class LinearClassifier:
    m1: float
    beta: float
    extra_weights: tuple[float, ...] = ()

    def score(self, dis_prime, extras=None) -> np.ndarray:
        """Left-hand side ``m1*dis' + extras.w + beta`` (compared against tau)."""
        s = self.m1 * np.asarray(dis_prime, dtype=np.float64) + self.beta
        if self.extra_weights:
            e = np.asarray(extras, dtype=np.float64).reshape(-1, len(self.extra_weights))
            s = s + e @ np.asarray(self.extra_weights)
            if np.ndim(dis_prime) == 0:
                s = s[0]
        return s

    def predict(self, dis_prime, tau, extras=None) -> np.ndarray:
        """1 = prune (predicted ``dis > tau``), 0 = keep."""
        return (self.score(dis_prime, extras) > np.asarray(tau)).astype(np.int8)

    def decide(self, dis_prime: float, tau: float, extras=()) -> bool:
        s = self.m1 * dis_prime + self.beta
        for w, e in zip(self.extra_weights, extras):
            s += w * e
        return s > tau

    def with_beta(self, beta: float) -> "LinearClassifier":
        return LinearClassifier(self.m1, float(beta), self.extra_weights)


@dataclass(frozen=True)
class Cascade:
    dim: int
    checkpoints: tuple[int, ...]
    classifiers: tuple[LinearClassifier, ...]
    target_recall: float
    stage_targets: tuple[float, ...]

    def __post_init__(self):
        cps = self.checkpoints
        if len(cps) != len(self.classifiers) or len(cps) != len(self.stage_targets):
            raise ValueError("one classifier and target per checkpoint")
        if any(b <= a for a, b in zip(cps, cps[1:])):
            raise ValueError("checkpoints must be strictly increasing")
        if cps and (cps[0] < 1 or cps[-1] >= self.dim):
            raise ValueError("checkpoints must lie in [1, D)")


# -- logistic regression ----------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy; ``w[-1]`` is the bias."""
    z = X @ w[:-1] + w[-1]
    # log(1 + e^z) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def bce_grad(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = X @ w[:-1] + w[-1]
    r = _sigmoid(z) - y
    g = np.empty_like(w)
    g[:-1] = X.T @ r / X.shape[0]
    g[-1] = r.mean()
    return g


def _reduce(coef: np.ndarray, bias: float) -> LinearClassifier:
    """Turn ``a_dis*dis' + a_tau*tau + a_e.e + c > 0`` into ``m1*dis' + w.e + beta > tau``."""
    a_dis, a_tau, a_e = coef[0], coef[1], coef[2:]
    if a_tau >= -1e-12:
        # the fit did not learn "larger tau -> keep"; fall back to plain dis' vs tau
        # and leave the intercept to calibration
        return LinearClassifier(1.0, 0.0, tuple(0.0 for _ in a_e))
    s = -a_tau
    return LinearClassifier(float(a_dis / s), float(bias / s), tuple(float(v / s) for v in a_e))


def train_logistic(samples: LabeledSamples, learning_rate: float = 0.1, epochs: int = 20,
                   seed: int = 0, batch_size: int = 256,
                   loss_history: list | None = None) -> LinearClassifier:
    """Mini-batch SGD on standardised features, folded back to raw-feature weights.

    The step size decays as ``learning_rate / sqrt(epoch)`` (1-based).
    """
    y = np.asarray(samples.label, dtype=np.float64)
    if y.min() == y.max():
        raise ValueError("training needs both labels present")
    X = samples.features()
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    rng = np.random.default_rng(seed)
    w = np.zeros(X.shape[1] + 1)
    n = len(y)
    for epoch in range(1, epochs + 1):
        lr = learning_rate / np.sqrt(epoch)
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            b = perm[s : s + batch_size]
            w -= lr * bce_grad(w, Z[b], y[b])
        if loss_history is not None:
            loss_history.append(bce_loss(w, Z, y))
    coef, bias = fold_standardization(w[:-1], w[-1], mu, sd)
    return _reduce(coef, bias)


def fold_standardization(w: np.ndarray, b: float, mu: np.ndarray,
                         sd: np.ndarray) -> tuple[np.ndarray, float]:
    """Weights on ``(x - mu)/sd`` -> equivalent weights on raw ``x``."""
    coef = w / sd
    return coef, float(b - coef @ mu)


# -- calibration --------------------------------------------------------------


def _slack(clf: LinearClassifier, samples: LabeledSamples) -> np.ndarray:
    """Per-sample largest beta for which the sample is still predicted 0."""
    base = clf.with_beta(0.0).score(samples.dis_prime, samples.extras)
    return samples.tau - base


def label0_recall(clf: LinearClassifier, samples: LabeledSamples) -> float:
    neg = samples.label == 0
    if not neg.any():
        return 1.0
    keep = clf.predict(samples.dis_prime[neg], samples.tau[neg], samples.extras[neg]) == 0
    return float(keep.mean())


def pruned_rate(clf: LinearClassifier, samples: LabeledSamples) -> float:
    """Fraction of label-1 samples the classifier prunes."""
    pos = samples.label == 1
    if not pos.any():
        return 0.0
    return float(clf.predict(samples.dis_prime[pos], samples.tau[pos], samples.extras[pos]).mean())


def calibrate_beta(clf: LinearClassifier, samples: LabeledSamples, target_recall: float,
                   tol: float | None = None) -> LinearClassifier:
    """Largest intercept whose label-0 recall on ``samples`` reaches ``target_recall``.

    Bisection on beta; label-0 recall is non-increasing in beta, so the lower
    end of the bracket always satisfies the target.
    """
    if not 0 < target_recall <= 1:
        raise ValueError("target recall must be in (0, 1]")
    neg = samples.label == 0
    if not neg.any():
        return clf
    slack = _slack(clf, samples)[neg]
    n0 = slack.size
    need = int(np.ceil(target_recall * n0 - 1e-9))

    def ok(beta: float) -> bool:
        return np.count_nonzero(slack >= beta) >= need

    lo = float(slack.min()) - 1.0
    hi = float(slack.max()) + 1.0
    if ok(hi):
        return clf.with_beta(hi)
    if tol is None:
        tol = 1e-6 * max(float(np.median(np.abs(samples.tau))), 1e-12)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return clf.with_beta(lo)


def stage_target(target_recall: float, n_stages: int) -> float:
    """Per-stage recall so that stage misses add up to at most ``1 - r``."""
    return 1.0 - (1.0 - target_recall) / n_stages


# -- training data ----------------------------------------------------------


def _knn_excluding(data64: np.ndarray, xn: np.ndarray, q: np.ndarray, k: int,
                   exclude: int) -> tuple[np.ndarray, np.ndarray]:
    d = xn - 2.0 * data64 @ q + q @ q
    if exclude >= 0:
        d[exclude] = np.inf
    idx = np.argpartition(d, k - 1)[: k + 8]
    diff = data64[idx] - q
    exact = np.einsum("ij,ij->i", diff, diff)
    if exclude >= 0:
        exact[idx == exclude] = np.inf
    order = np.lexsort((idx, exact))[:k]
    return idx[order], exact[order]


def _collect_pairs(dataset, queries, k: int, per_query_visits: int, seed: int,
                   ivf_index=None, nprobe: int | None = None,
                   exclude_ids=None) -> tuple[np.ndarray, ...]:
    """(query, candidate, tau, exact_dis, label) rows: K true neighbours + visited negatives."""
    from .index.ivf import ivf_build, ivf_candidates
    from .transform import identity_rotor
    from .vecio import as_dataset

    data = as_dataset(dataset)
    qs = as_dataset(queries, "queries")
    n, D = data.shape
    if n <= k:
        raise ValueError("need more than K points to collect training samples")
    rng = np.random.default_rng(seed)
    if ivf_index is None:
        nlist = max(1, min(int(np.sqrt(n)), n))
        ivf_index = ivf_build(data, identity_rotor(D), nlist, seed=seed)
    if nprobe is None:
        nprobe = max(1, ivf_index.nlist // 16)
    data64 = data.astype(np.float64)
    xn = np.einsum("ij,ij->i", data64, data64)
    rows = []
    for qi in range(qs.shape[0]):
        q = qs[qi].astype(np.float64)
        excl = -1 if exclude_ids is None else int(exclude_ids[qi])
        nn_ids, nn_d = _knn_excluding(data64, xn, q, k, excl)
        tau = float(nn_d[-1])
        visited = ivf_candidates(ivf_index, q, nprobe)
        visited = visited[~np.isin(visited, nn_ids)]
        if excl >= 0:
            visited = visited[visited != excl]
        if visited.size > per_query_visits:
            visited = np.sort(rng.choice(visited, per_query_visits, replace=False))
        diff = data64[visited] - q
        vd = np.einsum("ij,ij->i", diff, diff)
        ids = np.concatenate([nn_ids, visited])
        ex = np.concatenate([nn_d, vd])
        rows.append((np.full(ids.size, qi), ids, np.full(ids.size, tau), ex))
    query = np.concatenate([r[0] for r in rows])
    cand = np.concatenate([r[1] for r in rows])
    tau = np.concatenate([r[2] for r in rows])
    exact = np.concatenate([r[3] for r in rows])
    label = (exact > tau).astype(np.int8)
    return query, cand, tau, exact, label


def collect_training(dataset, rotor, queries, k: int, per_query_visits: int = 50,
                     seed: int = 0, delta_d: int = 32, ivf_index=None,
                     nprobe: int | None = None, exclude_ids=None) -> TrainingSet:
    """Projection-distance samples ``dis'_d = C1 - C2_d`` at every checkpoint below D.

    Label-0 rows are each query's exact K nearest neighbours with ``tau`` the
    K-th distance; label-1 rows are other points visited by an IVF pass.
    """
    from .transform import apply, checkpoints

    query, cand, tau, exact, label = _collect_pairs(
        dataset, queries, k, per_query_visits, seed, ivf_index, nprobe, exclude_ids)
    data = np.asarray(dataset, dtype=np.float32)
    D = rotor.dim
    cps = checkpoints(D, delta_d)[:-1]
    q_rot = apply(rotor, np.asarray(queries, dtype=np.float32))[query]
    x_rot = apply(rotor, data[cand])
    c1 = np.einsum("ij,ij->i", x_rot, x_rot) + np.einsum("ij,ij->i", q_rot, q_rot)
    prod = np.cumsum(x_rot * q_rot, axis=1)
    dis_prime = np.column_stack([c1 - 2.0 * prod[:, d - 1] for d in cps]) if len(cps) else \
        np.zeros((len(query), 0))
    return TrainingSet(query, cand, tau, exact, label, cps, dis_prime)


def collect_quant_training(dataset, codebook, queries, k: int, per_query_visits: int = 50,
                           seed: int = 0, ivf_index=None, nprobe: int | None = None,
                           exclude_ids=None, codes=None, residuals=None) -> LabeledSamples:
    """Samples with features (ADC distance, tau, code residual)."""
    from .quant import adc_batch, build_lut, encode_batch, residuals_batch

    data = np.asarray(dataset, dtype=np.float32)
    qs = np.asarray(queries, dtype=np.float32)
    query, cand, tau, exact, label = _collect_pairs(
        data, qs, k, per_query_visits, seed, ivf_index, nprobe, exclude_ids)
    if codes is None:
        codes = encode_batch(codebook, data)
    if residuals is None:
        residuals = residuals_batch(codebook, data, codes)
    approx = np.empty(len(query))
    for qi in np.unique(query):
        rows = np.flatnonzero(query == qi)
        approx[rows] = adc_batch(build_lut(codebook, qs[qi]), codes[cand[rows]])
    return LabeledSamples(approx, tau, label, exact, residuals[cand].reshape(-1, 1))


# -- cascades -----------------------------------------------------------------


def build_cascade(dataset, rotor, delta_d: int, k: int, target_recall: float = 0.995,
                  seed: int = 0, queries=None, n_train_queries: int = 1000,
                  per_query_visits: int = 50, ivf_index=None,
                  training: TrainingSet | None = None, holdout: float = 0.1,
                  audit: dict | None = None, **train_kw) -> Cascade:
    """Train and calibrate one classifier per checkpoint below D.

    Without ``queries``, training queries are sampled from ``dataset`` and
    their own row is excluded from their neighbour lists.  A ``holdout``
    fraction of the queries is kept out of training; if ``audit`` is a dict it
    receives :func:`audit_cascade` figures for that split.
    """
    D = rotor.dim
    if training is None:
        exclude = None
        if queries is None:
            n = np.asarray(dataset).shape[0]
            rng = np.random.default_rng(seed)
            pick = np.sort(rng.choice(n, min(n_train_queries, n), replace=False))
            queries = np.asarray(dataset)[pick]
            exclude = pick
        training = collect_training(dataset, rotor, queries, k, per_query_visits, seed,
                                    delta_d, ivf_index, exclude_ids=exclude)
    held = None
    if holdout > 0 and len(np.unique(training.query)) >= 10:
        training, held = training.split(holdout, seed)
    n_stages = len(training.checkpoints) + 1  # number of delta_d blocks covering D
    r_i = stage_target(target_recall, n_stages)
    classifiers = []
    for j in range(len(training.checkpoints)):
        samples = training.at(j)
        clf = train_logistic(samples, seed=seed + j, **train_kw)
        classifiers.append(calibrate_beta(clf, samples, r_i))
    cascade = Cascade(
        dim=D,
        checkpoints=tuple(int(c) for c in training.checkpoints),
        classifiers=tuple(classifiers),
        target_recall=float(target_recall),
        stage_targets=tuple(r_i for _ in classifiers),
    )
    if audit is not None:
        audit.update(audit_cascade(cascade, training, "train_"))
        if held is not None:
            audit.update(audit_cascade(cascade, held, "holdout_"))
    return cascade


def cascade_prunes(cascade: Cascade, ts: TrainingSet) -> np.ndarray:
    """Per sample: True if any stage of ``cascade`` would prune it."""
    if tuple(int(c) for c in ts.checkpoints) != cascade.checkpoints:
        raise ValueError("training set checkpoints do not match the cascade")
    pruned = np.zeros(len(ts.tau), dtype=bool)
    for j, clf in enumerate(cascade.classifiers):
        pruned |= clf.predict(ts.dis_prime[:, j], ts.tau) == 1
    return pruned


def audit_cascade(cascade: Cascade, ts: TrainingSet, prefix: str = "") -> dict:
    """False-prune rate over label-0 samples and pruned rate over label-1 samples."""
    pruned = cascade_prunes(cascade, ts)
    neg = ts.label == 0
    out = {
        prefix + "false_prune_rate": float(pruned[neg].mean()) if neg.any() else 0.0,
        prefix + "pruned_rate": float(pruned[~neg].mean()) if (~neg).any() else 0.0,
        prefix + "samples": int(len(ts.tau)),
    }
    return out


def train_quant_classifier(samples: LabeledSamples, target_recall: float = 0.995,
                           seed: int = 0, **train_kw) -> LinearClassifier:
    clf = train_logistic(samples, seed=seed, **train_kw)
    return calibrate_beta(clf, samples, target_recall)


# -- serialization --------------------------------------------------------------
# Plain text, one record per line, floats written with float.hex for exact round trips:
#   cascade <D> <target_recall> <n_stages>
#   stage <checkpoint> <stage_target> <m1> <beta> <n_extra> <w...>
# A lone classifier file holds a single "classifier <m1> <beta> <n_extra> <w...>" line.


def _clf_fields(clf: LinearClassifier) -> list[str]:
    return [clf.m1.hex(), clf.beta.hex(), str(len(clf.extra_weights))] + [
        w.hex() for w in clf.extra_weights]


def _parse_clf(tok: list[str]) -> LinearClassifier:
    m1, beta, ne = float.fromhex(tok[0]), float.fromhex(tok[1]), int(tok[2])
    return LinearClassifier(m1, beta, tuple(float.fromhex(t) for t in tok[3 : 3 + ne]))


def save_cascade(cascade: Cascade, path: os.PathLike | str) -> None:
    lines = [f"cascade {cascade.dim} {cascade.target_recall.hex()} {len(cascade.checkpoints)}"]
    for d, r, clf in zip(cascade.checkpoints, cascade.stage_targets, cascade.classifiers):
        lines.append(" ".join(["stage", str(d), r.hex()] + _clf_fields(clf)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cascade(path: os.PathLike | str) -> Cascade:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    head = lines[0]
    if head[0] != "cascade":
        raise ValueError(f"{path}: not a cascade file")
    dim, target, n = int(head[1]), float.fromhex(head[2]), int(head[3])
    cps, rs, clfs = [], [], []
    for tok in lines[1 : 1 + n]:
        if tok[0] != "stage":
            raise ValueError(f"{path}: malformed stage line")
        cps.append(int(tok[1]))
        rs.append(float.fromhex(tok[2]))
        clfs.append(_parse_clf(tok[3:]))
    return Cascade(dim, tuple(cps), tuple(clfs), target, tuple(rs))


def save_classifier(clf: LinearClassifier, path: os.PathLike | str) -> None:
    with open(path, "w") as fh:
        fh.write(" ".join(["classifier"] + _clf_fields(clf)) + "\n")


def load_classifier(path: os.PathLike | str) -> LinearClassifier:
    with open(path) as fh:
        tok = fh.read().split()
    if not tok or tok[0] != "classifier":
        raise ValueError(f"{path}: not a classifier file")
    return _parse_clf(tok[1:])
