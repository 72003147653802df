"""Benchmark harness: synthetic data, recall@K, QPS and pruning metrics over a parameter grid."""

from __future__ import annotations

import hashlib
import json
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dco import CLI_NAMES, DcoStrategy
from .index import hnsw_build, hnsw_search, ivf_build, ivf_search
from .index.common import SearchResult
from .vecio import GroundTruth, as_dataset

SYNTHETIC_KINDS = ("isotropic-gaussian", "anisotropic-gaussian", "clustered")
TSV_COLUMNS = ("dataset", "index", "strategy", "param", "value", "k", "recall", "qps_1",
               "qps_n", "threads", "avg_scan_rate", "avg_pruned_rate", "avg_dco_calls",
               "config_hash")


def recall_at_k(result, truth_row, K: int) -> float:
    """|T ∩ G| / K over the first K ids of each side."""
    ids = result.ids if isinstance(result, SearchResult) else np.asarray(result)
    truth = np.asarray(truth_row)
    if K < 1:
        raise ValueError("K must be >= 1")
    if ids.shape[0] < K or truth.shape[0] < K:
        raise ValueError(f"need at least K={K} ids, got {ids.shape[0]} results and "
                         f"{truth.shape[0]} truth entries")
    return len(set(ids[:K].tolist()) & set(truth[:K].tolist())) / K


def gen_synthetic(kind: str, n: int, D: int, seed: int = 0, params: dict | None = None) -> np.ndarray:
    """Deterministic float32 ``(n, D)`` data.

    params: ``ratio`` (anisotropic per-dimension std decay, default 0.9),
    ``centers`` / ``spread`` / ``scale`` (clustered: count, within-cluster std,
    std of the centre positions; defaults 16, 1.0, 4.0).  Clustered centres
    depend only on ``seed`` and ``params``, so two draws with different
    ``params["sample_seed"]`` share the same clusters.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"kind must be one of {SYNTHETIC_KINDS}")
    if n < 1 or D < 1:
        raise ValueError("n and D must be >= 1")
    params = dict(params or {})
    rng = np.random.default_rng([seed, int(params.get("sample_seed", 0))])
    if kind == "isotropic-gaussian":
        x = rng.standard_normal((n, D))
    elif kind == "anisotropic-gaussian":
        ratio = float(params.get("ratio", 0.9))
        if not 0 < ratio <= 1:
            raise ValueError("ratio must be in (0, 1]")
        x = rng.standard_normal((n, D)) * ratio ** np.arange(D)
    else:
        c = int(params.get("centers", 16))
        centres = np.random.default_rng(seed).standard_normal((c, D)) * float(params.get("scale", 4.0))
        member = rng.integers(0, c, size=n)
        x = centres[member] + rng.standard_normal((n, D)) * float(params.get("spread", 1.0))
    return x.astype(np.float32)


def gen_workload(kind: str, n: int, nq: int, D: int, seed: int = 0,
                 params: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Base set and an independent query set from the same distribution."""
    p = dict(params or {})
    base = gen_synthetic(kind, n, D, seed, {**p, "sample_seed": 0})
    queries = gen_synthetic(kind, nq, D, seed, {**p, "sample_seed": 1})
    return base, queries


# -- evaluation ---------------------------------------------------------------


@dataclass
class PointMetrics:
    recall: float
    qps_1: float
    qps_n: float
    avg_scan_rate: float
    avg_pruned_rate: float
    avg_dco_calls: float
    results: list = field(default_factory=list, repr=False)


def run_queries(search, queries: np.ndarray, threads: int = 1) -> tuple[list, float]:
    """Run ``search(q)`` for every query; returns results in query order and wall seconds."""
    t0 = time.perf_counter()
    if threads <= 1:
        out = [search(q) for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(search, queries))
    return out, time.perf_counter() - t0


def evaluate(search, queries, truth: GroundTruth, K: int, D: int, threads: int = 1) -> PointMetrics:
    """Metrics for one grid point.  QPS is end to end, rotation and table setup included."""
    queries = as_dataset(queries, "queries")
    if len(truth) < queries.shape[0]:
        raise ValueError("ground truth has fewer rows than there are queries")
    results, secs = run_queries(search, queries, 1)
    qps_n = queries.shape[0] / secs
    if threads > 1:
        _, secs_n = run_queries(search, queries, threads)
        qps_n = queries.shape[0] / secs_n
    recall = float(np.mean([recall_at_k(r, truth.ids[i], K) for i, r in enumerate(results)]))
    return PointMetrics(
        recall=recall,
        qps_1=queries.shape[0] / secs,
        qps_n=qps_n,
        avg_scan_rate=float(np.mean([r.scan_rate(D) for r in results])),
        avg_pruned_rate=float(np.mean([r.pruned_rate() for r in results])),
        avg_dco_calls=float(np.mean([r.dco_calls for r in results])),
        results=results,
    )


# -- grid runs ------------------------------------------------------------------


@dataclass
class BenchConfig:
    dataset: str  # fvecs path, or "synthetic:<kind>:<n>:<D>[:<nq>]"
    queries: str | None = None
    gt: str | None = None
    index: str = "ivf"  # ivf | hnsw
    strategies: tuple = ("exact", "bsa-inc")
    values: tuple = (8, 16, 32)  # nprobe (ivf) or ef (hnsw)
    k: int = 10
    nlist: int = 256
    M: int = 16
    ef_construction: int = 200
    m: float = 8.0
    eps0: float = 2.1
    delta_d: int = 32
    target_recall: float = 0.995
    num_subspaces: int | None = None
    seed: int = 0
    threads: int = 1
    rotor_path: str | None = None
    index_path: str | None = None
    classifier_path: str | None = None

    def hash_fields(self) -> dict:
        d = asdict(self)
        d.pop("threads")  # affects timing only
        d["strategies"] = list(self.strategies)
        d["values"] = [int(v) for v in self.values]
        return d


@dataclass
class BenchPoint:
    strategy: str
    param: str
    value: int
    metrics: PointMetrics


@dataclass
class BenchReport:
    dataset: str
    index: str
    seed: int
    k: int
    threads: int
    config_hash: str
    points: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for p in self.points:
            m = p.metrics
            out.append({
                "dataset": self.dataset, "index": self.index, "strategy": p.strategy,
                "param": p.param, "value": p.value, "k": self.k, "recall": m.recall,
                "qps_1": m.qps_1, "qps_n": m.qps_n, "threads": self.threads,
                "avg_scan_rate": m.avg_scan_rate, "avg_pruned_rate": m.avg_pruned_rate,
                "avg_dco_calls": m.avg_dco_calls, "config_hash": self.config_hash,
            })
        return out

    def to_tsv(self) -> str:
        lines = ["\t".join(TSV_COLUMNS)]
        for row in self.rows():
            cells = []
            for c in TSV_COLUMNS:
                v = row[c]
                cells.append(f"{v:.6f}" if isinstance(v, float) else str(v))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = (f"dataset={self.dataset} index={self.index} K={self.k} seed={self.seed} "
                f"threads={self.threads} config={self.config_hash}")
        cols = f"{'strategy':<12}{'param':>8}{'recall':>9}{'qps(1)':>10}{'qps(N)':>10}" \
               f"{'scan':>8}{'pruned':>8}{'calls':>9}"
        lines = [head, cols, "-" * len(cols)]
        for p in self.points:
            m = p.metrics
            lines.append(f"{p.strategy:<12}{p.param + '=' + str(p.value):>8}{m.recall:>9.4f}"
                         f"{m.qps_1:>10.1f}{m.qps_n:>10.1f}{m.avg_scan_rate:>8.3f}"
                         f"{m.avg_pruned_rate:>8.3f}{m.avg_dco_calls:>9.1f}")
        return "\n".join(lines)


def config_hash(config: BenchConfig, data: np.ndarray, queries: np.ndarray) -> str:
    payload = json.dumps(config.hash_fields(), sort_keys=True).encode()
    h = hashlib.sha256(payload)
    for arr in (data, queries):
        h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
        h.update(zlib.crc32(np.ascontiguousarray(arr).tobytes()).to_bytes(4, "little"))
    return h.hexdigest()[:16]


def _require(path: str | None, what: str) -> None:
    if path is not None and not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def load_inputs(config: BenchConfig) -> tuple[np.ndarray, np.ndarray, GroundTruth | None]:
    from .vecio import read_fvecs, read_ground_truth

    if config.dataset.startswith("synthetic:"):
        parts = config.dataset.split(":")
        kind, n, D = parts[1], int(parts[2]), int(parts[3])
        nq = int(parts[4]) if len(parts) > 4 else 200
        data, queries = gen_workload(kind, n, nq, D, config.seed)
    else:
        _require(config.dataset, "dataset")
        data = read_fvecs(config.dataset)
        if config.queries is None:
            raise ValueError("--queries is required with a dataset file")
        _require(config.queries, "query file")
        queries = read_fvecs(config.queries)
    gt = None
    if config.gt is not None:
        _require(config.gt, "ground truth")
        gt = read_ground_truth(config.gt)
    return data, queries, gt


def _needs(strategies) -> set:
    kinds = {CLI_NAMES[s] for s in strategies}
    need = set()
    if kinds & {"exact", "bsa_res", "bsa_res_inc", "learned_proj", "learned_quant"}:
        need.add("pca")
    if "ads" in kinds:
        need.add("random")
    return need


def run_bench(config: BenchConfig, log=None) -> BenchReport:
    """Build (or load) what each strategy needs, then sweep ``config.values``."""
    from .learn import build_cascade, collect_quant_training, load_cascade, load_classifier, \
        train_quant_classifier
    from .quant import default_num_subspaces, opq_train
    from .transform import fit_pca, fit_random_rotor, load_rotor
    from .vecio import brute_force_knn
    from .index import load_index

    log = log or (lambda msg: None)
    for s in config.strategies:
        if s not in CLI_NAMES:
            raise ValueError(f"unknown strategy {s!r}; choose from {sorted(CLI_NAMES)}")
    if config.index not in ("ivf", "hnsw"):
        raise ValueError("index must be 'ivf' or 'hnsw'")
    for path, what in ((config.rotor_path, "rotor"), (config.index_path, "index"),
                       (config.classifier_path, "classifier")):
        _require(path, what)
    data, queries, gt = load_inputs(config)
    n, D = data.shape
    K = config.k
    timings: dict = {}
    if gt is None:
        t = time.perf_counter()
        gt = brute_force_knn(data, queries, K)
        timings["ground_truth"] = time.perf_counter() - t
    if gt.k < K:
        raise ValueError(f"ground truth has {gt.k} neighbours per query, need K={K}")

    def build(rotor, codebook=None):
        t = time.perf_counter()
        if config.index == "ivf":
            idx = ivf_build(data, rotor, min(config.nlist, n), seed=config.seed, codebook=codebook)
        else:
            idx = hnsw_build(data, rotor, config.M, config.ef_construction, seed=config.seed,
                             codebook=codebook)
        timings[f"build_{rotor.kind}"] = time.perf_counter() - t
        return idx

    kinds = {CLI_NAMES[s] for s in config.strategies}
    indexes = {}
    need = _needs(config.strategies)
    codebook = None
    if "learned_quant" in kinds:
        t = time.perf_counter()
        S = config.num_subspaces or default_num_subspaces(D)
        codebook = opq_train(data, S, 8, outer_iters=10, seed=config.seed)
        timings["opq"] = time.perf_counter() - t
    if "pca" in need:
        if config.index_path is not None:
            idx = load_index(config.index_path)
            if idx.rotor.kind != "pca":
                raise ValueError("the supplied index was not built with a PCA rotor")
            indexes["pca"] = idx
        else:
            rotor = load_rotor(config.rotor_path) if config.rotor_path else fit_pca(data, seed=config.seed)
            indexes["pca"] = build(rotor, codebook)
    if "random" in need:
        indexes["random"] = build(fit_random_rotor(D, seed=config.seed))
    log(f"indexes ready: {sorted(indexes)}")

    strategies = {}
    for s in config.strategies:
        kind = CLI_NAMES[s]
        kw = dict(m=config.m, eps0=config.eps0, delta_d=config.delta_d)
        if kind == "bsa_res":
            kw["d"] = config.delta_d
        if kind == "learned_proj":
            t = time.perf_counter()
            if config.classifier_path:
                kw["cascade"] = load_cascade(config.classifier_path)
            else:
                kw["cascade"] = build_cascade(data, indexes["pca"].rotor, config.delta_d, K,
                                              config.target_recall, seed=config.seed)
            timings["train_learned_pca"] = time.perf_counter() - t
        if kind == "learned_quant":
            t = time.perf_counter()
            if config.classifier_path:
                kw["classifier"] = load_classifier(config.classifier_path)
            else:
                rng = np.random.default_rng(config.seed)
                pick = np.sort(rng.choice(n, min(1000, n), replace=False))
                samples = collect_quant_training(data, codebook, data[pick], K, seed=config.seed,
                                                 exclude_ids=pick)
                kw["classifier"] = train_quant_classifier(samples, config.target_recall,
                                                          seed=config.seed)
            timings["train_learned_opq"] = time.perf_counter() - t
        strategies[s] = DcoStrategy(kind=kind, **kw)

    report = BenchReport(dataset=config.dataset, index=config.index, seed=config.seed, k=K,
                         threads=config.threads, config_hash=config_hash(config, data, queries),
                         timings=timings)
    param = "nprobe" if config.index == "ivf" else "ef"
    for s in config.strategies:
        st = strategies[s]
        idx = indexes["random" if st.kind == "ads" else "pca"]
        for v in config.values:
            v = int(v)
            if config.index == "ivf":
                v = min(v, idx.nlist)
                search = lambda q, st=st, v=v, idx=idx: ivf_search(idx, q, K, v, st)
            else:
                v = max(v, K)
                search = lambda q, st=st, v=v, idx=idx: hnsw_search(idx, q, K, v, st)
            metrics = evaluate(search, queries, gt, K, D, config.threads)
            metrics.results = []
            report.points.append(BenchPoint(s, param, v, metrics))
            log(f"{s} {param}={v} recall={metrics.recall:.4f} scan={metrics.avg_scan_rate:.3f}")
    return report
