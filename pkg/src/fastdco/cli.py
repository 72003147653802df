"""Command-line entry point: ``fastdco <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import bench
from .dco import CLI_NAMES, DcoStrategy

SEED_ENV = "FASTDCO_SEED"


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _dco_list(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in CLI_NAMES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown --dco {bad}; choose from {sorted(CLI_NAMES)}")
    return names


def resolve_seed(seed: int) -> int:
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return seed
    try:
        return int(env)
    except ValueError:
        raise SystemExit(f"{SEED_ENV} must be an integer, got {env!r}")


def _strategy(args, name: str) -> DcoStrategy:
    from .learn import load_cascade, load_classifier

    kind = CLI_NAMES[name]
    kw = dict(m=args.m, eps0=args.eps0, delta_d=args.delta_d)
    if kind == "bsa_res":
        kw["d"] = args.d if args.d is not None else args.delta_d
    if kind == "learned_proj":
        if not args.classifier:
            raise SystemExit("--dco learned-pca needs --classifier (a cascade file)")
        kw["cascade"] = load_cascade(args.classifier)
    if kind == "learned_quant":
        if not args.classifier:
            raise SystemExit("--dco learned-opq needs --classifier")
        kw["classifier"] = load_classifier(args.classifier)
    return DcoStrategy(kind=kind, **kw)


# -- subcommands --------------------------------------------------------------


def cmd_ground_truth(args) -> None:
    from .vecio import brute_force_knn, read_fvecs, write_ground_truth

    data = read_fvecs(args.dataset)
    queries = read_fvecs(args.queries)
    t = time.perf_counter()
    gt = brute_force_knn(data, queries, args.k)
    write_ground_truth(gt, args.out)
    print(f"wrote {len(gt)}x{gt.k} neighbours to {args.out} ({time.perf_counter() - t:.1f}s)")


def cmd_gen_data(args) -> None:
    from .vecio import write_fvecs

    params = {"ratio": args.ratio, "centers": args.centers}
    data, queries = bench.gen_workload(args.kind, args.n, args.nq, args.dim, args.seed, params)
    write_fvecs(data, args.out)
    print(f"wrote {data.shape[0]}x{data.shape[1]} {args.kind} vectors to {args.out}")
    if args.queries:
        write_fvecs(queries, args.queries)
        print(f"wrote {queries.shape[0]} queries to {args.queries}")


def cmd_fit_transform(args) -> None:
    from .transform import fit_pca, fit_random_rotor, identity_rotor, measure_sigma2, save_rotor
    from .vecio import read_fvecs

    data = read_fvecs(args.dataset)
    D = data.shape[1]
    if args.kind == "pca":
        rotor = fit_pca(data, seed=args.seed)
    elif args.kind == "random":
        rotor = measure_sigma2(fit_random_rotor(D, seed=args.seed), data)
    else:
        rotor = measure_sigma2(identity_rotor(D), data)
    save_rotor(rotor, args.out)
    print(f"wrote {args.kind} rotor (D={D}) to {args.out}")


def cmd_train_quant(args) -> None:
    from .quant import default_num_subspaces, opq_train, pq_train, quantization_error, save_codebook
    from .vecio import read_fvecs

    data = read_fvecs(args.dataset)
    S = args.subspaces or default_num_subspaces(data.shape[1])
    if args.method == "opq":
        cb = opq_train(data, S, args.nbits, outer_iters=args.outer_iters, seed=args.seed)
    else:
        cb = pq_train(data, S, args.nbits, seed=args.seed)
    save_codebook(cb, args.out)
    err = quantization_error(cb, data) / data.shape[0]
    print(f"wrote {args.method} codebook S={S} nbits={args.nbits} to {args.out}; "
          f"mean squared error {err:.6g}")


def cmd_build_index(args) -> None:
    from .index import hnsw_build, ivf_build, save_index
    from .quant import load_codebook
    from .transform import fit_pca, load_rotor
    from .vecio import read_fvecs

    data = read_fvecs(args.dataset)
    rotor = load_rotor(args.rotor) if args.rotor else fit_pca(data, seed=args.seed)
    codebook = load_codebook(args.codebook) if args.codebook else None
    t = time.perf_counter()
    if args.type == "ivf":
        idx = ivf_build(data, rotor, args.nlist, seed=args.seed, codebook=codebook)
    else:
        idx = hnsw_build(data, rotor, args.M, args.ef_construction, seed=args.seed,
                         codebook=codebook)
    save_index(idx, args.out)
    print(f"built {args.type} index over {data.shape[0]} vectors in "
          f"{time.perf_counter() - t:.1f}s; wrote {args.out}")


def cmd_train_classifier(args) -> None:
    from .learn import (build_cascade, collect_quant_training, save_cascade, save_classifier,
                        train_quant_classifier)
    from .quant import load_codebook
    from .transform import fit_pca, load_rotor
    from .vecio import read_fvecs

    data = read_fvecs(args.dataset)
    queries = read_fvecs(args.queries) if args.queries else None
    if args.dco == "learned-pca":
        rotor = load_rotor(args.rotor) if args.rotor else fit_pca(data, seed=args.seed)
        audit: dict = {}
        cascade = build_cascade(data, rotor, args.delta_d, args.k, args.target_recall,
                                seed=args.seed, queries=queries, audit=audit)
        save_cascade(cascade, args.out)
        print(f"wrote {len(cascade.classifiers)}-stage cascade to {args.out}")
        for key, val in audit.items():
            print(f"  {key}: {val:.6g}" if isinstance(val, float) else f"  {key}: {val}")
    elif args.dco == "learned-opq":
        if not args.codebook:
            raise SystemExit("--dco learned-opq needs --codebook")
        cb = load_codebook(args.codebook)
        exclude = None
        if queries is None:
            rng = np.random.default_rng(args.seed)
            exclude = np.sort(rng.choice(data.shape[0], min(1000, data.shape[0]), replace=False))
            queries = data[exclude]
        samples = collect_quant_training(data, cb, queries, args.k, seed=args.seed,
                                         exclude_ids=exclude)
        clf = train_quant_classifier(samples, args.target_recall, seed=args.seed)
        save_classifier(clf, args.out)
        print(f"wrote classifier to {args.out}")
    else:
        raise SystemExit("--dco must be learned-pca or learned-opq")


def cmd_search(args) -> None:
    from .index import IvfIndex, hnsw_search, ivf_search, load_index
    from .vecio import read_fvecs, read_ground_truth, write_ivecs

    st = _strategy(args, args.dco)
    idx = load_index(args.index)
    queries = read_fvecs(args.queries)
    if isinstance(idx, IvfIndex):
        search = lambda q: ivf_search(idx, q, args.k, min(args.nprobe, idx.nlist), st)
    else:
        search = lambda q: hnsw_search(idx, q, args.k, max(args.ef, args.k), st)
    results, secs = bench.run_queries(search, queries, args.threads)
    D = idx.dim
    print(f"{len(results)} queries in {secs:.3f}s ({len(results) / secs:.1f} qps), "
          f"scan rate {np.mean([r.scan_rate(D) for r in results]):.3f}, "
          f"pruned rate {np.mean([r.pruned_rate() for r in results]):.3f}")
    if args.gt:
        gt = read_ground_truth(args.gt)
        rec = np.mean([bench.recall_at_k(r, gt.ids[i], args.k) for i, r in enumerate(results)])
        print(f"recall@{args.k} = {rec:.4f}")
    if args.out:
        ids = np.full((len(results), args.k), -1, dtype=np.int64)
        for i, r in enumerate(results):
            ids[i, : r.ids.shape[0]] = r.ids
        write_ivecs(ids, args.out)


def cmd_bench(args) -> None:
    values = args.nprobe_list if args.type == "ivf" else args.ef_list
    cfg = bench.BenchConfig(
        dataset=args.dataset, queries=args.queries, gt=args.gt, index=args.type,
        strategies=tuple(args.dco), values=tuple(values), k=args.k, nlist=args.nlist, M=args.M,
        ef_construction=args.ef_construction, m=args.m, eps0=args.eps0, delta_d=args.delta_d,
        target_recall=args.target_recall, seed=args.seed, threads=args.threads,
        rotor_path=args.rotor, index_path=args.index, classifier_path=args.classifier)
    report = bench.run_bench(cfg, log=lambda msg: print(msg, file=sys.stderr))
    print(report.to_table())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_tsv())
        print(f"wrote {args.out}")


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastdco", description="Pruned distance comparisons for "
                                "approximate nearest-neighbour search.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        sp.add_argument("--seed", type=int, default=0,
                        help=f"random seed (the {SEED_ENV} environment variable overrides it)")
        if "dataset" in flags:
            sp.add_argument("--dataset", required=True, help="base vectors (.fvecs)")
        if "out" in flags:
            sp.add_argument("--out", required=True, help="output path")
        if "k" in flags:
            sp.add_argument("--k", type=int, default=10)
        if "dco" in flags:
            sp.add_argument("--m", type=float, default=8.0, help="error-quantile multiplier")
            sp.add_argument("--eps0", type=float, default=2.1, help="ADSampling epsilon_0")
            sp.add_argument("--delta-d", type=int, default=32, help="checkpoint spacing")
            sp.add_argument("--d", type=int, default=None,
                            help="projected dimension for --dco bsa (default: --delta-d)")
            sp.add_argument("--target-recall", type=float, default=0.995)
            sp.add_argument("--classifier", help="cascade (learned-pca) or classifier "
                            "(learned-opq) file")
        if "index" in flags:
            sp.add_argument("--nlist", type=int, default=256)
            sp.add_argument("--M", type=int, default=16)
            sp.add_argument("--ef-construction", type=int, default=200)
            sp.add_argument("--rotor", help="rotor file (default: fit PCA on the dataset)")
        if "threads" in flags:
            sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("ground-truth", help="exact K nearest neighbours")
    common(sp, "dataset", "out", "k")
    sp.add_argument("--queries", required=True)
    sp.set_defaults(func=cmd_ground_truth)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(sp, "out")
    sp.add_argument("--kind", choices=bench.SYNTHETIC_KINDS, default="anisotropic-gaussian")
    sp.add_argument("--n", type=int, default=100_000)
    sp.add_argument("--dim", type=int, default=128)
    sp.add_argument("--nq", type=int, default=200)
    sp.add_argument("--ratio", type=float, default=0.9)
    sp.add_argument("--centers", type=int, default=16)
    sp.add_argument("--queries", help="also write a query set here")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("fit-transform", help="fit a rotation")
    common(sp, "dataset", "out")
    sp.add_argument("--kind", choices=("pca", "random", "identity"), default="pca")
    sp.set_defaults(func=cmd_fit_transform)

    sp = sub.add_parser("train-quant", help="train a PQ/OPQ codebook")
    common(sp, "dataset", "out")
    sp.add_argument("--method", choices=("opq", "pq"), default="opq")
    sp.add_argument("--subspaces", type=int, default=None, help="default D/4")
    sp.add_argument("--nbits", type=int, default=8)
    sp.add_argument("--outer-iters", type=int, default=10)
    sp.set_defaults(func=cmd_train_quant)

    sp = sub.add_parser("build-index", help="build an IVF or HNSW index")
    common(sp, "dataset", "out", "index")
    sp.add_argument("--type", choices=("ivf", "hnsw"), default="ivf")
    sp.add_argument("--codebook", help="attach PQ codes for --dco learned-opq")
    sp.set_defaults(func=cmd_build_index)

    sp = sub.add_parser("train-classifier", help="train a learned DCO")
    common(sp, "dataset", "out", "k")
    sp.add_argument("--dco", choices=("learned-pca", "learned-opq"), required=True)
    sp.add_argument("--rotor")
    sp.add_argument("--codebook")
    sp.add_argument("--queries", help="training queries (default: sampled from the dataset)")
    sp.add_argument("--delta-d", type=int, default=32)
    sp.add_argument("--target-recall", type=float, default=0.995)
    sp.set_defaults(func=cmd_train_classifier)

    sp = sub.add_parser("search", help="query an index")
    common(sp, "k", "dco", "threads")
    sp.add_argument("--index", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--dco", choices=sorted(CLI_NAMES), default="exact")
    sp.add_argument("--nprobe", type=int, default=16)
    sp.add_argument("--ef", type=int, default=100)
    sp.add_argument("--gt", help="ground truth for recall reporting")
    sp.add_argument("--out", help="write result ids (.ivecs)")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("bench", help="sweep search parameters and report metrics")
    common(sp, "dataset", "k", "dco", "index", "threads")
    sp.add_argument("--queries")
    sp.add_argument("--gt")
    sp.add_argument("--type", choices=("ivf", "hnsw"), default="ivf")
    sp.add_argument("--index", help="prebuilt PCA index (default: build one)")
    sp.add_argument("--dco", type=_dco_list, default=["exact", "bsa-inc"],
                    help="comma-separated strategies")
    sp.add_argument("--nprobe", dest="nprobe_list", type=_int_list, default=[8, 16, 32, 64])
    sp.add_argument("--ef", dest="ef_list", type=_int_list, default=[50, 100, 200])
    sp.add_argument("--out", help="machine-readable report (.tsv)")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.seed = resolve_seed(args.seed)
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
