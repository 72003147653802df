"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py --n 5000 --dim 64 --nq 20

Both backends run the same index and queries; the script checks that they
return identical ids before reporting per-query times and the speedup.
"""

import argparse
import sys
import time

import numpy as np

from fastdco import available_backends
from fastdco.bench import gen_workload
from fastdco.dco import DcoStrategy
from fastdco.index import hnsw_build, hnsw_search, ivf_build, ivf_search
from fastdco.transform import fit_pca


def per_query_ms(search, queries, backend):
    t = time.perf_counter()
    out = [search(q, backend) for q in queries]
    return out, 1e3 * (time.perf_counter() - t) / len(queries)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--nq", type=int, default=20)
    ap.add_argument("--nlist", type=int, default=32)
    ap.add_argument("--nprobe", type=int, default=8)
    ap.add_argument("--M", type=int, default=12)
    ap.add_argument("--ef-construction", type=int, default=80)
    ap.add_argument("--ef", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if "cython" not in available_backends():
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1

    x, queries = gen_workload("anisotropic-gaussian", args.n, args.nq, args.dim, args.seed)
    rot = fit_pca(x)
    delta = max(1, args.dim // 4)
    strategies = [DcoStrategy(), DcoStrategy("bsa_res_inc", m=8.0, delta_d=delta)]
    ivf = ivf_build(x, rot, args.nlist, seed=args.seed)

    build = {}
    for be in ("cython", "python"):
        t = time.perf_counter()
        graph = hnsw_build(x, rot, args.M, args.ef_construction, seed=args.seed, backend=be)
        build[be] = time.perf_counter() - t
    print(f"hnsw build n={args.n} D={args.dim}: cython {build['cython']:.2f}s  "
          f"python {build['python']:.2f}s  speedup {build['python'] / build['cython']:.1f}x")

    print(f"{'search':<8}{'strategy':<10}{'cython ms':>11}{'python ms':>11}{'speedup':>9}")
    for st in strategies:
        for name, search in (
            ("ivf", lambda q, be, st=st: ivf_search(ivf, q, 10, args.nprobe, st, backend=be)),
            ("hnsw", lambda q, be, st=st: hnsw_search(graph, q, 10, args.ef, st, backend=be)),
        ):
            fast, t_c = per_query_ms(search, queries, "cython")
            slow, t_p = per_query_ms(search, queries, "python")
            same = all(np.array_equal(a.ids, b.ids) for a, b in zip(fast, slow))
            flag = "" if same else "  RESULTS DIFFER"
            print(f"{name:<8}{st.label:<10}{t_c:>11.3f}{t_p:>11.3f}{t_p / t_c:>8.1f}x{flag}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
