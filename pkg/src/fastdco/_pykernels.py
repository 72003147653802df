"""Pure-Python kernels; same signatures and decisions as the compiled ``_kernels``.

Heaps hold ``(dist, id)`` ordered lexicographically, so ties between equal
distances always resolve towards the lower id, matching the C++ side.
"""

from __future__ import annotations

import heapq

import numpy as np

MODE_PROJ = 1
MODE_ADS = 2
MODE_QUANT = 3

# counters: calls, dims, pruned, exact, rejected, lookups
_CALLS, _DIMS, _PRUNED, _EXACT, _REJECTED, _LOOKUPS = range(6)

KEEP, PRUNED, REJECTED = 0, 1, 2


class _Dco:
    __slots__ = ("data", "norms", "q", "qn2", "D", "mode", "sdims", "sm1", "soff", "codes",
                 "resid", "lut", "qm1", "qw", "qbeta", "nsub", "cnt")

    def __init__(self, data, norms, q, qn2, mode, sdims, sm1, soff, codes, resid, lut, qparams):
        self.data = data
        self.norms = norms
        self.q = np.asarray(q, dtype=np.float64)
        self.qn2 = float(qn2)
        self.D = data.shape[1]
        self.mode = int(mode)
        self.sdims = [int(d) for d in sdims]
        self.sm1 = [float(v) for v in sm1]
        self.soff = [float(v) for v in soff]
        self.codes = codes
        self.resid = resid
        self.lut = lut
        self.qm1, self.qw, self.qbeta = (float(v) for v in qparams)
        self.nsub = lut.shape[0]
        self.cnt = [0] * 6

    def exact(self, idx: int) -> float:
        x = self.data[idx]
        if self.mode == MODE_ADS:
            diff = x.astype(np.float64) - self.q
            return float(diff @ diff)
        return max(float(self.norms[idx]) + self.qn2 - 2.0 * float(x.astype(np.float64) @ self.q), 0.0)

    def __call__(self, idx: int, tau: float) -> tuple[float, int]:
        cnt = self.cnt
        cnt[_CALLS] += 1
        x = self.data[idx].astype(np.float64)
        q = self.q
        D = self.D
        if self.mode == MODE_QUANT:
            if tau >= 0:
                code = self.codes[idx]
                approx = 0.0
                for s in range(self.nsub):
                    approx += self.lut[s, code[s]]
                cnt[_LOOKUPS] += self.nsub
                if self.qm1 * approx + self.qw * self.resid[idx] + self.qbeta > tau:
                    cnt[_PRUNED] += 1
                    return approx, PRUNED
            prev, acc = 0, 0.0
        elif self.mode == MODE_ADS:
            prev, acc = 0, 0.0
            if tau >= 0:
                for d, m1 in zip(self.sdims, self.sm1):
                    diff = x[prev:d] - q[prev:d]
                    acc += float(diff @ diff)
                    prev = d
                    if m1 * acc > tau:
                        cnt[_PRUNED] += 1
                        cnt[_DIMS] += d
                        return acc * D / d, PRUNED
            diff = x[prev:] - q[prev:]
            acc += float(diff @ diff)
            cnt[_DIMS] += D
            cnt[_EXACT] += 1
            if tau >= 0 and acc > tau:
                cnt[_REJECTED] += 1
                return acc, REJECTED
            return acc, KEEP
        else:
            prev, acc = 0, 0.0
        c1 = float(self.norms[idx]) + self.qn2
        if tau >= 0 and self.mode == MODE_PROJ:
            for d, m1, off in zip(self.sdims, self.sm1, self.soff):
                acc += float(x[prev:d] @ q[prev:d])
                prev = d
                approx = c1 - 2.0 * acc
                if m1 * approx + off > tau:
                    cnt[_PRUNED] += 1
                    cnt[_DIMS] += d
                    return approx, PRUNED
        acc += float(x[prev:] @ q[prev:])
        dis = max(c1 - 2.0 * acc, 0.0)
        cnt[_DIMS] += D
        cnt[_EXACT] += 1
        if tau >= 0 and dis > tau:
            cnt[_REJECTED] += 1
            return dis, REJECTED
        return dis, KEEP


def _drain(heap_neg: list, k: int) -> tuple[np.ndarray, np.ndarray]:
    items = sorted((-nd, -ni) for nd, ni in heap_neg)[:k]
    ids = np.array([i for _, i in items], dtype=np.int64)
    dists = np.array([d for d, _ in items], dtype=np.float64)
    return ids, dists


def scan(data, norms, cand, q, qn2, k, mode, sdims, sm1, soff, codes, resid, lut, qparams):
    """Run the operator over ``cand`` in order, keeping the best ``k`` in a bounded max-heap."""
    dco = _Dco(data, norms, q, qn2, mode, sdims, sm1, soff, codes, resid, lut, qparams)
    res: list = []  # max-heap of (-dist, -id)
    for idx in np.asarray(cand).tolist():
        tau = -res[0][0] if len(res) == k else -1.0
        dis, status = dco(idx, tau)
        if status != KEEP:
            continue
        if len(res) < k:
            heapq.heappush(res, (-dis, -idx))
        elif (dis, idx) < (-res[0][0], -res[0][1]):
            heapq.heapreplace(res, (-dis, -idx))
    ids, dists = _drain(res, k)
    return ids, dists, np.array(dco.cnt, dtype=np.int64)


def _l2(data, a: int, b: int) -> float:
    diff = data[a].astype(np.float64) - data[b].astype(np.float64)
    return float(diff @ diff)


class _Graph:
    def __init__(self, links0, deg0, upper_off, links_up, deg_up):
        self.links0 = links0
        self.deg0 = deg0
        self.upper_off = upper_off
        self.links_up = links_up
        self.deg_up = deg_up

    def neighbors(self, node: int, level: int) -> list[int]:
        if level == 0:
            return self.links0[node, : self.deg0[node]].tolist()
        row = self.upper_off[node] + level - 1
        return self.links_up[row, : self.deg_up[row]].tolist()

    def set_neighbors(self, node: int, level: int, nbrs: list[int]) -> None:
        if level == 0:
            self.links0[node, : len(nbrs)] = nbrs
            self.deg0[node] = len(nbrs)
        else:
            row = self.upper_off[node] + level - 1
            self.links_up[row, : len(nbrs)] = nbrs
            self.deg_up[row] = len(nbrs)


def _search_layer(dist_to, graph: _Graph, entry: int, entry_d: float, ef: int, level: int):
    visited = {entry}
    cand = [(entry_d, entry)]
    res = [(-entry_d, -entry)]
    while cand:
        d, c = heapq.heappop(cand)
        if len(res) == ef and d > -res[0][0]:
            break
        for nb in graph.neighbors(c, level):
            if nb in visited:
                continue
            visited.add(nb)
            dn = dist_to(nb)
            if len(res) < ef or (dn, nb) < (-res[0][0], -res[0][1]):
                heapq.heappush(cand, (dn, nb))
                heapq.heappush(res, (-dn, -nb))
                if len(res) > ef:
                    heapq.heappop(res)
    return sorted((-nd, -ni) for nd, ni in res)


def hnsw_build(data, levels, M, ef_construction, upper_off, links0, deg0, links_up, deg_up):
    """Insert nodes ``0..n-1`` in order; fills the link arrays in place.

    Returns ``(entry_point, max_level)``.
    """
    n = data.shape[0]
    g = _Graph(links0, deg0, upper_off, links_up, deg_up)
    cap0 = links0.shape[1]
    entry, max_level = 0, int(levels[0])
    for i in range(1, n):
        lvl = int(levels[i])

        def dist_to(j, i=i):
            return _l2(data, i, j)

        cur = entry
        cur_d = dist_to(cur)
        for level in range(max_level, lvl, -1):
            changed = True
            while changed:
                changed = False
                for nb in g.neighbors(cur, level):
                    dn = dist_to(nb)
                    if dn < cur_d or (dn == cur_d and nb < cur):
                        cur, cur_d = nb, dn
                        changed = True
        for level in range(min(lvl, max_level), -1, -1):
            found = _search_layer(dist_to, g, cur, cur_d, ef_construction, level)
            chosen = [j for _, j in found[:M]]
            g.set_neighbors(i, level, chosen)
            cap = cap0 if level == 0 else M
            for nb in chosen:
                nbrs = g.neighbors(nb, level)
                if len(nbrs) < cap:
                    g.set_neighbors(nb, level, nbrs + [i])
                else:
                    scored = sorted((_l2(data, nb, j), j) for j in nbrs + [i])
                    g.set_neighbors(nb, level, [j for _, j in scored[:cap]])
            cur_d, cur = found[0]
        if lvl > max_level:
            entry, max_level = i, lvl
    return entry, max_level


def hnsw_search(data, norms, links0, deg0, upper_off, links_up, deg_up, entry, max_level,
                q, qn2, k, ef, mode, sdims, sm1, soff, codes, resid, lut, qparams):
    """Greedy descent with exact distances, then an ``ef``-wide beam on the base layer
    where result admission goes through the operator."""
    g = _Graph(links0, deg0, upper_off, links_up, deg_up)
    dco = _Dco(data, norms, q, qn2, mode, sdims, sm1, soff, codes, resid, lut, qparams)
    cur = int(entry)
    cur_d = dco.exact(cur)
    for level in range(int(max_level), 0, -1):
        changed = True
        while changed:
            changed = False
            for nb in g.neighbors(cur, level):
                dn = dco.exact(nb)
                if dn < cur_d or (dn == cur_d and nb < cur):
                    cur, cur_d = nb, dn
                    changed = True
    d0, _ = dco(cur, -1.0)
    visited = {cur}
    frontier = [(d0, cur)]
    res = [(-d0, -cur)]
    while frontier:
        d, c = heapq.heappop(frontier)
        if len(res) == ef and d > -res[0][0]:
            break
        for nb in g.neighbors(c, 0):
            if nb in visited:
                continue
            visited.add(nb)
            tau = -res[0][0] if len(res) == ef else -1.0
            dis, status = dco(nb, tau)
            if status == PRUNED:
                heapq.heappush(frontier, (dis, nb))
                continue
            if status == REJECTED:
                continue
            if len(res) < ef or (dis, nb) < (-res[0][0], -res[0][1]):
                heapq.heappush(frontier, (dis, nb))
                heapq.heappush(res, (-dis, -nb))
                if len(res) > ef:
                    heapq.heappop(res)
    ids, dists = _drain(res, k)
    return ids, dists, np.array(dco.cnt, dtype=np.int64)


__all__ = ["scan", "hnsw_build", "hnsw_search", "MODE_PROJ", "MODE_ADS", "MODE_QUANT"]
