# distutils: language = c++
# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: batched operator scans, HNSW build and HNSW search.

Signatures and decisions match ``fastdco._pykernels``.  Heap entries are
``pair<double, int>`` so equal distances resolve towards the lower id.
"""

import numpy as np

from libc.stdint cimport int32_t, int64_t, uint8_t
from libcpp.pair cimport pair
from libcpp.queue cimport priority_queue
from libcpp.vector cimport vector

ctypedef pair[double, int] DI

cdef enum:
    MODE_PROJ_ = 1
    MODE_ADS_ = 2
    MODE_QUANT_ = 3

cdef enum:
    KEEP = 0
    PRUNED = 1
    REJECTED = 2

MODE_PROJ = 1
MODE_ADS = 2
MODE_QUANT = 3


cdef struct Dco:
    int mode
    int D
    int nst
    const float* data
    const double* norms
    const double* q
    double qn2
    const int32_t* sdims
    const double* sm1
    const double* soff
    const uint8_t* codes
    int nsub
    int ksub
    const double* lut
    const double* resid
    double qm1
    double qw
    double qbeta
    # counters
    int64_t calls
    int64_t dims
    int64_t pruned
    int64_t exact
    int64_t rejected
    int64_t lookups


# Four independent accumulators let the compiler keep several FMA chains in
# flight; the summation order differs from a serial loop only by rounding.

cdef inline double _ip(const float* x, const double* q, int a, int b) noexcept nogil:
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef int i = a
    while i + 4 <= b:
        s0 += x[i] * q[i]
        s1 += x[i + 1] * q[i + 1]
        s2 += x[i + 2] * q[i + 2]
        s3 += x[i + 3] * q[i + 3]
        i += 4
    while i < b:
        s0 += x[i] * q[i]
        i += 1
    return (s0 + s1) + (s2 + s3)


cdef inline double _sq(const float* x, const double* q, int a, int b) noexcept nogil:
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0, t0, t1, t2, t3
    cdef int i = a
    while i + 4 <= b:
        t0 = x[i] - q[i]
        t1 = x[i + 1] - q[i + 1]
        t2 = x[i + 2] - q[i + 2]
        t3 = x[i + 3] - q[i + 3]
        s0 += t0 * t0
        s1 += t1 * t1
        s2 += t2 * t2
        s3 += t3 * t3
        i += 4
    while i < b:
        t0 = x[i] - q[i]
        s0 += t0 * t0
        i += 1
    return (s0 + s1) + (s2 + s3)


cdef inline double _exact(Dco* p, int idx) noexcept nogil:
    cdef const float* x = p.data + <int64_t>idx * p.D
    cdef double dis
    if p.mode == MODE_ADS_:
        return _sq(x, p.q, 0, p.D)
    dis = p.norms[idx] + p.qn2 - 2.0 * _ip(x, p.q, 0, p.D)
    return dis if dis > 0.0 else 0.0


cdef inline double _dco(Dco* p, int idx, double tau, int* status) noexcept nogil:
    cdef const float* x = p.data + <int64_t>idx * p.D
    cdef int j, d, prev = 0, s
    cdef double acc = 0.0, approx, c1, dis
    cdef const uint8_t* code
    p.calls += 1
    if p.mode == MODE_QUANT_:
        if tau >= 0:
            code = p.codes + <int64_t>idx * p.nsub
            approx = 0.0
            for s in range(p.nsub):
                approx += p.lut[s * p.ksub + code[s]]
            p.lookups += p.nsub
            if p.qm1 * approx + p.qw * p.resid[idx] + p.qbeta > tau:
                p.pruned += 1
                status[0] = PRUNED
                return approx
    elif p.mode == MODE_ADS_:
        if tau >= 0:
            for j in range(p.nst):
                d = p.sdims[j]
                acc += _sq(x, p.q, prev, d)
                prev = d
                if p.sm1[j] * acc > tau:
                    p.pruned += 1
                    p.dims += d
                    status[0] = PRUNED
                    return acc * p.D / d
        acc += _sq(x, p.q, prev, p.D)
        p.dims += p.D
        p.exact += 1
        if tau >= 0 and acc > tau:
            p.rejected += 1
            status[0] = REJECTED
        else:
            status[0] = KEEP
        return acc
    c1 = p.norms[idx] + p.qn2
    if tau >= 0 and p.mode == MODE_PROJ_:
        for j in range(p.nst):
            d = p.sdims[j]
            acc += _ip(x, p.q, prev, d)
            prev = d
            approx = c1 - 2.0 * acc
            if p.sm1[j] * approx + p.soff[j] > tau:
                p.pruned += 1
                p.dims += d
                status[0] = PRUNED
                return approx
    acc += _ip(x, p.q, prev, p.D)
    dis = c1 - 2.0 * acc
    if dis < 0.0:
        dis = 0.0
    p.dims += p.D
    p.exact += 1
    if tau >= 0 and dis > tau:
        p.rejected += 1
        status[0] = REJECTED
    else:
        status[0] = KEEP
    return dis


cdef Dco _make_dco(const float[:, ::1] data, const double[::1] norms, const double[::1] q,
                   double qn2, int mode, const int32_t[::1] sdims, const double[::1] sm1,
                   const double[::1] soff, const uint8_t[:, ::1] codes, const double[::1] resid,
                   const double[:, ::1] lut, const double[::1] qparams):
    cdef Dco p
    if q.shape[0] != data.shape[1]:
        raise ValueError("query dimension mismatch")
    if sdims.shape[0] != sm1.shape[0] or sdims.shape[0] != soff.shape[0]:
        raise ValueError("stage arrays must have equal length")
    if mode == MODE_QUANT_ and (codes.shape[0] != data.shape[0] or codes.shape[1] != lut.shape[0]):
        raise ValueError("codes do not match the dataset / lookup table")
    p.mode = mode
    p.D = data.shape[1]
    p.nst = sdims.shape[0]
    p.data = &data[0, 0]
    p.norms = &norms[0]
    p.q = &q[0]
    p.qn2 = qn2
    p.sdims = &sdims[0] if p.nst > 0 else NULL
    p.sm1 = &sm1[0] if p.nst > 0 else NULL
    p.soff = &soff[0] if p.nst > 0 else NULL
    p.codes = &codes[0, 0]
    p.nsub = lut.shape[0]
    p.ksub = lut.shape[1]
    p.lut = &lut[0, 0]
    p.resid = &resid[0]
    p.qm1 = qparams[0]
    p.qw = qparams[1]
    p.qbeta = qparams[2]
    p.calls = 0
    p.dims = 0
    p.pruned = 0
    p.exact = 0
    p.rejected = 0
    p.lookups = 0
    return p


cdef _counters(Dco* p):
    return np.array([p.calls, p.dims, p.pruned, p.exact, p.rejected, p.lookups], dtype=np.int64)


cdef _drain(priority_queue[DI]& res, int k):
    while <int>res.size() > k:
        res.pop()
    cdef int m = res.size(), i
    ids = np.empty(m, dtype=np.int64)
    dists = np.empty(m, dtype=np.float64)
    cdef int64_t[::1] iv = ids
    cdef double[::1] dv = dists
    for i in range(m - 1, -1, -1):
        iv[i] = res.top().second
        dv[i] = res.top().first
        res.pop()
    return ids, dists


def scan(const float[:, ::1] data, const double[::1] norms, const int64_t[::1] cand,
         const double[::1] q, double qn2, int k, int mode, const int32_t[::1] sdims,
         const double[::1] sm1, const double[::1] soff, const uint8_t[:, ::1] codes,
         const double[::1] resid, const double[:, ::1] lut, const double[::1] qparams):
    """Run the operator over ``cand`` in order, keeping the best ``k``."""
    cdef Dco p = _make_dco(data, norms, q, qn2, mode, sdims, sm1, soff, codes, resid, lut, qparams)
    cdef priority_queue[DI] res
    cdef Py_ssize_t c, nc = cand.shape[0]
    cdef int idx, status
    cdef double tau, dis
    with nogil:
        for c in range(nc):
            idx = <int>cand[c]
            tau = res.top().first if <int>res.size() == k else -1.0
            dis = _dco(&p, idx, tau, &status)
            if status != KEEP:
                continue
            if <int>res.size() < k:
                res.push(DI(dis, idx))
            elif DI(dis, idx) < res.top():
                res.pop()
                res.push(DI(dis, idx))
    ids, dists = _drain(res, k)
    return ids, dists, _counters(&p)


# -- HNSW ----------------------------------------------------------------------


cdef struct Graph:
    int32_t* links0
    int32_t* deg0
    int cap0
    const int64_t* upper_off
    int32_t* links_up
    int32_t* deg_up
    int cap_up


cdef inline int32_t* _nbrs(Graph* g, int node, int level, int32_t** deg) noexcept nogil:
    cdef int64_t row
    if level == 0:
        deg[0] = g.deg0 + node
        return g.links0 + <int64_t>node * g.cap0
    row = g.upper_off[node] + level - 1
    deg[0] = g.deg_up + row
    return g.links_up + row * g.cap_up


cdef inline double _l2(const float* data, int D, int a, int b) noexcept nogil:
    cdef const float* x = data + <int64_t>a * D
    cdef const float* y = data + <int64_t>b * D
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0, t0, t1, t2, t3
    cdef int i = 0
    while i + 4 <= D:
        t0 = <double>x[i] - <double>y[i]
        t1 = <double>x[i + 1] - <double>y[i + 1]
        t2 = <double>x[i + 2] - <double>y[i + 2]
        t3 = <double>x[i + 3] - <double>y[i + 3]
        s0 += t0 * t0
        s1 += t1 * t1
        s2 += t2 * t2
        s3 += t3 * t3
        i += 4
    while i < D:
        t0 = <double>x[i] - <double>y[i]
        s0 += t0 * t0
        i += 1
    return (s0 + s1) + (s2 + s3)


cdef void _search_layer_build(const float* data, int D, Graph* g, int node, int entry,
                              double entry_d, int ef, int level, vector[int]& tags, int tag,
                              vector[DI]& out) noexcept nogil:
    cdef priority_queue[DI] cand  # holds (-d, -id): top is nearest, lower id first
    cdef priority_queue[DI] res
    cdef int32_t* nb
    cdef int32_t* deg
    cdef int i, c, v
    cdef double d, dn
    tags[entry] = tag
    cand.push(DI(-entry_d, -entry))
    res.push(DI(entry_d, entry))
    while not cand.empty():
        d = -cand.top().first
        c = -cand.top().second
        if <int>res.size() == ef and d > res.top().first:
            break
        cand.pop()
        nb = _nbrs(g, c, level, &deg)
        for i in range(deg[0]):
            v = nb[i]
            if tags[v] == tag:
                continue
            tags[v] = tag
            dn = _l2(data, D, node, v)
            if <int>res.size() < ef or DI(dn, v) < res.top():
                cand.push(DI(-dn, -v))
                res.push(DI(dn, v))
                if <int>res.size() > ef:
                    res.pop()
    out.clear()
    while not res.empty():
        out.push_back(res.top())
        res.pop()
    # ascending order
    cdef int a = 0, b = <int>out.size() - 1
    cdef DI tmp
    while a < b:
        tmp = out[a]
        out[a] = out[b]
        out[b] = tmp
        a += 1
        b -= 1


cdef void _shrink(const float* data, int D, Graph* g, int node, int level, int newcomer,
                  int cap, vector[DI]& scratch) noexcept nogil:
    cdef int32_t* deg
    cdef int32_t* nb = _nbrs(g, node, level, &deg)
    cdef int i
    if deg[0] < cap:
        nb[deg[0]] = newcomer
        deg[0] += 1
        return
    scratch.clear()
    for i in range(deg[0]):
        scratch.push_back(DI(_l2(data, D, node, nb[i]), nb[i]))
    scratch.push_back(DI(_l2(data, D, node, newcomer), newcomer))
    _sort_pairs(scratch)
    for i in range(cap):
        nb[i] = scratch[i].second
    deg[0] = cap


cdef void _sort_pairs(vector[DI]& v) noexcept nogil:
    # insertion sort: lists are at most 2*M+1 long
    cdef int i, j, n = v.size()
    cdef DI key
    for i in range(1, n):
        key = v[i]
        j = i - 1
        while j >= 0 and key < v[j]:
            v[j + 1] = v[j]
            j -= 1
        v[j + 1] = key


def hnsw_build(const float[:, ::1] data, const int32_t[::1] levels, int M, int ef_construction,
               const int64_t[::1] upper_off, int32_t[:, ::1] links0, int32_t[::1] deg0,
               int32_t[:, ::1] links_up, int32_t[::1] deg_up):
    """Insert nodes ``0..n-1`` in order; fills the link arrays in place.

    Returns ``(entry_point, max_level)``.
    """
    cdef int n = data.shape[0], D = data.shape[1]
    cdef Graph g
    g.links0 = &links0[0, 0]
    g.deg0 = &deg0[0]
    g.cap0 = links0.shape[1]
    g.upper_off = &upper_off[0]
    g.links_up = &links_up[0, 0]
    g.deg_up = &deg_up[0]
    g.cap_up = links_up.shape[1]
    cdef const float* X = &data[0, 0]
    cdef vector[int] tags = vector[int](n, 0)
    cdef vector[DI] found
    cdef vector[DI] scratch
    cdef int entry = 0, max_level = levels[0], tag = 0
    cdef int i, lvl, level, cur, v, j, cap, changed, t, nchosen
    cdef double cur_d, dn
    cdef int32_t* nb
    cdef int32_t* deg
    with nogil:
        for i in range(1, n):
            lvl = levels[i]
            cur = entry
            cur_d = _l2(X, D, i, cur)
            level = max_level
            while level > lvl:
                changed = 1
                while changed:
                    changed = 0
                    nb = _nbrs(&g, cur, level, &deg)
                    t = deg[0]
                    for j in range(t):
                        v = nb[j]
                        dn = _l2(X, D, i, v)
                        if dn < cur_d or (dn == cur_d and v < cur):
                            cur = v
                            cur_d = dn
                            changed = 1
                level -= 1
            level = lvl if lvl < max_level else max_level
            while level >= 0:
                tag += 1
                _search_layer_build(X, D, &g, i, cur, cur_d, ef_construction, level, tags, tag,
                                    found)
                nchosen = M if <int>found.size() > M else <int>found.size()
                nb = _nbrs(&g, i, level, &deg)
                for j in range(nchosen):
                    nb[j] = found[j].second
                deg[0] = nchosen
                cap = g.cap0 if level == 0 else M
                for j in range(nchosen):
                    _shrink(X, D, &g, found[j].second, level, i, cap, scratch)
                cur_d = found[0].first
                cur = found[0].second
                level -= 1
            if lvl > max_level:
                entry = i
                max_level = lvl
    return entry, max_level


def hnsw_search(const float[:, ::1] data, const double[::1] norms, const int32_t[:, ::1] links0,
                const int32_t[::1] deg0, const int64_t[::1] upper_off,
                const int32_t[:, ::1] links_up, const int32_t[::1] deg_up, int entry,
                int max_level, const double[::1] q, double qn2, int k, int ef, int mode,
                const int32_t[::1] sdims, const double[::1] sm1, const double[::1] soff,
                const uint8_t[:, ::1] codes, const double[::1] resid, const double[:, ::1] lut,
                const double[::1] qparams):
    """Greedy descent with exact distances, then an ``ef``-wide beam on the base layer
    where result admission goes through the operator."""
    cdef Dco p = _make_dco(data, norms, q, qn2, mode, sdims, sm1, soff, codes, resid, lut, qparams)
    cdef Graph g
    g.links0 = <int32_t*>&links0[0, 0]
    g.deg0 = <int32_t*>&deg0[0]
    g.cap0 = links0.shape[1]
    g.upper_off = &upper_off[0]
    g.links_up = <int32_t*>&links_up[0, 0]
    g.deg_up = <int32_t*>&deg_up[0]
    g.cap_up = links_up.shape[1]
    cdef int n = data.shape[0]
    cdef vector[char] visited
    cdef priority_queue[DI] frontier  # (-d, -id)
    cdef priority_queue[DI] res
    cdef int cur = entry, level, changed, j, t, v, c, status
    cdef double cur_d, dn, d, tau, dis
    cdef int32_t* nb
    cdef int32_t* deg
    with nogil:
        visited.resize(n, 0)
        cur_d = _exact(&p, cur)
        level = max_level
        while level > 0:
            changed = 1
            while changed:
                changed = 0
                nb = _nbrs(&g, cur, level, &deg)
                t = deg[0]
                for j in range(t):
                    v = nb[j]
                    dn = _exact(&p, v)
                    if dn < cur_d or (dn == cur_d and v < cur):
                        cur = v
                        cur_d = dn
                        changed = 1
            level -= 1
        d = _dco(&p, cur, -1.0, &status)
        visited[cur] = 1
        frontier.push(DI(-d, -cur))
        res.push(DI(d, cur))
        while not frontier.empty():
            d = -frontier.top().first
            c = -frontier.top().second
            if <int>res.size() == ef and d > res.top().first:
                break
            frontier.pop()
            nb = _nbrs(&g, c, 0, &deg)
            t = deg[0]
            for j in range(t):
                v = nb[j]
                if visited[v]:
                    continue
                visited[v] = 1
                tau = res.top().first if <int>res.size() == ef else -1.0
                dis = _dco(&p, v, tau, &status)
                if status == PRUNED:
                    frontier.push(DI(-dis, -v))
                    continue
                if status == REJECTED:
                    continue
                if <int>res.size() < ef or DI(dis, v) < res.top():
                    frontier.push(DI(-dis, -v))
                    res.push(DI(dis, v))
                    if <int>res.size() > ef:
                        res.pop()
    ids, dists = _drain(res, k)
    return ids, dists, _counters(&p)
