"""Compiled inner loops for graph construction."""

import numba
import numpy as np

METRIC_L2 = 0
METRIC_IP = 1


@numba.njit(cache=True)
def _closeness(a, b, metric):
    # larger is closer
    if metric == METRIC_IP:
        return np.dot(a, b)
    acc = 0.0
    for i in range(a.shape[0]):
        t = a[i] - b[i]
        acc += t * t
    return -acc


@numba.njit(cache=True)
def diversity_prune(K, indptr, cand, support, max_degree, pool, metric, reserved):
    """Pick at most ``max_degree`` out-neighbours per node from ``cand``.

    The first ``reserved`` slots of ``u`` go to its candidates with the
    largest ``support`` (lower id first on ties).  The rest are chosen by
    diversity: candidates are ranked by closeness to ``u`` and cut to
    ``pool``, and ``v`` is kept only if it is closer to ``u`` than to every
    neighbour kept so far; free slots are then filled in closeness order.
    Returns an ``(n, max_degree)`` table padded with -1.
    """
    n = K.shape[0]
    adj = np.full((n, max_degree), -1, np.int64)
    for u in range(n):
        lo = indptr[u]
        hi = indptr[u + 1]
        m = hi - lo
        if m == 0:
            continue
        s = np.empty(m)
        for j in range(m):
            s[j] = _closeness(K[u], K[cand[lo + j]], metric)
        # stable order: closeness desc, then candidate id asc (cand is sorted)
        order = np.argsort(-s, kind="mergesort")[:pool]
        kept = np.empty(max_degree, np.int64)
        used = np.zeros(order.shape[0], np.bool_)
        nk = 0
        for jj in range(order.shape[0]):
            if nk >= max_degree:
                break
            v = cand[lo + order[jj]]
            sv = s[order[jj]]
            ok = True
            for w in range(nk):
                if _closeness(K[v], K[kept[w]], metric) > sv:
                    ok = False
                    break
            if ok:
                kept[nk] = v
                nk += 1
                used[jj] = True
        for jj in range(order.shape[0]):
            if nk >= max_degree:
                break
            if not used[jj]:
                kept[nk] = cand[lo + order[jj]]
                nk += 1
        nr = min(reserved, m)
        top = np.argsort(-support[lo:hi], kind="mergesort")[:nr]
        for j in range(nr):
            adj[u, j] = cand[lo + top[j]]
        slot = nr
        for j in range(nk):
            if slot >= max_degree:
                break
            v = kept[j]
            dup = False
            for i in range(nr):
                if adj[u, i] == v:
                    dup = True
                    break
            if not dup:
                adj[u, slot] = v
                slot += 1
    return adj


@numba.njit(cache=True)
def topk_rows(S, k):
    """Column ids of the ``k`` largest entries of each row of ``S``.

    Rows come back sorted by value descending, lower column first on ties.
    """
    m, n = S.shape
    out = np.empty((m, k), np.int64)
    vals = np.empty(k)
    ids = np.empty(k, np.int64)
    for r in range(m):
        row = S[r]
        for j in range(k):
            vals[j] = row[j]
            ids[j] = j
        # position of the current worst (smallest value, largest id on ties)
        worst = 0
        for j in range(1, k):
            if vals[j] < vals[worst] or (vals[j] == vals[worst] and ids[j] > ids[worst]):
                worst = j
        for c in range(k, n):
            x = row[c]
            if x > vals[worst]:
                vals[worst] = x
                ids[worst] = c
                worst = 0
                for j in range(1, k):
                    if vals[j] < vals[worst] or (vals[j] == vals[worst] and ids[j] > ids[worst]):
                        worst = j
        # insertion sort: value desc, id asc
        for a in range(1, k):
            v = vals[a]
            i = ids[a]
            b = a - 1
            while b >= 0 and (vals[b] < v or (vals[b] == v and ids[b] > i)):
                vals[b + 1] = vals[b]
                ids[b + 1] = ids[b]
                b -= 1
            vals[b + 1] = v
            ids[b + 1] = i
        for j in range(k):
            out[r, j] = ids[j]
    return out
