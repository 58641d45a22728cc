"""Query-guided graph index over keys.

Construction links every training (prefill) query to its exact top-k
keys, then projects those query->key links onto key->key edges: keys that
the same query retrieved are connected, each pointing towards the keys
that query ranked higher.  Training queries are dropped afterwards; only
the key adjacency is kept.  Search is a greedy best-first beam over that
adjacency.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import struct
from dataclasses import dataclass, fields
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from ..attention import inner_products
from ..errors import EmptyContextError, FormatError, ValidationError
from ..vecstore import PathLike, VectorSet
from . import _kernels
from .base import SearchResult, mask_array, query_vector, rank_top_k
from .flat import exact_knn

MAGIC = b"OODG"
VERSION = 1
_HEADER = struct.Struct("<4sIQIQ")


class EntryStrategy(str, enum.Enum):
    MEDOID = "medoid"
    MAXNORM = "maxnorm"


class PruneMetric(str, enum.Enum):
    L2 = "l2"
    IP = "ip"


@dataclass(frozen=True)
class OODGraphBuildParams:
    """Build knobs.

    ``prune_metric`` picks the closeness used by the diversity rule.  On
    inner-product workloads ``"ip"`` keeps hub-like neighbours and caps
    recall well below 1, so ``"l2"`` is the default.  Euclidean pruning in
    turn drops long edges towards large-norm keys, which are exactly the
    keys that win inner-product searches; ``support_slots`` reserves that
    many slots per key for the proposals made by the most training queries.
    """

    k_train: int = 32
    max_degree: int = 32
    entry_strategy: EntryStrategy = EntryStrategy.MEDOID
    ef_construction: int = 128
    prune_metric: PruneMetric = PruneMetric.L2
    support_slots: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "entry_strategy", EntryStrategy(self.entry_strategy))
        object.__setattr__(self, "prune_metric", PruneMetric(self.prune_metric))
        if self.k_train < 2:
            raise ValidationError("k_train", "must be >= 2")
        if self.max_degree < 2:
            raise ValidationError("max_degree", "must be >= 2")
        if self.ef_construction < 1:
            raise ValidationError("ef_construction", "must be >= 1")
        if not 0 <= self.support_slots <= self.max_degree:
            raise ValidationError("support_slots", "must be in [0, max_degree]")

    def to_dict(self) -> Dict:
        return {f.name: (v.value if isinstance(v, enum.Enum) else v)
                for f in fields(self) for v in [getattr(self, f.name)]}


@dataclass(frozen=True)
class OODSearchParams:
    ef: int = 128
    k: int = 100

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValidationError("k", "must be >= 1")
        if self.ef < self.k:
            raise ValidationError("ef", f"must be >= k ({self.k}), got {self.ef}")


class OODGraph:
    """Key adjacency in CSR form plus the search entry point."""

    def __init__(self, indptr: np.ndarray, indices: np.ndarray, entry_point: int,
                 max_degree: int) -> None:
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.entry_point = int(entry_point)
        self.max_degree = int(max_degree)

    @property
    def n(self) -> int:
        return self.indptr.size - 1

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    @cached_property
    def _lists(self) -> List[List[int]]:
        return [self.indices[a:b].tolist() for a, b in zip(self.indptr[:-1], self.indptr[1:])]

    def out_degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def degree_histogram(self) -> List[int]:
        return np.bincount(self.out_degrees(), minlength=self.max_degree + 1).tolist()

    def reachable(self) -> np.ndarray:
        return _reachable(self.indptr, self.indices, self.entry_point)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.indptr.tobytes())
        h.update(self.indices.tobytes())
        h.update(struct.pack("<Q", self.entry_point))
        return h.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OODGraph):
            return NotImplemented
        return (self.entry_point == other.entry_point
                and self.max_degree == other.max_degree
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return (f"OODGraph(n={self.n}, edges={self.indices.size}, "
                f"max_degree={self.max_degree}, entry_point={self.entry_point})")

    # serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, VERSION, self.n, self.max_degree, self.entry_point)]
        deg = self.out_degrees()
        for u in range(self.n):
            parts.append(struct.pack("<I", int(deg[u])))
            parts.append(self.neighbors(u).astype("<u8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "OODGraph":
        if len(raw) < 4 or raw[:4] != MAGIC:
            raise FormatError("magic", "bad magic")
        if len(raw) < _HEADER.size:
            raise FormatError("header", "truncated header")
        _, version, n, max_degree, entry = _HEADER.unpack_from(raw)
        if version != VERSION:
            raise FormatError("version", f"unsupported version {version}")
        if n < 1 or entry >= n:
            raise FormatError("entry_point", f"entry point {entry} outside [0, {n})")
        pos = _HEADER.size
        indptr = np.zeros(n + 1, dtype=np.int64)
        chunks = []
        for u in range(n):
            if pos + 4 > len(raw):
                raise FormatError("degree", f"truncated at node {u}")
            (deg,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if deg > max_degree:
                raise FormatError("degree", f"node {u} has degree {deg} > {max_degree}")
            end = pos + 8 * deg
            if end > len(raw):
                raise FormatError("neighbors", f"truncated at node {u}")
            nb = np.frombuffer(raw, dtype="<u8", count=deg, offset=pos).astype(np.int64)
            if deg and (nb.max() >= n):
                raise FormatError("neighbors", f"node {u} links outside [0, {n})")
            chunks.append(nb)
            indptr[u + 1] = indptr[u] + deg
            pos = end
        if pos != len(raw):
            raise FormatError("payload", f"{len(raw) - pos} trailing bytes")
        indices = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        return cls(indptr, indices, entry, max_degree)

    def save(self, path: PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: PathLike) -> "OODGraph":
        return cls.from_bytes(Path(path).read_bytes())


def _reachable(indptr, indices, entry) -> np.ndarray:
    n = indptr.size - 1
    g = csr_matrix((np.ones(indices.size, dtype=np.int8), indices, indptr), shape=(n, n))
    order = breadth_first_order(g, entry, directed=True, return_predecessors=False)
    seen = np.zeros(n, dtype=bool)
    seen[order] = True
    return seen


def _project(knn: np.ndarray, n: int):
    """Key->key edge proposals from ranked query->key lists, as CSR.

    Also returns each proposal's support: the number of training queries
    that made it.
    """
    codes = []
    for r in range(1, knn.shape[1]):
        src = knn[:, r:r + 1]
        dst = knn[:, :r]
        codes.append((src * n + dst).ravel())
    if not codes:
        empty = np.empty(0, dtype=np.int64)
        return np.zeros(n + 1, dtype=np.int64), empty, empty
    codes, support = np.unique(np.concatenate(codes), return_counts=True)
    src, dst = np.divmod(codes, n)
    keep = src != dst
    src, dst, support = src[keep], dst[keep], support[keep].astype(np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    return np.cumsum(indptr), dst, support


def _entry_point(K: np.ndarray, has_edges: np.ndarray, strategy: EntryStrategy) -> int:
    pool = np.flatnonzero(has_edges)
    if pool.size == 0:
        pool = np.arange(K.shape[0])
    if strategy is EntryStrategy.MAXNORM:
        score = -np.einsum("ij,ij->i", K[pool], K[pool])
    else:
        diff = K[pool] - K.mean(axis=0)
        score = np.einsum("ij,ij->i", diff, diff)
    return int(pool[np.lexsort((pool, score))[0]])


def _nearest_in(K32: np.ndarray, rows: np.ndarray, among: np.ndarray, m: int,
                budget: int = 1 << 24) -> np.ndarray:
    """The ``m`` Euclidean-nearest ids from ``among`` for every id in ``rows``."""
    A = K32[among]
    a_sq = np.einsum("ij,ij->i", A, A)
    out = np.empty((rows.size, m), dtype=np.int64)
    step = max(1, budget // max(1, among.size))
    for s in range(0, rows.size, step):
        X = K32[rows[s:s + step]]
        closeness = 2.0 * (X @ A.T) - a_sq[None, :]
        out[s:s + step] = among[_kernels.topk_rows(closeness, m)]
    return out


def _repair(K: np.ndarray, adj: List[List[int]], entry: int, max_degree: int,
            n_choices: int = 16) -> List[List[int]]:
    """Attach every key unreachable from ``entry`` to its nearest reached key.

    Only reached keys with a free slot may host the new edge, so degrees
    stay within ``max_degree``: an unreached key takes the nearest of its
    ``n_choices`` closest hosts that still has room, or waits for the next
    round, when the keys attached so far become hosts too.
    """
    K32 = K.astype(np.float32)
    while True:
        indptr, indices = _to_csr(adj)
        seen = _reachable(indptr, indices, entry)
        unreached = np.flatnonzero(~seen)
        if unreached.size == 0:
            return adj
        degree = np.diff(indptr)
        hosts = np.flatnonzero(seen & (degree < max_degree))
        if hosts.size == 0:
            # every reached key is full: overwrite the last (fill) slot of
            # the nearest reached key
            u = int(unreached[0])
            r = int(_nearest_in(K32, unreached[:1], np.flatnonzero(seen), 1)[0, 0])
            adj[r][-1] = u
            continue
        choices = _nearest_in(K32, unreached, hosts, min(n_choices, hosts.size))
        spare = max_degree - degree
        for u, row in zip(unreached.tolist(), choices.tolist()):
            for r in row:
                if spare[r] > 0:
                    adj[r].append(u)
                    spare[r] -= 1
                    break


def _to_csr(adj: List[List[int]]):
    indptr = np.zeros(len(adj) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(a) for a in adj])
    flat = [v for a in adj for v in a]
    return indptr, np.asarray(flat, dtype=np.int64)


def ood_build(keys: VectorSet, train_queries: VectorSet,
              params: Optional[OODGraphBuildParams] = None) -> OODGraph:
    """Build the query-guided key graph.

    1. exact top-``k_train`` keys of every training query;
    2. every key in a query's list proposes edges to the keys ranked above it;
    3. each key keeps at most ``max_degree`` proposals after diversity pruning;
    4. keys unreachable from the entry point are attached to their nearest
       reached key.
    """
    params = params or OODGraphBuildParams()
    if keys.n < 2:
        raise EmptyContextError("graph index needs at least two keys")
    if train_queries.n < 1:
        raise ValidationError("train_queries", "need at least one training query")
    if train_queries.d != keys.d:
        raise ValidationError("train_queries", f"dimension {train_queries.d} != key dimension {keys.d}")
    n = keys.n
    K = keys.f64
    knn = exact_knn(train_queries.f64, keys, min(params.k_train, n))
    indptr, cand, support = _project(knn, n)
    metric = _kernels.METRIC_L2 if params.prune_metric is PruneMetric.L2 else _kernels.METRIC_IP
    table = _kernels.diversity_prune(K, indptr, cand, support, params.max_degree,
                                     params.ef_construction, metric, params.support_slots)
    adj = [row[row >= 0].tolist() for row in table]
    has_edges = (table >= 0).any(axis=1)
    entry = _entry_point(K, has_edges, params.entry_strategy)
    adj = _repair(K, adj, entry, params.max_degree)
    indptr, indices = _to_csr(adj)
    return OODGraph(indptr, indices, entry, params.max_degree)


def ood_search(graph: OODGraph, keys: VectorSet, q, params: Optional[OODSearchParams] = None,
               mask=None) -> SearchResult:
    """Greedy best-first search from the entry point.

    The candidate queue is expanded best-first until its best entry scores
    below the worst of the ``ef`` best unmasked keys found so far.  Masked
    keys are scored and expanded like any other but never returned.
    """
    params = params or OODSearchParams()
    if graph.n == 0:
        raise EmptyContextError("empty graph")
    if graph.n != keys.n:
        raise ValidationError("keys", f"graph has {graph.n} nodes but {keys.n} keys were given")
    q64 = query_vector(q, keys.d)
    excluded = mask_array(mask, keys.n)
    K = keys.f64
    adj = graph._lists
    ef = params.ef

    entry = graph.entry_point
    visited = {entry}
    s0 = float(inner_products(K[entry:entry + 1], q64)[0])
    frontier = [(-s0, entry)]
    pool: list = []  # min-heap of (score, -id): worst retained on top
    if excluded is None or not excluded[entry]:
        pool.append((s0, -entry))

    while frontier:
        neg, u = heapq.heappop(frontier)
        if len(pool) >= ef and -neg < pool[0][0]:
            break
        fresh = [v for v in adj[u] if v not in visited]
        if not fresh:
            continue
        visited.update(fresh)
        scores = inner_products(K[fresh], q64).tolist()
        for v, s in zip(fresh, scores):
            if len(pool) < ef or s > pool[0][0]:
                heapq.heappush(frontier, (-s, v))
                if excluded is None or not excluded[v]:
                    heapq.heappush(pool, (s, -v))
                    if len(pool) > ef:
                        heapq.heappop(pool)

    ids = np.fromiter((-i for _, i in pool), dtype=np.int64, count=len(pool))
    sc = np.fromiter((s for s, _ in pool), dtype=np.float64, count=len(pool))
    top, top_scores = rank_top_k(sc, ids, min(params.k, ids.size))
    return SearchResult(top, top_scores, scanned=len(visited), truncated=ids.size < params.k)
