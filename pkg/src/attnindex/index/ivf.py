"""Inverted-file index: k-means lists probed in inner-product order."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ..attention import inner_products
from ..errors import EmptyContextError, ValidationError
from ..vecstore import VectorSet
from .base import SearchResult, mask_array, query_vector, rank_top_k


def default_nlist(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


def _sq_dists(X: np.ndarray, x_sq: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = x_sq[:, None] - 2.0 * (X @ C.T) + np.einsum("ij,ij->i", C, C)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X: np.ndarray, x_sq: np.ndarray, nlist: int,
               rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(X, x_sq, X[chosen]).ravel()
    for _ in range(1, nlist):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a centre; take unused ids in order
            unused = np.setdiff1d(np.arange(n), chosen)[: nlist - len(chosen)]
            chosen.extend(int(i) for i in unused)
            break
        c = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
        c = min(c, n - 1)
        chosen.append(c)
        closest = np.minimum(closest, _sq_dists(X, x_sq, X[c:c + 1]).ravel())
    return X[np.asarray(chosen)].copy()


def _assign(X, x_sq, C, chunk=16384):
    out = np.empty(X.shape[0], dtype=np.int64)
    dist = np.empty(X.shape[0])
    for s in range(0, X.shape[0], chunk):
        d = _sq_dists(X[s:s + chunk], x_sq[s:s + chunk], C)
        out[s:s + chunk] = d.argmin(axis=1)
        dist[s:s + chunk] = d[np.arange(d.shape[0]), out[s:s + chunk]]
    return out, dist


def kmeans(X: np.ndarray, nlist: int, seed: int = 0, iters: int = 20):
    """Lloyd's k-means with k-means++ seeding.

    An empty cluster takes over the member of the largest cluster that is
    farthest from its centroid.  Returns ``(centroids, assignment)``.
    """
    X = np.asarray(X, dtype=np.float64)
    x_sq = np.einsum("ij,ij->i", X, X)
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, x_sq, nlist, rng)
    assign, dist = _assign(X, x_sq, C)
    for _ in range(iters):
        counts = np.bincount(assign, minlength=nlist)
        for empty in np.flatnonzero(counts == 0):
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            far = int(members[np.argmax(dist[members])])
            assign[far] = empty
            dist[far] = 0.0
            counts[big] -= 1
            counts[empty] = 1
        sums = np.zeros_like(C)
        np.add.at(sums, assign, X)
        C = sums / counts[:, None]
        assign, dist = _assign(X, x_sq, C)
    return C, assign


@dataclass(frozen=True, eq=False)
class IVFIndex:
    keys: VectorSet
    centroids: np.ndarray
    lists: List[np.ndarray]
    kind = "ivf"

    @property
    def nlist(self) -> int:
        return len(self.lists)

    @property
    def n(self) -> int:
        return self.keys.n

    @classmethod
    def build(cls, keys: VectorSet, nlist: Optional[int] = None, seed: int = 0,
              iters: int = 20) -> "IVFIndex":
        if keys.n < 1:
            raise EmptyContextError("IVF index needs at least one key")
        nlist = default_nlist(keys.n) if nlist is None else nlist
        if not 1 <= nlist <= keys.n:
            raise ValidationError("nlist", f"must be in [1, {keys.n}], got {nlist}")
        C, assign = kmeans(keys.f64, nlist, seed=seed, iters=iters)
        order = np.argsort(assign, kind="stable")
        bounds = np.searchsorted(assign[order], np.arange(nlist + 1))
        lists = [order[bounds[j]:bounds[j + 1]].astype(np.int64) for j in range(nlist)]
        return cls(keys, C, lists)

    def assignment(self) -> np.ndarray:
        out = np.full(self.n, -1, dtype=np.int64)
        for j, ids in enumerate(self.lists):
            out[ids] = j
        return out

    def probe_order(self, q) -> np.ndarray:
        q64 = query_vector(q, self.keys.d)
        s = self.centroids @ q64
        return np.lexsort((np.arange(self.nlist), -s))

    def search(self, q, k: int, nprobe: int = 1, mask=None) -> SearchResult:
        if not 1 <= nprobe <= self.nlist:
            raise ValidationError("nprobe", f"must be in [1, {self.nlist}], got {nprobe}")
        if k < 1:
            raise ValidationError("k", "must be >= 1")
        q64 = query_vector(q, self.keys.d)
        probed = self.probe_order(q64)[:nprobe]
        cand = np.concatenate([self.lists[j] for j in probed])
        m = mask_array(mask, self.n)
        if m is not None:
            cand = cand[~m[cand]]
        scores = inner_products(self.keys.f64[cand], q64)
        top, top_scores = rank_top_k(scores, cand, min(k, cand.size))
        return SearchResult(top, top_scores, scanned=int(cand.size), truncated=cand.size < k)


def ivf_build(keys: VectorSet, nlist: Optional[int] = None, seed: int = 0,
              iters: int = 20) -> IVFIndex:
    return IVFIndex.build(keys, nlist, seed, iters)


def ivf_search(index: IVFIndex, q, k: int, nprobe: int, mask=None) -> SearchResult:
    return index.search(q, k, nprobe, mask)
