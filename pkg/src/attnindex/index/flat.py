"""Exact maximum inner-product search by linear scan."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..attention import inner_products
from ..errors import EmptyContextError, ValidationError
from ..vecstore import VectorSet
from . import _kernels
from .base import SearchResult, mask_array, query_vector, rank_top_k


@dataclass(frozen=True, eq=False)
class FlatIndex:
    keys: VectorSet
    kind = "flat"

    @classmethod
    def build(cls, keys: VectorSet) -> "FlatIndex":
        if keys.n < 1:
            raise EmptyContextError("flat index needs at least one key")
        return cls(keys)

    @property
    def n(self) -> int:
        return self.keys.n

    def search(self, q, k: int, mask=None) -> SearchResult:
        q64 = query_vector(q, self.keys.d)
        m = mask_array(mask, self.n)
        if m is None:
            ids = np.arange(self.n, dtype=np.int64)
            scores = inner_products(self.keys.f64, q64)
        else:
            ids = np.flatnonzero(~m).astype(np.int64)
            scores = inner_products(self.keys.f64[ids], q64)
        if not 1 <= k <= ids.size:
            raise ValidationError("k", f"must be in [1, {ids.size}] after masking, got {k}")
        top, top_scores = rank_top_k(scores, ids, k)
        return SearchResult(top, top_scores, scanned=int(ids.size))


def flat_build(keys: VectorSet) -> FlatIndex:
    return FlatIndex.build(keys)


def flat_search(index: FlatIndex, q, k: int, mask=None) -> SearchResult:
    return index.search(q, k, mask)


def exact_knn(queries: np.ndarray, keys: VectorSet, k: int, mask=None,
              chunk: int = 1024) -> np.ndarray:
    """Exact top-``k`` ids for every row of ``queries``, shape ``(m, k)``.

    Batched equivalent of :meth:`FlatIndex.search`.  Candidates (``2k``
    per row) come from a float32 product and are re-scored in float64; a
    row is accepted only if its k-th float64 score beats every excluded
    key's float32 score plus the float32 rounding bound, otherwise the row
    is recomputed exhaustively in float64.
    """
    Q64 = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    m = mask_array(mask, keys.n)
    ids = np.arange(keys.n, dtype=np.int64) if m is None else np.flatnonzero(~m).astype(np.int64)
    if not 1 <= k <= ids.size:
        raise ValidationError("k", f"must be in [1, {ids.size}] after masking, got {k}")
    K64 = keys.f64 if m is None else keys.f64[ids]
    K32 = keys.data if m is None else keys.data[ids]
    Q32 = Q64.astype(np.float32)
    d = K64.shape[1]
    u = 2.0 ** -24
    gamma = d * u / (1 - d * u)
    k_norm = float(np.sqrt(np.einsum("ij,ij->i", K64, K64).max()))
    q_norm = np.linalg.norm(Q64, axis=1)
    q_round = np.linalg.norm(Q64 - Q32.astype(np.float64), axis=1)
    # |fl32(q.k) - q.k| <= gamma |q32||k| + |q - q32||k|, plus slack for the
    # float64 side
    err = (gamma * (q_norm + q_round) + q_round) * k_norm * (1 + 1e-6) + 1e-300
    n_cand = min(ids.size, 2 * k)
    out = np.empty((Q64.shape[0], k), dtype=np.int64)
    for start in range(0, Q64.shape[0], chunk):
        stop = min(start + chunk, Q64.shape[0])
        S32 = Q32[start:stop] @ K32.T
        cand = _kernels.topk_rows(S32, n_cand)
        exact = np.einsum("rd,rcd->rc", Q64[start:stop], K64[cand])
        order = np.lexsort((cand, -exact), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        exact = np.take_along_axis(exact, order, axis=1)
        rows = cand[:, :k]
        if n_cand < ids.size:
            floor = S32[np.arange(stop - start), _cand_floor(S32, cand)]
            bad = exact[:, k - 1] <= floor + err[start:stop]
            for r in np.flatnonzero(bad):
                full = inner_products(K64, Q64[start + r])
                rows[r] = np.lexsort((np.arange(ids.size), -full))[:k]
        out[start:stop] = ids[rows]
    return out


def _cand_floor(S32: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Column of the smallest float32 score among each row's candidates."""
    vals = np.take_along_axis(S32, cand, axis=1)
    return cand[np.arange(cand.shape[0]), vals.argmin(axis=1)]
