"""Reference attention math.

Full softmax attention, its top-k sparse approximation, the static
"initial tokens + sliding window" partition, and the exact merge of two
partial attention results computed over disjoint key sets.

All sums run in float64.  Public outputs default to float32; pass
``dtype=np.float64`` where an oracle comparison needs the wide result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import EmptyContextError, ValidationError
from .vecstore import VectorSet

ArrayLike = Union[np.ndarray, VectorSet]


def _matrix(x: ArrayLike) -> np.ndarray:
    if isinstance(x, VectorSet):
        return x.f64
    return np.asarray(x, dtype=np.float64)


def _check_indices(indices: Sequence[int] | np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ValidationError("indices", "empty index set")
    if idx.min() < 0 or idx.max() >= n:
        raise ValidationError("indices", f"index out of range [0, {n})")
    if np.unique(idx).size != idx.size:
        raise ValidationError("indices", "duplicate indices")
    return idx


@dataclass(frozen=True)
class AttentionScores:
    """Scaled dot products ``z`` and their softmax weights ``a``."""

    z: np.ndarray
    a: np.ndarray


@dataclass(frozen=True)
class PartialAttention:
    """Attention over one subset of the context, kept mergeable.

    ``out`` is already normalized by ``expsum``; ``zmax`` is the subset's
    largest scaled score and ``expsum`` is ``sum(exp(z_i - zmax))``.
    """

    out: np.ndarray
    zmax: float
    expsum: float


@dataclass(frozen=True)
class KVPartition:
    """Statically resident token ids and the pool left for retrieval."""

    static_set: np.ndarray
    dynamic_pool: np.ndarray

    @property
    def t(self) -> int:
        return int(self.static_set.size + self.dynamic_pool.size)


def inner_products(K: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``K @ q`` whose value for a row does not depend on which
    other rows are present, so every scoring path agrees bit for bit."""
    return np.einsum("ij,j->i", K, q)


def attention_scores(q: np.ndarray, keys: ArrayLike,
                     indices: Optional[Sequence[int]] = None) -> AttentionScores:
    K = _matrix(keys)
    if indices is not None:
        K = K[_check_indices(indices, K.shape[0])]
    if K.shape[0] == 0:
        raise EmptyContextError("empty context")
    q64 = np.asarray(q, dtype=np.float64)
    z = inner_products(K, q64) / math.sqrt(K.shape[1])
    w = np.exp(z - z.max())
    return AttentionScores(z=z, a=w / w.sum())


def _attend(q: np.ndarray, K: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, float, float]:
    z = inner_products(K, np.asarray(q, dtype=np.float64)) / math.sqrt(K.shape[1])
    zmax = float(z.max())
    w = np.exp(z - zmax)
    s = float(w.sum())
    return (w @ V) / s, zmax, s


def _check_kv(keys: ArrayLike, values: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    K, V = _matrix(keys), _matrix(values)
    if K.shape[0] != V.shape[0]:
        raise ValidationError("values", f"{V.shape[0]} values for {K.shape[0]} keys")
    return K, V


def full_attention(q: np.ndarray, keys: ArrayLike, values: ArrayLike,
                   dtype=np.float32) -> np.ndarray:
    """Softmax attention of ``q`` over every key/value pair."""
    K, V = _check_kv(keys, values)
    if K.shape[0] == 0:
        raise EmptyContextError("empty context")
    if np.shape(q)[-1] != K.shape[1]:
        raise ValidationError("q", f"dimension {np.shape(q)[-1]} != key dimension {K.shape[1]}")
    out, _, _ = _attend(q, K, V)
    return out.astype(dtype)


def sparse_attention(q: np.ndarray, keys: ArrayLike, values: ArrayLike,
                     indices: Sequence[int] | np.ndarray, dtype=np.float32) -> np.ndarray:
    """Attention with the softmax renormalized over ``indices`` only."""
    K, V = _check_kv(keys, values)
    idx = _check_indices(indices, K.shape[0])
    out, _, _ = _attend(q, K[idx], V[idx])
    return out.astype(dtype)


def partial_attention(q: np.ndarray, keys: ArrayLike, values: ArrayLike,
                      indices: Sequence[int] | np.ndarray) -> PartialAttention:
    """Mergeable attention over ``indices``; the output stays float64."""
    K, V = _check_kv(keys, values)
    idx = _check_indices(indices, K.shape[0])
    out, zmax, s = _attend(q, K[idx], V[idx])
    return PartialAttention(out=out, zmax=zmax, expsum=s)


def merge_weights(pw: Optional[PartialAttention], po: Optional[PartialAttention],
                  reference: Optional[float] = None) -> Tuple[float, float]:
    """Re-scaling factors ``(gamma_w, gamma_omega)`` for :func:`merge`.

    ``reference`` overrides the shared exponent offset, which defaults to
    the larger of the two local maxima.  The factors do not depend on it
    mathematically; only overflow behaviour does.
    """
    if pw is None and po is None:
        raise EmptyContextError("empty attention support")
    if po is None:
        return 1.0, 0.0
    if pw is None:
        return 0.0, 1.0
    ref = max(pw.zmax, po.zmax) if reference is None else reference
    m1 = math.exp(pw.zmax - ref) * pw.expsum
    m2 = math.exp(po.zmax - ref) * po.expsum
    denom = m1 + m2
    g1, g2 = m1 / denom, m2 / denom
    assert abs(g1 + g2 - 1.0) <= 1e-6, (g1, g2)
    return g1, g2


def merge(pw: Optional[PartialAttention], po: Optional[PartialAttention],
          dtype=np.float32, reference: Optional[float] = None) -> np.ndarray:
    """Combine attention over two disjoint sets into attention over their union.

    Either side may be ``None`` (an empty set); the other side's output is
    then returned unchanged.
    """
    g1, g2 = merge_weights(pw, po, reference)
    if po is None:
        return np.asarray(pw.out).astype(dtype)
    if pw is None:
        return np.asarray(po.out).astype(dtype)
    return (g1 * pw.out + g2 * po.out).astype(dtype)


def topk_oracle(q: np.ndarray, keys: ArrayLike, k: int) -> np.ndarray:
    """Ids of the ``k`` largest inner products, ties broken by lower id.

    Full sort; this is the ground truth every index is scored against.
    """
    K = _matrix(keys)
    n = K.shape[0]
    if not 1 <= k <= n:
        raise ValidationError("k", f"must be in [1, {n}], got {k}")
    scores = inner_products(K, np.asarray(q, dtype=np.float64))
    order = np.lexsort((np.arange(n), -scores))
    return order[:k].astype(np.int64)


def static_partition(t: int, s_init: int, s_local: int) -> KVPartition:
    """Initial ``s_init`` tokens plus the last ``s_local`` tokens of ``t``."""
    if t < 0 or s_init < 0 or s_local < 0:
        raise ValidationError("static_partition", "t, s_init and s_local must be >= 0")
    mask = np.zeros(t, dtype=bool)
    mask[: min(s_init, t)] = True
    mask[max(t - s_local, 0):] = True
    return KVPartition(static_set=np.flatnonzero(mask).astype(np.int64),
                       dynamic_pool=np.flatnonzero(~mask).astype(np.int64))


def mse(approx: np.ndarray, exact: np.ndarray) -> float:
    a = np.asarray(approx, dtype=np.float64)
    b = np.asarray(exact, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError("approx", f"shape {a.shape} != {b.shape}")
    return float(np.mean((a - b) ** 2))
