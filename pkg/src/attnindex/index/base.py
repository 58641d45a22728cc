from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class SearchResult:
    """Ranked ids (score descending, id ascending on ties) plus scan cost.

    ``scanned`` counts inner products evaluated against keys.  ``truncated``
    is set when the index saw fewer than ``k`` eligible candidates and
    returned what it had.
    """

    ids: np.ndarray
    scores: np.ndarray
    scanned: int
    truncated: bool = False

    def __len__(self) -> int:
        return int(self.ids.size)

    def same_as(self, other: "SearchResult") -> bool:
        return (self.scanned == other.scanned
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.scores, other.scores))


def mask_array(mask: Optional[Iterable[int] | np.ndarray], n: int) -> Optional[np.ndarray]:
    """Boolean exclusion mask of length ``n`` (``None`` when nothing is masked)."""
    if mask is None:
        return None
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        if mask.shape != (n,):
            raise ValidationError("mask", f"boolean mask must have shape ({n},)")
        return mask
    ids = np.asarray(list(mask) if not isinstance(mask, np.ndarray) else mask, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ValidationError("mask", f"masked id out of range [0, {n})")
    out = np.zeros(n, dtype=bool)
    out[ids] = True
    return out


def rank_top_k(scores: np.ndarray, ids: np.ndarray, k: int):
    """Top ``k`` of ``(ids, scores)`` ordered by score desc then id asc.

    Ties straddling the cut are resolved towards lower ids.
    """
    if k <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    if k < scores.size:
        part = np.argpartition(-scores, k - 1)[:k]
        cut = scores[part].min()
        sel = np.flatnonzero(scores >= cut)
    else:
        sel = np.arange(scores.size)
    order = np.lexsort((ids[sel], -scores[sel]))[:k]
    chosen = sel[order]
    return ids[chosen].astype(np.int64), scores[chosen]


def query_vector(q, d: int) -> np.ndarray:
    q64 = np.asarray(q, dtype=np.float64).reshape(-1)
    if q64.size != d:
        raise ValidationError("q", f"dimension {q64.size} != key dimension {d}")
    return q64
