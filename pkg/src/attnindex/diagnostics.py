"""Measurements behind the sparsity and out-of-distribution findings.

* Mahalanobis distance of query and key samples to the key distribution.
* recall@k of an index against the exact inner-product top-k.
* recall vs. scan-fraction sweeps for flat, IVF and graph indexes.
* attention error of top-k sparse attention as k grows.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import scipy.linalg

from .attention import full_attention, inner_products, mse, sparse_attention
from .errors import AttnIndexError, ValidationError
from .index import (
    FlatIndex,
    IVFIndex,
    OODGraphBuildParams,
    OODSearchParams,
    exact_knn,
    ood_build,
    ood_search,
)
from .index.base import mask_array
from .vecstore import HeadWorkload, VectorSet


# --------------------------------------------------------------------------
# Mahalanobis


@dataclass(frozen=True)
class MahalanobisModel:
    mean: np.ndarray
    chol: np.ndarray  # lower Cholesky factor of (cov + shrinkage * I)
    shrinkage: float

    def distance(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X.f64 if isinstance(X, VectorSet) else X, dtype=np.float64))
        y = scipy.linalg.solve_triangular(self.chol, (X - self.mean).T, lower=True)
        return np.sqrt(np.einsum("ij,ij->j", y, y))


def default_shrinkage(cov: np.ndarray) -> float:
    return 1e-3 * float(np.trace(cov)) / cov.shape[0]


def fit_mahalanobis(reference, shrinkage: Optional[float] = None) -> MahalanobisModel:
    """Fit mean and shrunk covariance of ``reference`` (rows are samples).

    ``shrinkage`` is added to the covariance diagonal; it defaults to
    ``1e-3 * trace(cov) / d``.
    """
    X = np.asarray(reference.f64 if isinstance(reference, VectorSet) else reference,
                   dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("reference", "need at least two reference vectors")
    mean = X.mean(axis=0)
    cov = np.cov(X, rowvar=False).reshape(X.shape[1], X.shape[1])
    lam = default_shrinkage(cov) if shrinkage is None else float(shrinkage)
    if lam < 0:
        raise ValidationError("shrinkage", "must be >= 0")
    try:
        chol = np.linalg.cholesky(cov + lam * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError:
        raise AttnIndexError(
            f"covariance is not positive definite with shrinkage {lam:g}; use a larger shrinkage"
        ) from None
    if not (np.all(np.isfinite(chol)) and np.all(np.diag(chol) > 0)):
        raise AttnIndexError(f"degenerate Cholesky factor with shrinkage {lam:g}; use a larger shrinkage")
    return MahalanobisModel(mean=mean, chol=chol, shrinkage=lam)


@dataclass(frozen=True)
class MahalanobisGap:
    q_to_k_mean: float
    k_to_k_mean: float
    ratio: float
    q_distances: np.ndarray = field(repr=False)
    k_distances: np.ndarray = field(repr=False)

    def to_dict(self) -> Dict:
        return {"q_to_k_mean": self.q_to_k_mean, "k_to_k_mean": self.k_to_k_mean,
                "ratio": self.ratio}


def mahalanobis_gap(Q, K, sample: int = 5000, seed: int = 0,
                    shrinkage: Optional[float] = None) -> MahalanobisGap:
    """Distance of sampled queries and held-out keys to the remaining keys.

    ``sample`` vectors are drawn from each of ``Q`` and ``K``; the model is
    fitted on the keys that were not drawn.
    """
    Qm = Q.f64 if isinstance(Q, VectorSet) else np.asarray(Q, dtype=np.float64)
    Km = K.f64 if isinstance(K, VectorSet) else np.asarray(K, dtype=np.float64)
    if sample < 1 or sample > min(Qm.shape[0], Km.shape[0]):
        raise ValidationError("sample", f"must be in [1, {min(Qm.shape[0], Km.shape[0])}]")
    rng = np.random.default_rng(seed)
    k_pick = np.sort(rng.choice(Km.shape[0], size=sample, replace=False))
    q_pick = np.sort(rng.choice(Qm.shape[0], size=sample, replace=False))
    rest = np.ones(Km.shape[0], dtype=bool)
    rest[k_pick] = False
    model = fit_mahalanobis(Km[rest], shrinkage)
    dq = model.distance(Qm[q_pick])
    dk = model.distance(Km[k_pick])
    qm, km = float(dq.mean()), float(dk.mean())
    return MahalanobisGap(qm, km, qm / km, dq, dk)


# --------------------------------------------------------------------------
# Recall


def recall_at_k(retrieved: Iterable[int], truth: Iterable[int]) -> float:
    truth = np.unique(np.asarray(list(truth) if not isinstance(truth, np.ndarray) else truth))
    if truth.size == 0:
        raise ValidationError("truth", "empty ground truth")
    got = np.asarray(list(retrieved) if not isinstance(retrieved, np.ndarray) else retrieved)
    return float(np.intersect1d(got, truth).size) / truth.size


@dataclass(frozen=True)
class SweepRow:
    index_kind: str
    param: int
    recall_at_k: float
    scan_fraction: float
    n_queries: int


CSV_HEADER = ("index_kind", "param", "recall_at_k", "scan_fraction", "n_queries")


@dataclass
class SweepReport:
    rows: List[SweepRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.index_kind, r.param, repr(r.recall_at_k), repr(r.scan_fraction), r.n_queries])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.rows)

    @classmethod
    def from_csv(cls, text: str) -> "SweepReport":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValidationError("csv", f"unexpected header {reader.fieldnames}")
        return cls([SweepRow(r["index_kind"], int(r["param"]), float(r["recall_at_k"]),
                             float(r["scan_fraction"]), int(r["n_queries"])) for r in reader])

    def best_scan_at(self, kind: str, min_recall: float) -> Optional[float]:
        """Smallest scan fraction among ``kind`` rows reaching ``min_recall``."""
        ok = [r.scan_fraction for r in self.rows if r.index_kind == kind and r.recall_at_k >= min_recall]
        return min(ok) if ok else None

    def extend(self, other: "SweepReport") -> "SweepReport":
        self.rows.extend(other.rows)
        return self


INDEX_KINDS = ("flat", "ivf", "oodgraph")


def recall_sweep(workload: HeadWorkload, index_kind: str, grid: Sequence[int], k: int = 100,
                 mask=None, index=None, ivf_nlist: Optional[int] = None, ivf_iters: int = 20,
                 seed: int = 0, build_params: Optional[OODGraphBuildParams] = None,
                 n_queries: Optional[int] = None, n_threads: int = 1) -> SweepReport:
    """Mean recall@k and scan fraction over the decode queries, per grid value.

    ``grid`` holds nprobe values for IVF and ef values for the graph; for
    the flat index each value yields the same exhaustive row.  Ground truth
    is the exact top-k over the same unmasked keys, and scan fractions are
    relative to the unmasked key count.  A pre-built ``index`` can be
    passed to skip construction.
    """
    if index_kind not in INDEX_KINDS:
        raise ValidationError("index_kind", f"expected one of {INDEX_KINDS}, got {index_kind!r}")
    grid = list(grid)
    if not grid:
        raise ValidationError("grid", "empty parameter grid")
    keys = workload.keys
    Qd = workload.decode_queries.f64
    if n_queries is not None:
        Qd = Qd[:n_queries]
    if Qd.shape[0] == 0:
        raise ValidationError("decode_queries", "no decode queries to evaluate")
    excluded = mask_array(mask, keys.n)
    n_open = keys.n - (0 if excluded is None else int(excluded.sum()))
    truth = exact_knn(Qd, keys, k, mask=excluded)

    if index is None:
        if index_kind == "flat":
            index = FlatIndex.build(keys)
        elif index_kind == "ivf":
            index = IVFIndex.build(keys, nlist=ivf_nlist, seed=seed, iters=ivf_iters)
        else:
            index = ood_build(keys, workload.prefill_queries, build_params)

    def run_one(param, i):
        q = Qd[i]
        if index_kind == "flat":
            res = index.search(q, k, mask=excluded)
        elif index_kind == "ivf":
            res = index.search(q, k, nprobe=int(param), mask=excluded)
        else:
            res = ood_search(index, keys, q, OODSearchParams(ef=max(int(param), k), k=k), mask=excluded)
        return recall_at_k(res.ids, truth[i]), res.scanned

    report = SweepReport()
    with ThreadPoolExecutor(max_workers=max(1, n_threads)) as pool:
        for param in grid:
            results = list(pool.map(lambda i: run_one(param, i), range(Qd.shape[0])))
            rec = math.fsum(r for r, _ in results) / len(results)
            scan = math.fsum(s for _, s in results) / len(results) / n_open
            report.rows.append(SweepRow(index_kind, int(param), rec, scan, len(results)))
    return report


# --------------------------------------------------------------------------
# Sparsity


@dataclass(frozen=True)
class MSERow:
    k: int
    mse: float
    n_queries: int


def mse_sweep(workload: HeadWorkload, k_grid: Sequence[int],
              n_queries: Optional[int] = None) -> List[MSERow]:
    """Mean attention-output MSE of exact top-k sparse attention vs. full attention.

    The grid always gains a ``k = n`` row, whose error is zero.
    """
    n = workload.n
    ks = sorted(set(int(k) for k in k_grid) | {n})
    if ks[0] < 1 or ks[-1] > n:
        raise ValidationError("k_grid", f"values must be in [1, {n}]")
    Qd = workload.decode_queries.f64
    if n_queries is not None:
        Qd = Qd[:n_queries]
    if Qd.shape[0] == 0:
        raise ValidationError("decode_queries", "no decode queries to evaluate")
    K, V = workload.keys, workload.values
    per_k = {k: [] for k in ks}
    for q in Qd:
        exact = full_attention(q, K, V, dtype=np.float64)
        order = np.lexsort((np.arange(n), -inner_products(K.f64, q)))
        for k in ks:
            approx = exact if k == n else sparse_attention(q, K, V, order[:k], dtype=np.float64)
            per_k[k].append(mse(approx, exact))
    return [MSERow(k, math.fsum(per_k[k]) / len(per_k[k]), len(per_k[k])) for k in ks]


def mse_rows_to_csv(rows: Sequence[MSERow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("k", "mse", "n_queries"))
    for r in rows:
        w.writerow([r.k, repr(r.mse), r.n_queries])
    return buf.getvalue()


def top_mass(workload: HeadWorkload, fraction: float = 0.001,
             n_queries: Optional[int] = None) -> np.ndarray:
    """Softmax mass held by the top ``fraction`` of tokens, per decode query."""
    from .attention import attention_scores

    Qd = workload.decode_queries.f64
    if n_queries is not None:
        Qd = Qd[:n_queries]
    top = max(1, int(round(fraction * workload.n)))
    out = np.empty(Qd.shape[0])
    for i, q in enumerate(Qd):
        a = attention_scores(q, workload.keys).a
        out[i] = np.sort(a)[::-1][:top].sum()
    return out
