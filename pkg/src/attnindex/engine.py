"""Multi-head sparse decode over a static window plus retrieved tokens.

Each query head keeps the first ``s_init`` and last ``s_local`` tokens
resident (the window ``W``) and retrieves its ``top_k`` highest-scoring
keys from the rest of the context through a per-head index.  Attention
over the two disjoint sets is computed separately and merged exactly.
Query heads that share a key/value group share one copy of the keys and
values but each owns an index trained on its own prefill queries.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from .attention import (
    KVPartition,
    full_attention,
    merge,
    merge_weights,
    mse,
    partial_attention,
    static_partition,
)
from .errors import EmptyContextError, ValidationError
from .index import (
    FlatIndex,
    IVFIndex,
    OODGraphBuildParams,
    OODSearchParams,
    SearchResult,
    ood_build,
    ood_search,
)
from .vecstore import HeadWorkload, VectorSet

log = logging.getLogger(__name__)


class IndexKind(str, enum.Enum):
    FLAT = "flat"
    IVF = "ivf"
    OODGRAPH = "oodgraph"


class PatternStrategy(str, enum.Enum):
    """How the resident window is chosen.  Only the static pattern exists."""

    STATIC = "static"


@dataclass(frozen=True)
class IndexConfig:
    """Index kind plus build and search knobs for every supported kind.

    Knobs that do not apply to ``kind`` are ignored.
    """

    kind: IndexKind = IndexKind.OODGRAPH
    # IVF
    nlist: Optional[int] = None
    nprobe: int = 32
    kmeans_iters: int = 20
    # graph
    k_train: int = 32
    max_degree: int = 32
    entry_strategy: str = "medoid"
    ef_construction: int = 128
    prune_metric: str = "l2"
    support_slots: int = 8
    ef: int = 128

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", IndexKind(self.kind))
        if self.nlist is not None and self.nlist < 1:
            raise ValidationError("nlist", "must be >= 1")
        if self.nprobe < 1:
            raise ValidationError("nprobe", "must be >= 1")
        if self.kmeans_iters < 0:
            raise ValidationError("kmeans_iters", "must be >= 0")
        if self.ef < 1:
            raise ValidationError("ef", "must be >= 1")
        self.graph_params()  # validates the graph knobs

    def graph_params(self) -> OODGraphBuildParams:
        return OODGraphBuildParams(k_train=self.k_train, max_degree=self.max_degree,
                                   entry_strategy=self.entry_strategy,
                                   ef_construction=self.ef_construction,
                                   prune_metric=self.prune_metric,
                                   support_slots=self.support_slots)

    @classmethod
    def from_dict(cls, doc: Dict) -> "IndexConfig":
        _reject_unknown(cls, doc, "index")
        return cls(**doc)

    def to_dict(self) -> Dict:
        return {f.name: _plain(getattr(self, f.name)) for f in fields(self)}

    def build(self, keys: VectorSet, train_queries: VectorSet, seed: int = 0):
        if self.kind is IndexKind.FLAT:
            return FlatIndex.build(keys)
        if self.kind is IndexKind.IVF:
            nlist = None if self.nlist is None else min(self.nlist, keys.n)
            return IVFIndex.build(keys, nlist=nlist, seed=seed, iters=self.kmeans_iters)
        return ood_build(keys, train_queries, self.graph_params())

    def search(self, index, keys: VectorSet, q, k: int, mask=None) -> SearchResult:
        if self.kind is IndexKind.FLAT:
            return index.search(q, k, mask=mask)
        if self.kind is IndexKind.IVF:
            return index.search(q, k, nprobe=min(self.nprobe, index.nlist), mask=mask)
        return ood_search(index, keys, q, OODSearchParams(ef=max(self.ef, k), k=k), mask=mask)


@dataclass(frozen=True)
class EngineConfig:
    s_init: int = 128
    s_local: int = 512
    top_k: int = 100
    index: IndexConfig = field(default_factory=IndexConfig)
    n_threads: int = 1
    seed: int = 0
    pattern: PatternStrategy = PatternStrategy.STATIC
    reference: bool = True  # compute full attention per step for MSE
    record_ids: bool = False  # write omega ids into the JSONL trace

    def __post_init__(self) -> None:
        object.__setattr__(self, "pattern", PatternStrategy(self.pattern))
        if isinstance(self.index, dict):
            object.__setattr__(self, "index", IndexConfig.from_dict(self.index))
        if self.top_k < 1:
            raise ValidationError("top_k", "must be >= 1")
        if self.s_init < 0 or self.s_local < 0:
            raise ValidationError("s_init", "window sizes must be >= 0")
        if self.n_threads < 1:
            raise ValidationError("n_threads", "must be >= 1")

    @classmethod
    def from_dict(cls, doc: Dict) -> "EngineConfig":
        _reject_unknown(cls, doc, "engine")
        return cls(**doc)

    def to_dict(self) -> Dict:
        out = {f.name: _plain(getattr(self, f.name)) for f in fields(self)}
        out["index"] = self.index.to_dict()
        return out


def _plain(v):
    return v.value if isinstance(v, enum.Enum) else v


def _reject_unknown(cls, doc: Dict, section: str) -> None:
    if not isinstance(doc, dict):
        raise ValidationError(section, "expected a JSON object")
    unknown = sorted(set(doc) - {f.name for f in fields(cls)})
    if unknown:
        raise ValidationError(f"{section}.{unknown[0]}", "unknown key")


def index_nbytes(index) -> int:
    if index is None or isinstance(index, FlatIndex):
        return 0
    if isinstance(index, IVFIndex):
        return int(index.centroids.nbytes + sum(ids.nbytes for ids in index.lists))
    return int(index.indptr.nbytes + index.indices.nbytes)


@dataclass(eq=False)
class HeadState:
    head_id: int
    kv_group_id: int
    partition: KVPartition
    keys: VectorSet
    values: VectorSet
    index: object  # None when the window covers the whole context
    mask: np.ndarray  # True for resident tokens
    decode_queries: VectorSet
    build_seconds: float = 0.0

    @property
    def pool_size(self) -> int:
        return int(self.partition.dynamic_pool.size)

    def describe(self) -> Dict:
        """Deterministic summary of the head's index, for build reports."""
        out = {"head": self.head_id, "group": self.kv_group_id,
               "pool_size": self.pool_size, "window_size": int(self.partition.static_set.size),
               "index_bytes": index_nbytes(self.index)}
        idx = self.index
        if idx is None:
            out["note"] = "window covers the context; no index"
        elif isinstance(idx, FlatIndex):
            out["note"] = "no preprocessing"
        elif isinstance(idx, IVFIndex):
            sizes = [int(ids.size) for ids in idx.lists]
            out.update(nlist=idx.nlist, list_min=min(sizes), list_max=max(sizes))
        else:
            deg = idx.out_degrees()
            out.update(edges=int(idx.indices.size), max_degree=idx.max_degree,
                       max_out_degree=int(deg.max()), degree_histogram=idx.degree_histogram(),
                       entry_point=idx.entry_point,
                       reachable_fraction=float(idx.reachable().sum()) / idx.n,
                       digest=idx.digest())
        return out


@dataclass(eq=False)
class EngineState:
    config: EngineConfig
    heads: List[HeadState]
    t: int

    def memory(self) -> Dict:
        """Byte counts; keys and values are counted once per group."""
        seen = {}
        for h in self.heads:
            seen.setdefault(h.kv_group_id, h.keys.nbytes + h.values.nbytes)
        idx = sum(index_nbytes(h.index) for h in self.heads)
        return {"kv_bytes": int(sum(seen.values())), "n_kv_groups": len(seen),
                "index_bytes": int(idx), "n_heads": len(self.heads)}

    def build_report(self) -> Dict:
        # the thread count changes timing only, so it stays out of the report
        config = {k: v for k, v in self.config.to_dict().items() if k != "n_threads"}
        return {"kind": self.config.index.kind.value, "t": self.t,
                "config": config,
                "heads": [h.describe() for h in self.heads],
                "memory": self.memory()}


def engine_init(workloads: Sequence[HeadWorkload], config: Optional[EngineConfig] = None) -> EngineState:
    """Partition every head's context and build its index.

    The index covers all keys; the resident window is excluded at query
    time through a mask.  Heads are built concurrently on
    ``config.n_threads`` workers.
    """
    config = config or EngineConfig()
    if not workloads:
        raise ValidationError("workloads", "no heads")
    t = workloads[0].n
    if any(w.n != t for w in workloads):
        raise ValidationError("workloads", "all heads must share one context length")
    if t == 0:
        raise EmptyContextError("context length is 0")
    part = static_partition(t, config.s_init, config.s_local)
    mask = np.zeros(t, dtype=bool)
    mask[part.static_set] = True
    mask.setflags(write=False)

    def build(w: HeadWorkload) -> HeadState:
        start = time.perf_counter()
        index = None
        if part.dynamic_pool.size:
            index = config.index.build(w.keys, w.prefill_queries, seed=config.seed)
        secs = time.perf_counter() - start
        log.info("head %d: %s index built in %.2fs", w.head_id, config.index.kind.value, secs)
        return HeadState(w.head_id, w.kv_group_id, part, w.keys, w.values, index, mask,
                         w.decode_queries, secs)

    with ThreadPoolExecutor(max_workers=config.n_threads) as pool:
        heads = list(pool.map(build, workloads))
    return EngineState(config, heads, t)


@dataclass
class TraceEntry:
    step: int
    head: int
    omega_ids: np.ndarray
    scanned: int
    w_size: int
    pool_size: int
    output: np.ndarray
    gammas: tuple
    reference: Optional[np.ndarray] = None
    mse: Optional[float] = None

    @property
    def scan_fraction(self) -> float:
        return self.scanned / self.pool_size if self.pool_size else 0.0

    def to_dict(self, record_ids: bool = False) -> Dict:
        out = {"step": self.step, "head": self.head, "scanned": self.scanned,
               "w_size": self.w_size, "omega_size": int(self.omega_ids.size)}
        if record_ids:
            out["omega_ids"] = self.omega_ids.tolist()
        if self.mse is not None:
            out["mse"] = self.mse
        return out


def _head_step(state: EngineState, h: HeadState, q: np.ndarray, step: int) -> TraceEntry:
    cfg = state.config
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size != h.keys.d:
        raise ValidationError("q", f"head {h.head_id}: dimension {q.size} != {h.keys.d}")
    W = h.partition.static_set
    omega = np.empty(0, dtype=np.int64)
    scanned = 0
    if h.index is not None:
        k = min(cfg.top_k, h.pool_size)
        res = cfg.index.search(h.index, h.keys, q, k, mask=h.mask)
        omega, scanned = res.ids, res.scanned
    pw = partial_attention(q, h.keys, h.values, W) if W.size else None
    po = partial_attention(q, h.keys, h.values, omega) if omega.size else None
    gammas = merge_weights(pw, po)
    out = merge(pw, po, dtype=np.float64)
    ref = err = None
    if cfg.reference:
        ref = full_attention(q, h.keys, h.values, dtype=np.float64)
        err = mse(out, ref)
    return TraceEntry(step, h.head_id, omega, int(scanned), int(W.size), h.pool_size,
                      out, gammas, ref, err)


def decode_step(state: EngineState, queries, step: int = 0,
                pool: Optional[ThreadPoolExecutor] = None) -> List[TraceEntry]:
    """One decode step for every head; ``queries`` has one row per head."""
    Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != len(state.heads):
        raise ValidationError("queries", f"expected one query per head ({len(state.heads)})")
    jobs = list(zip(state.heads, Q))
    if pool is None:
        return [_head_step(state, h, q, step) for h, q in jobs]
    return list(pool.map(lambda hq: _head_step(state, hq[0], hq[1], step), jobs))


@dataclass
class DecodeTrace:
    entries: List[TraceEntry]
    summary: Dict

    def to_jsonl(self, record_ids: bool = False) -> str:
        return "".join(json.dumps(e.to_dict(record_ids), sort_keys=True) + "\n" for e in self.entries)

    def summary_json(self) -> str:
        return json.dumps(self.summary, sort_keys=True, indent=2) + "\n"


def summarize(entries: Sequence[TraceEntry], n_steps: int, n_heads: int) -> Dict:
    if not entries:
        return {"n_steps": n_steps, "n_heads": n_heads, "mean_scan_fraction": 0.0,
                "mean_mse": 0.0, "max_mse": 0.0, "mean_omega_size": 0.0,
                "mean_w_size": 0.0, "mean_tokens_per_step": 0.0}
    m = len(entries)
    errs = [e.mse for e in entries if e.mse is not None]
    return {
        "n_steps": n_steps,
        "n_heads": n_heads,
        "mean_scan_fraction": math.fsum(e.scan_fraction for e in entries) / m,
        "mean_mse": math.fsum(errs) / len(errs) if errs else 0.0,
        "max_mse": max(errs) if errs else 0.0,
        "mean_omega_size": math.fsum(e.omega_ids.size for e in entries) / m,
        "mean_w_size": math.fsum(e.w_size for e in entries) / m,
        "mean_tokens_per_step": math.fsum(e.w_size + e.omega_ids.size for e in entries) / m,
    }


def decode_run(state: EngineState, n_steps: int) -> DecodeTrace:
    """Run ``n_steps`` steps using each head's workload decode queries."""
    if n_steps < 0:
        raise ValidationError("n_steps", "must be >= 0")
    avail = min(h.decode_queries.n for h in state.heads)
    if n_steps > avail:
        raise ValidationError("n_steps", f"only {avail} decode queries available")
    entries: List[TraceEntry] = []
    with ThreadPoolExecutor(max_workers=state.config.n_threads) as pool:
        for step in range(n_steps):
            Q = np.stack([h.decode_queries.f64[step] for h in state.heads])
            entries.extend(decode_step(state, Q, step, pool))
    return DecodeTrace(entries, summarize(entries, n_steps, len(state.heads)))


def check_entry(state: EngineState, e: TraceEntry) -> List[Dict]:
    """Invariant violations of one trace entry (empty when it is sound)."""
    h = next(x for x in state.heads if x.head_id == e.head)
    bad = []
    where = {"step": e.step, "head": e.head}
    if np.intersect1d(e.omega_ids, h.partition.static_set).size:
        bad.append({**where, "check": "disjointness", "detail": "retrieved id inside the window"})
    if np.setdiff1d(e.omega_ids, h.partition.dynamic_pool).size:
        bad.append({**where, "check": "disjointness", "detail": "retrieved id outside the pool"})
    if e.omega_ids.size > state.config.top_k or np.unique(e.omega_ids).size != e.omega_ids.size:
        bad.append({**where, "check": "omega_size", "detail": "too many or duplicate ids"})
    if abs(sum(e.gammas) - 1.0) > 1e-6:
        bad.append({**where, "check": "gamma_sum", "detail": repr(sum(e.gammas))})
    return bad
