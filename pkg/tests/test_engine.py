import json

import numpy as np
import pytest

from attnindex.attention import full_attention, sparse_attention, topk_oracle
from attnindex.engine import (
    EngineConfig,
    IndexConfig,
    IndexKind,
    check_entry,
    decode_run,
    decode_step,
    engine_init,
)
from attnindex.errors import EmptyContextError, ValidationError
from attnindex.vecstore import WorkloadSpec, generate_workload


def flat(**kw):
    return EngineConfig(index=IndexConfig(kind="flat"), **kw)


def test_config_validation():
    with pytest.raises(ValidationError):
        EngineConfig(top_k=0)
    with pytest.raises(ValidationError):
        EngineConfig.from_dict({"top_k": 5, "nope": 1})
    with pytest.raises(ValueError):
        IndexConfig(kind="hnsw")
    cfg = EngineConfig(index={"kind": "ivf", "nprobe": 3})
    assert cfg.index.kind is IndexKind.IVF
    assert EngineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_defaults():
    cfg = EngineConfig()
    assert (cfg.s_init, cfg.s_local, cfg.top_k) == (128, 512, 100)


def test_short_context_uses_window_only():
    ws = generate_workload(WorkloadSpec(n_ctx=600, d_model=64, d_head=16, n_heads=2, n_decode=3))
    state = engine_init(ws, EngineConfig())
    assert all(h.pool_size == 0 and h.index is None for h in state.heads)
    trace = decode_run(state, 3)
    for e in trace.entries:
        assert e.omega_ids.size == 0 and e.scanned == 0 and e.w_size == 600
        assert e.mse <= 1e-20


def test_empty_context_rejected():
    ws = generate_workload(WorkloadSpec(n_ctx=0, d_model=16, d_head=8))
    with pytest.raises(EmptyContextError):
        engine_init(ws, EngineConfig())


def test_mismatched_lengths_rejected():
    a = generate_workload(WorkloadSpec(n_ctx=50, d_model=16, d_head=8))
    b = generate_workload(WorkloadSpec(n_ctx=60, d_model=16, d_head=8))
    with pytest.raises(ValidationError):
        engine_init(a + b, EngineConfig())


def test_gqa_shares_storage_not_indexes(gqa_workloads):
    state = engine_init(gqa_workloads, EngineConfig(index=IndexConfig(k_train=16, max_degree=16)))
    h = state.heads
    assert h[0].keys is h[1].keys and h[0].values is h[1].values
    assert h[2].keys is h[3].keys and h[0].keys is not h[2].keys
    assert h[0].index is not h[1].index
    mem = state.memory()
    per_group = gqa_workloads[0].keys.nbytes + gqa_workloads[0].values.nbytes
    assert mem["kv_bytes"] == 2 * per_group
    assert mem["n_kv_groups"] == 2


def test_eight_heads_distinct_graphs():
    ws = generate_workload(WorkloadSpec(n_ctx=2048, n_heads=8, n_kv_groups=2, n_decode=1, seed=9))
    state = engine_init(ws, EngineConfig(index=IndexConfig(k_train=16, max_degree=16)))
    assert len({h.index.digest() for h in state.heads}) == 8


def test_flat_full_pool_equals_full_attention(gqa_workloads):
    pool = gqa_workloads[0].n - 640
    state = engine_init(gqa_workloads, flat(top_k=pool))
    trace = decode_run(state, 8)
    for e in trace.entries:
        ref = full_attention(gqa_workloads[e.head].decode_queries.f64[e.step],
                             gqa_workloads[e.head].keys, gqa_workloads[e.head].values,
                             dtype=np.float64)
        assert np.linalg.norm(e.output - ref) <= 1e-5 * np.linalg.norm(ref)
        assert e.mse <= 1e-10
    assert trace.summary["mean_scan_fraction"] == 1.0


def test_flat_top_k_matches_oracle_union(gqa_workloads):
    state = engine_init(gqa_workloads, flat(top_k=100))
    trace = decode_run(state, 6)
    for e in trace.entries:
        w = gqa_workloads[e.head]
        q = w.decode_queries.f64[e.step]
        h = state.heads[e.head]
        pool = h.partition.dynamic_pool
        top = pool[topk_oracle(q, w.keys.f64[pool], 100)]
        assert sorted(top.tolist()) == sorted(e.omega_ids.tolist())
        ref = sparse_attention(q, w.keys, w.values,
                               np.concatenate([h.partition.static_set, top]), dtype=np.float64)
        assert np.allclose(e.output, ref, rtol=1e-12, atol=1e-14)


def test_disjointness_and_checks(gqa_workloads):
    for kind in ("flat", "ivf", "oodgraph"):
        state = engine_init(gqa_workloads, EngineConfig(index=IndexConfig(kind=kind, nprobe=4)))
        for e in decode_run(state, 4).entries:
            h = state.heads[e.head]
            assert not np.isin(e.omega_ids, h.partition.static_set).any()
            assert np.isin(e.omega_ids, h.partition.dynamic_pool).all()
            assert e.omega_ids.size <= 100
            assert check_entry(state, e) == []


def test_check_entry_flags_violations(gqa_workloads):
    state = engine_init(gqa_workloads, flat(top_k=10))
    e = decode_run(state, 1).entries[0]
    e.omega_ids = np.array([0, 1000, 1000])
    checks = {f["check"] for f in check_entry(state, e)}
    assert {"disjointness", "omega_size"} <= checks


def test_zero_steps():
    ws = generate_workload(WorkloadSpec(n_ctx=800, d_model=32, d_head=8, n_decode=2))
    trace = decode_run(engine_init(ws, flat()), 0)
    assert trace.entries == []
    assert trace.summary["mean_mse"] == 0.0 and trace.summary["mean_scan_fraction"] == 0.0
    assert trace.to_jsonl() == ""


def test_insufficient_decode_queries():
    ws = generate_workload(WorkloadSpec(n_ctx=800, d_model=32, d_head=8, n_decode=2))
    with pytest.raises(ValidationError):
        decode_run(engine_init(ws, flat()), 3)


def test_decode_step_dimension_check(gqa_workloads):
    state = engine_init(gqa_workloads, flat())
    with pytest.raises(ValidationError):
        decode_step(state, np.ones((4, 3)))
    with pytest.raises(ValidationError):
        decode_step(state, np.ones((3, 128)))


def test_thread_count_independence(gqa_workloads):
    def run(n):
        cfg = EngineConfig(n_threads=n, record_ids=True,
                           index=IndexConfig(k_train=16, max_degree=16))
        state = engine_init(gqa_workloads, cfg)
        return decode_run(state, 8), state
    (a, sa), (b, sb) = run(1), run(8)
    assert a.summary_json() == b.summary_json()
    assert a.to_jsonl(True) == b.to_jsonl(True)
    assert json.dumps(sa.build_report(), sort_keys=True).replace('"n_threads": 1', "") == \
        json.dumps(sb.build_report(), sort_keys=True).replace('"n_threads": 8', "")


def test_trace_jsonl_fields(gqa_workloads):
    state = engine_init(gqa_workloads, flat(top_k=5))
    trace = decode_run(state, 2)
    rows = [json.loads(x) for x in trace.to_jsonl(record_ids=True).splitlines()]
    assert len(rows) == 2 * 4
    assert {"step", "head", "scanned", "omega_ids", "mse"} <= set(rows[0])
    assert "omega_ids" not in json.loads(trace.to_jsonl().splitlines()[0])
    no_ref = decode_run(engine_init(gqa_workloads, flat(top_k=5, reference=False)), 1)
    assert "mse" not in json.loads(no_ref.to_jsonl().splitlines()[0])


def test_ood_engine_close_to_flat(small_workload):
    # paired run: graph retrieval error stays within 10x of exact top-100
    flat_trace = decode_run(engine_init([small_workload], flat()), 64)
    ood_trace = decode_run(engine_init([small_workload], EngineConfig()), 64)
    assert ood_trace.summary["mean_mse"] <= 10 * max(flat_trace.summary["mean_mse"], 1e-12)


def test_build_report(gqa_workloads):
    rep = engine_init(gqa_workloads, EngineConfig(index=IndexConfig(k_train=16, max_degree=16))).build_report()
    for h in rep["heads"]:
        assert h["reachable_fraction"] == 1.0
        assert h["max_out_degree"] <= 16
        assert len(h["degree_histogram"]) == 17
    flat_rep = engine_init(gqa_workloads, flat()).build_report()
    assert all(h["note"] == "no preprocessing" and h["index_bytes"] == 0 for h in flat_rep["heads"])


@pytest.mark.slow
def test_graph_engine_scan_fraction_at_64k():
    ws = generate_workload(WorkloadSpec(n_ctx=65536, n_decode=64, seed=1))
    state = engine_init(ws, EngineConfig(reference=False))
    trace = decode_run(state, 64)
    assert trace.summary["mean_scan_fraction"] <= 0.05
    assert trace.summary["mean_omega_size"] == 100
