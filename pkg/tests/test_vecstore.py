import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from attnindex.diagnostics import mahalanobis_gap, top_mass
from attnindex.errors import FormatError, ValidationError
from attnindex.vecstore import (
    HEADER_SIZE,
    HeadWorkload,
    Role,
    VectorSet,
    WorkloadSpec,
    generate_workload,
    load_manifest,
    load_vectors,
    save_vectors,
    write_manifest,
)


def test_round_trip_small(tmp_path):
    vs = VectorSet(Role.KEY, np.arange(6, dtype=np.float32).reshape(3, 2))
    save_vectors(vs, tmp_path / "k.kvd")
    back = load_vectors(tmp_path / "k.kvd")
    assert back.role is Role.KEY
    assert back.data.tobytes() == vs.data.tobytes()


def test_header_layout_single_vector(tmp_path):
    # 4 magic + 4 version + 1 role + 3 pad + 8 n + 4 d + 4 pad
    assert HEADER_SIZE == 4 + 4 + 1 + 3 + 8 + 4 + 4 == 28
    vs = VectorSet(Role.VALUE, np.array([[1.0, -2.0, 3.5, 0.25]], dtype=np.float32))
    path = tmp_path / "v.kvd"
    save_vectors(vs, path)
    raw = path.read_bytes()
    assert len(raw) == 28 + 16
    assert raw[:4] == b"KVD1"
    assert struct.unpack_from("<I", raw, 4)[0] == 1
    assert raw[8] == 2 and raw[9:12] == b"\0\0\0"
    assert struct.unpack_from("<QI", raw, 12) == (1, 4)
    assert raw[24:28] == b"\0" * 4
    assert np.frombuffer(raw[28:], "<f4").tolist() == [1.0, -2.0, 3.5, 0.25]


def test_empty_set_round_trip(tmp_path):
    vs = VectorSet(Role.QUERY, np.zeros((0, 5), np.float32))
    save_vectors(vs, tmp_path / "e.kvd")
    back = load_vectors(tmp_path / "e.kvd")
    assert (back.n, back.d) == (0, 5)


def _corrupt(tmp_path, mutate):
    vs = VectorSet(Role.KEY, np.ones((2, 3), np.float32))
    path = tmp_path / "x.kvd"
    save_vectors(vs, path)
    raw = bytearray(path.read_bytes())
    raw = mutate(raw)
    path.write_bytes(bytes(raw))
    return path


@pytest.mark.parametrize("mutate, field", [
    (lambda r: b"XXXX" + r[4:], "magic"),
    (lambda r: r[:20], "header"),
    (lambda r: r[:-1], "payload"),
    (lambda r: r + b"\0\0\0\0", "payload"),
    (lambda r: r[:4] + struct.pack("<I", 2) + r[8:], "version"),
    (lambda r: r[:8] + b"\x07" + r[9:], "role"),
    (lambda r: r[:9] + b"\x01" + r[10:], "padding"),
    (lambda r: r[:12] + struct.pack("<QI", 2**62, 4) + r[24:], "n"),
    (lambda r: r[:20] + struct.pack("<I", 0) + r[24:], "d"),
])
def test_format_errors_name_field(tmp_path, mutate, field):
    path = _corrupt(tmp_path, mutate)
    with pytest.raises(FormatError) as exc:
        load_vectors(path)
    assert exc.value.field == field


def test_bad_magic_message(tmp_path):
    path = _corrupt(tmp_path, lambda r: b"XXXX" + r[4:])
    with pytest.raises(FormatError, match="bad magic"):
        load_vectors(path)


def test_vectorset_rejects_non_finite():
    with pytest.raises(ValidationError):
        VectorSet(Role.KEY, np.array([[1.0, np.nan]]))
    with pytest.raises(ValidationError):
        VectorSet(Role.KEY, np.zeros((3, 0)))


def test_vectorset_is_immutable():
    src = np.ones((2, 2), np.float32)
    vs = VectorSet(Role.KEY, src)
    src[0, 0] = 5.0
    assert vs.data[0, 0] == 1.0
    with pytest.raises(ValueError):
        vs.data[0, 0] = 3.0


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32,
                  st.tuples(st.integers(0, 1024), st.integers(1, 256)).filter(lambda s: s[0] * s[1] <= 40000),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=32)),
       st.sampled_from(list(Role)))
def test_round_trip_property(tmp_path_factory, arr, role):
    path = tmp_path_factory.mktemp("rt") / "a.kvd"
    vs = VectorSet(role, arr)
    save_vectors(vs, path)
    back = load_vectors(path)
    assert back.role is role
    assert back.data.shape == arr.shape
    assert back.data.tobytes() == vs.data.tobytes()


# --- workload spec -------------------------------------------------------

@pytest.mark.parametrize("kw, field", [
    (dict(n_heads=6, n_kv_groups=4), "n_kv_groups"),
    (dict(d_head=512, d_model=256), "d_head"),
    (dict(ood_strength=-1.0), "ood_strength"),
    (dict(concentration=0.0), "concentration"),
    (dict(n_ctx=-5), "n_ctx"),
    (dict(n_heads=0), "n_heads"),
])
def test_spec_validation_names_field(kw, field):
    with pytest.raises(ValidationError) as exc:
        generate_workload(WorkloadSpec(**kw))
    assert exc.value.field == field


def test_spec_from_dict_rejects_unknown():
    with pytest.raises(ValidationError) as exc:
        WorkloadSpec.from_dict({"n_ctx": 8, "bogus": 1})
    assert exc.value.field == "bogus"
    spec = WorkloadSpec(n_ctx=8, d_head=4, d_model=8)
    assert WorkloadSpec.from_dict(spec.to_dict()) == spec


def test_generate_shapes_and_invariants():
    spec = WorkloadSpec(n_ctx=64, d_model=32, d_head=8, n_heads=4, n_kv_groups=2, n_decode=5)
    ws = generate_workload(spec)
    assert [w.head_id for w in ws] == [0, 1, 2, 3]
    assert [w.kv_group_id for w in ws] == [0, 0, 1, 1]
    for w in ws:
        assert w.keys.n == w.values.n == 64
        assert w.prefill_queries.n == 64 and w.decode_queries.n == 5
        assert w.keys.d == w.prefill_queries.d == w.decode_queries.d == w.values.d == 8
        assert w.keys.role is Role.KEY and w.values.role is Role.VALUE
    assert ws[0].keys is ws[1].keys and ws[0].values is ws[1].values
    assert ws[0].keys is not ws[2].keys


def test_d_value_override():
    ws = generate_workload(WorkloadSpec(n_ctx=16, d_model=32, d_head=8, d_value=12))
    assert ws[0].values.d == 12 and ws[0].keys.d == 8


def test_empty_context():
    w = generate_workload(WorkloadSpec(n_ctx=0, d_model=16, d_head=8))[0]
    assert w.keys.n == 0 and w.values.n == 0


def test_generation_is_deterministic_across_threads():
    spec = WorkloadSpec(n_ctx=256, d_model=64, d_head=16, n_heads=4, n_kv_groups=2, seed=11)
    a = generate_workload(spec, n_threads=1)
    b = generate_workload(spec, n_threads=4)
    for x, y in zip(a, b):
        for role in ("prefill_queries", "keys", "values", "decode_queries"):
            assert getattr(x, role).data.tobytes() == getattr(y, role).data.tobytes()


def test_seed_changes_output():
    a = generate_workload(WorkloadSpec(n_ctx=32, d_model=16, d_head=8, seed=1))[0]
    b = generate_workload(WorkloadSpec(n_ctx=32, d_model=16, d_head=8, seed=2))[0]
    assert not np.array_equal(a.keys.data, b.keys.data)


def test_head_workload_validation():
    k = VectorSet(Role.KEY, np.zeros((3, 4)))
    with pytest.raises(ValidationError):
        HeadWorkload(0, 0, VectorSet(Role.QUERY, np.zeros((1, 4))), k,
                     VectorSet(Role.VALUE, np.zeros((2, 4))), VectorSet(Role.QUERY, np.zeros((1, 4))))
    with pytest.raises(ValidationError):
        HeadWorkload(0, 0, VectorSet(Role.QUERY, np.zeros((1, 5))), k,
                     VectorSet(Role.VALUE, np.zeros((3, 4))), VectorSet(Role.QUERY, np.zeros((1, 4))))


def test_ood_strength_zero_matches_key_distribution():
    w = generate_workload(WorkloadSpec(n_ctx=8192, ood_strength=0.0, seed=2))[0]
    gap = mahalanobis_gap(w.prefill_queries, w.keys, sample=2000, seed=0)
    assert 0.9 <= gap.ratio <= 1.1


def test_default_ood_strength_opens_gap():
    # spec example: seed 7, 65536 tokens, d_head 128
    w = generate_workload(WorkloadSpec(n_ctx=65536, seed=7, ood_strength=2.0, d_head=128, n_decode=64))[0]
    gap = mahalanobis_gap(w.prefill_queries, w.keys, sample=5000, seed=0)
    assert gap.ratio >= 2.0


def test_default_concentration_is_sparse():
    # top 0.1% of the context carries >= 99% of the softmax mass
    w = generate_workload(WorkloadSpec(n_ctx=65536, seed=0, n_decode=64))[0]
    mass = top_mass(w, 0.001)
    assert np.median(mass) >= 0.99
    assert np.percentile(mass, 10) >= 0.99


# --- manifest -----------------------------------------------------------

def test_manifest_minimal(tmp_path):
    ws = generate_workload(WorkloadSpec(n_ctx=16, d_model=16, d_head=8, n_decode=4))
    path = write_manifest(ws, tmp_path)
    doc = json.loads(path.read_text())
    assert len(doc["files"]) == 4
    assert sorted(f["role"] for f in doc["files"]) == ["key", "query", "query", "value"]
    assert {"n_heads", "n_kv_groups", "d_head", "files", "note"} <= set(doc)
    assert len(list(tmp_path.glob("*.kvd"))) == 4


def test_manifest_gqa_counts(tmp_path):
    spec = WorkloadSpec(n_ctx=32, d_model=32, d_head=8, n_heads=8, n_kv_groups=2, n_decode=2)
    path = write_manifest(generate_workload(spec), tmp_path)
    files = json.loads(path.read_text())["files"]
    query_heads = {f["head"] for f in files if f["role"] == "query"}
    assert len(query_heads) == 8
    assert sum(f["role"] == "key" for f in files) == 2
    assert sum(f["role"] == "value" for f in files) == 2


def test_manifest_round_trip_shares_kv(tmp_path):
    spec = WorkloadSpec(n_ctx=32, d_model=32, d_head=8, n_heads=4, n_kv_groups=2, n_decode=3)
    ws = generate_workload(spec)
    back = load_manifest(write_manifest(ws, tmp_path))
    assert back[0].keys is back[1].keys and back[2].values is back[3].values
    for a, b in zip(ws, back):
        assert (a.head_id, a.kv_group_id) == (b.head_id, b.kv_group_id)
        for role in ("prefill_queries", "keys", "values", "decode_queries"):
            assert getattr(a, role).data.tobytes() == getattr(b, role).data.tobytes()


def test_manifest_missing_group(tmp_path):
    ws = generate_workload(WorkloadSpec(n_ctx=8, d_model=8, d_head=4))
    path = write_manifest(ws, tmp_path)
    doc = json.loads(path.read_text())
    doc["files"] = [f for f in doc["files"] if f["role"] != "value"]
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_manifest(path)
