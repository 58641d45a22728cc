"""Command line entry point: ``attnindex {gen,build,sweep,decode,diagnose}``.

Every command reads one JSON run configuration (``--config``), applies
``--set section.key=value`` overrides, and writes its artifacts under the
output directory.  Reports are UTF-8 with sorted JSON keys, so reruns of
the same configuration overwrite files with identical bytes.  Wall-clock
build times are the one exception and live in ``build_timing.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import diagnostics
from .attention import static_partition
from .engine import EngineConfig, IndexConfig, IndexKind, check_entry, decode_run, engine_init
from .errors import AttnIndexError, ValidationError
from .index import OODGraph, OODSearchParams, ood_search
from .vecstore import WorkloadSpec, generate_workload, load_manifest, write_manifest

log = logging.getLogger("attnindex")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


def _section(cls, doc, name):
    if not isinstance(doc, dict):
        raise ValidationError(name, "expected a JSON object")
    unknown = sorted(set(doc) - {f.name for f in fields(cls)})
    if unknown:
        raise ValidationError(f"{name}.{unknown[0]}", "unknown key")
    return cls(**doc)


@dataclass
class InputSection:
    manifest: Optional[str] = None  # load dumped vectors instead of generating


@dataclass
class EngineSection:
    s_init: int = 128
    s_local: int = 512
    top_k: int = 100
    n_steps: int = 64
    reference: bool = True
    record_ids: bool = False


@dataclass
class SweepSection:
    kinds: List[str] = field(default_factory=lambda: ["flat", "ivf", "oodgraph"])
    ivf_grid: List[int] = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64, 128, 256])
    ef_grid: List[int] = field(default_factory=lambda: [100, 128, 160, 200, 256, 384, 512])
    k: int = 100
    n_queries: Optional[int] = None
    heads: Optional[List[int]] = None  # default: every head
    mask_window: bool = False  # exclude the static window, as during decode


@dataclass
class DiagnoseSection:
    k_grid: List[int] = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024])
    sample: int = 5000
    seed: int = 0
    shrinkage: Optional[float] = None
    n_queries: Optional[int] = None


@dataclass
class OutputSection:
    directory: str = "out"
    formats: List[str] = field(default_factory=lambda: ["csv", "jsonl"])


@dataclass
class RunConfig:
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    input: InputSection = field(default_factory=InputSection)
    index: IndexConfig = field(default_factory=IndexConfig)
    engine: EngineSection = field(default_factory=EngineSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)
    output: OutputSection = field(default_factory=OutputSection)
    seed: int = 0
    n_threads: int = 1

    @classmethod
    def from_dict(cls, doc: Dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ValidationError("config", "expected a JSON object")
        unknown = sorted(set(doc) - {f.name for f in fields(cls)})
        if unknown:
            raise ValidationError(unknown[0], "unknown config section")
        cfg = cls(
            workload=WorkloadSpec.from_dict(doc.get("workload", {})),
            input=_section(InputSection, doc.get("input", {}), "input"),
            index=IndexConfig.from_dict(doc.get("index", {})),
            engine=_section(EngineSection, doc.get("engine", {}), "engine"),
            sweep=_section(SweepSection, doc.get("sweep", {}), "sweep"),
            diagnose=_section(DiagnoseSection, doc.get("diagnose", {}), "diagnose"),
            output=_section(OutputSection, doc.get("output", {}), "output"),
            seed=doc.get("seed", 0),
            n_threads=doc.get("n_threads", 1),
        )
        bad = set(cfg.output.formats) - {"csv", "jsonl"}
        if bad:
            raise ValidationError("output.formats", f"unsupported format {sorted(bad)[0]!r}")
        for kind in cfg.sweep.kinds:
            IndexKind(kind)
        if not isinstance(cfg.n_threads, int) or cfg.n_threads < 1:
            raise ValidationError("n_threads", "must be a positive integer")
        return cfg

    def to_dict(self) -> Dict:
        def plain(obj):
            if hasattr(obj, "to_dict"):
                return obj.to_dict()
            return {f.name: getattr(obj, f.name) for f in fields(obj)}
        out = {f.name: plain(getattr(self, f.name)) for f in fields(self)
               if f.name not in ("seed", "n_threads")}
        out.update(seed=self.seed, n_threads=self.n_threads)
        return out

    def engine_config(self) -> EngineConfig:
        e = self.engine
        return EngineConfig(s_init=e.s_init, s_local=e.s_local, top_k=e.top_k, index=self.index,
                            n_threads=self.n_threads, seed=self.seed, reference=e.reference,
                            record_ids=e.record_ids)


def apply_override(doc: Dict, assignment: str) -> None:
    """Apply ``section.key=value`` (or ``key=value``) in place; value is JSON or a bare string."""
    if "=" not in assignment:
        raise ValidationError("--set", f"expected KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValidationError(key, "not a config section")
    node[parts[-1]] = value


def load_config(path: Optional[str], overrides: List[str], threads: Optional[int],
                out: Optional[str]) -> RunConfig:
    doc: Dict = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise AttnIndexError(f"{path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ValidationError("config", f"{path}: invalid JSON ({e})") from None
    for a in overrides:
        apply_override(doc, a)
    if threads is not None:
        doc["n_threads"] = threads
    if out is not None:
        doc.setdefault("output", {})["directory"] = out
    return RunConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# helpers


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise AttnIndexError(f"{path}: {e.strerror}") from None
    return path


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _workloads(cfg: RunConfig):
    if cfg.input.manifest:
        log.info("loading %s", cfg.input.manifest)
        return load_manifest(cfg.input.manifest)
    log.info("generating workload n_ctx=%d heads=%d", cfg.workload.n_ctx, cfg.workload.n_heads)
    return generate_workload(cfg.workload, n_threads=cfg.n_threads)


class Checks:
    """Collects ``--verify`` failures."""

    def __init__(self, enabled: bool) -> None:
        self.enabled = enabled
        self.failures: List[Dict] = []

    def add(self, check: str, ok: bool, **detail) -> None:
        if self.enabled and not ok:
            self.failures.append({"check": check, **detail})


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, checks: Checks) -> Path:
    out = Path(cfg.output.directory)
    ws = generate_workload(cfg.workload, n_threads=cfg.n_threads)
    manifest = write_manifest(ws, out)
    if checks.enabled:
        back = load_manifest(manifest)
        for a, b in zip(ws, back):
            for role in ("prefill_queries", "keys", "values", "decode_queries"):
                checks.add("kvd1_roundtrip",
                           np.array_equal(getattr(a, role).data, getattr(b, role).data),
                           head=a.head_id, role=role)
    print(manifest)
    return manifest


def cmd_build(cfg: RunConfig, checks: Checks) -> Path:
    out = Path(cfg.output.directory)
    ws = _workloads(cfg)
    state = engine_init(ws, cfg.engine_config())
    report = state.build_report()
    out.mkdir(parents=True, exist_ok=True)
    for h, entry in zip(state.heads, report["heads"]):
        if isinstance(h.index, OODGraph):
            path = out / f"head{h.head_id:03d}.oodg"
            h.index.save(path)
            entry["path"] = path.name
            if checks.enabled:
                g = h.index
                checks.add("reachability", entry["reachable_fraction"] == 1.0, head=h.head_id)
                checks.add("max_degree", entry["max_out_degree"] <= g.max_degree, head=h.head_id)
                back = OODGraph.load(path)
                q = h.decode_queries.f64[0] if h.decode_queries.n else h.keys.f64[0]
                k = min(cfg.engine.top_k, h.pool_size)
                p = OODSearchParams(ef=max(cfg.index.ef, k), k=k)
                checks.add("serialization_roundtrip",
                           ood_search(back, h.keys, q, p, h.mask).same_as(
                               ood_search(g, h.keys, q, p, h.mask)), head=h.head_id)
        elif checks.enabled and h.index is not None and hasattr(h.index, "lists"):
            ids = np.concatenate(h.index.lists)
            checks.add("ivf_partition", np.array_equal(np.sort(ids), np.arange(h.keys.n)),
                       head=h.head_id)
    _write(out / "build_report.json", _dumps(report))
    _write(out / "build_timing.json",
           _dumps({"n_threads": cfg.n_threads,
                   "heads": [{"head": h.head_id, "build_seconds": h.build_seconds}
                             for h in state.heads]}))
    print(out / "build_report.json")
    return out / "build_report.json"


def _sweep_report(cfg: RunConfig) -> diagnostics.SweepReport:
    ws = _workloads(cfg)
    sw = cfg.sweep
    heads = [w for w in ws if sw.heads is None or w.head_id in sw.heads]
    if not heads:
        raise ValidationError("sweep.heads", "no matching heads")
    report = diagnostics.SweepReport()
    for kind in sw.kinds:
        grid = {"flat": [0], "ivf": sw.ivf_grid, "oodgraph": sw.ef_grid}[kind]
        per_head = []
        for w in heads:
            mask = None
            if sw.mask_window:
                mask = static_partition(w.n, cfg.engine.s_init, cfg.engine.s_local).static_set
            idx_cfg = IndexConfig(**{**cfg.index.to_dict(), "kind": kind})
            index = idx_cfg.build(w.keys, w.prefill_queries, seed=cfg.seed)
            if kind == "ivf":
                g = [p for p in grid if p <= index.nlist] or [index.nlist]
            else:
                g = grid
            per_head.append(diagnostics.recall_sweep(
                w, kind, g, k=sw.k, mask=mask, index=index, n_queries=sw.n_queries,
                n_threads=cfg.n_threads))
        # average over heads row by row
        for rows in zip(*(r.rows for r in per_head)):
            m = len(rows)
            report.rows.append(diagnostics.SweepRow(
                kind, rows[0].param,
                float(np.sum([r.recall_at_k for r in rows]) / m),
                float(np.sum([r.scan_fraction for r in rows]) / m),
                int(sum(r.n_queries for r in rows))))
    return report


def cmd_sweep(cfg: RunConfig, checks: Checks) -> Path:
    out = Path(cfg.output.directory)
    report = _sweep_report(cfg)
    for r in report.rows:
        checks.add("sweep_bounds", 0.0 <= r.recall_at_k <= 1.0 and 0.0 <= r.scan_fraction <= 1.0,
                   index_kind=r.index_kind, param=r.param)
        if r.index_kind == "flat":
            checks.add("flat_recall", r.recall_at_k == 1.0, param=r.param)
    if "csv" in cfg.output.formats:
        _write(out / "sweep.csv", report.to_csv())
    if "jsonl" in cfg.output.formats:
        _write(out / "sweep.jsonl", report.to_jsonl())
    print(out / "sweep.csv")
    return out / "sweep.csv"


def cmd_decode(cfg: RunConfig, checks: Checks) -> Path:
    out = Path(cfg.output.directory)
    ws = _workloads(cfg)
    state = engine_init(ws, cfg.engine_config())
    trace = decode_run(state, cfg.engine.n_steps)
    if checks.enabled:
        for e in trace.entries:
            checks.failures.extend(check_entry(state, e))
    _write(out / "decode_trace.jsonl", trace.to_jsonl(cfg.engine.record_ids))
    _write(out / "decode_summary.json", trace.summary_json())
    print(out / "decode_summary.json")
    return out / "decode_summary.json"


def cmd_diagnose(cfg: RunConfig, checks: Checks) -> Path:
    out = Path(cfg.output.directory)
    ws = _workloads(cfg)
    dg = cfg.diagnose
    gaps = []
    dist_lines = ["head,set,distance"]
    mse_lines = None
    for w in ws:
        gap = diagnostics.mahalanobis_gap(w.prefill_queries, w.keys, sample=min(dg.sample, w.n),
                                          seed=dg.seed, shrinkage=dg.shrinkage)
        gaps.append({"head": w.head_id, "group": w.kv_group_id, **gap.to_dict()})
        dist_lines += [f"{w.head_id},query,{x!r}" for x in gap.q_distances.tolist()]
        dist_lines += [f"{w.head_id},key,{x!r}" for x in gap.k_distances.tolist()]
    ks = [k for k in dg.k_grid if k <= ws[0].n]
    rows = diagnostics.mse_sweep(ws[0], ks, n_queries=dg.n_queries)
    mse_lines = diagnostics.mse_rows_to_csv(rows)
    for a, b in zip(rows, rows[1:]):
        checks.add("mse_monotone", b.mse <= a.mse + 1e-12, k=b.k)
    _write(out / "mahalanobis.json", _dumps({"heads": gaps}))
    _write(out / "mahalanobis_distances.csv", "\n".join(dist_lines) + "\n")
    _write(out / "mse_sweep.csv", mse_lines)
    print(out / "mahalanobis.json")
    return out / "mahalanobis.json"


COMMANDS = {"gen": cmd_gen, "build": cmd_build, "sweep": cmd_sweep, "decode": cmd_decode,
            "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnindex", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", metavar="PATH", help="JSON run configuration")
    p.add_argument("--threads", type=int, metavar="N", help="worker threads")
    p.add_argument("--verify", action="store_true", help="run invariant checks inline")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="override a config value, e.g. workload.n_ctx=4096")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    level = os.environ.get("ATTNINDEX_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.threads, args.out)
        checks = Checks(args.verify)
        COMMANDS[args.command](cfg, checks)
    except AttnIndexError as e:
        print(json.dumps({"error": str(e)}, sort_keys=True), file=sys.stderr)
        return 2
    if checks.failures:
        print(json.dumps({"failures": checks.failures}, sort_keys=True), file=sys.stderr)
        return 1
    return 0
