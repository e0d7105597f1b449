"""End-to-end retrieval over the stored arrays.

Scores come back from the column engine as raw integer inner products; this
module turns them into comparable similarities (scaled inner product or
integer-norm cosine), runs the hierarchical top-k (a local top-k per core,
then a global merge), and drives a whole query across every occupied column
of every core.  A flat numpy reference path is provided for verification:
with a zero error map the hierarchical result must match it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import device as dv
from .errors import DataMismatchError, FormatError
from .layout import (PlaneSumLUT, MacroLayout, build_plane_sums, build_written_planes,
                     plan_layout, plane_probs)
from .macroengine import MacroConfig, ColumnView, run_core_retrieval
from .perf import CoreCounters, QueryCounters
from .store import QuantizedDB, QuantizedVector, compute_norm

MODE_MIPS = "mips"
MODE_COSINE = "cosine"
MODES = (MODE_MIPS, MODE_COSINE)


def compute_query_norm(values) -> float:
    """Integer L2 norm of the quantized query (same rule as stored norms)."""
    return compute_norm(values)


def score(raw_ip: int, q_scale: float, d_scale: float,
          q_norm: float, d_norm: float, mode: str) -> float:
    """Turn one raw integer inner product into the requested similarity.

    MIPS rescales by both quantization scales; cosine divides by the two
    integer norms (the scales cancel).  Zero norms make cosine undefined.
    """
    if mode == MODE_MIPS:
        return float(raw_ip) * q_scale * d_scale
    if mode == MODE_COSINE:
        if q_norm == 0.0:
            raise ValueError("cosine is undefined for an all-zero query")
        if d_norm == 0.0:
            raise ValueError("cosine is undefined for an all-zero document")
        return float(raw_ip) / (q_norm * d_norm)
    raise ValueError(f"unknown scoring mode '{mode}' (expected one of {MODES})")


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: int
    raw_score: int
    score: float


def _rank_key(entry: ScoredDoc):
    # descending score; ties broken by ascending doc id so results are
    # reproducible no matter which core produced them
    return (-entry.score, entry.doc_id)


def local_topk(entries: list[ScoredDoc], k: int) -> list[ScoredDoc]:
    if k < 1:
        raise ValueError("k must be at least 1")
    return sorted(entries, key=_rank_key)[:k]


def global_topk(per_core: list[list[ScoredDoc]], k: int) -> list[ScoredDoc]:
    merged: list[ScoredDoc] = []
    for entries in per_core:
        merged.extend(entries)
    return local_topk(merged, k)


@dataclass
class RetrievalResult:
    query_id: int
    mode: str
    k: int
    entries: list[ScoredDoc]
    all_scores: dict[int, float] | None = None  # doc_id -> score, if kept

    @property
    def doc_ids(self) -> list[int]:
        return [e.doc_id for e in self.entries]


@dataclass
class RetrievalSystem:
    """A quantized db written into the arrays, ready to serve queries."""

    db: QuantizedDB
    layout: MacroLayout
    planes: np.ndarray      # (16, 128, 128, 128) written bit planes
    lut: PlaneSumLUT
    emap: dv.SpatialErrorMap
    probs: np.ndarray = field(init=False)  # (128,) per-slot flip probability

    def __post_init__(self):
        self.probs = plane_probs(self.layout, self.emap)

    @classmethod
    def build(cls, db: QuantizedDB, emap: dv.SpatialErrorMap,
              remap: bool = True) -> "RetrievalSystem":
        layout = plan_layout(db, emap, remap=remap)
        planes = build_written_planes(db, layout)
        lut = build_plane_sums(db, layout, planes=planes)
        return cls(db=db, layout=layout, planes=planes, lut=lut, emap=emap)

    @classmethod
    def assemble(cls, db: QuantizedDB, layout: MacroLayout, lut: PlaneSumLUT,
                 emap: dv.SpatialErrorMap) -> "RetrievalSystem":
        """Rebuild the written planes from db + a previously planned layout
        (writes are deterministic) and verify the stored plane sums agree."""
        planes = build_written_planes(db, layout)
        expect = build_plane_sums(db, layout, planes=planes)
        if not np.array_equal(expect.counts, lut.counts):
            raise DataMismatchError(
                "stored plane sums do not match the database contents")
        return cls(db=db, layout=layout, planes=planes, lut=lut, emap=emap)

    def column(self, macro_id: int, column: int) -> ColumnView:
        p = len(self.layout.docs_in_column(macro_id, column)) \
            * self.layout.folds * self.layout.bits
        return ColumnView(
            macro_id=macro_id, column=column, bits=self.layout.bits,
            folds=self.layout.folds,
            planes=self.planes[macro_id, column, :p],
            positions=self.layout.slot_table[:p],
            probs=self.probs[:p],
            lut=self.lut.counts[macro_id, column, :p].astype(np.int64),
        )


def run_query(system: RetrievalSystem, query: QuantizedVector, mode: str,
              k: int, seed: int, query_id: int = 0, detection: bool = True,
              max_resense: int = 3, core_order: list[int] | None = None,
              keep_all_scores: bool = False
              ) -> tuple[RetrievalResult, QueryCounters]:
    """Run one query through every core and column.

    Error draws are keyed by (seed, core, query_id, cell address, attempt),
    so the same inputs always reproduce the same result and the order cores
    are visited in (core_order) cannot change anything.
    """
    db, layout = system.db, system.layout
    if mode not in MODES:
        raise ValueError(f"unknown scoring mode '{mode}' (expected one of {MODES})")
    if k < 1:
        raise ValueError("k must be at least 1")
    if query.bits != db.bits:
        raise ValueError(
            f"query precision INT{query.bits} does not match the database's "
            f"INT{db.bits}")
    if query.values.shape[0] != db.dim:
        raise ValueError(
            f"query dimension {query.values.shape[0]} does not match the "
            f"database's {db.dim}")
    q_norm = compute_query_norm(query.values)
    if mode == MODE_COSINE and q_norm == 0.0:
        raise ValueError("cosine is undefined for an all-zero query")

    config = MacroConfig(bits=db.bits, detection_enabled=detection,
                         max_resense=max_resense)
    order = list(range(layout.geometry.n_macros)) if core_order is None \
        else list(core_order)
    if sorted(order) != list(range(layout.geometry.n_macros)):
        raise ValueError("core_order must be a permutation of all core ids")

    per_core: dict[int, list[ScoredDoc]] = {}
    counters: dict[int, CoreCounters] = {}
    all_scores: dict[int, float] = {}
    skipped = 0
    for core_id in order:
        core_seed = dv.FaultSeed(global_seed=seed, core_id=core_id,
                                 macro_pass=0, query_id=query_id)
        occupied = layout.occupied_columns(core_id)
        cc = CoreCounters(core_id=core_id, occupied_columns=occupied)
        candidates: list[ScoredDoc] = []
        worst = -1
        views = [system.column(core_id, column) for column in range(occupied)]
        raws, ctrs = run_core_retrieval(views, query.values, config,
                                        core_seed, dim=db.dim)
        for column, (raw, ctr) in enumerate(zip(raws, ctrs)):
            cc.sense_events += ctr.sense_cycles
            cc.detect_events += ctr.detect_cycles
            cc.compute_events += ctr.compute_cycles
            cc.resenses += ctr.resenses
            cc.planes_flagged += ctr.planes_flagged
            cc.planes_uncorrected += ctr.planes_uncorrected
            cc.residual_bit_flips += ctr.residual_bit_flips
            if ctr.total_cycles > worst:
                worst = ctr.total_cycles
                cc.lat_sense = ctr.sense_cycles
                cc.lat_detect = ctr.detect_cycles
                cc.lat_compute = ctr.compute_cycles
            docs = layout.docs_in_column(core_id, column)
            for slot, doc in enumerate(docs):
                d_norm = float(db.norms[doc])
                if mode == MODE_COSINE and d_norm == 0.0:
                    skipped += 1
                    continue
                s = score(int(raw[slot]), query.scale, float(db.scales[doc]),
                          q_norm, d_norm, mode)
                candidates.append(ScoredDoc(doc_id=int(db.ids[doc]),
                                            raw_score=int(raw[slot]), score=s))
        cc.scores += len(candidates)
        per_core[core_id] = local_topk(candidates, k)
        counters[core_id] = cc
        if keep_all_scores:
            all_scores.update((e.doc_id, e.score) for e in candidates)

    entries = global_topk([per_core[m] for m in sorted(per_core)], k)
    result = RetrievalResult(query_id=query_id, mode=mode, k=k, entries=entries,
                             all_scores=all_scores if keep_all_scores else None)
    qcounters = QueryCounters(cores=[counters[m] for m in sorted(counters)],
                              k=k, norm_ops=1, zero_norm_skipped=skipped)
    return result, qcounters


# ---------------------------------------------------------------------------
# Reference paths (no layout, no engine): flat matmul scoring


def oracle_raw_scores(db: QuantizedDB, query_values) -> np.ndarray:
    """Exact integer inner products of the query against every stored row."""
    q = np.asarray(query_values, dtype=np.int64)
    return db.values.astype(np.int64) @ q


def oracle_all_scores(db: QuantizedDB, query: QuantizedVector,
                      mode: str) -> dict[int, float]:
    """doc_id -> error-free score for every scoreable document."""
    q_norm = compute_query_norm(query.values)
    if mode == MODE_COSINE and q_norm == 0.0:
        raise ValueError("cosine is undefined for an all-zero query")
    raw = oracle_raw_scores(db, query.values)
    out: dict[int, float] = {}
    for i in range(db.count):
        d_norm = float(db.norms[i])
        if mode == MODE_COSINE and d_norm == 0.0:
            continue
        out[int(db.ids[i])] = score(int(raw[i]), query.scale,
                                    float(db.scales[i]), q_norm, d_norm, mode)
    return out


def oracle_result(db: QuantizedDB, query: QuantizedVector, mode: str, k: int,
                  query_id: int = 0) -> RetrievalResult:
    """Flat brute-force retrieval with identical scoring and tie rules."""
    q_norm = compute_query_norm(query.values)
    if mode == MODE_COSINE and q_norm == 0.0:
        raise ValueError("cosine is undefined for an all-zero query")
    raw = oracle_raw_scores(db, query.values)
    entries = []
    for i in range(db.count):
        d_norm = float(db.norms[i])
        if mode == MODE_COSINE and d_norm == 0.0:
            continue
        s = score(int(raw[i]), query.scale, float(db.scales[i]),
                  q_norm, d_norm, mode)
        entries.append(ScoredDoc(doc_id=int(db.ids[i]),
                                 raw_score=int(raw[i]), score=s))
    return RetrievalResult(query_id=query_id, mode=mode, k=k,
                           entries=local_topk(entries, k))


def float_topk(vectors: np.ndarray, ids: np.ndarray, query: np.ndarray,
               mode: str, k: int) -> list[tuple[int, float]]:
    """Full-precision baseline ranking (float math, same tie rules)."""
    v = np.asarray(vectors, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    ips = v @ q
    if mode == MODE_MIPS:
        scores = ips
        keep = np.ones(len(v), dtype=bool)
    elif mode == MODE_COSINE:
        qn = float(np.linalg.norm(q))
        if qn == 0.0:
            raise ValueError("cosine is undefined for an all-zero query")
        dn = np.linalg.norm(v, axis=1)
        keep = dn > 0.0
        scores = np.where(keep, ips / np.where(keep, dn, 1.0) / qn, -np.inf)
    else:
        raise ValueError(f"unknown scoring mode '{mode}' (expected one of {MODES})")
    pairs = [(int(ids[i]), float(scores[i])) for i in np.flatnonzero(keep)]
    pairs.sort(key=lambda p: (-p[1], p[0]))
    return pairs[:k]


def precision_at_k(ranked_ids: list[int], relevant: set[int], k: int) -> float:
    """Fraction of the first k retrieved ids that are relevant."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return len(set(ranked_ids[:k]) & relevant) / k


# ---------------------------------------------------------------------------
# Results file format: one line per retrieved doc, tab separated
# (query_id, rank starting at 1, doc_id, score), no header


def save_results(path: str, results: list[RetrievalResult]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for res in results:
            for rank, e in enumerate(res.entries, 1):
                f.write(f"{res.query_id}\t{rank}\t{e.doc_id}\t{e.score:.9g}\n")


def load_results(path: str) -> dict[int, list[tuple[int, float]]]:
    """Read a results file back as query_id -> [(doc_id, score)] in rank
    order, validating the rank sequence."""
    out: dict[int, list[tuple[int, float]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            text = line.rstrip("\n")
            if not text:
                continue
            parts = text.split("\t")
            if len(parts) != 4:
                raise FormatError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, "
                    f"got {len(parts)}")
            try:
                qid, rank, doc_id = int(parts[0]), int(parts[1]), int(parts[2])
                sc = float(parts[3])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric field") from None
            ranks = out.setdefault(qid, [])
            if rank != len(ranks) + 1:
                raise FormatError(
                    f"{path}:{lineno}: rank {rank} out of sequence for "
                    f"query {qid} (expected {len(ranks) + 1})")
            ranks.append((doc_id, sc))
    return out
