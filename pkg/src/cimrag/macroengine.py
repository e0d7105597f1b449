"""One macro: 128 columns x 128 cells executing bit-serial signed MAC.

Per plane the column senses one document bit from each of its 128 cells
(1 cycle), optionally compares the live population count against the
precomputed plane sum to catch sensing flips (1 cycle per check, re-sensing
on mismatch), then steps through the query bits (1 cycle each): the NOR bit
multipliers AND the document plane with a query bit plane, the carry-save
adder popcounts the 128 products, and the accumulator adds the count scaled
by both bit weights.  Sign bits carry weight -2^(b-1), the rest +2^i, which
makes the schedule an exact two's-complement inner product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import device as dv
from .layout import PlaneSumLUT, MacroLayout, plane_probs

ROWS = 128


@dataclass
class MacroConfig:
    bits: int
    detection_enabled: bool = True
    max_resense: int = 3
    columns: int = 128
    rows: int = ROWS
    bits_per_cell_array: int = 128

    def __post_init__(self):
        if (self.columns, self.rows, self.bits_per_cell_array) != (128, 128, 128):
            raise ValueError("macro geometry is fixed at 128x128 cells x 128 bits (2 Mb)")
        if self.bits not in (4, 8):
            raise ValueError(f"unsupported precision: {self.bits} bits")
        if self.max_resense < 1:
            raise ValueError("max_resense must be >= 1")


@dataclass
class QueryRegisterFile:
    """Per-row query values for one fold pass, latched for the whole
    retrieval; rows past the embedding dimension hold zero."""

    values: np.ndarray  # (128,) int8
    bits: int

    def __post_init__(self):
        if self.values.shape != (ROWS,):
            raise ValueError(f"query register file holds {ROWS} values")
        hi = (1 << (self.bits - 1)) - 1
        v = self.values.astype(np.int64)
        if v.max(initial=0) > hi or v.min(initial=0) < -(hi + 1):
            raise ValueError(f"query values exceed {self.bits}-bit range")

    @classmethod
    def from_query(cls, values, bits: int, fold: int = 0) -> "QueryRegisterFile":
        v = np.asarray(values, dtype=np.int8)
        chunk = v[fold * ROWS:(fold + 1) * ROWS]
        padded = np.zeros(ROWS, np.int8)
        padded[:chunk.shape[0]] = chunk
        return cls(padded, bits)

    def bit_plane(self, query_bit_index: int) -> np.ndarray:
        u = self.values.view(np.uint8)
        if self.bits == 4:
            u = u & 0x0F
        return ((u >> query_bit_index) & 1).astype(np.uint8)

    def bit_weight(self, query_bit_index: int) -> int:
        w = 1 << query_bit_index
        return -w if query_bit_index == self.bits - 1 else w


@dataclass
class ColumnView:
    """Everything the engine needs about one column: written planes, the
    per-plane subarray address and flip probability, and the plane sums."""

    macro_id: int
    column: int
    bits: int
    folds: int
    planes: np.ndarray       # (P, 128) uint8 written bits
    positions: np.ndarray    # (P, 3) slot table rows: (r, c, level_bit)
    probs: np.ndarray        # (P,) flip probability of the addressed bit
    lut: np.ndarray          # (P,) written population counts

    @property
    def n_planes(self) -> int:
        return int(self.planes.shape[0])

    @property
    def n_embeddings(self) -> int:
        return self.n_planes // (self.folds * self.bits)

    def fold_of_plane(self, plane_index: int) -> int:
        return (plane_index // self.bits) % self.folds


def column_view(macro_id: int, column: int, layout: MacroLayout,
                written_planes: np.ndarray, lut: PlaneSumLUT,
                emap: dv.SpatialErrorMap, n_embeddings: int | None = None) -> ColumnView:
    """Slice the written-planes array down to one column's view; trailing
    unoccupied embedding slots are dropped from the schedule."""
    if n_embeddings is None:
        n_embeddings = len(layout.docs_in_column(macro_id, column))
    p = n_embeddings * layout.folds * layout.bits
    return ColumnView(
        macro_id=macro_id, column=column, bits=layout.bits, folds=layout.folds,
        planes=written_planes[macro_id, column, :p],
        positions=layout.slot_table[:p],
        probs=plane_probs(layout, emap)[:p],
        lut=lut.counts[macro_id, column, :p].astype(np.int64),
    )


@dataclass
class ColumnCounters:
    sense_cycles: int = 0
    detect_cycles: int = 0
    compute_cycles: int = 0
    resenses: int = 0
    planes_flagged: int = 0       # planes where a popcount mismatch was seen
    planes_uncorrected: int = 0   # still mismatched after max_resense retries
    residual_bit_flips: int = 0   # ground truth: consumed bits != written bits

    @property
    def total_cycles(self) -> int:
        return self.sense_cycles + self.detect_cycles + self.compute_cycles

    def add(self, other: "ColumnCounters") -> None:
        self.sense_cycles += other.sense_cycles
        self.detect_cycles += other.detect_cycles
        self.compute_cycles += other.compute_cycles
        self.resenses += other.resenses
        self.planes_flagged += other.planes_flagged
        self.planes_uncorrected += other.planes_uncorrected
        self.residual_bit_flips += other.residual_bit_flips


_ALL_ROWS = np.arange(ROWS, dtype=np.uint64)


def load_bit_plane(col: ColumnView, plane_index: int, seed: dv.FaultSeed,
                   attempt: int = 0) -> tuple[np.ndarray, int]:
    """Sense one document bit from each of the column's 128 cells.

    Returns the sensed plane and the sense cycles consumed (1).  Every cell
    addresses the same slot, so the whole plane shares one subarray position
    and flip probability; draws are keyed per cell row.
    """
    if not 0 <= plane_index < col.n_planes:
        raise ValueError(f"plane_index {plane_index} outside the column schedule "
                         f"(0..{col.n_planes - 1})")
    r, c, lb = (int(v) for v in col.positions[plane_index])
    flips = dv.sense_flips_vec(seed, col.column, _ALL_ROWS, r, c, lb, attempt,
                               float(col.probs[plane_index]))
    return col.planes[plane_index] ^ flips, 1


def detect_and_correct(col: ColumnView, plane_index: int, plane: np.ndarray,
                       seed: dv.FaultSeed, max_resense: int
                       ) -> tuple[np.ndarray, bool, bool, int, int]:
    """Compare the plane's popcount against the stored sum, re-sensing on
    mismatch up to max_resense times.

    Returns (final plane, mismatch ever seen, still mismatched at exit,
    detection cycles, extra sense cycles).  A compensating pair of opposite
    flips preserves the popcount and passes undetected.
    """
    expected = int(col.lut[plane_index])
    detect_cycles = 0
    extra_sense = 0
    flagged = False
    attempt = 0
    while True:
        detect_cycles += 1
        if int(plane.sum(dtype=np.int64)) == expected:
            return plane, flagged, False, detect_cycles, extra_sense
        flagged = True
        if attempt >= max_resense:
            return plane, flagged, True, detect_cycles, extra_sense
        attempt += 1
        plane, cycles = load_bit_plane(col, plane_index, seed, attempt=attempt)
        extra_sense += cycles


def mac_plane(plane: np.ndarray, regs: QueryRegisterFile, query_bit_index: int,
              doc_bit_weight: int, accumulator: int,
              active_rows: int = ROWS) -> int:
    """One bit-serial MAC step: AND the document plane with a query bit
    plane, popcount, and accumulate under both bit weights.  Rows past
    active_rows belong to no dimension of the current fold and are masked."""
    qbits = regs.bit_plane(query_bit_index)
    masked = int(np.sum(plane[:active_rows] & qbits[:active_rows],
                        dtype=np.int64))
    return accumulator + masked * doc_bit_weight * regs.bit_weight(query_bit_index)


def _sense_planes(col: ColumnView, plane_idx: np.ndarray, seed: dv.FaultSeed,
                  attempt: int = 0) -> np.ndarray:
    """Attempt-`attempt` sensed bits for the selected planes at once; draw
    for draw identical to load_bit_plane (same key chain per cell)."""
    sensed = col.planes[plane_idx].copy()
    noisy = np.flatnonzero(col.probs[plane_idx] > 0)
    if noisy.size:
        pos = col.positions[plane_idx[noisy]].astype(np.uint64)
        keys = dv.mix64_vec(dv.mix64(seed.key, col.column),
                            _ALL_ROWS[None, :], pos[:, 0:1], pos[:, 1:2],
                            pos[:, 2:3], attempt)
        flips = dv.uniform01(keys) < col.probs[plane_idx[noisy], None]
        sensed[noisy] ^= flips.astype(np.uint8)
    return sensed


def _query_matrices(q: np.ndarray, bits: int, folds: int
                    ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-fold (query bit-plane matrix, query bit weights) pairs."""
    out = []
    for fold in range(folds):
        regs = QueryRegisterFile.from_query(q, bits, fold)
        qmat = np.stack([regs.bit_plane(bq) for bq in range(bits)])
        w_q = np.array([regs.bit_weight(bq) for bq in range(bits)],
                       dtype=np.int64)
        out.append((qmat.astype(np.int64), w_q))
    return out


def run_core_retrieval(cols: list[ColumnView], query_values,
                       config: MacroConfig, seed: dv.FaultSeed,
                       dim: int | None = None
                       ) -> tuple[list[np.ndarray], list[ColumnCounters]]:
    """Retrieve from every column of one core in a single batched pass.

    The columns must share one plane schedule (same precision, folds, slot
    positions and flip probabilities, as all columns of a core do); their
    plane counts may differ where the last slot layer is partially filled.
    Scores, counters and every error draw are identical to calling
    run_column_retrieval on each column in turn - the fault streams are
    keyed by address and attempt, not by evaluation order.
    """
    if not cols:
        return [], []
    bits, folds = cols[0].bits, cols[0].folds
    if config.bits != bits:
        raise ValueError("config precision does not match the column layout")
    q = np.asarray(query_values, dtype=np.int8)
    if dim is None:
        dim = q.shape[0]
    if dim > folds * ROWS:
        raise ValueError(f"query dim {dim} exceeds the column's {folds} fold passes")
    qmats = _query_matrices(q, bits, folds)

    scores: dict[int, np.ndarray] = {}
    counters: dict[int, ColumnCounters] = {}
    by_planes: dict[int, list[int]] = {}
    for i, col in enumerate(cols):
        if col.bits != bits or col.folds != folds:
            raise ValueError("columns passed to one core pass must share a schedule")
        by_planes.setdefault(col.n_planes, []).append(i)

    for n_planes, group in by_planes.items():
        head = cols[group[0]]
        for i in group[1:]:
            if not (np.array_equal(cols[i].positions, head.positions)
                    and np.array_equal(cols[i].probs, head.probs)):
                raise ValueError("columns passed to one core pass must share a schedule")
        if n_planes == 0:
            for i in group:
                scores[i] = np.zeros(0, dtype=np.int64)
                counters[i] = ColumnCounters()
            continue
        n_cols = len(group)
        columns = np.array([cols[i].column for i in group], dtype=np.uint64)
        planes = np.stack([cols[i].planes for i in group])   # (C, P, 128)
        luts = np.stack([cols[i].lut for i in group])        # (C, P)
        positions = head.positions.astype(np.uint64)
        probs = head.probs

        sensed = planes.copy()
        noisy = np.flatnonzero(probs > 0)
        if noisy.size:
            pos = positions[noisy]
            keys = dv.mix64_vec(seed.key, columns[:, None, None],
                                _ALL_ROWS[None, None, :],
                                pos[None, :, 0:1], pos[None, :, 1:2],
                                pos[None, :, 2:3], 0)
            flips = dv.uniform01(keys) < probs[noisy][None, :, None]
            sensed[:, noisy] ^= flips.astype(np.uint8)

        resense_col = np.zeros(n_cols, dtype=np.int64)
        flagged_col = np.zeros(n_cols, dtype=np.int64)
        uncorrected_col = np.zeros(n_cols, dtype=np.int64)
        if config.detection_enabled:
            popcounts = sensed.sum(axis=2, dtype=np.int64)
            ci, pi = np.nonzero(popcounts != luts)
            flagged_col = np.bincount(ci, minlength=n_cols)
            for attempt in range(1, config.max_resense + 1):
                if ci.size == 0:
                    break
                pos = positions[pi]
                keys = dv.mix64_vec(seed.key, columns[ci][:, None],
                                    _ALL_ROWS[None, :], pos[:, 0:1],
                                    pos[:, 1:2], pos[:, 2:3], attempt)
                flips = dv.uniform01(keys) < probs[pi][:, None]
                fresh = planes[ci, pi] ^ flips.astype(np.uint8)
                sensed[ci, pi] = fresh
                np.add.at(resense_col, ci, 1)
                still = fresh.sum(axis=1, dtype=np.int64) != luts[ci, pi]
                ci, pi = ci[still], pi[still]
            uncorrected_col = np.bincount(ci, minlength=n_cols)
        residual_col = (sensed ^ planes).sum(axis=(1, 2), dtype=np.int64)

        steps = np.arange(n_planes) % bits
        bd = bits - 1 - steps
        w_d = np.where(bd == bits - 1, -(1 << bd.astype(np.int64)),
                       1 << bd.astype(np.int64))
        fold_idx = (np.arange(n_planes) // bits) % folds
        contrib = np.zeros((n_cols, n_planes), dtype=np.int64)
        for fold, (qmat, w_q) in enumerate(qmats):
            sel = fold_idx == fold
            c = sensed[:, sel].astype(np.int64) @ qmat.T
            contrib[:, sel] = c @ w_q
        group_scores = (contrib * w_d[None, :]).reshape(n_cols, -1,
                                                        folds * bits).sum(axis=2)
        for j, i in enumerate(group):
            scores[i] = group_scores[j]
            det = n_planes + int(resense_col[j]) \
                if config.detection_enabled else 0
            counters[i] = ColumnCounters(
                sense_cycles=n_planes + int(resense_col[j]),
                detect_cycles=det,
                compute_cycles=n_planes * bits,
                resenses=int(resense_col[j]),
                planes_flagged=int(flagged_col[j]),
                planes_uncorrected=int(uncorrected_col[j]),
                residual_bit_flips=int(residual_col[j]),
            )
    return [scores[i] for i in range(len(cols))], \
        [counters[i] for i in range(len(cols))]


def run_column_retrieval(col: ColumnView, query_values, config: MacroConfig,
                         seed: dv.FaultSeed, dim: int | None = None
                         ) -> tuple[np.ndarray, ColumnCounters]:
    """Full bit-serial schedule over every embedding stored in the column.

    Returns the raw integer inner products (one per embedding) and the cycle
    counters.  With a zero error map the scores equal the integer dot
    product exactly.  Planes are evaluated in bulk here; the result is
    cycle-for-cycle and draw-for-draw identical to stepping load_bit_plane /
    detect_and_correct / mac_plane over the schedule.
    """
    if config.bits != col.bits:
        raise ValueError("config precision does not match the column layout")
    q = np.asarray(query_values, dtype=np.int8)
    if dim is None:
        dim = q.shape[0]
    if dim > col.folds * ROWS:
        raise ValueError(f"query dim {dim} exceeds the column's {col.folds} fold passes")
    counters = ColumnCounters()
    n_planes = col.n_planes
    if n_planes == 0:
        return np.zeros(0, dtype=np.int64), counters

    sensed = _sense_planes(col, np.arange(n_planes), seed)
    counters.sense_cycles += n_planes
    if config.detection_enabled:
        # resenses proceed in attempt waves - every still-mismatched plane is
        # redrawn in one vectorized pass - which lands on the same draws and
        # the same cycle totals as stepping detect_and_correct plane by plane
        counters.detect_cycles += n_planes
        popcounts = sensed.sum(axis=1, dtype=np.int64)
        pending = np.flatnonzero(popcounts != col.lut)
        counters.planes_flagged += int(pending.size)
        for attempt in range(1, config.max_resense + 1):
            if pending.size == 0:
                break
            redrawn = _sense_planes(col, pending, seed, attempt)
            sensed[pending] = redrawn
            counters.sense_cycles += int(pending.size)
            counters.detect_cycles += int(pending.size)
            counters.resenses += int(pending.size)
            still = redrawn.sum(axis=1, dtype=np.int64) != col.lut[pending]
            pending = pending[still]
        counters.planes_uncorrected += int(pending.size)
    counters.residual_bit_flips += int(np.sum(sensed ^ col.planes, dtype=np.int64))

    # one matmul per fold replaces the per-plane mac_plane loop: query rows
    # past the fold's dimension chunk are zero-padded, which masks them
    steps = np.arange(n_planes) % col.bits
    bd = col.bits - 1 - steps
    w_d = np.where(bd == col.bits - 1, -(1 << bd.astype(np.int64)),
                   1 << bd.astype(np.int64))
    contrib = np.zeros(n_planes, dtype=np.int64)
    fold_idx = (np.arange(n_planes) // col.bits) % col.folds
    for fold in range(col.folds):
        regs = QueryRegisterFile.from_query(q, col.bits, fold)
        qmat = np.stack([regs.bit_plane(bq) for bq in range(col.bits)])
        w_q = np.array([regs.bit_weight(bq) for bq in range(col.bits)],
                       dtype=np.int64)
        sel = fold_idx == fold
        c = sensed[sel].astype(np.int64) @ qmat.T.astype(np.int64)
        contrib[sel] = c @ w_q
    counters.compute_cycles += n_planes * col.bits
    scores = (contrib * w_d).reshape(col.n_embeddings, -1).sum(axis=1)
    return scores, counters
