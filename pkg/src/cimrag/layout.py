"""Placement of quantized embeddings into the macro array.

A column holds 128 cells of 128 bits each (16384 bits).  An embedding of
dimension d at b bits occupies ceil(d/128) fold passes; each pass stores one
dimension value per cell, b bits wide.  Within a cell, the b bits of every
stored value occupy "slots": slot s = group*b + (b-1 - bit_index), where a
group is one (embedding, fold) pair.  Slot s of a cell is also bit-plane s of
the column, so the plane schedule and the per-cell placement share one index.

Bit remapping: high bits always go to MSB level-bits (error-free) in
row-major order.  With remapping enabled the low bits go to LSB level-bits
sorted ascending by flip probability - highest-weight low bit first - which
minimizes the expected weighted error (rearrangement inequality).  Without
remapping the low bits are placed row-major as well.

Documents are dealt breadth-first in id order - macro fastest, then column,
then slot layer - so per-core loads stay within one column of each other and
a partially filled database shortens every column's plane schedule instead
of packing a few columns full.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .device import LSB_BIT, MSB_BIT, POSITIONS, SUBARRAY_SIDE, SpatialErrorMap
from .errors import CapacityError, DataMismatchError, FormatError
from .store import QuantizedDB

LAYOUT_MAGIC = b"DRCL"
LAYOUT_VERSION = 1


@dataclass(frozen=True)
class Geometry:
    n_macros: int = 16
    columns_per_macro: int = 128
    rows_per_column: int = 128   # cells stacked in one column
    bits_per_cell: int = 128     # 64 MLC positions x 2 level bits

    @property
    def column_bits(self) -> int:
        return self.rows_per_column * self.bits_per_cell

    @property
    def total_columns(self) -> int:
        return self.n_macros * self.columns_per_macro

    @property
    def capacity_bytes(self) -> int:
        return self.total_columns * self.column_bits // 8


GEOMETRY = Geometry()


@dataclass(frozen=True)
class LogicalBitAddress:
    doc_slot: int   # global document index in the db
    dim_index: int
    bit_index: int  # 0 = LSB of the quantized value


@dataclass(frozen=True)
class PhysicalBitAddress:
    macro_id: int
    column: int
    cell_row: int
    subarray_pos: tuple[int, int]
    level_bit: int  # device.MSB_BIT or device.LSB_BIT


def sorted_assignment(probs: np.ndarray, bit_indices: np.ndarray) -> np.ndarray:
    """Pair positions with bit indices so higher-weight bits get lower
    probabilities; returns the bit index assigned to each position.

    Ties in probability keep original (row-major) position order; equal bit
    indices keep their occurrence order.
    """
    probs = np.asarray(probs, dtype=np.float64)
    bits = np.asarray(bit_indices, dtype=np.int64)
    if probs.shape != bits.shape:
        raise ValueError("probs and bit_indices must have equal length")
    order = np.argsort(probs, kind="stable")
    bits_desc = -np.sort(-bits, kind="stable")
    out = np.empty_like(bits)
    out[order] = bits_desc
    return out


def weighted_error(probs: np.ndarray, assigned_bits: np.ndarray) -> float:
    """Expected weighted error sum(p * 2^bit) of an LSB-position assignment."""
    p = np.asarray(probs, dtype=np.float64)
    b = np.asarray(assigned_bits, dtype=np.int64)
    return float(np.sum(p * np.exp2(b)))


def _row_major_positions() -> np.ndarray:
    idx = np.arange(POSITIONS)
    return np.stack([idx // SUBARRAY_SIDE, idx % SUBARRAY_SIDE], axis=1)


def remap_bits(bits: int, emap: SpatialErrorMap, remap: bool = True) -> np.ndarray:
    """Per-cell slot table: slot index -> (row, col, level_bit).

    A full cell stores 128/bits values; slot s holds bit (bits-1 - s % bits)
    of value group s // bits.  High bits land on MSB level-bits row-major.
    Low bits land on LSB level-bits: row-major when remap is off, sorted
    ascending by lsb probability when on, with bit weight descending (the
    j-th occurrence of the highest low bit takes the j-th most reliable
    position, and so on in blocks).
    """
    if bits not in (4, 8):
        raise ValueError(f"unsupported precision: {bits} bits")
    groups = 128 // bits
    half = bits // 2
    pos = _row_major_positions()
    table = np.zeros((128, 3), dtype=np.int16)

    slots = np.arange(128)
    g = slots // bits
    bd = bits - 1 - (slots % bits)
    high = bd >= half

    # positions are consumed in blocks per bit index, occurrence order inside
    # each block, so remap on/off differ only by the probability sort
    msb_rank = (bits - 1 - bd[high]) * groups + g[high]
    table[slots[high], 0] = pos[msb_rank, 0]
    table[slots[high], 1] = pos[msb_rank, 1]
    table[slots[high], 2] = MSB_BIT

    lsb_rank = (half - 1 - bd[~high]) * groups + g[~high]
    if remap:
        flat = emap.lsb.reshape(-1)
        order = np.argsort(flat, kind="stable")  # ascending, row-major ties
        dest = order[lsb_rank]
    else:
        dest = lsb_rank
    table[slots[~high], 0] = pos[dest, 0]
    table[slots[~high], 1] = pos[dest, 1]
    table[slots[~high], 2] = LSB_BIT
    return table


@dataclass
class MacroLayout:
    """Bijective assignment of (document, dimension, bit) to physical bits,
    plus the per-column plane schedule implied by the shared slot index."""

    dim: int
    bits: int
    count: int
    folds: int
    emb_per_column: int
    remap: bool
    slot_table: np.ndarray  # (128, 3) int16: slot -> (row, col, level_bit)
    geometry: Geometry = GEOMETRY

    @property
    def planes_per_column(self) -> int:
        """Capacity planes of a fully occupied column."""
        return self.emb_per_column * self.folds * self.bits

    @property
    def columns_used(self) -> int:
        """Columns holding at least one document.

        Documents spread breadth-first over all 2048 columns (macro fastest,
        then column, then slot layer), so partially filled databases shorten
        every column's plane schedule instead of packing a few columns full —
        array latency tracks db size while full-capacity behavior is
        unchanged.
        """
        return min(self.geometry.total_columns, self.count)

    def column_of(self, doc_index: int) -> tuple[int, int, int]:
        """(macro_id, column, slot) of a document."""
        g = self.geometry
        return (doc_index % g.n_macros,
                (doc_index // g.n_macros) % g.columns_per_macro,
                doc_index // g.total_columns)

    def docs_in_column(self, macro_id: int, column: int) -> np.ndarray:
        g = self.geometry
        start = column * g.n_macros + macro_id
        if start >= self.count:
            return np.zeros(0, dtype=np.int64)
        return np.arange(start, self.count, g.total_columns, dtype=np.int64)

    def occupied_columns(self, macro_id: int) -> int:
        g = self.geometry
        if self.count <= macro_id:
            return 0
        return min(g.columns_per_macro,
                   -(-(self.count - macro_id) // g.n_macros))

    def plane_of(self, slot: int, fold: int, bit_index: int) -> int:
        return (slot * self.folds + fold) * self.bits + (self.bits - 1 - bit_index)

    def active_rows(self, fold: int) -> int:
        """Rows carrying data in this fold pass (the rest are masked off)."""
        return min(self.geometry.rows_per_column, self.dim - fold * 128)

    def forward(self, addr: LogicalBitAddress) -> PhysicalBitAddress:
        if not 0 <= addr.doc_slot < self.count:
            raise ValueError(f"doc_slot {addr.doc_slot} out of range")
        if not 0 <= addr.dim_index < self.dim:
            raise ValueError(f"dim_index {addr.dim_index} out of range")
        if not 0 <= addr.bit_index < self.bits:
            raise ValueError(f"bit_index {addr.bit_index} out of range")
        macro_id, column, slot = self.column_of(addr.doc_slot)
        fold, cell_row = divmod(addr.dim_index, self.geometry.rows_per_column)
        plane = self.plane_of(slot, fold, addr.bit_index)
        r, c, lb = (int(v) for v in self.slot_table[plane])
        return PhysicalBitAddress(macro_id, column, cell_row, (r, c), lb)

    def inverse(self, phys: PhysicalBitAddress) -> LogicalBitAddress:
        match = np.flatnonzero(
            (self.slot_table[:, 0] == phys.subarray_pos[0])
            & (self.slot_table[:, 1] == phys.subarray_pos[1])
            & (self.slot_table[:, 2] == phys.level_bit))
        plane = int(match[0])
        if plane >= self.planes_per_column:
            raise ValueError("physical address not in the used capacity")
        group, rem = divmod(plane, self.bits)
        slot, fold = divmod(group, self.folds)
        bit_index = self.bits - 1 - rem
        col_global = phys.column * self.geometry.n_macros + phys.macro_id
        doc = slot * self.geometry.total_columns + col_global
        dim_index = fold * self.geometry.rows_per_column + phys.cell_row
        if doc >= self.count or dim_index >= self.dim:
            raise ValueError("physical address not in the used capacity")
        return LogicalBitAddress(doc, dim_index, bit_index)


@dataclass
class PlaneSumLUT:
    """Per (macro, column, plane) expected population counts."""

    counts: np.ndarray  # (n_macros, columns_per_macro, planes_per_column) int16


def plan_layout(db: QuantizedDB, emap: SpatialErrorMap, remap: bool = True,
                geometry: Geometry = GEOMETRY) -> MacroLayout:
    """Place a quantized db into the macro array.

    dim must be <= 128 or a multiple of 128, at most 1024.  Sub-128 dims
    occupy a full fold pass with the surplus rows masked, so their effective
    capacity is floor(128 / (folds*bits)) embeddings per column; for the
    standard multiple-of-128 dims this equals floor(16384 / (dim*bits)).
    """
    if db.bits not in (4, 8):
        raise ValueError(f"unsupported precision: {db.bits} bits")
    if db.dim < 1 or db.dim > 1024 or (db.dim > 128 and db.dim % 128):
        raise ValueError(
            f"dim {db.dim} unsupported: need dim <= 128 or a multiple of 128 up to 1024")
    folds = -(-db.dim // geometry.rows_per_column)
    emb_per_column = geometry.bits_per_cell // (folds * db.bits)
    columns_needed = -(-db.count // emb_per_column) if db.count else 0
    if columns_needed > geometry.total_columns:
        required = -(-db.count * db.dim * db.bits // 8)
        raise CapacityError(
            f"db needs {required} bytes ({columns_needed} columns) but only "
            f"{geometry.capacity_bytes} bytes ({geometry.total_columns} columns) are available")
    table = remap_bits(db.bits, emap, remap=remap)
    return MacroLayout(dim=db.dim, bits=db.bits, count=db.count, folds=folds,
                       emb_per_column=emb_per_column, remap=remap,
                       slot_table=table, geometry=geometry)


def build_written_planes(db: QuantizedDB, layout: MacroLayout) -> np.ndarray:
    """Exact bits written to every column: (n_macros, columns, planes, rows).

    Plane p of a column holds, across its 128 cells, bit (bits-1 - p % bits)
    of value group p // bits; rows past the fold's dimension chunk stay 0.
    """
    g = layout.geometry
    planes = np.zeros((g.n_macros, g.columns_per_macro,
                       layout.planes_per_column, g.rows_per_column), np.uint8)
    if db.count == 0:
        return planes
    idx = np.arange(db.count)
    macro = idx % g.n_macros
    column = (idx // g.n_macros) % g.columns_per_macro
    slot = idx // g.total_columns
    u = db.values.astype(np.uint8)
    if db.bits == 4:
        u &= 0x0F
    for fold in range(layout.folds):
        lo = fold * g.rows_per_column
        hi = min(layout.dim, lo + g.rows_per_column)
        chunk = u[:, lo:hi]
        for bd in range(db.bits):
            plane_idx = (slot * layout.folds + fold) * db.bits + (db.bits - 1 - bd)
            planes[macro, column, plane_idx, 0:hi - lo] = (chunk >> bd) & 1
    return planes


def build_plane_sums(db: QuantizedDB, layout: MacroLayout,
                   planes: np.ndarray | None = None) -> PlaneSumLUT:
    """Population count of every written plane (the offline reference the
    detection circuit compares live sums against)."""
    if planes is None:
        planes = build_written_planes(db, layout)
    return PlaneSumLUT(planes.sum(axis=3, dtype=np.int16))


def plane_probs(layout: MacroLayout, emap: SpatialErrorMap) -> np.ndarray:
    """Flip probability of each plane's addressed bit (0 for MSB planes);
    identical for every cell of every column since the slot table is shared."""
    table = layout.slot_table[:layout.planes_per_column]
    probs = emap.lsb[table[:, 0], table[:, 1]].copy()
    probs[table[:, 2] == MSB_BIT] = 0.0
    return probs


def cell_levels(planes_col: np.ndarray, slot_table: np.ndarray,
                cell_row: int) -> np.ndarray:
    """8x8 level grid of one cell, from its column's written planes; used to
    cross-check the array writer against the single-cell device path."""
    levels = np.zeros((SUBARRAY_SIDE, SUBARRAY_SIDE), np.uint8)
    for s in range(planes_col.shape[0]):
        r, c, lb = (int(v) for v in slot_table[s])
        levels[r, c] |= planes_col[s, cell_row] << lb
    return levels


# ---------------------------------------------------------------------------
# Sidecar persistence

_SIDECAR_HEADER = struct.Struct("<4sHBBIIHHHHHH32s")


def db_digest(db_path: str) -> bytes:
    h = hashlib.sha256()
    with open(db_path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.digest()


def save_layout(layout: MacroLayout, lut: PlaneSumLUT, path: str,
                digest: bytes = b"") -> None:
    g = layout.geometry
    header = _SIDECAR_HEADER.pack(
        LAYOUT_MAGIC, LAYOUT_VERSION, layout.bits, int(layout.remap),
        layout.dim, layout.count, g.n_macros, g.columns_per_macro,
        g.rows_per_column, layout.emb_per_column, layout.folds,
        layout.planes_per_column, digest.ljust(32, b"\0")[:32])
    doc_coords = np.zeros((layout.count, 3), np.uint8)
    for i in range(layout.count):
        doc_coords[i] = layout.column_of(i)
    with open(path, "wb") as f:
        f.write(header)
        f.write(layout.slot_table.astype("<i2").tobytes())
        f.write(doc_coords.tobytes())
        f.write(lut.counts.astype("<i2").tobytes())


def load_layout(path: str) -> tuple[MacroLayout, PlaneSumLUT, bytes]:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _SIDECAR_HEADER.size:
        raise FormatError(f"{path}: truncated payload (no complete header)")
    (magic, version, bits, remap, dim, count, n_macros, columns, rows,
     emb_per_column, folds, planes_cap, digest) = _SIDECAR_HEADER.unpack_from(buf)
    if magic != LAYOUT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} (expected {LAYOUT_MAGIC!r})")
    if version != LAYOUT_VERSION:
        raise FormatError(
            f"{path}: version mismatch: file version {version}, supported {LAYOUT_VERSION}")
    geometry = Geometry(n_macros=n_macros, columns_per_macro=columns,
                        rows_per_column=rows)
    off = _SIDECAR_HEADER.size
    need = off + 128 * 3 * 2 + count * 3 + n_macros * columns * planes_cap * 2
    if len(buf) != need:
        raise FormatError(f"{path}: payload size {len(buf)} does not match header "
                          f"(expected {need})")
    slot_table = np.frombuffer(buf, "<i2", count=128 * 3, offset=off).reshape(128, 3).copy()
    off += 128 * 3 * 2
    doc_coords = np.frombuffer(buf, np.uint8, count=count * 3, offset=off).reshape(count, 3)
    off += count * 3
    lut = np.frombuffer(buf, "<i2", count=n_macros * columns * planes_cap,
                        offset=off).reshape(n_macros, columns, planes_cap).copy()
    layout = MacroLayout(dim=dim, bits=bits, count=count, folds=folds,
                         emb_per_column=emb_per_column, remap=bool(remap),
                         slot_table=slot_table, geometry=geometry)
    for i in (0, count - 1) if count else ():
        if tuple(doc_coords[i]) != layout.column_of(i):
            raise FormatError(f"{path}: stored document placement is inconsistent")
    return layout, PlaneSumLUT(lut), digest


def check_layout_matches(layout: MacroLayout, db: QuantizedDB) -> None:
    if (layout.dim, layout.bits, layout.count) != (db.dim, db.bits, db.count):
        raise DataMismatchError(
            f"layout sidecar (dim={layout.dim}, bits={layout.bits}, count={layout.count}) "
            f"does not match db (dim={db.dim}, bits={db.bits}, count={db.count})")
