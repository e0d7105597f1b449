"""Storage cell model: an 8x8 multi-level ReRAM subarray cached one bit at a
time into an SRAM bit, read through a probabilistic sensing process.

Each subarray position holds a 2-bit level (MSB weight 2, LSB weight 1).
Sensing the MSB is always correct; sensing an LSB flips with the probability
recorded for that position in a SpatialErrorMap.  All randomness comes from a
counter-style hash of (seed, address, attempt), so outcomes are reproducible
and independent of the order in which cells, columns, or cores are simulated.
Writes are error-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError

SUBARRAY_SIDE = 8
POSITIONS = SUBARRAY_SIDE * SUBARRAY_SIDE  # 64 MLC positions per cell
BITS_PER_CELL = 2 * POSITIONS              # 128 logical bits per cell

LSB_BIT = 0
MSB_BIT = 1

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _splitmix(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def mix64(key: int, *fields: int) -> int:
    """Chain additional integers into a 64-bit stream key."""
    h = key & _MASK64
    for f in fields:
        h = _splitmix(h ^ (int(f) & _MASK64))
    return h


def _splitmix_vec(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z + np.uint64(_GOLDEN)) & np.uint64(_MASK64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def mix64_vec(key: int, *fields) -> np.ndarray:
    """Vectorized mix64; fields may be scalars or broadcastable uint64 arrays.

    Bit-identical to chained mix64 calls on each element.
    """
    h = np.asarray(np.uint64(key & _MASK64))
    for f in fields:
        fa = np.asarray(f, dtype=np.uint64)
        h = _splitmix_vec(np.bitwise_xor(h, fa))
    return h


def uniform01(h) -> np.ndarray:
    """Map 64-bit hashes to floats in [0, 1) using the top 53 bits."""
    ha = np.asarray(h, dtype=np.uint64)
    return (ha >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


@dataclass(frozen=True)
class FaultSeed:
    """Identifies one deterministic fault-injection stream.

    The base key mixes global_seed, core_id, macro_pass and query_id;
    callers derive per-cell streams with child() and the sensing ops mix in
    the subarray address and attempt counter.  Equal seeds and addresses
    therefore give equal flip outcomes in any simulation order.
    """

    global_seed: int
    core_id: int = 0
    macro_pass: int = 0
    query_id: int = 0
    _key: int | None = field(default=None, repr=False)

    @property
    def key(self) -> int:
        if self._key is not None:
            return self._key
        return mix64(self.global_seed, self.core_id, self.macro_pass,
                     self.query_id)

    def child(self, *fields: int) -> "FaultSeed":
        return replace(self, _key=mix64(self.key, *fields))


@dataclass
class SpatialErrorMap:
    """Per-position LSB flip probabilities for the 8x8 subarray.

    MSB senses never flip (probability pinned to 0 for every position).
    """

    lsb: np.ndarray  # (8, 8) float64 in [0, 1]

    def __post_init__(self):
        self.lsb = np.asarray(self.lsb, dtype=np.float64)
        if self.lsb.shape != (SUBARRAY_SIDE, SUBARRAY_SIDE):
            raise ValueError(f"error map must be 8x8, got {self.lsb.shape}")
        if np.any(~np.isfinite(self.lsb)) or np.any(self.lsb < 0) or np.any(self.lsb > 1):
            raise ValueError("error map probabilities must lie in [0, 1]")

    @property
    def msb_prob(self) -> float:
        return 0.0

    @classmethod
    def zeros(cls) -> "SpatialErrorMap":
        return cls(np.zeros((SUBARRAY_SIDE, SUBARRAY_SIDE)))

    @classmethod
    def uniform(cls, p: float) -> "SpatialErrorMap":
        return cls(np.full((SUBARRAY_SIDE, SUBARRAY_SIDE), float(p)))

    def scaled(self, factor: float) -> "SpatialErrorMap":
        if factor < 0:
            raise ValueError("scale factor must be non-negative")
        return SpatialErrorMap(np.clip(self.lsb * factor, 0.0, 1.0))

    def prob(self, row: int, col: int, level_bit: int) -> float:
        if level_bit == MSB_BIT:
            return 0.0
        return float(self.lsb[row, col])

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("# 8x8 LSB flip probability map (row-major)\n")
            for r in range(SUBARRAY_SIDE):
                f.write(" ".join(f"{p:.10g}" for p in self.lsb[r]) + "\n")

    @classmethod
    def load(cls, path: str) -> "SpatialErrorMap":
        rows = []
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                text = line.strip()
                if not text or text.startswith("#"):
                    continue
                parts = text.split()
                if len(parts) != SUBARRAY_SIDE:
                    raise FormatError(
                        f"{path}:{lineno}: expected 8 probabilities, got {len(parts)}")
                try:
                    rows.append([float(p) for p in parts])
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: non-numeric probability") from None
        if len(rows) != SUBARRAY_SIDE:
            raise FormatError(f"{path}: expected 8 map rows, got {len(rows)}")
        try:
            return cls(np.array(rows))
        except ValueError as e:
            raise FormatError(f"{path}: {e}") from None


def generate_error_map(rail_effect: float, readout_effect: float, base: float,
                       noise_seed: int | None = None) -> SpatialErrorMap:
    """Synthesize a map with the observed spatial trend: positions near a
    VSS rail (outer columns) read more reliably, positions far from the
    readout circuit (low column index) read worse.

    With noise_seed set, each probability is jittered by up to +/-5% of its
    deterministic value; a zero deterministic value stays exactly zero.
    """
    for name, val in (("rail_effect", rail_effect),
                      ("readout_effect", readout_effect), ("base", base)):
        if val < 0:
            raise ValueError(f"{name} must be non-negative")
    cols = np.arange(SUBARRAY_SIDE, dtype=np.float64)
    det = (base
           + rail_effect * np.minimum(cols, 7 - cols) / 3.5
           + readout_effect * (7 - cols) / 7.0)
    grid = np.tile(det, (SUBARRAY_SIDE, 1))
    if noise_seed is not None:
        r_idx, c_idx = np.meshgrid(np.arange(SUBARRAY_SIDE),
                                   np.arange(SUBARRAY_SIDE), indexing="ij")
        u = uniform01(mix64_vec(mix64(noise_seed), r_idx.astype(np.uint64),
                                c_idx.astype(np.uint64)))
        grid = grid * (1.0 + 0.05 * (2.0 * u - 1.0))
    return SpatialErrorMap(np.clip(grid, 0.0, 1.0))


@dataclass
class SubarrayCell:
    """One 8x8 MLC subarray plus its 1-bit SRAM readout cache."""

    levels: np.ndarray = field(
        default_factory=lambda: np.zeros((SUBARRAY_SIDE, SUBARRAY_SIDE), np.uint8))
    cached_bit: int | None = None
    cached_addr: tuple[int, int, int] | None = None


def write_subarray(cell: SubarrayCell, bits, mapping) -> SubarrayCell:
    """Write 128 logical bits into the cell through a position mapping.

    mapping is a sequence of 128 (row, col, level_bit) triples covering all
    64 positions x 2 level bits exactly once; writes are error-free.
    """
    b = np.asarray(bits, dtype=np.uint8)
    if b.shape != (BITS_PER_CELL,):
        raise ValueError(f"expected {BITS_PER_CELL} bits, got shape {b.shape}")
    m = np.asarray(mapping, dtype=np.int64)
    if m.shape != (BITS_PER_CELL, 3):
        raise ValueError("mapping must hold 128 (row, col, level_bit) triples")
    slots = {(int(r), int(c), int(lb)) for r, c, lb in m}
    if len(slots) != BITS_PER_CELL:
        raise ValueError("mapping must cover all 64 positions x 2 level bits bijectively")
    levels = np.zeros((SUBARRAY_SIDE, SUBARRAY_SIDE), np.uint8)
    np.bitwise_or.at(levels, (m[:, 0], m[:, 1]),
                     (b << m[:, 2].astype(np.uint8)).astype(np.uint8))
    cell.levels = levels
    return cell


def _check_addr(row: int, col: int, level_bit: int) -> None:
    if not (0 <= row < SUBARRAY_SIDE and 0 <= col < SUBARRAY_SIDE):
        raise ValueError(f"subarray address ({row}, {col}) out of range")
    if level_bit not in (LSB_BIT, MSB_BIT):
        raise ValueError(f"level_bit must be {LSB_BIT} (LSB) or {MSB_BIT} (MSB)")


def stored_bit(cell: SubarrayCell, row: int, col: int, level_bit: int) -> int:
    _check_addr(row, col, level_bit)
    return int((cell.levels[row, col] >> level_bit) & 1)


def sense_bit(cell: SubarrayCell, row: int, col: int, level_bit: int,
              emap: SpatialErrorMap, seed: FaultSeed, attempt: int = 0) -> int:
    """Probabilistic read of one stored bit; the result lands in the SRAM cache.

    Callers sequence MSB senses before LSB senses of the same position within
    a load pass; the flip model itself is order-independent.
    """
    _check_addr(row, col, level_bit)
    stored = stored_bit(cell, row, col, level_bit)
    p = emap.prob(row, col, level_bit)
    flip = 0
    if p > 0.0:
        u = float(uniform01(mix64(seed.key, row, col, level_bit, attempt)))
        flip = int(u < p)
    out = stored ^ flip
    cell.cached_bit = out
    cell.cached_addr = (row, col, level_bit)
    return out


def resense_bit(cell: SubarrayCell, row: int, col: int, level_bit: int,
                emap: SpatialErrorMap, seed: FaultSeed, attempt: int) -> int:
    """Fresh draw for the same address; attempt >= 1 separates the retrial
    stream from the original sense."""
    if attempt < 1:
        raise ValueError("resense attempt counter must be >= 1")
    return sense_bit(cell, row, col, level_bit, emap, seed, attempt=attempt)


def sense_flips_vec(seed: FaultSeed, column: int, cell_rows: np.ndarray,
                    row: int, col: int, level_bit: int, attempt: int,
                    prob: float) -> np.ndarray:
    """Flip mask for one bit address sensed across many cells of a column.

    Matches sense_bit on seed.child(column, cell_row) element for element;
    the macro engine uses this to sense a whole 128-bit plane in one call.
    """
    if prob <= 0.0:
        return np.zeros(cell_rows.shape, dtype=bool)
    keys = mix64_vec(seed.key, column, cell_rows.astype(np.uint64),
                     row, col, level_bit, attempt)
    return uniform01(keys) < prob
