"""Embedding storage: quantization, norms, and the on-disk database formats.

Quantization is symmetric per-vector: scale = max|v_i| / (2^(b-1) - 1) and
values are rounded half away from zero, so inner products between two
quantized vectors reduce to an integer dot product times one scale product.
All-zero vectors get scale 1 by convention.

Binary DB format (little-endian)::

    magic      4s   "DRC1"
    version    u16  currently 1
    precision  u8   4, 8 (quantized) or 32 (raw float)
    reserved   u8   0
    dim        u32
    count      u32
    records    count x [id u64, scale f32, norm f32, dim packed values]

INT8 values are one signed byte each.  INT4 values are packed two per byte,
low nibble first, each nibble a two's-complement 4-bit integer.  Float DBs
(precision code 32) store dim f32 values per record and omit scale/norm.

Qrels files are tab-separated ``query_id<TAB>doc_id<TAB>relevance`` lines
with a non-negative integer relevance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MAGIC = b"DRC1"
FORMAT_VERSION = 1
FLOAT_PRECISION_CODE = 32
SUPPORTED_BITS = (4, 8)

# dims the float ingest path accepts: at most 1024, foldable in 128-row passes
FLOAT_DB_DIMS = (128, 256, 384, 512, 768, 1024)

_HEADER = struct.Struct("<4sHBBII")


def qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported precision: {bits} bits (expected 4 or 8)")


@dataclass
class QuantizedVector:
    """A symmetric per-vector quantized embedding."""

    values: np.ndarray  # (dim,) int8, magnitudes within the b-bit range
    scale: float
    bits: int

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass
class NormRecord:
    doc_id: int
    norm: float


@dataclass
class QuantizedDB:
    """Quantized document embeddings plus per-vector scales and norms."""

    bits: int
    dim: int
    ids: np.ndarray     # (count,) uint64, unique
    values: np.ndarray  # (count, dim) int8
    scales: np.ndarray  # (count,) float32
    norms: np.ndarray   # (count,) float32

    @property
    def count(self) -> int:
        return int(self.ids.shape[0])

    def vector(self, i: int) -> QuantizedVector:
        return QuantizedVector(self.values[i], float(self.scales[i]), self.bits)

    def nbytes_stored(self) -> int:
        """Payload bytes the values occupy at this precision."""
        return self.count * self.dim * self.bits // 8


@dataclass
class FloatEmbeddingDB:
    """Raw float32 embeddings as produced by an external encoder."""

    dim: int
    ids: np.ndarray      # (count,) uint64, unique
    vectors: np.ndarray  # (count, dim) float32

    def __post_init__(self):
        if self.dim not in FLOAT_DB_DIMS:
            raise ValueError(
                f"unsupported embedding dim {self.dim}; expected one of {FLOAT_DB_DIMS}")
        if self.vectors.shape != (len(self.ids), self.dim):
            raise ValueError("vectors shape does not match ids/dim")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("document ids must be unique")

    @property
    def count(self) -> int:
        return int(self.ids.shape[0])


def _quantize_rows(mat: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Quantize each row of `mat`; returns (int8 values, float32 scales).

    Shared kernel for single vectors and whole DBs so both paths are
    bit-identical.
    """
    _check_bits(bits)
    v = np.asarray(mat, dtype=np.float64)
    bad = np.argwhere(~np.isfinite(v))
    if bad.size:
        r, c = bad[0]
        raise ValueError(f"non-finite component at row {r}, index {c}")
    hi = qmax(bits)
    peak = np.max(np.abs(v), axis=1)
    huge = np.flatnonzero(peak / hi > np.finfo(np.float32).max)
    if huge.size:
        raise ValueError(
            f"row {huge[0]}, magnitude too large for a float32 scale")
    # all-zero rows quantize to zeros with scale 1
    scales = np.where(peak > 0, peak / hi, 1.0).astype(np.float32)
    # peaks below float32 resolution would underflow the stored scale to 0;
    # pin such rows to the smallest positive scale (bound still holds: their
    # magnitudes divide to well under the clip range)
    tiny = np.float32(np.nextafter(np.float32(0), np.float32(1)))
    scales = np.where((peak > 0) & (scales <= 0), tiny, scales)
    s = scales.astype(np.float64)[:, None]
    r = v / s
    q = np.trunc(r + np.copysign(0.5, r))  # round half away from zero
    # A float division landing within rounding noise of a half boundary can
    # push the reconstruction past scale/2; nudge to the strictly closer
    # neighbour so |q*s - v| <= s/2 always holds (ties keep the away-rounding).
    err = np.abs(q * s - v)
    for step in (-1.0, 1.0):
        alt = q + step
        alt_err = np.abs(alt * s - v)
        take = alt_err < err
        q = np.where(take, alt, q)
        err = np.where(take, alt_err, err)
    q = np.clip(q, -(hi + 1), hi)
    return q.astype(np.int8), scales


def quantize(v, bits: int) -> QuantizedVector:
    """Symmetric per-vector quantization to a signed `bits`-wide integer grid."""
    arr = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if arr.shape[0] != 1:
        raise ValueError("quantize expects a single vector")
    try:
        values, scales = _quantize_rows(arr, bits)
    except ValueError as e:
        # single-vector callers want the flat index, not "row 0"
        raise ValueError(str(e).replace("row 0, ", "")) from None
    return QuantizedVector(values[0], float(scales[0]), bits)


def dequantize(q: QuantizedVector) -> np.ndarray:
    """Reconstruct the real vector: values * scale."""
    return q.values.astype(np.float64) * q.scale


def compute_norm(q) -> float:
    """Euclidean norm of the integer value vector (scale applied later by
    the score calculator)."""
    values = q.values if isinstance(q, QuantizedVector) else np.asarray(q)
    v = values.astype(np.int64)
    return float(np.sqrt(float(np.dot(v, v))))


def quantize_db(fdb: FloatEmbeddingDB, bits: int) -> QuantizedDB:
    values, scales = _quantize_rows(fdb.vectors, bits)
    v = values.astype(np.int64)
    norms = np.sqrt(np.einsum("ij,ij->i", v, v).astype(np.float64))
    return QuantizedDB(
        bits=bits,
        dim=fdb.dim,
        ids=fdb.ids.astype(np.uint64),
        values=values,
        scales=scales,
        norms=norms.astype(np.float32),
    )


# ---------------------------------------------------------------------------
# INT4 nibble packing

def pack_int4(values: np.ndarray) -> np.ndarray:
    """Pack int8-held INT4 values two per byte, low nibble first."""
    v = np.asarray(values, dtype=np.int8)
    flat2d = v.reshape(v.shape[0], -1) if v.ndim == 2 else v.reshape(1, -1)
    n, d = flat2d.shape
    if d % 2:
        flat2d = np.concatenate([flat2d, np.zeros((n, 1), np.int8)], axis=1)
    nib = flat2d.astype(np.uint8) & 0x0F
    packed = nib[:, 0::2] | (nib[:, 1::2] << 4)
    return packed if v.ndim == 2 else packed[0]


def unpack_int4(packed: np.ndarray, dim: int) -> np.ndarray:
    """Inverse of pack_int4; sign-extends each nibble."""
    p = np.asarray(packed, dtype=np.uint8)
    two_d = p.ndim == 2
    p2 = p if two_d else p.reshape(1, -1)
    lo = p2 & 0x0F
    hi = p2 >> 4
    inter = np.empty((p2.shape[0], p2.shape[1] * 2), np.uint8)
    inter[:, 0::2] = lo
    inter[:, 1::2] = hi
    out = ((inter[:, :dim].astype(np.int16) ^ 8) - 8).astype(np.int8)
    return out if two_d else out[0]


# ---------------------------------------------------------------------------
# Binary persistence

def _read_header(buf: bytes, path: str) -> tuple[int, int, int]:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated payload (no complete header)")
    magic, version, code, _reserved, dim, count = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} (expected {MAGIC!r})")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{path}: version mismatch: file version {version}, supported {FORMAT_VERSION}")
    if dim == 0:
        raise FormatError(f"{path}: dim/count inconsistency (dim is 0)")
    return code, dim, count


def _values_bytes_per_record(code: int, dim: int) -> int:
    if code == 8:
        return dim
    if code == 4:
        return (dim + 1) // 2
    if code == FLOAT_PRECISION_CODE:
        return 4 * dim
    raise FormatError(f"unknown precision code {code}")


def save_db(db: QuantizedDB, path: str) -> None:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, db.bits, 0, db.dim, db.count)
    vb = _values_bytes_per_record(db.bits, db.dim)
    rec = np.dtype([("id", "<u8"), ("scale", "<f4"), ("norm", "<f4"),
                    ("values", "u1", (vb,))])
    out = np.empty(db.count, dtype=rec)
    out["id"] = db.ids
    out["scale"] = db.scales
    out["norm"] = db.norms
    if db.bits == 8:
        out["values"] = db.values.view(np.uint8)
    else:
        out["values"] = pack_int4(db.values)
    with open(path, "wb") as f:
        f.write(header)
        f.write(out.tobytes())


def load_db(path: str) -> QuantizedDB:
    with open(path, "rb") as f:
        buf = f.read()
    code, dim, count = _read_header(buf, path)
    if code == FLOAT_PRECISION_CODE:
        raise FormatError(
            f"{path}: holds float embeddings (precision code 32); use load_float_db")
    if code not in SUPPORTED_BITS:
        raise FormatError(f"{path}: unknown precision code {code}")
    vb = _values_bytes_per_record(code, dim)
    expected = _HEADER.size + count * (8 + 4 + 4 + vb)
    if len(buf) < expected:
        raise FormatError(f"{path}: truncated payload "
                          f"({len(buf)} bytes, header implies {expected})")
    if len(buf) > expected:
        raise FormatError(f"{path}: dim/count inconsistency "
                          f"({len(buf) - expected} trailing bytes)")
    rec = np.dtype([("id", "<u8"), ("scale", "<f4"), ("norm", "<f4"),
                    ("values", "u1", (vb,))])
    data = np.frombuffer(buf, dtype=rec, offset=_HEADER.size, count=count)
    if code == 8:
        values = data["values"].view(np.int8).reshape(count, dim).copy()
    else:
        values = unpack_int4(data["values"].reshape(count, vb), dim)
    return QuantizedDB(
        bits=code,
        dim=dim,
        ids=data["id"].copy(),
        values=values,
        scales=data["scale"].copy(),
        norms=data["norm"].copy(),
    )


def save_float_db(fdb: FloatEmbeddingDB, path: str) -> None:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, FLOAT_PRECISION_CODE, 0,
                          fdb.dim, fdb.count)
    rec = np.dtype([("id", "<u8"), ("values", "<f4", (fdb.dim,))])
    out = np.empty(fdb.count, dtype=rec)
    out["id"] = fdb.ids
    out["values"] = fdb.vectors
    with open(path, "wb") as f:
        f.write(header)
        f.write(out.tobytes())


def load_float_db(path: str) -> FloatEmbeddingDB:
    with open(path, "rb") as f:
        buf = f.read()
    code, dim, count = _read_header(buf, path)
    if code != FLOAT_PRECISION_CODE:
        raise FormatError(f"{path}: not a float DB (precision code {code})")
    expected = _HEADER.size + count * (8 + 4 * dim)
    if len(buf) < expected:
        raise FormatError(f"{path}: truncated payload "
                          f"({len(buf)} bytes, header implies {expected})")
    if len(buf) > expected:
        raise FormatError(f"{path}: dim/count inconsistency "
                          f"({len(buf) - expected} trailing bytes)")
    rec = np.dtype([("id", "<u8"), ("values", "<f4", (dim,))])
    data = np.frombuffer(buf, dtype=rec, offset=_HEADER.size, count=count)
    return FloatEmbeddingDB(dim=dim, ids=data["id"].copy(),
                            vectors=data["values"].copy())


def peek_precision_code(path: str) -> int:
    """Precision code from a DB header without loading the payload."""
    with open(path, "rb") as f:
        buf = f.read(_HEADER.size)
    code, _dim, _count = _read_header(buf, path)
    return code


# ---------------------------------------------------------------------------
# Qrels

def load_qrels(path: str) -> dict[int, dict[int, int]]:
    """Parse a qrels file into {query_id: {doc_id: relevance}}."""
    qrels: dict[int, dict[int, int]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                qid, did, rel = (int(p) for p in parts)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer field") from None
            if rel < 0:
                raise FormatError(f"{path}:{lineno}: negative relevance")
            qrels.setdefault(qid, {})[did] = rel
    return qrels


def save_qrels(qrels: dict[int, dict[int, int]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(qrels):
            for did in sorted(qrels[qid]):
                f.write(f"{qid}\t{did}\t{qrels[qid][did]}\n")
