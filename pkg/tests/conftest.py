import numpy as np
import pytest

from cimrag.device import SpatialErrorMap
from cimrag.store import FloatEmbeddingDB, QuantizedDB, quantize_db


@pytest.fixture
def rng():
    return np.random.default_rng(0xC1A0)


def make_float_db(rng, count, dim, zero_rows=()):
    vecs = rng.normal(size=(count, dim)).astype(np.float32)
    for z in zero_rows:
        vecs[z] = 0.0
    return FloatEmbeddingDB(dim=dim, ids=np.arange(count, dtype=np.uint64),
                            vectors=vecs)


def make_quantized_db(rng, count, dim, bits, zero_rows=()):
    return quantize_db(make_float_db(rng, count, dim, zero_rows), bits)


def int_db(values, bits, scales=None, ids=None):
    """Build a QuantizedDB directly from integer value rows."""
    values = np.asarray(values, dtype=np.int8)
    count, dim = values.shape
    if scales is None:
        scales = np.ones(count, dtype=np.float32)
    if ids is None:
        ids = np.arange(count, dtype=np.uint64)
    norms = np.sqrt((values.astype(np.int64) ** 2).sum(axis=1)).astype(np.float32)
    return QuantizedDB(bits=bits, dim=dim, ids=np.asarray(ids, dtype=np.uint64),
                       values=values, scales=np.asarray(scales, np.float32),
                       norms=norms)


@pytest.fixture
def zero_map():
    return SpatialErrorMap.zeros()


@pytest.fixture
def moderate_map():
    from cimrag.device import generate_error_map
    return generate_error_map(rail_effect=0.02, readout_effect=0.05,
                              base=0.01, noise_seed=3)
