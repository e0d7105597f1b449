#!/usr/bin/env python3
"""Reproduce the headline latency/energy numbers on a full 4 MB database.

Builds a random database that exactly fills the 16-core array (8192 docs,
dim 512, INT8 by default), runs one real simulated query with the default
calibrated parameters, and prints the per-query report, plus analytic
projections for a half-size and a 1.90 MiB database to show linear scaling.
"""

import argparse
import time

import numpy as np

from cimrag.device import SpatialErrorMap
from cimrag.perf import (DbShape, PerfParams, account, default_params,
                         report_table, shape_counters)
from cimrag.retrieval import RetrievalSystem, run_query
from cimrag.store import FloatEmbeddingDB, quantize, quantize_db


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=8192)
    ap.add_argument("--dim", type=int, default=512)
    ap.add_argument("--precision", choices=("int4", "int8"), default="int8")
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None,
                    help="performance parameter file (default: built-in)")
    args = ap.parse_args()
    bits = {"int4": 4, "int8": 8}[args.precision]
    params = default_params() if args.config is None \
        else PerfParams.load(args.config)

    rng = np.random.default_rng(args.seed)
    vecs = rng.normal(size=(args.count, args.dim)).astype(np.float32)
    fdb = FloatEmbeddingDB(dim=args.dim,
                           ids=np.arange(args.count, dtype=np.uint64),
                           vectors=vecs)
    db = quantize_db(fdb, bits)
    system = RetrievalSystem.build(db, SpatialErrorMap.zeros())
    query = quantize(rng.normal(size=args.dim).astype(np.float32), bits)

    t0 = time.perf_counter()
    _, counters = run_query(system, query, "mips", args.k, seed=args.seed)
    wall = time.perf_counter() - t0
    report = account(counters, params)

    print(f"simulated one query over {args.count} docs x dim {args.dim} "
          f"({args.precision.upper()}, {db.nbytes_stored()} stored bytes) "
          f"in {wall:.2f} s wall time")
    print(report_table(report))

    half = account(shape_counters(
        DbShape(args.count // 2, args.dim, bits, args.k)), params)
    small_count = round(1.90 * 2**20 * 8 // (args.dim * bits))
    small = account(shape_counters(
        DbShape(small_count, args.dim, bits, args.k)), params)
    print(f"\nscaling projections (same parameters):")
    print(f"  half size ({args.count // 2} docs): "
          f"{half.latency_s * 1e6:.3f} us, {half.energy_j * 1e6:.4f} uJ")
    print(f"  1.90 MiB ({small_count} docs): "
          f"{small.latency_s * 1e6:.3f} us, {small.energy_j * 1e6:.4f} uJ")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
