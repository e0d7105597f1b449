#!/usr/bin/env python3
"""Generate a synthetic retrieval corpus with planted nearest neighbours.

Writes three files into --out-dir: docs.fdb (float embedding db),
queries.fdb (noisy copies of randomly chosen documents), and qrels.tsv
(marking each query's source document as its single relevant hit).
"""

import argparse
import os

import numpy as np

from cimrag.store import FloatEmbeddingDB, save_float_db, save_qrels

QUERY_ID_BASE = 1_000_000  # keep query ids disjoint from doc ids


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--docs", type=int, default=1024)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--queries", type=int, default=64)
    ap.add_argument("--noise", type=float, default=0.05,
                    help="stddev of the perturbation added to each planted "
                         "query, relative to unit-variance components")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if args.queries > args.docs:
        ap.error("--queries cannot exceed --docs (sampling without replacement)")

    rng = np.random.default_rng(args.seed)
    docs = rng.normal(size=(args.docs, args.dim)).astype(np.float32)
    targets = rng.choice(args.docs, size=args.queries, replace=False)
    queries = docs[targets] + args.noise * rng.normal(
        size=(args.queries, args.dim)).astype(np.float32)

    os.makedirs(args.out_dir, exist_ok=True)
    save_float_db(FloatEmbeddingDB(dim=args.dim,
                                   ids=np.arange(args.docs, dtype=np.uint64),
                                   vectors=docs),
                  os.path.join(args.out_dir, "docs.fdb"))
    qids = np.arange(QUERY_ID_BASE, QUERY_ID_BASE + args.queries,
                     dtype=np.uint64)
    save_float_db(FloatEmbeddingDB(dim=args.dim, ids=qids,
                                   vectors=queries.astype(np.float32)),
                  os.path.join(args.out_dir, "queries.fdb"))
    save_qrels({int(qid): {int(t): 1} for qid, t in zip(qids, targets)},
               os.path.join(args.out_dir, "qrels.tsv"))
    print(f"wrote {args.docs} docs (dim {args.dim}), {args.queries} queries "
          f"(noise {args.noise}), qrels -> {args.out_dir}/")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
