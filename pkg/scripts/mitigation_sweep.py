#!/usr/bin/env python3
"""End-to-end error-mitigation study on a synthetic corpus.

Generates a planted-nearest-neighbour corpus, then sweeps error-map scale x
bit-remapping x detection and writes one TSV row per configuration with
P@k, mean absolute score error, residual error counts, and mean
latency/energy.  Thin wrapper over `cimrag sweep` so the grid is easy to
rerun from a single command.
"""

import argparse
import os
import subprocess
import sys


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--docs", type=int, default=1024)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--queries", type=int, default=32)
    ap.add_argument("--noise", type=float, default=0.35)
    ap.add_argument("--precision", choices=("int4", "int8"), default="int8")
    ap.add_argument("--mode", choices=("mips", "cosine"), default="mips")
    ap.add_argument("--scales", default="0,0.25,0.5,1")
    ap.add_argument("--error-map",
                    default="gen:rail=0.02,readout=0.05,base=0.01",
                    help="base map the scale factors multiply")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    here = os.path.dirname(os.path.abspath(__file__))
    os.makedirs(args.out_dir, exist_ok=True)
    run = lambda cmd: subprocess.run(cmd, check=True)
    run([sys.executable, os.path.join(here, "make_synthetic.py"),
         "--out-dir", args.out_dir, "--docs", str(args.docs),
         "--dim", str(args.dim), "--queries", str(args.queries),
         "--noise", str(args.noise), "--seed", str(args.seed)])
    out = os.path.join(args.out_dir, "sweep.tsv")
    run([sys.executable, "-m", "cimrag.cli", "sweep",
         "--input", os.path.join(args.out_dir, "docs.fdb"),
         "--queries", os.path.join(args.out_dir, "queries.fdb"),
         "--qrels", os.path.join(args.out_dir, "qrels.tsv"),
         "--out", out, "--precision", args.precision, "--mode", args.mode,
         "--scales", args.scales, "--remap", "both", "--detect", "both",
         "--error-map", args.error_map, "--seed", str(args.seed)])
    print(f"\nsweep table written to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
