"""Command-line harness: build quantized databases, run queries, evaluate
precision, sweep fault-injection configurations, and manage error maps and
performance parameters.

Verbs: build, query, eval, sweep, gen-map, calibrate.  Every command is a
pure function of its inputs, flags, and seed; outputs are byte-identical on
replay.  Exit codes: 0 success, 2 usage/parameter errors, 3 file-format
errors, 4 capacity errors, 5 data-mismatch errors, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import __version__
from .device import SpatialErrorMap, generate_error_map
from .errors import CapacityError, DataMismatchError, FormatError
from .layout import (build_plane_sums, check_layout_matches, db_digest,
                     load_layout, plan_layout, save_layout)
from .perf import (DbShape, PerfParams, account, calibrate, default_params,
                   mean_report, report_kv_lines, report_table, shape_counters)
from .retrieval import (MODES, RetrievalSystem, load_results, oracle_all_scores,
                        precision_at_k, run_query, save_results)
from .store import (load_db, load_float_db, load_qrels, quantize, quantize_db,
                    save_db)


class UsageError(Exception):
    """Bad flag values or inconsistent parameters (exit code 2)."""


EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_CAPACITY = 4
EXIT_MISMATCH = 5


def _bits_of(precision: str) -> int:
    return {"int4": 4, "int8": 8}[precision]


def resolve_error_map(source: str) -> SpatialErrorMap:
    """Turn an --error-map argument into a map.

    Accepted forms: `zero`, a path to a saved map file, or
    `gen:rail=R,readout=O,base=B[,noise-seed=N]` to generate one inline.
    """
    if source == "zero":
        return SpatialErrorMap.zeros()
    if source.startswith("gen:"):
        params = {"rail": 0.0, "readout": 0.0, "base": 0.0}
        noise_seed = None
        for part in source[len("gen:"):].split(","):
            if not part:
                continue
            if "=" not in part:
                raise UsageError(
                    f"bad --error-map generator term '{part}' (expected key=value)")
            key, _, val = part.partition("=")
            key = key.strip().replace("_", "-")
            try:
                if key in params:
                    params[key] = float(val)
                elif key == "noise-seed":
                    noise_seed = int(val)
                else:
                    raise UsageError(
                        f"unknown --error-map generator key '{key}' "
                        f"(expected rail, readout, base, noise-seed)")
            except ValueError:
                raise UsageError(
                    f"non-numeric --error-map generator value '{val}'") from None
        return generate_error_map(rail_effect=params["rail"],
                                  readout_effect=params["readout"],
                                  base=params["base"], noise_seed=noise_seed)
    return SpatialErrorMap.load(source)


def _map_hash(emap: SpatialErrorMap) -> str:
    return hashlib.sha256(np.ascontiguousarray(emap.lsb).tobytes()).hexdigest()


def _file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_params(path: str | None) -> PerfParams:
    return default_params() if path is None else PerfParams.load(path)


def _parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad --k list '{text}' (expected e.g. 1,3,5)") from None
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"bad --k list '{text}' (every k must be >= 1)")
    return ks


def _toggle(value: str) -> bool:
    return value == "on"


# ---------------------------------------------------------------------------
# build


def cmd_build(args) -> int:
    fdb = load_float_db(args.input)
    bits = _bits_of(args.precision)
    emap = resolve_error_map(args.error_map)
    qdb = quantize_db(fdb, bits)
    layout = plan_layout(qdb, emap, remap=_toggle(args.remap))
    lut = build_plane_sums(qdb, layout)

    save_db(qdb, args.out)
    sidecar = args.out + ".layout"
    save_layout(layout, lut, sidecar, digest=db_digest(args.out))

    manifest = {
        "format": "quantized-db",
        "version": __version__,
        "precision": args.precision,
        "dim": qdb.dim,
        "count": qdb.count,
        "remap": _toggle(args.remap),
        "seed": args.seed,
        "error_map": args.error_map,
        "error_map_sha256": _map_hash(emap),
        "db_sha256": _file_hash(args.out),
        "layout_sha256": _file_hash(sidecar),
        "embeddings_per_column": layout.emb_per_column,
        "folds": layout.folds,
        "columns_used": layout.columns_used,
        "bytes_stored": qdb.nbytes_stored(),
    }
    with open(args.out + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"built {args.out}: {qdb.count} docs, dim {qdb.dim}, "
          f"{args.precision.upper()}, remap {args.remap}")
    print(f"  {layout.emb_per_column} embeddings/column, "
          f"{layout.columns_used} of {layout.geometry.total_columns} columns, "
          f"{layout.folds} fold(s)")
    return 0


# ---------------------------------------------------------------------------
# query


def _open_system(db_path: str, emap: SpatialErrorMap) -> RetrievalSystem:
    qdb = load_db(db_path)
    layout, lut, digest = load_layout(db_path + ".layout")
    check_layout_matches(layout, qdb)
    if digest != bytes(32) and digest != db_digest(db_path):
        raise DataMismatchError(
            f"{db_path}: contents changed since the layout sidecar was built")
    return RetrievalSystem.assemble(qdb, layout, lut, emap)


def _sorted_queries(path: str, dim: int, bits: int):
    qf = load_float_db(path)
    if qf.dim != dim:
        raise DataMismatchError(
            f"query dimension {qf.dim} does not match the database's {dim}")
    order = np.argsort(qf.ids, kind="stable")
    return [(int(qf.ids[i]), quantize(qf.vectors[i], bits)) for i in order]


def cmd_query(args) -> int:
    emap = resolve_error_map(args.error_map)
    system = _open_system(args.db, emap)
    params = _load_params(args.config)
    queries = _sorted_queries(args.queries, system.db.dim, system.db.bits)
    detection = _toggle(args.detect)

    results, reports = [], []
    for qid, qv in queries:
        res, counters = run_query(system, qv, args.mode, args.k,
                                  seed=args.seed, query_id=qid,
                                  detection=detection,
                                  max_resense=args.max_resense)
        results.append(res)
        reports.append(account(counters, params))
    save_results(args.out, results)

    agg = mean_report(reports)
    print(f"ran {len(results)} queries against {args.db} "
          f"(mode {args.mode}, k {args.k}, detect {args.detect}, "
          f"seed {args.seed})")
    if reports:
        print(report_table(reports[0]) if len(reports) == 1 else
              "\n".join(f"{key} = {val:.6f}" if isinstance(val, float)
                        else f"{key} = {val}" for key, val in agg.items()))
    if args.report:
        lines = [
            f"db = {args.db}", f"queries = {args.queries}",
            f"mode = {args.mode}", f"k = {args.k}",
            f"detect = {args.detect}", f"error_map = {args.error_map}",
            f"seed = {args.seed}",
        ]
        for key, val in agg.items():
            lines.append(f"{key} = {val:.6f}" if isinstance(val, float)
                         else f"{key} = {val}")
        for res, rep in zip(results, reports):
            prefix = f"query_{res.query_id}"
            for line in report_kv_lines(rep):
                lines.append(f"{prefix}_{line}")
        with open(args.report, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# eval


def _relevant_sets(qrels: dict[int, dict[int, int]]) -> dict[int, set[int]]:
    return {qid: {doc for doc, rel in docs.items() if rel > 0}
            for qid, docs in qrels.items()}


def _eval_one(results: dict[int, list[tuple[int, float]]],
              relevant: dict[int, set[int]], ks: list[int],
              label: str) -> dict[int, float]:
    offenders = sorted(qid for qid in results if qid not in relevant)
    if offenders:
        shown = ", ".join(str(q) for q in offenders[:10])
        more = "" if len(offenders) <= 10 else f" (+{len(offenders) - 10} more)"
        raise DataMismatchError(
            f"{label}: query ids missing from qrels: {shown}{more}")
    if not results:
        raise DataMismatchError(f"{label}: results file contains no queries")
    out = {}
    for k in ks:
        vals = [precision_at_k([doc for doc, _ in rows], relevant[qid], k)
                for qid, rows in results.items()]
        out[k] = float(np.mean(vals))
    return out


def cmd_eval(args) -> int:
    ks = _parse_k_list(args.k)
    relevant = _relevant_sets(load_qrels(args.qrels))
    header = ["results"] + [f"P@{k}" for k in ks]
    rows = []
    for path in args.results:
        pk = _eval_one(load_results(path), relevant, ks, path)
        rows.append([path] + [f"{pk[k]:.6f}" for k in ks])
    table = "\t".join(header) + "\n" + \
        "\n".join("\t".join(row) for row in rows) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(table)
    width = max(len(r[0]) for r in rows + [header])
    print(f"{header[0]:<{width}}  " + "  ".join(f"{h:>9}" for h in header[1:]))
    for row in rows:
        print(f"{row[0]:<{width}}  " + "  ".join(f"{v:>9}" for v in row[1:]))
    return 0


# ---------------------------------------------------------------------------
# sweep


def _parse_scales(text: str) -> list[float]:
    try:
        scales = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad --scales list '{text}'") from None
    if not scales:
        raise UsageError("empty sweep grid: --scales lists no values")
    if any(s < 0 for s in scales):
        raise UsageError("error scales must be non-negative")
    return scales


def _toggle_grid(value: str) -> list[bool]:
    return {"on": [True], "off": [False], "both": [True, False]}[value]


def cmd_sweep(args) -> int:
    fdb = load_float_db(args.input)
    bits = _bits_of(args.precision)
    qdb = quantize_db(fdb, bits)
    base_map = resolve_error_map(args.error_map)
    scales = _parse_scales(args.scales)
    ks = _parse_k_list(args.k)
    relevant = _relevant_sets(load_qrels(args.qrels))
    params = _load_params(args.config)
    k_run = max(ks)

    qf = load_float_db(args.queries)
    if qf.dim != qdb.dim:
        raise DataMismatchError(
            f"query dimension {qf.dim} does not match the database's {qdb.dim}")
    order = np.argsort(qf.ids, kind="stable")
    queries = [(int(qf.ids[i]), quantize(qf.vectors[i], bits)) for i in order]
    missing = sorted(qid for qid, _ in queries if qid not in relevant)
    if missing:
        shown = ", ".join(str(q) for q in missing[:10])
        raise DataMismatchError(f"query ids missing from qrels: {shown}")
    oracle = {qid: oracle_all_scores(qdb, qv, args.mode) for qid, qv in queries}

    header = (["scale", "remap", "detect"] + [f"P@{k}" for k in ks] +
              ["mean_abs_score_error", "residual_bit_flips", "planes_flagged",
               "planes_uncorrected", "resenses", "mean_latency_us",
               "mean_energy_uj"])
    lines = ["\t".join(header)]
    for scale in scales:
        emap = base_map.scaled(scale)
        for remap in _toggle_grid(args.remap):
            system = RetrievalSystem.build(qdb, emap, remap=remap)
            for detect in _toggle_grid(args.detect):
                pk_vals = {k: [] for k in ks}
                abs_err, n_scores = 0.0, 0
                reports = []
                for qid, qv in queries:
                    res, counters = run_query(
                        system, qv, args.mode, k_run, seed=args.seed,
                        query_id=qid, detection=detect,
                        max_resense=args.max_resense, keep_all_scores=True)
                    reports.append(account(counters, params))
                    for k in ks:
                        pk_vals[k].append(
                            precision_at_k(res.doc_ids, relevant[qid], k))
                    for doc, s in res.all_scores.items():
                        abs_err += abs(s - oracle[qid][doc])
                        n_scores += 1
                agg = mean_report(reports)
                row = [f"{scale:g}", "on" if remap else "off",
                       "on" if detect else "off"]
                row += [f"{float(np.mean(pk_vals[k])):.6f}" for k in ks]
                row += [f"{abs_err / max(n_scores, 1):.6g}",
                        str(agg["residual_bit_flips"]),
                        str(agg["planes_flagged"]),
                        str(agg["planes_uncorrected"]),
                        str(agg["resenses"]),
                        f"{agg['mean_latency_us']:.4f}",
                        f"{agg['mean_energy_uj']:.6f}"]
                lines.append("\t".join(row))
    text = "\n".join(lines) + "\n"
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# gen-map / calibrate


def cmd_gen_map(args) -> int:
    emap = generate_error_map(rail_effect=args.rail,
                              readout_effect=args.readout,
                              base=args.base, noise_seed=args.noise_seed)
    emap.save(args.out)
    print(f"wrote {args.out}: mean LSB flip probability "
          f"{float(np.mean(emap.lsb)):.6g}, max {float(np.max(emap.lsb)):.6g}")
    return 0


def cmd_calibrate(args) -> int:
    shape = DbShape(count=args.count, dim=args.dim,
                    bits=_bits_of(args.precision), k=args.k,
                    detection=_toggle(args.detect))
    params = calibrate(args.latency_us * 1e-6, args.energy_uj * 1e-6, shape,
                       frequency_hz=args.frequency_mhz * 1e6)
    params.save(args.out)
    achieved = account(shape_counters(shape), params)
    print(f"wrote {args.out} (pipeline fill {params.pipeline_fill} cycles)")
    print(f"check on calibration shape ({args.count} docs, dim {args.dim}, "
          f"{args.precision.upper()}): latency "
          f"{achieved.latency_s * 1e6:.4f} us, energy "
          f"{achieved.energy_j * 1e6:.4f} uJ")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cimrag",
        description="Compute-in-memory retrieval accelerator simulator "
                    "and quality/latency/energy harness.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_common(p, *, seed=True, config=False, error_map=False):
        if seed:
            p.add_argument("--seed", type=int, default=0,
                           help="seed for all error draws (default 0)")
        if config:
            p.add_argument("--config", default=None, metavar="PARAMS",
                           help="performance parameter file "
                                "(default: built-in calibration)")
        if error_map:
            p.add_argument("--error-map", default="zero",
                           help="zero | map file | gen:rail=R,readout=O,"
                                "base=B[,noise-seed=N] (default zero)")

    p = sub.add_parser("build", help="quantize a float db and plan its layout")
    p.add_argument("--input", required=True, help="float embedding db file")
    p.add_argument("--out", required=True, help="output quantized db path")
    p.add_argument("--precision", choices=("int4", "int8"), required=True)
    p.add_argument("--remap", choices=("on", "off"), default="on",
                   help="error-aware bit remapping (default on)")
    add_common(p, error_map=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="run queries and write top-k results")
    p.add_argument("--db", required=True, help="quantized db path (from build)")
    p.add_argument("--queries", required=True, help="float query db file")
    p.add_argument("--out", required=True, help="output results file (TSV)")
    p.add_argument("--report", default=None,
                   help="write machine-readable perf summary here")
    p.add_argument("--mode", choices=MODES, default="mips")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--detect", choices=("on", "off"), default="on",
                   help="plane-sum error detection (default on)")
    p.add_argument("--max-resense", type=int, default=3,
                   help="re-sense attempts per flagged plane (default 3)")
    add_common(p, config=True, error_map=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="score results files against qrels")
    p.add_argument("--results", nargs="+", required=True,
                   help="one or more results files to compare")
    p.add_argument("--qrels", required=True,
                   help="tab-separated query_id, doc_id, relevance")
    p.add_argument("--k", default="1,3,5", help="comma list (default 1,3,5)")
    p.add_argument("--out", default=None, help="also write the table here")
    add_common(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep",
                       help="grid over error scale x remap x detection")
    p.add_argument("--input", required=True, help="float embedding db file")
    p.add_argument("--queries", required=True, help="float query db file")
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True, help="output TSV (with header)")
    p.add_argument("--precision", choices=("int4", "int8"), required=True)
    p.add_argument("--mode", choices=MODES, default="mips")
    p.add_argument("--k", default="1,3,5", help="comma list (default 1,3,5)")
    p.add_argument("--scales", default="0,0.5,1",
                   help="comma list of error-map scale factors (default 0,0.5,1)")
    p.add_argument("--remap", choices=("on", "off", "both"), default="both")
    p.add_argument("--detect", choices=("on", "off", "both"), default="both")
    p.add_argument("--max-resense", type=int, default=3)
    add_common(p, config=True, error_map=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-map", help="generate a spatial error map file")
    p.add_argument("--out", required=True)
    p.add_argument("--rail", type=float, default=0.0,
                   help="centre-rail proximity effect strength")
    p.add_argument("--readout", type=float, default=0.0,
                   help="readout-distance effect strength")
    p.add_argument("--base", type=float, default=0.0,
                   help="uniform base flip probability")
    p.add_argument("--noise-seed", type=int, default=None,
                   help="add deterministic per-position jitter")
    add_common(p, seed=False)
    p.set_defaults(func=cmd_gen_map)

    p = sub.add_parser("calibrate",
                       help="solve perf params against latency/energy targets")
    p.add_argument("--out", required=True, help="output parameter file")
    p.add_argument("--latency-us", type=float, default=5.6)
    p.add_argument("--energy-uj", type=float, default=0.956)
    p.add_argument("--frequency-mhz", type=float, default=250.0)
    p.add_argument("--count", type=int, default=8192,
                   help="calibration shape: document count (default 8192)")
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--precision", choices=("int4", "int8"), default="int8")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--detect", choices=("on", "off"), default="on")
    add_common(p, seed=False)
    p.set_defaults(func=cmd_calibrate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except CapacityError as e:
        print(f"capacity error: {e}", file=sys.stderr)
        return EXIT_CAPACITY
    except DataMismatchError as e:
        print(f"mismatch error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
