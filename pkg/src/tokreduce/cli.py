"""Command-line interface.

Subcommands: ``synth``, ``reduce``, ``compare``, ``align``, ``proxy`` and
``rerun``. Exit codes: 0 success, 2 usage error, 3 data error; errors are
printed to stderr as one JSON object.
"""

import argparse
import concurrent.futures
import csv
import dataclasses
import datetime
import json
import os
from pathlib import Path
import sys

import numpy as np

from . import __version__
from .align import ALIGN_METRICS
from .io import (FormatError, canonical_json, read_matrix, read_record, read_tokens,
                 write_matrix, write_record, write_tokens, depth_map_to_dict)
from .metrics import (DEPTH_METRICS, averaged_depth_map, depth_map_similarity,
                      homogeneity, ioa, ioa_lower_bound, iou, iou_lower_bound, nmi,
                      rank_correlation)
from .toyvit import (METHODS, PRESETS, SYNTH_KINDS, ToyViTConfig, build_toy_vit,
                     check_method, forward_with_reduction, synth_tokens)
from .types import exact_rate, make_schedule

EXIT_USAGE = 2
EXIT_DATA = 3

SET_METRICS = ("ioa", "iou")
CLUSTER_METRICS = ("homogeneity", "nmi")
COMPARE_METRICS = SET_METRICS + CLUSTER_METRICS + DEPTH_METRICS


class DataError(Exception):
    """Bad or inconsistent input data (exit code 3)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message)
        sys.exit(EXIT_USAGE)


def _emit_error(kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")


def _threads():
    try:
        return max(1, int(os.environ.get("TOKREDUCE_THREADS", "1")))
    except ValueError:
        return 1


def _parallel_map(fn, items):
    n = _threads()
    if n == 1:
        return [fn(i) for i in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_manifest(path, command, args):
    manifest = {
        "type": "RunManifest",
        "command": command,
        "args": args,
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    _write_text(path, canonical_json(manifest))


def _manifest_path(report_path):
    report_path = Path(report_path)
    return report_path.with_name(report_path.stem + ".manifest.json")


def _parse_grid(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 14x14, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return h, w


def _parse_stages(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"stages must be comma-separated ints, got {text!r}")


def _parse_rate(text):
    try:
        r = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"rate must be a number, got {text!r}")
    if not 0 < r <= 1:
        raise argparse.ArgumentTypeError("rate must lie in (0, 1]")
    return r


# -- synth --------------------------------------------------------------------

def cmd_synth(a):
    out = Path(a["out"])
    out.mkdir(parents=True, exist_ok=True)
    grid = tuple(a["grid"])

    def one(i):
        return synth_tokens(grid, a["dim"], a["kind"], a["seed"] ^ i, n_blobs=a["blobs"])

    samples = _parallel_map(one, range(a["n"]))
    labels = {}
    for i, s in enumerate(samples):
        sid = f"sample_{i:04d}"
        write_tokens(out / f"{sid}.tokd", s.tokens)
        if s.labels is not None:
            labels[sid] = s.labels.tolist()
    if labels:
        _write_text(out / "labels.json", canonical_json(labels))
    _write_manifest(out / "manifest.json", "synth", a)
    return {"written": len(samples), "out": str(out)}


# -- reduce -------------------------------------------------------------------

def _input_files(paths):
    files = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.glob("*.tokd")) if p.is_dir() else [p])
    if not files:
        raise DataError("no .tokd inputs found")
    return files


def cmd_reduce(a):
    files = _input_files(a["inputs"])
    try:
        samples = [read_tokens(f) for f in files]
    except (FormatError, OSError) as e:
        raise DataError(e)
    grid = samples[0].grid
    if any(s.grid != grid or s.dim != samples[0].dim for s in samples):
        raise DataError("all inputs must share one grid and feature size")
    overrides = {"grid": grid, "seed": a["seed"], "stage_blocks": tuple(a["stages"]),
                 "depth": a["depth"], "qk_std": a["qk_std"]}
    config = ToyViTConfig.preset(a["preset"], **overrides)
    if samples[0].dim != config.dim:
        raise DataError(f"inputs have D={samples[0].dim}, preset {a['preset']!r} "
                        f"expects D={config.dim}")
    P = grid[0] * grid[1]
    try:
        check_method(a["method"], a["rate"])
        config.validate()
        schedule = make_schedule(P, a["rate"], config.stage_blocks, config.depth)
    except ValueError as e:
        raise DataError(e)
    model = build_toy_vit(config)
    params = {"ats_mode": a["ats_mode"]}

    def one(i):
        return forward_with_reduction(model, samples[i], a["method"], schedule,
                                      a["seed"] ^ i, params)

    traces = _parallel_map(one, range(len(samples)))
    out = Path(a["out"])
    (out / "records").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "probes").mkdir(parents=True, exist_ok=True)
    counts = []
    for f, tr in zip(files, traces):
        sid = f.stem
        record = dataclasses.replace(tr.record, sample_id=sid)
        write_record(out / "records" / f"{sid}.json", record)
        _write_text(out / "traces" / f"{sid}.json", canonical_json({
            "sample_id": sid, "token_counts": list(tr.token_counts),
            "stage_counts": list(tr.stage_counts), "flops": list(tr.flops),
            "total_flops": tr.total_flops, "attention_flops": tr.attention_flops,
        }))
        counts.append(tr.stage_counts)
    probes = np.stack([tr.cls_probe for tr in traces], axis=1)
    for k, matrix in enumerate(probes):
        write_matrix(out / "probes" / f"probe_{k}.tokd", matrix)
    counts = np.array(counts, dtype=np.float64)
    stage_idx = np.arange(1, counts.shape[1] + 1)
    summary = {
        "method": a["method"], "keep_rate": a["rate"], "n_tokens": P,
        "n_samples": len(samples), "budgets": list(schedule.budgets),
        "mean_stage_counts": counts.mean(axis=0).tolist(),
        "mean_keep_fraction": (counts / P).mean(axis=0).tolist(),
        "mean_effective_rate": ((counts / P) ** (1.0 / stage_idx)).mean(axis=0).tolist(),
        "sample_ids": [f.stem for f in files],
    }
    _write_text(out / "summary.json", canonical_json(summary))
    _write_manifest(out / "manifest.json", "reduce", a)
    return summary


# -- compare ------------------------------------------------------------------

def _load_run(path):
    path = Path(path)
    rec_dir = path / "records" if (path / "records").is_dir() else path
    files = sorted(rec_dir.glob("*.json"))
    if not files:
        raise DataError(f"no records under {path}")
    try:
        records = [read_record(f) for f in files]
    except (FormatError, KeyError, ValueError) as e:
        raise DataError(f"{path}: {e}")
    summary_file = path / "summary.json"
    summary = json.loads(summary_file.read_text()) if summary_file.exists() else {}
    return records, summary


def _pair(recs_a, recs_b, pair_by):
    if pair_by == "order":
        if len(recs_a) != len(recs_b):
            raise DataError(f"record counts differ: {len(recs_a)} vs {len(recs_b)}")
        return list(zip(recs_a, recs_b))
    index_b = {r.sample_id: r for r in recs_b}
    missing = [r.sample_id for r in recs_a if r.sample_id not in index_b]
    if missing or len(recs_a) != len(recs_b):
        raise DataError(f"unpairable record sets; unmatched sample ids: {missing[:5]}")
    return [(r, index_b[r.sample_id]) for r in recs_a]


def _stage_labels(stage):
    if stage.labels is None:
        raise DataError("clustering metrics need merge records (cluster labels)")
    return np.asarray(stage.labels)


def cmd_compare(a):
    recs_a, sum_a = _load_run(a["a"])
    recs_b, sum_b = _load_run(a["b"])
    metric = a["metric"]
    report = {"metric": metric, "inputs": {"a": a["a"], "b": a["b"]},
              "parameters": {"pair_by": a["pair_by"]}}
    rows = []
    if metric in DEPTH_METRICS:
        try:
            value = depth_map_similarity(averaged_depth_map(recs_a),
                                         averaged_depth_map(recs_b), metric)
            map_a, map_b = averaged_depth_map(recs_a), averaged_depth_map(recs_b)
        except ValueError as e:
            raise DataError(e)
        report.update(value=value, depth_maps={"a": depth_map_to_dict(map_a),
                                               "b": depth_map_to_dict(map_b)})
        rows = [{"position": i, "depth_a": da, "depth_b": db} for i, (da, db) in
                enumerate(zip(map_a.mean_depth.tolist(), map_b.mean_depth.tolist()))]
    else:
        pairs = _pair(recs_a, recs_b, a["pair_by"])
        n_stages = len(pairs[0][0].stages)
        swapped = False
        if metric in SET_METRICS or metric == "homogeneity":
            ra, rb = sum_a.get("keep_rate"), sum_b.get("keep_rate")
            if ra is not None and rb is not None and exact_rate(ra) < exact_rate(rb):
                pairs = [(y, x) for x, y in pairs]
                sum_a, sum_b = sum_b, sum_a
                swapped = True
        per_stage = [[] for _ in range(n_stages)]
        for r1, r2 in pairs:
            if len(r1.stages) != n_stages or len(r2.stages) != n_stages:
                raise DataError("records disagree on the number of stages")
            values = []
            for s, (st1, st2) in enumerate(zip(r1.stages, r2.stages)):
                if metric == "ioa":
                    v = ioa(st1.kept, st2.kept)
                elif metric == "iou":
                    v = iou(st1.kept, st2.kept)
                elif metric == "homogeneity":
                    v = homogeneity(_stage_labels(st1), _stage_labels(st2))
                else:
                    v = nmi(_stage_labels(st1), _stage_labels(st2))
                per_stage[s].append(v)
                values.append(v)
            rows.append({"sample_id": r1.sample_id,
                         **{f"stage_{s + 1}": v for s, v in enumerate(values)}})
        means = [float(np.mean(v)) for v in per_stage]
        report.update(value=float(np.mean(means)), per_stage=means, swapped=swapped,
                      n_pairs=len(pairs))
        ra, rb = sum_a.get("keep_rate"), sum_b.get("keep_rate")
        if metric in SET_METRICS and ra is not None and rb is not None:
            bound = ioa_lower_bound if metric == "ioa" else iou_lower_bound
            report["lower_bound"] = bound(pairs[0][0].n_tokens, ra, rb, n_stages)
            report["parameters"].update(r1=ra, r2=rb)
    _write_text(a["out"], canonical_json(report))
    if a.get("csv"):
        _write_csv(a["csv"], rows)
    _write_manifest(_manifest_path(a["out"]), "compare", a)
    return report


def _write_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# -- align --------------------------------------------------------------------

def _load_probes(path):
    path = Path(path)
    probe_dir = path / "probes" if (path / "probes").is_dir() else path
    files = sorted(probe_dir.glob("probe_*.tokd"), key=lambda f: int(f.stem.split("_")[1]))
    if not files:
        raise DataError(f"no probe dumps under {path}")
    try:
        return [read_matrix(f) for f in files]
    except (FormatError, OSError) as e:
        raise DataError(e)


def cmd_align(a):
    probes_a, probes_b = _load_probes(a["a"]), _load_probes(a["b"])
    if len(probes_a) != len(probes_b):
        raise DataError("probe point counts differ")
    fn = ALIGN_METRICS[a["metric"]]
    values, reverse = [], []
    for pa, pb in zip(probes_a, probes_b):
        if pa.shape[0] != pb.shape[0]:
            raise DataError(f"sample counts differ: {pa.shape[0]} vs {pb.shape[0]}")
        try:
            values.append(fn(pa, pb))
            if a["metric"] == "pwcca":
                reverse.append(fn(pb, pa))
        except ValueError as e:
            raise DataError(e)
    report = {"metric": a["metric"], "inputs": {"a": a["a"], "b": a["b"]},
              "parameters": {}, "per_probe": values, "value": float(np.mean(values))}
    if reverse:
        report["per_probe_reverse"] = reverse
        report["value_reverse"] = float(np.mean(reverse))
    _write_text(a["out"], canonical_json(report))
    _write_manifest(_manifest_path(a["out"]), "align", a)
    return report


# -- proxy --------------------------------------------------------------------

def _read_scores(path):
    scores = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                scores[row["model_id"]] = float(row["score"])
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot read scores {path}: {e}")
    return scores


def cmd_proxy(a):
    scores = _read_scores(a["scores"])
    by_metric = {}
    for item in a["reports"]:
        if "=" not in item:
            raise DataError(f"--report expects MODEL=PATH, got {item!r}")
        model, path = item.split("=", 1)
        if model not in scores:
            raise DataError(f"model id {model!r} has no performance score")
        try:
            rep = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read report {path}: {e}")
        by_metric.setdefault(rep["metric"], []).append((model, float(rep["value"])))
    anchor = a.get("anchor")
    if anchor is not None and anchor not in scores:
        raise DataError(f"anchor model id {anchor!r} has no performance score")
    results = {}
    for metric, items in sorted(by_metric.items()):
        perf = [scores[anchor] - scores[m] if anchor else scores[m] for m, _ in items]
        vals = [v for _, v in items]
        try:
            rho = rank_correlation(perf, vals)
        except ValueError as e:
            raise DataError(f"{metric}: {e}")
        results[metric] = {"spearman": rho, "models": [m for m, _ in items],
                           "performance": perf, "values": vals}
    report = {"metric": "spearman", "value": results, "inputs": {"scores": a["scores"]},
              "parameters": {"anchor": anchor}}
    _write_text(a["out"], canonical_json(report))
    _write_manifest(_manifest_path(a["out"]), "proxy", a)
    return report


# -- rerun --------------------------------------------------------------------

COMMANDS = {"synth": cmd_synth, "reduce": cmd_reduce, "compare": cmd_compare,
            "align": cmd_align, "proxy": cmd_proxy}


def cmd_rerun(a):
    manifest = json.loads(Path(a["manifest"]).read_text())
    if manifest.get("type") != "RunManifest" or manifest.get("command") not in COMMANDS:
        raise DataError("not a run manifest")
    args = dict(manifest["args"])
    if a.get("out"):
        args["out"] = a["out"]
        args.pop("csv", None)
    return COMMANDS[manifest["command"]](args)


def build_parser():
    p = _Parser(prog="tokreduce", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic token dumps")
    s.add_argument("--kind", choices=SYNTH_KINDS, default="random")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--grid", type=_parse_grid, default=(14, 14))
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--blobs", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    r = sub.add_parser("reduce", help="run the toy backbone with a reduction method")
    r.add_argument("--method", choices=METHODS, required=True)
    r.add_argument("--rate", type=_parse_rate, required=True)
    r.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--stages", type=_parse_stages, default=(4, 7, 10))
    r.add_argument("--depth", type=int, default=12)
    r.add_argument("--qk-std", dest="qk_std", type=float, default=None)
    r.add_argument("--ats-mode", dest="ats_mode", default="fixed-quantile",
                   choices=("fixed-quantile", "seeded-uniform"))
    r.add_argument("--in", dest="inputs", nargs="+", required=True)
    r.add_argument("--out", required=True)

    c = sub.add_parser("compare", help="compare two sets of reduction records")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--metric", choices=COMPARE_METRICS, required=True)
    c.add_argument("--pair-by", dest="pair_by", choices=("sample_id", "order"),
                   default="sample_id")
    c.add_argument("--out", required=True)
    c.add_argument("--csv")

    al = sub.add_parser("align", help="feature alignment between CLS probe dumps")
    al.add_argument("--a", required=True)
    al.add_argument("--b", required=True)
    al.add_argument("--metric", choices=sorted(ALIGN_METRICS), required=True)
    al.add_argument("--out", required=True)

    px = sub.add_parser("proxy", help="Spearman correlation of metrics with performance")
    px.add_argument("--scores", required=True, help="CSV with model_id,score columns")
    px.add_argument("--report", dest="reports", action="append", required=True,
                    help="MODEL=PATH of a compare/align report; repeatable")
    px.add_argument("--anchor")
    px.add_argument("--out", required=True)

    rr = sub.add_parser("rerun", help="re-execute a run manifest")
    rr.add_argument("manifest")
    rr.add_argument("--out")
    return p


def main(argv=None):
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    for key in ("grid", "stages"):
        if key in args and args[key] is not None:
            args[key] = list(args[key])
    handler = cmd_rerun if command == "rerun" else COMMANDS[command]
    try:
        result = handler(args)
    except DataError as e:
        _emit_error("data", e)
        return EXIT_DATA
    except (ValueError, OSError) as e:
        _emit_error("data", e)
        return EXIT_DATA
    if command in ("synth", "reduce"):
        sys.stdout.write(canonical_json(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
