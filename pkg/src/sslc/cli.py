"""Command-line front end.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
``SLRC_THREADS`` caps the worker pool used to compress tensors in parallel.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .bundle import (
    BundleError,
    CalibrationEntry,
    WeightBundle,
    atomic_write_bytes,
    dump_manifest,
    read_calibration,
    read_compressed_bundle,
    read_manifest,
    write_calibration,
    write_compressed_bundle,
    write_weight_bundle,
)
from .layer import CostModel, cost_report, reconstruction_report, speedup_from_costs
from .matrix import DEFAULT_EPSILON, NonFiniteError
from .optimizer import (
    CompressionPlan,
    InfeasiblePlanError,
    allocate_budget,
    compress,
    default_rank,
    loss_of,
)
from .rng import tensor_seed
from .salience import fraction_for_salience, retention_curve, salience_of
from . import synthetic

log = logging.getLogger("sslc")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

REPORT_COLUMNS = ["tensor", "section", "index", "metric", "value"]


def worker_count() -> int:
    env = os.environ.get("SLRC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parse_list(text: str, kind=float) -> list:
    items = [kind(x) for x in text.split(",") if x.strip()]
    if not items:
        raise argparse.ArgumentTypeError("list must not be empty")
    return items


# ------------------------------------------------------------- calibrate


def parse_synthetic(spec: str) -> dict:
    """``lognormal:sigma=2,seed=0,channels=4096,samples=8192``"""
    kind, _, rest = spec.partition(":")
    if kind != "lognormal":
        raise ValueError(f"unknown synthetic generator {kind!r}")
    params = dict(item.split("=", 1) for item in rest.split(",") if item)
    unknown = set(params) - {"sigma", "seed", "channels", "samples"}
    if unknown:
        raise ValueError(f"unknown synthetic parameters {sorted(unknown)}")
    for key in ("channels", "samples"):
        if key not in params:
            raise ValueError(f"synthetic spec missing {key!r}")
    return {
        "sigma": float(params.get("sigma", 2.0)),
        "seed": int(params.get("seed", 0)),
        "channels": int(params["channels"]),
        "samples": int(params["samples"]),
    }


class NormAccumulator:
    """Running per-channel sum of squares over sample-major blocks."""

    def __init__(self, channels: int):
        self.sumsq = np.zeros(channels)
        self.samples = 0

    def update(self, block: np.ndarray):
        if block.shape[1] != self.sumsq.size:
            raise BundleError(f"block has {block.shape[1]} channels, expected {self.sumsq.size}")
        bad = ~np.isfinite(block)
        if bad.any():
            channel = int(np.nonzero(bad.any(axis=0))[0][0])
            raise NonFiniteError(f"non-finite activation in channel {channel}")
        self.sumsq += np.einsum("ij,ij->j", block, block)
        self.samples += block.shape[0]

    def norms(self) -> np.ndarray:
        return np.sqrt(self.sumsq)


def synthetic_blocks(spec: dict, chunk_rows: int):
    g = np.random.Generator(np.random.PCG64(spec["seed"]))
    scales = g.lognormal(0.0, spec["sigma"], spec["channels"])
    remaining = spec["samples"]
    while remaining > 0:
        take = min(chunk_rows, remaining)
        yield g.standard_normal((take, spec["channels"])) * scales[None, :]
        remaining -= take


def calibrate_bundles(paths, chunk_rows: int = 1024) -> list[CalibrationEntry]:
    """Stream one or more activation bundles; same-named tensors are pooled."""
    accumulators: dict[str, NormAccumulator] = {}
    hashes = {}
    for path in paths:
        bundle = WeightBundle.open(path)
        for name in bundle.names():
            entry = bundle.entries[name]
            acc = accumulators.setdefault(name, NormAccumulator(entry.cols))
            h = hashes.setdefault(name, hashlib.sha256())
            for block in bundle.iter_row_chunks(name, chunk_rows):
                h.update(block.astype("<f4").tobytes())
                acc.update(block)
    return [
        CalibrationEntry(name, accumulators[name].norms(), accumulators[name].samples, hashes[name].hexdigest())
        for name in sorted(accumulators)
    ]


def cmd_calibrate(args) -> int:
    if args.synthetic:
        spec = parse_synthetic(args.synthetic)
        acc = NormAccumulator(spec["channels"])
        for block in synthetic_blocks(spec, args.chunk_rows):
            acc.update(block)
        digest = hashlib.sha256(args.synthetic.encode()).hexdigest()
        names = args.name or ["synthetic"]
        entries = [CalibrationEntry(n, acc.norms(), acc.samples, digest) for n in names]
    else:
        if not args.activations:
            raise BundleError("give activation bundles or --synthetic")
        entries = calibrate_bundles(args.activations, args.chunk_rows)
    write_calibration(args.out, entries)
    log.info("wrote %d calibration entries to %s", len(entries), args.out)
    return EXIT_OK


# -------------------------------------------------------------- compress


def plan_for(args, m: int, n: int, seed: int, **overrides) -> CompressionPlan:
    rank = args.rank if args.rank is not None else default_rank(m, n)
    fields = dict(
        remaining_fraction=args.remaining,
        rank=rank,
        preserve_fraction=args.preserve,
        iterations=args.iters,
        seed=seed,
        power_iters=args.power_iters,
        epsilon=args.epsilon,
        oversample=args.oversample,
    )
    fields.update(overrides)
    return CompressionPlan(**fields)


def load_inputs(weights_path, calib_path):
    weights = WeightBundle.open(weights_path)
    calib = read_calibration(calib_path)
    for name in weights.names():
        if name not in calib:
            raise BundleError(f"tensor {name}: no calibration entry")
        if calib[name].norms.size != weights.entries[name].cols:
            raise BundleError(
                f"tensor {name}: {weights.entries[name].cols} input channels but "
                f"{calib[name].norms.size} calibration norms"
            )
    return weights, calib


def compress_bundle(weights: WeightBundle, calib: dict, make_plan, names=None):
    """Compress every tensor; returns ``(layers, seeds)`` keyed by name."""
    names = names or weights.names()
    plans = {}
    for name in names:
        e = weights.entries[name]
        plan = make_plan(name, e.rows, e.cols)
        try:
            allocate_budget(e.rows, e.cols, plan)
        except InfeasiblePlanError as exc:
            raise InfeasiblePlanError(f"tensor {name}: {exc}") from None
        plans[name] = plan

    def run(name):
        w = weights.load(name)
        layer = compress(w, calib[name].scaling(plans[name].epsilon), plans[name])
        return layer.with_bias(weights.load_bias(name))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = dict(zip(names, pool.map(run, names)))
    return {n: results[n] for n in sorted(results)}, {n: plans[n].seed for n in plans}


def cmd_compress(args) -> int:
    weights, calib = load_inputs(args.weights, args.calib)

    def make_plan(name, m, n):
        return plan_for(args, m, n, tensor_seed(args.seed, name))

    layers, seeds = compress_bundle(weights, calib, make_plan, args.tensors)
    provenance = {
        "command": "compress",
        "flags": {
            "remaining": args.remaining,
            "rank": args.rank,
            "preserve": args.preserve,
            "iters": args.iters,
            "seed": args.seed,
            "power_iters": args.power_iters,
            "oversample": args.oversample,
            "epsilon": args.epsilon,
        },
        "calibration_hashes": {n: calib[n].source_hash for n in sorted(layers)},
    }
    write_compressed_bundle(args.out, layers, seeds, provenance)
    for name, layer in layers.items():
        log.info(
            "%s: rank %d, nnz %d, params %.4f, loss %.6g -> %.6g",
            name, layer.rank, layer.s.nnz, layer.parameter_fraction(),
            layer.trace.initial_loss, layer.scaled_loss,
        )
    return EXIT_OK


# ---------------------------------------------------------------- report


def load_cost_calibration(path) -> list[dict]:
    data = json.loads(Path(path).read_text())
    entries = data["entries"] if isinstance(data, dict) else data
    out = []
    for e in entries:
        row = speedup_from_costs(float(e["dense"]), float(e["sparse"]), float(e["lowrank"]))
        row["name"] = e["name"]
        out.append(row)
    return out


def tensor_report(name, layer, w, scaling, x_eval=None, points: int = 11, model=None) -> dict:
    m, n = layer.shape
    trace = layer.trace
    recomputed = loss_of(w, layer.s, layer.factors, scaling)
    initial = trace.initial_loss
    one_shot = trace.one_shot_loss
    report = {
        "summary": {
            "rows": m,
            "cols": n,
            "rank": layer.rank,
            "nnz": layer.s.nnz,
            "iterations": trace.iterations,
            "final_loss": recomputed,
            "manifest_loss": layer.scaled_loss,
            "initial_loss": initial,
            "one_shot_loss": one_shot,
        },
        "trace": [
            {
                "e1": a,
                "e2": b,
                "e2_pct_initial": 100.0 * b / initial if initial else 0.0,
                "e2_pct_one_shot": 100.0 * b / one_shot if one_shot else 0.0,
            }
            for a, b in zip(trace.e1, trace.e2)
        ],
        "budget": {
            "remaining_fraction": layer.plan.remaining_fraction,
            "realized_fraction": layer.parameter_fraction(),
            "preserved_fraction": layer.preserve_count / (m * n),
            "sparse_fraction": (layer.s.nnz - layer.preserve_count) / (m * n),
            "lowrank_fraction": layer.rank * (m + n) / (m * n),
        },
        "retention": [
            {"kept_fraction": q, "salience_fraction": f}
            for q, f in retention_curve(salience_of(w, scaling), points)
        ],
        "cost": cost_report(layer, model),
    }
    report["summary"]["pruning_fraction_for_80pct"] = fraction_for_salience(salience_of(w, scaling), 0.8)
    if x_eval is not None:
        report["reconstruction"] = reconstruction_report(layer, w, x_eval)
    return report


def flatten_report(report: dict) -> list[list]:
    rows = []
    for name, sections in report["tensors"].items():
        for section, body in sections.items():
            if isinstance(body, dict):
                for metric, value in body.items():
                    rows.append([name, section, "", metric, value])
            else:
                for i, item in enumerate(body):
                    for metric, value in item.items():
                        rows.append([name, section, i, metric, value])
    for i, item in enumerate(report.get("cost_calibration", [])):
        for metric, value in item.items():
            rows.append(["", "cost_calibration", i, metric, value])
    return rows


def render_report(report: dict, fmt: str) -> bytes:
    if fmt == "json":
        return dump_manifest(report)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in flatten_report(report):
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue().encode("utf-8")


def cmd_report(args) -> int:
    layers, _ = read_compressed_bundle(args.bundle)
    weights, calib = load_inputs(args.weights, args.calib)
    eval_bundle = WeightBundle.open(args.eval_activations) if args.eval_activations else None
    model = CostModel(args.overhead)
    report = {"tensors": {}}
    for name in sorted(layers):
        if name not in weights.entries:
            raise BundleError(f"tensor {name} is in the bundle but not in the weights")
        w = weights.load(name)
        if w.shape != layers[name].shape:
            raise BundleError(f"tensor {name}: bundle shape {layers[name].shape} != weight shape {w.shape}")
        x_eval = None
        if eval_bundle is not None and name in eval_bundle.entries:
            x_eval = eval_bundle.load(name).T
        scaling = calib[name].scaling(layers[name].plan.epsilon)
        report["tensors"][name] = tensor_report(name, layers[name], w, scaling, x_eval, args.points, model)
    if args.cost_calibration:
        report["cost_calibration"] = load_cost_calibration(args.cost_calibration)
    data = render_report(report, args.format)
    if args.out:
        atomic_write_bytes(Path(args.out), data)
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


# ----------------------------------------------------------------- sweep

SWEEP_RUN_COLUMNS = [
    "tensor", "rank", "iters", "preserve", "seed", "status",
    "final_loss", "initial_loss", "one_shot_loss", "parameter_fraction", "iterations_run",
]
SWEEP_SUMMARY_COLUMNS = [
    "tensor", "rank", "iters", "preserve", "runs", "loss_mean", "loss_std", "loss_rel_std",
]


def run_sweep(weights, calib, args) -> tuple[list[dict], list[dict]]:
    runs = []
    grid = list(itertools.product(weights.names(), args.rank_list, args.iters_list, args.preserve_list))
    for name, rank, iters, preserve in grid:
        e = weights.entries[name]
        w = None
        for seed in args.seed_list:
            row = {"tensor": name, "rank": rank, "iters": iters, "preserve": preserve, "seed": seed}
            plan = plan_for(
                args, e.rows, e.cols, tensor_seed(seed, name),
                rank=rank, iterations=iters, preserve_fraction=preserve,
            )
            try:
                allocate_budget(e.rows, e.cols, plan)
            except InfeasiblePlanError as exc:
                log.warning("skipping %s rank=%s iters=%s preserve=%s: %s", name, rank, iters, preserve, exc)
                row.update(status=f"skipped: {exc}")
                runs.append(row)
                continue
            if w is None:
                w = weights.load(name)
            layer = compress(w, calib[name].scaling(plan.epsilon), plan)
            row.update(
                status="ok",
                final_loss=layer.scaled_loss,
                initial_loss=layer.trace.initial_loss,
                one_shot_loss=layer.trace.one_shot_loss,
                parameter_fraction=layer.parameter_fraction(),
                iterations_run=layer.trace.iterations,
            )
            runs.append(row)

    summary = []
    for (name, rank, iters, preserve), group in itertools.groupby(
        runs, key=lambda r: (r["tensor"], r["rank"], r["iters"], r["preserve"])
    ):
        losses = np.array([r["final_loss"] for r in group if r["status"] == "ok"])
        if losses.size == 0:
            continue
        mean = float(losses.mean())
        std = float(losses.std(ddof=1)) if losses.size > 1 else 0.0
        summary.append(
            {
                "tensor": name, "rank": rank, "iters": iters, "preserve": preserve,
                "runs": int(losses.size), "loss_mean": mean, "loss_std": std,
                "loss_rel_std": std / mean if mean else 0.0,
            }
        )
    return runs, summary


def write_csv(path: Path, columns: list[str], rows: list[dict]):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", restval="")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def cmd_sweep(args) -> int:
    weights, calib = load_inputs(args.weights, args.calib)
    runs, summary = run_sweep(weights, calib, args)
    out = Path(args.out_dir)
    write_csv(out / "runs.csv", SWEEP_RUN_COLUMNS, runs)
    write_csv(out / "summary.csv", SWEEP_SUMMARY_COLUMNS, summary)
    log.info("sweep: %d runs, %d configurations -> %s", len(runs), len(summary), out)
    return EXIT_OK


# ----------------------------------------------------------- inspect/synth


def cmd_inspect(args) -> int:
    sys.stdout.write(dump_manifest(read_manifest(args.bundle)).decode("utf-8"))
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.kind == "planted":
        w = synthetic.planted(args.rows, args.cols, args.planted_rank, seed=args.seed)
    else:
        w = synthetic.geometric_spectrum(args.rows, args.cols, args.ratio, args.seed)
    write_weight_bundle(args.out, {args.name: w})
    if args.activations_out:
        x = synthetic.lognormal_activations(args.cols, args.samples, args.sigma, args.seed + 1)
        write_weight_bundle(args.activations_out, {args.name: x}, kind="activations")
    return EXIT_OK


# ------------------------------------------------------------------ main


def add_plan_flags(p: argparse.ArgumentParser):
    p.add_argument("--remaining", type=float, default=0.5, help="fraction of parameters kept")
    p.add_argument("--rank", type=int, default=None,
                   help="low-rank rank (default: round(128 * min(m, n) / 4096))")
    p.add_argument("--preserve", type=float, default=0.01, help="fraction set aside by salience")
    p.add_argument("--iters", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--power-iters", type=int, default=2)
    p.add_argument("--oversample", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON, help="calibration norm floor")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="reduce activations to per-channel norms")
    p.add_argument("activations", nargs="*", help="activation bundles (sample-major)")
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic", help="e.g. lognormal:sigma=2,seed=0,channels=4096,samples=8192")
    p.add_argument("--name", action="append", help="tensor name(s) for --synthetic")
    p.add_argument("--chunk-rows", type=int, default=1024)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("compress", help="compress every tensor of a weight bundle")
    p.add_argument("weights")
    p.add_argument("calib")
    p.add_argument("--out", required=True)
    p.add_argument("--tensors", nargs="*", help="restrict to these tensor names")
    add_plan_flags(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("report", help="losses, budget split, retention and cost per tensor")
    p.add_argument("bundle")
    p.add_argument("weights")
    p.add_argument("calib")
    p.add_argument("--eval-activations", help="held-out activation bundle (sample-major)")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out")
    p.add_argument("--points", type=int, default=11, help="retention curve samples")
    p.add_argument("--overhead", type=float, default=1.0, help="sparse cost per nonzero")
    p.add_argument("--cost-calibration", help="JSON list of {name, dense, sparse, lowrank} cycles")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="grid over rank, iterations, preserve fraction and seed")
    p.add_argument("weights")
    p.add_argument("calib")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rank-list", type=lambda s: parse_list(s, int), required=True)
    p.add_argument("--iters-list", type=lambda s: parse_list(s, int), default=[40])
    p.add_argument("--preserve-list", type=parse_list, default=[0.01])
    p.add_argument("--seed-list", type=lambda s: parse_list(s, int), default=[0])
    add_plan_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="print a bundle manifest")
    p.add_argument("bundle")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write a synthetic weight bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["planted", "geometric"], default="planted")
    p.add_argument("--name", default="layer0")
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--cols", type=int, default=48)
    p.add_argument("--planted-rank", type=int, default=8)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--activations-out", help="also write log-normal activations here")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--sigma", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ArithmeticError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (ValueError, KeyError) as exc:
        log.error("validation error: %s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
