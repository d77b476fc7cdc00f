"""Command-line front end.

    mxfp4sim run --config table1_desk.cfg --out results/ --seed 0
    mxfp4sim probe --outlier-scale 100 --hadamard det16 --layout row
    mxfp4sim bench

Exit codes: 0 ran to completion (non-converging rows included), 1 usage or
parse error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from mxfp4sim.block_quant import QuantLayout, quant_error_stats, quantize_tensor, serialize
from mxfp4sim.experiment_file import ParseError, load_experiment, parse_experiment
from mxfp4sim.hadamard import HadamardSpec, apply_rotation, fast_apply
from mxfp4sim.trainer import curve_csv, run_ladder, run_summary

log = logging.getLogger("mxfp4sim")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
BUNDLED = ("table1_desk.cfg", "smoke.cfg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def bundled_config(name: str) -> str:
    return resources.files("mxfp4sim.configs").joinpath(name).read_text()


def _read_config(path: str, seed):
    p = Path(path)
    if p.exists():
        return load_experiment(p, seed)
    if path in BUNDLED:
        return parse_experiment(bundled_config(path), seed)
    raise UsageError(f"config file not found: {path}")


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def format_table(summaries: list[dict]) -> str:
    """Plain-text mirror of the Stabilizer / Hadamard / MXFP4 GEMMs / overhead table."""
    header = ("Stabilizer", "Hadamard", "MXFP4 paths", "Step overhead")
    rows = [header]
    for s in summaries:
        paths = " + ".join(p.capitalize() for p in s["mx_paths"]) or "None (all baseline)"
        if s["overhead"] is not None:
            over = f"{100 * s['overhead']:.1f}%"
        else:
            over = f"Does Not Converge ({s['reason']})"
        stab = {"none": "None", "stochastic_rounding": "Stochastic Rounding",
                "randomized_hadamard": "Randomized Hadamard",
                "deterministic_hadamard": "Deterministic Hadamard"}[s["stabilizer"]]
        if not s["mx_paths"] and s["stabilizer"] == "none":
            stab = "Baseline"
        rows.append((stab, s["hadamard"], paths, over))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_run(config: str, out: str, seed: int | None = None, jobs: int = 1) -> int:
    configs = _read_config(config, seed)
    out_dir = Path(out)
    (out_dir / "runs").mkdir(parents=True, exist_ok=True)
    log.info("running %d ladder rows from %s", len(configs), config)
    results = run_ladder(configs, jobs=jobs)
    summaries = []
    for i, (cfg, res) in enumerate(zip(configs, results)):
        csv_name = f"runs/{i:02d}_{_slug(cfg.name)}.csv"
        (out_dir / csv_name).write_text(curve_csv(res))
        s = run_summary(res, cfg)
        s["curve_csv"] = csv_name
        summaries.append(s)
    doc = {
        "seed": configs[0].seed,
        "target_loss": results[0].target_loss,
        "rows": summaries,
    }
    (out_dir / "summary.json").write_text(json.dumps(doc, indent=2) + "\n")
    table = format_table(summaries)
    (out_dir / "table.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def synthetic_tensor(dist: str, rows: int, cols: int, outlier_scale: float,
                     outliers_per_block: int, seed: int) -> np.ndarray:
    """Random tensor with ``outliers_per_block`` spikes in every 32-wide row block."""
    rng = np.random.default_rng(seed)
    if dist == "gaussian":
        x = rng.normal(size=(rows, cols))
    elif dist == "laplace":
        x = rng.laplace(size=(rows, cols))
    elif dist == "zeros":
        x = np.zeros((rows, cols))
    else:
        raise UsageError(f"unknown distribution {dist!r}")
    if outlier_scale and outliers_per_block:
        med = np.median(np.abs(x)) if x.any() else 1.0
        for r in range(rows):
            for c0 in range(0, cols, 32):
                width = min(32, cols - c0)
                idx = rng.choice(width, size=min(outliers_per_block, width), replace=False)
                x[r, c0 + idx] = rng.choice([-1.0, 1.0], size=idx.size) * outlier_scale * med
    return x


def cmd_quant_probe(dist="gaussian", rows=64, cols=128, outlier_scale=0.0, outliers_per_block=0,
                    layout="row", hadamard="det16", seed=0, dump=None) -> dict:
    """Quantization error of one synthetic tensor with and without rotation."""
    lay = QuantLayout(layout)
    spec = HadamardSpec.from_tag(hadamard, seed)
    x = synthetic_tensor(dist, rows, cols, outlier_scale, outliers_per_block, seed)
    q = quantize_tensor(x, lay)
    plain = quant_error_stats(x, q)
    report = {"layout": layout, "hadamard": hadamard, "shape": [rows, cols],
              "unrotated": {"mse": plain["mse"], "max_abs_err": plain["max_abs_err"]}}
    if spec is not None:
        # rotate along the axis the blocks run along; H is orthogonal so the
        # MSE equals the error of the un-rotated reconstruction
        axis = "rows" if lay is QuantLayout.COL_32X1 else "cols"
        xr = apply_rotation(x, spec, axis)
        qr = quantize_tensor(xr, lay)
        rot = quant_error_stats(xr, qr)
        report["rotated"] = {"mse": rot["mse"], "max_abs_err": rot["max_abs_err"]}
    if dump:
        Path(dump).write_bytes(serialize(q))
    return report


def cmd_bench_hadamard(rows: int = 4096, cols: int = 256, repeats: int = 5) -> dict:
    """Per-tile throughput of dense and butterfly rotations for H16 and H32."""
    x = np.random.default_rng(0).normal(size=(rows, cols))
    variants = []
    for size in (16, 32):
        spec = HadamardSpec(size)
        for method, fn in (("dense", apply_rotation), ("fast", fast_apply)):
            fn(x, spec)
            best = float("inf")
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn(x, spec)
                best = min(best, time.perf_counter() - t0)
            tiles = rows * cols // size
            variants.append({"name": f"det{size}-{method}", "size": size, "method": method,
                             "seconds": best, "tiles_per_second": tiles / best})
    by = {v["name"]: v for v in variants}
    if by["det32-fast"]["tiles_per_second"] < by["det32-dense"]["tiles_per_second"]:
        log.warning("fast Walsh-Hadamard path slower than dense multiply for size 32")
    return {"shape": [rows, cols], "variants": variants}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mxfp4sim", description="MXFP4 micro-scaling training simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a ladder experiment file")
    r.add_argument("--config", required=True, help=f"experiment file or bundled name {BUNDLED}")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, default=None, help="master seed (overrides the file)")
    r.add_argument("--jobs", type=int, default=1)

    q = sub.add_parser("probe", help="quantization error with and without rotation")
    q.add_argument("--dist", choices=["gaussian", "laplace", "zeros"], default="gaussian")
    q.add_argument("--rows", type=int, default=64)
    q.add_argument("--cols", type=int, default=128)
    q.add_argument("--outlier-scale", type=float, default=0.0)
    q.add_argument("--outliers-per-block", type=int, default=1)
    q.add_argument("--layout", choices=["row", "col", "block"], default="row")
    q.add_argument("--hadamard", choices=["none", "det16", "det32", "rand16"], default="det16")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--dump", default=None, help="write the serialized QuantizedTensor here")

    b = sub.add_parser("bench", help="Hadamard microbenchmark (informational)")
    b.add_argument("--rows", type=int, default=4096)
    b.add_argument("--cols", type=int, default=256)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            if args.jobs < 1:
                raise UsageError("--jobs must be at least 1")
            return cmd_run(args.config, args.out, args.seed, args.jobs)
        if args.command == "probe":
            report = cmd_quant_probe(args.dist, args.rows, args.cols, args.outlier_scale,
                                     args.outliers_per_block, args.layout, args.hadamard,
                                     args.seed, args.dump)
        else:
            report = cmd_bench_hadamard(args.rows, args.cols)
        print(json.dumps(report, indent=2))
        return EXIT_OK
    except (ParseError, UsageError) as exc:
        print(f"mxfp4sim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"mxfp4sim: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
