"""Command-line entry point: ``fndrelax <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .acquisition import AcquisitionError
from .analysis import AnalysisError, build_curve, noise_audit
from .config import ConfigError, RunConfig, default_config, load_config
from .core import SnrInputs
from .fitting import FitConvergenceError
from .io import (FormatError, dumps, load_acquisition, read_curve, save_acquisition, write_curve,
                 write_fit, write_json, write_table)
from .pipeline import (EXIT_NONCONVERGENCE, EXIT_OK, EXIT_UNRELIABLE, PipelineError,
                       exit_code_for, fit, run_pipeline, simulate, stamp)
from .planner import PlanningError, compare_sizes, design_tau_grid, plan_experiment

log = logging.getLogger("fndrelax")

OUT_ENV = "FNDRELAX_OUT"
_STAMP_KEYS = ("config_hash", "package_version", "run", "seed")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    out = args.out or os.environ.get(OUT_ENV)
    return cfg.with_overrides(seed=args.seed, out_dir=out, preset=args.preset)


def _emit(rows: list[dict], fmt: str, columns: list[str] | None = None) -> None:
    if fmt == "records":
        sys.stdout.write(dumps(rows))
        return
    columns = columns or (list(rows[0]) if rows else [])
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    runs = ["control"] + (["target"] if args.target else [])
    rows = []
    for name in runs:
        acq = simulate(cfg, name == "target", n_jobs=args.jobs)
        path = save_acquisition(out / f"traces_{name}.npz", acq, {**stamp(cfg), "run": name})
        rows.append({"run": name, "file": str(path), "blocks": acq.n_blocks,
                     "pulses": acq.total_pulses, "elapsed_s": acq.elapsed_time,
                     "detected_cps": acq.meta["detected_rate"]})
    _emit(rows, args.format)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args) if args.config else None
    rows = []
    for src in args.traces:
        acq, extra = load_acquisition(src)
        windows = cfg.analysis.windows if cfg else default_config().analysis.windows
        factor = cfg.noise_factor if cfg else acq.noise.excess_noise_factor
        curve = build_curve(acq.traces(), windows, factor)
        out = Path(args.out or os.environ.get(OUT_ENV) or Path(src).parent)
        path = write_curve(out / f"curve_{_stem(src, 'traces_')}.tsv", curve,
                           {k: extra[k] for k in _STAMP_KEYS if k in extra})
        rows.append({"traces": str(src), "curve": str(path), "points": len(curve),
                     "first_ratio": float(curve.ratio[0])})
    _emit(rows, args.format)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _config(args)
    rows, status = [], EXIT_OK
    for src in args.curves:
        curve, meta = read_curve(src)
        out = Path(args.out or os.environ.get(OUT_ENV) or Path(src).parent)
        stem = _stem(src, "curve_")
        # same bootstrap substream as the pipeline uses for this run
        stream = "fit_target" if meta.get("run") == "target" else "fit_control"
        try:
            res = fit(cfg, curve, stream, n_jobs=args.jobs, fix_p=args.fix_p)
        except FitConvergenceError as exc:
            write_json(out / f"fit_{stem}.error.json",
                       {"stage": "fit", "error": type(exc).__name__, "message": str(exc),
                        "last_params": list(map(float, exc.last_params)), "source": str(src)})
            log.error("%s: %s", src, exc)
            status = EXIT_NONCONVERGENCE
            continue
        path = write_fit(out / f"fit_{stem}.json", res, {**meta, "source": Path(src).name})
        rows.append({"curve": str(src), "fit": str(path), "rate": res.rate,
                     "rate_sigma": res.rate_sigma, "contrast": res.params.contrast,
                     "stretch": res.params.stretch, "reliable": res.reliable,
                     "notes": res.notes})
        if not res.reliable and status == EXIT_OK:
            status = EXIT_UNRELIABLE
    if rows:
        _emit(rows, args.format)
    return status


def cmd_plan(args) -> int:
    cfg = _config(args)
    preset = cfg.ensemble.preset
    rate = preset.brightness * 10.0 ** (-cfg.noise.nd_optical_density)
    gm = cfg.plan.gamma_measured or preset.gamma_intrinsic_median
    inputs = SnrInputs(rate, cfg.schedule.readout_len, cfg.plan.total_time,
                       preset.ratio_contrast, preset.gamma_intrinsic_median, gm)
    summary = plan_experiment(inputs)
    grid = design_tau_grid(preset.gamma_intrinsic_median, len(cfg.schedule.tau_list),
                           cfg.schedule.bin_width)
    row = {"preset": preset.name, "photon_rate": rate, "gamma_intrinsic": inputs.gamma_intrinsic,
           "gamma_measured": gm, **asdict(summary), "tau_grid_min": grid[0],
           "tau_grid_max": grid[-1], "n_tau": len(grid)}
    _emit([row], args.format)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    settings = cfg.compare
    if args.no_target:
        settings = replace(settings, with_target=False)
    report = compare_sizes(settings, seed=cfg.seed, n_jobs=args.jobs)
    records = report.as_records()
    cols = ["size", "brightness", "contrast", "gamma_intrinsic", "gamma_intrinsic_sigma",
            "gamma_target", "gamma_target_sigma", "snr", "snr_sigma", "reliable", "rank", "notes"]
    out = Path(cfg.out_dir)
    meta = stamp(cfg)
    write_table(out / "compare_sizes.tsv", records, cols, meta, fmt="fndrelax-compare")
    write_json(out / "compare_sizes.json", {**meta, "ranking": report.ranking(), "rows": records})
    _emit(records, args.format, cols)
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _config(args) if args.config else None
    windows = cfg.analysis.windows if cfg else default_config().analysis.windows
    rows = []
    for src in args.traces:
        acq, _ = load_acquisition(src)
        for j, tau in enumerate(acq.schedule.tau_list):
            res = noise_audit(acq.block_traces(j), windows, min_repeats=args.min_repeats)
            rows.append({"traces": str(src), "tau": tau, "noise_factor": res.factor,
                         "repeats": res.n_repeats, "degenerate": res.degenerate})
    _emit(rows, args.format)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_pipeline(cfg, n_jobs=args.jobs)
    rows = [{"run": k, "rate": f.rate, "rate_sigma": f.rate_sigma, "contrast": f.params.contrast,
             "stretch": f.params.stretch, "reliable": f.reliable} for k, f in res.fits.items()]
    _emit(rows, args.format)
    iso = res.summary.get("isolation")
    if iso and args.format == "table":
        print(f"gamma_target = {iso['gamma_target']:.4g} +/- {iso['sigma']:.2g} s^-1"
              + (" (below control)" if iso["below_control"] else ""))
    print(f"outputs in {res.out_dir} (config {stamp(cfg)['config_hash']})", file=sys.stderr)
    return EXIT_OK if res.reliable else EXIT_UNRELIABLE


def _stem(path, prefix: str) -> str:
    stem = Path(path).stem
    return stem[len(prefix):] if stem.startswith(prefix) else stem


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help=f"output directory (also ${OUT_ENV})")
    common.add_argument("--preset", help="size preset, e.g. 100nm")
    common.add_argument("--format", choices=("table", "records"), default="table")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fndrelax", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate control (and target) traces")
    s.add_argument("--target", action="store_true", help="also simulate the target-added run")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("analyze", parents=[common], help="trace archives -> T1 curves")
    s.add_argument("traces", nargs="+")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("fit", parents=[common], help="T1 curves -> fit records")
    s.add_argument("curves", nargs="+")
    s.add_argument("--fix-p", type=float, help="hold the stretch exponent fixed")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("plan", parents=[common], help="shot-noise SNR planning")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("compare-sizes", parents=[common], help="rank FND sizes by SNR")
    s.add_argument("--no-target", action="store_true", help="control measurements only")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("audit-noise", parents=[common], help="excess noise over shot noise")
    s.add_argument("traces", nargs="+")
    s.add_argument("--min-repeats", type=int, default=20)
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("run", parents=[common], help="simulate, analyze, fit and report")
    s.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.record, sort_keys=True), file=sys.stderr)
        return exc.exit_code
    except (ConfigError, FormatError, PlanningError, AnalysisError, AcquisitionError,
            FitConvergenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
