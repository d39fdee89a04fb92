"""Config-driven runs: simulate, analyze, fit and report into one directory."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .acquisition import Acquisition, AcquisitionError, simulate_trace
from .analysis import AnalysisError, T1Curve, build_curve, isolate_target
from .config import ConfigError, RunConfig
from .ensemble import sample_ensemble
from .fitting import FitConvergenceError, FitResult, fit_stretched
from .io import file_digest, save_acquisition, write_curve, write_fit, write_json, write_table
from .planner import PlanningError, report_snr

log = logging.getLogger(__name__)

# exit codes shared with the CLI
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SIMULATION = 3
EXIT_NONCONVERGENCE = 4
EXIT_UNRELIABLE = 5

# substream labels; each stage draws from its own child of the run seed
_STREAMS = {"ensemble": 0, "control": 1, "target": 2, "fit_control": 3, "fit_target": 4}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, PipelineError):
        exc = exc.cause
    if isinstance(exc, FitConvergenceError):
        return EXIT_NONCONVERGENCE
    if isinstance(exc, AcquisitionError):
        return EXIT_SIMULATION
    if isinstance(exc, (ConfigError, PlanningError, AnalysisError, ValueError)):
        return EXIT_VALIDATION
    return 1


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, record: dict):
        super().__init__(f"{stage} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.record = record

    @property
    def exit_code(self) -> int:
        return exit_code_for(self.cause)


def stream_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(_STREAMS[name],))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "package_version": __version__}


@dataclass
class RunOutputs:
    out_dir: Path
    files: dict[str, Path] = field(default_factory=dict)
    fits: dict[str, FitResult] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def reliable(self) -> bool:
        return all(f.reliable for f in self.fits.values())

    def digests(self) -> dict[str, str]:
        return {k: file_digest(p) for k, p in sorted(self.files.items())}


def simulate(cfg: RunConfig, with_target: bool = False, n_jobs: int = 1) -> Acquisition:
    """Control run, or the target run when ``with_target`` is set."""
    spec = cfg.ensemble_spec(stream_seed(cfg.seed, "ensemble"))
    target = None
    if with_target:
        if cfg.target is None:
            raise ConfigError("no target section in the configuration")
        spec = replace(spec, fnd_concentration=spec.fnd_concentration * cfg.target.dilution)
        target = cfg.target.spec()
    ens = sample_ensemble(spec)
    name = "target" if with_target else "control"
    return simulate_trace(ens, cfg.schedule, cfg.noise, target, cfg.stop,
                          seed=stream_seed(cfg.seed, name), n_jobs=n_jobs)


def analyze(cfg: RunConfig, acq: Acquisition) -> T1Curve:
    return build_curve(acq.traces(), cfg.analysis.windows, cfg.noise_factor)


def fit(cfg: RunConfig, curve: T1Curve, stream: str = "fit_control",
        n_jobs: int | None = None, fix_p: float | None = None) -> FitResult:
    p = cfg.analysis.fix_p if fix_p is None else fix_p
    return fit_stretched(curve, fix_p=p, n_bootstrap=cfg.analysis.n_bootstrap,
                         random_state=stream_seed(cfg.seed, stream), n_jobs=n_jobs)


def _error_record(cfg: RunConfig, stage: str, exc: BaseException) -> dict:
    rec = {"stage": stage, "error": type(exc).__name__, "message": str(exc),
           "exit_code": exit_code_for(exc), **stamp(cfg)}
    if isinstance(exc, FitConvergenceError):
        rec["last_params"] = np.asarray(exc.last_params).tolist()
    return rec


_FIT_COLUMNS = ("run", "contrast", "contrast_sigma", "rate", "rate_sigma", "stretch",
                "stretch_sigma", "offset", "chi2_reduced", "reliable", "notes")


def _fit_row(name: str, f: FitResult) -> dict:
    row = {"run": name, "chi2_reduced": f.chi2_reduced, "reliable": f.reliable, "notes": f.notes}
    for k, v in zip(("contrast", "rate", "stretch", "offset"), f.params.as_array()):
        row[k] = float(v)
        row[f"{k}_sigma"] = f.param_sigmas[k]
    return row


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None,
                 n_jobs: int = 1) -> RunOutputs:
    """Simulate, reduce, fit and report; every file carries the config hash and seed.

    The same configuration always produces byte-identical files, whatever
    ``n_jobs`` is. A failing stage writes ``error.json`` and raises
    :class:`PipelineError`.
    """
    out = RunOutputs(Path(out_dir or cfg.out_dir))
    out.out_dir.mkdir(parents=True, exist_ok=True)
    meta = stamp(cfg)
    runs = ["control"] + (["target"] if cfg.target is not None else [])
    stage = "simulate"
    try:
        acqs = {}
        for name in runs:
            stage = f"simulate:{name}"
            acqs[name] = simulate(cfg, name == "target", n_jobs=n_jobs)
            out.files[f"traces_{name}"] = save_acquisition(
                out.out_dir / f"traces_{name}.npz", acqs[name], {**meta, "run": name})
        for name in runs:
            stage = f"analyze:{name}"
            curve = analyze(cfg, acqs[name])
            out.files[f"curve_{name}"] = write_curve(out.out_dir / f"curve_{name}.tsv", curve,
                                                     {**meta, "run": name})
            stage = f"fit:{name}"
            res = fit(cfg, curve, f"fit_{name}", n_jobs=n_jobs)
            out.fits[name] = res
            out.files[f"fit_{name}"] = write_fit(out.out_dir / f"fit_{name}.json", res,
                                                 {**meta, "run": name})
        stage = "report"
        out.summary = _summarize(cfg, acqs, out.fits)
    except Exception as exc:  # any stage failure becomes an error record
        rec = _error_record(cfg, stage, exc)
        write_json(out.out_dir / "error.json", rec)
        raise PipelineError(stage, exc, rec) from exc

    rows = [_fit_row(k, f) for k, f in out.fits.items()]
    out.files["report"] = write_table(out.out_dir / "report.tsv", rows, _FIT_COLUMNS, meta,
                                      fmt="fndrelax-report")
    manifest = {**meta, "config": cfg.normalized(), "results": out.summary,
                "files": {k: {"path": p.name, "sha256": file_digest(p)}
                          for k, p in sorted(out.files.items())}}
    out.files["manifest"] = write_json(out.out_dir / "manifest.json", manifest)
    return out


def _summarize(cfg: RunConfig, acqs: dict, fits: dict) -> dict:
    summary = {name: {"rate": f.rate, "rate_sigma": f.rate_sigma,
                      "contrast": f.params.contrast, "stretch": f.params.stretch,
                      "reliable": f.reliable, "elapsed_time": acqs[name].elapsed_time,
                      "detected_rate": acqs[name].meta["detected_rate"]}
               for name, f in fits.items()}
    if "target" in fits:
        fi, fm = fits["control"], fits["target"]
        iso = isolate_target(fm, fi, force=True)
        summary["isolation"] = {"gamma_target": iso.gamma_target, "sigma": iso.sigma,
                                "below_control": iso.below_control,
                                "forced": not (fi.reliable and fm.reliable)}
        if fi.reliable and fm.reliable:
            value, sigma, tau = report_snr(fi, fm, acqs["target"].meta["detected_rate"],
                                           cfg.analysis.windows.signal_len,
                                           acqs["target"].elapsed_time, cfg.noise_factor)
            summary["snr_half_t1"] = {"snr": value, "sigma": sigma, "tau": tau}
    return summary
