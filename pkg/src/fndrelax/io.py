"""On-disk formats.

Trace archive (``.npz``, format ``fndrelax-trace`` v1)
    A zip container readable by ``numpy.load``. Members:

    ``meta.json``   schedule, noise config, seed, elapsed time, run metadata
    ``counts.npy``  int64 (n_blocks, n_tau, n_bins) photon counts
    ``pulses.npy``  int64 (n_blocks, n_tau) pulses accumulated per cell
    ``drift.npy``   float64 (n_blocks, n_tau) multiplicative drift offset

    Members are written in that order with a fixed timestamp, so equal
    inputs give byte-identical files.

Curve table (``.tsv``, format ``fndrelax-curve`` v1)
    ``#``-prefixed ``key: value`` header lines, then a tab-separated table
    with columns ``tau_s ratio sigma photons_signal photons_reference``,
    one row per dark time in acquisition order.

Fit record (``.json``, format ``fndrelax-fit`` v1)
    Parameters, 1-sigma errors, covariance, 68% bootstrap intervals,
    reduced chi-square, the reliability flag and notes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import zipfile
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .acquisition import Acquisition, NoiseConfig, PulseSchedule
from .analysis import T1Curve
from .core import RelaxationParams
from .fitting import PARAM_NAMES, FitResult

TRACE_FORMAT = "fndrelax-trace"
CURVE_FORMAT = "fndrelax-curve"
FIT_FORMAT = "fndrelax-fit"
FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
CURVE_COLUMNS = ("tau_s", "ratio", "sigma", "photons_signal", "photons_reference")


class FormatError(ValueError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if obj != obj else ("inf" if obj > 0 else "-inf")
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_acquisition(path: str | Path, acq: Acquisition, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": TRACE_FORMAT,
        "version": FORMAT_VERSION,
        "schedule": asdict(acq.schedule),
        "noise": asdict(acq.noise),
        "seed": acq.seed,
        "elapsed_time": acq.elapsed_time,
        "run": acq.meta,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "meta.json", dumps(meta).encode())
        _write_member(zf, "counts.npy", _npy_bytes(acq.counts.astype(np.int64)))
        _write_member(zf, "pulses.npy", _npy_bytes(acq.pulses.astype(np.int64)))
        _write_member(zf, "drift.npy", _npy_bytes(acq.drift.astype(np.float64)))
    return path


def load_acquisition(path: str | Path) -> tuple[Acquisition, dict]:
    """Read a trace archive; returns the acquisition and the ``extra`` block."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            counts, pulses, drift = z["counts"], z["pulses"], z["drift"]
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise FormatError(f"{path}: not a trace archive ({exc})") from None
    if meta.get("format") != TRACE_FORMAT:
        raise FormatError(f"{path}: format {meta.get('format')!r}, expected {TRACE_FORMAT!r}")
    if meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {meta.get('version')}")
    s = meta["schedule"]
    schedule = PulseSchedule(tuple(s["tau_list"]), s["readout_len"], s["bin_width"],
                             s["interleave"])
    noise = NoiseConfig(**meta["noise"])
    if counts.shape != (len(pulses), len(schedule.tau_list), schedule.n_bins):
        raise FormatError(f"{path}: counts shape {counts.shape} does not match the schedule")
    acq = Acquisition(schedule, noise, meta["seed"], counts, pulses, drift,
                      meta["elapsed_time"], meta.get("run", {}))
    return acq, meta.get("extra", {})


def _header(fmt: str, meta: dict | None) -> list[str]:
    lines = [f"# format: {fmt}", f"# version: {FORMAT_VERSION}"]
    for k in sorted(meta or {}):
        lines.append(f"# {k}: {json.dumps(_jsonable(meta[k]), sort_keys=True)}")
    return lines


def _parse_header(lines: Iterable[str]) -> dict:
    out = {}
    for line in lines:
        key, _, value = line[1:].strip().partition(": ")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def write_curve(path: str | Path, curve: T1Curve, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = _header(CURVE_FORMAT, meta)
    lines.append("\t".join(CURVE_COLUMNS))
    for t, r, s, ps, pr in curve.points:
        lines.append("\t".join([repr(float(t)), repr(float(r)), repr(float(s)),
                                str(int(ps)), str(int(pr))]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_curve(path: str | Path) -> tuple[T1Curve, dict]:
    path = Path(path)
    try:
        text = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    head = [ln for ln in text if ln.startswith("#")]
    body = [ln for ln in text if ln and not ln.startswith("#")]
    meta = _parse_header(head)
    if meta.get("format") != CURVE_FORMAT:
        raise FormatError(f"{path}: not a curve table")
    rows = list(csv.reader(body, delimiter="\t"))
    if not rows or tuple(rows[0]) != CURVE_COLUMNS:
        raise FormatError(f"{path}: expected columns {CURVE_COLUMNS}")
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, 5)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    curve = T1Curve(data[:, 0], data[:, 1], data[:, 2], data[:, 3].astype(np.int64),
                    data[:, 4].astype(np.int64), np.arange(len(data)))
    return curve, meta


def fit_record(fit: FitResult, meta: dict | None = None) -> dict:
    return {
        "format": FIT_FORMAT,
        "version": FORMAT_VERSION,
        "params": dict(zip(PARAM_NAMES, fit.params.as_array().tolist())),
        "sigmas": {k: float(v) for k, v in fit.param_sigmas.items()},
        "covariance": np.asarray(fit.covariance).tolist(),
        "bootstrap_68": {k: [float(v[0]), float(v[1])] for k, v in fit.bootstrap_intervals.items()},
        "chi2_reduced": fit.chi2_reduced,
        "reliable": fit.reliable,
        "notes": fit.notes,
        "n_iter": fit.n_iter,
        "n_points": fit.n_points,
        "fixed_stretch": fit.fixed_stretch,
        "meta": meta or {},
    }


def write_fit(path: str | Path, fit: FitResult, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(fit_record(fit, meta)))
    return path


def read_fit(path: str | Path) -> FitResult:
    path = Path(path)
    try:
        rec = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    if rec.get("format") != FIT_FORMAT:
        raise FormatError(f"{path}: not a fit record")
    params = RelaxationParams(*(rec["params"][k] for k in PARAM_NAMES))
    return FitResult(params, rec["sigmas"], np.array(rec["covariance"]),
                     {k: tuple(v) for k, v in rec["bootstrap_68"].items()},
                     rec["chi2_reduced"], rec["reliable"], rec["notes"], rec["n_iter"],
                     n_points=rec["n_points"], fixed_stretch=rec["fixed_stretch"],
                     extra=rec.get("meta", {}))


def write_table(path: str | Path, records: Sequence[dict], columns: Sequence[str],
                meta: dict | None = None, fmt: str = "fndrelax-table") -> Path:
    """Tab-separated table; missing or ``None`` cells are left blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = _header(fmt, meta)
    lines.append("\t".join(columns))
    for rec in records:
        lines.append("\t".join(_cell(rec.get(c)) for c in columns))
    path.write_text("\n".join(lines) + "\n")
    return path


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v).replace("\t", " ")


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
