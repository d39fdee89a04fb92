"""YAML run configuration.

Every physical quantity carries its unit in the file (``"80 us"``,
``"2.7 /ms"``, ``"3.99 mM"``); bare numbers are only accepted for
dimensionless knobs. Values are normalised to the library's internal units
(seconds, s^-1, nm, mM, ug/ml, counts/s) before anything else sees them.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import pint
import yaml

from .acquisition import NoiseConfig, PulseSchedule, StopCondition
from .analysis import WindowSpec
from .ensemble import EnsembleSpec, TargetSpec, mix_solutions
from .planner import (CONTROL_VOLUME, PRESETS, SPIKE_CONCENTRATION, SPIKE_VOLUME,
                      ComparisonSettings, SizePreset, design_tau_grid, preset_ensemble_spec)

ureg = pint.UnitRegistry()
ureg.define("cps = count / second")
ureg.define("kcps = 1e3 * cps")
ureg.define("Mcps = 1e6 * cps")

# internal unit for each kind of quantity
UNITS = {
    "time": "s",
    "rate": "1/s",
    "length": "nm",
    "molar": "mM",
    "mass_conc": "ug/ml",
    "volume": "uL",
    "coupling": "1/s * nm**6 / mM",
}


class ConfigError(ValueError):
    """Configuration that fails validation; raised before any simulation."""


def parse_quantity(value: Any, kind: str, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, str):
        raise ConfigError(f"{where}: expected a quantity with units like '{_example(kind)}', "
                          f"got {value!r}")
    try:
        q = ureg.Quantity(value)
        # drop conversion noise so "80 us" and "0.08 ms" normalise identically
        return float(f"{float(q.to(UNITS[kind]).magnitude):.15g}")
    except pint.DimensionalityError:
        raise ConfigError(f"{where}: {value!r} is not a {kind.replace('_', ' ')} "
                          f"(e.g. '{_example(kind)}')") from None
    except (pint.UndefinedUnitError, pint.errors.DefinitionSyntaxError, ValueError,
            AttributeError, TypeError) as exc:
        raise ConfigError(f"{where}: cannot parse {value!r}: {exc}") from None


def _example(kind: str) -> str:
    return {"time": "80 us", "rate": "2.7 /ms", "length": "100 nm", "molar": "3.99 mM",
            "mass_conc": "10 ug/ml", "volume": "30 uL",
            "coupling": "1e8 /s * nm**6 / mM"}[kind]


def _number(value: Any, where: str, *, integer: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a plain number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    return int(value) if integer else float(value)


class _Section:
    """Pops keys from one mapping and complains about leftovers."""

    def __init__(self, data: Any, name: str):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{name}: expected a mapping, got {type(data).__name__}")
        self.data = dict(data)
        self.name = name

    def where(self, key: str) -> str:
        return f"{self.name}.{key}" if self.name else key

    def has(self, key: str) -> bool:
        return key in self.data

    def raw(self, key, default=None):
        return self.data.pop(key, default)

    def q(self, key, kind, default=None):
        if key not in self.data:
            return default
        return parse_quantity(self.data.pop(key), kind, self.where(key))

    def num(self, key, default=None, integer=False):
        if key not in self.data:
            return default
        return _number(self.data.pop(key), self.where(key), integer=integer)

    def flag(self, key, default=False):
        v = self.data.pop(key, default)
        if not isinstance(v, bool):
            raise ConfigError(f"{self.where(key)}: expected true/false, got {v!r}")
        return v

    def sub(self, key) -> "_Section":
        return _Section(self.data.pop(key, None), self.where(key))

    def done(self):
        if self.data:
            raise ConfigError(f"{self.name or 'config'}: unknown keys {sorted(self.data)}")


@dataclass(frozen=True)
class EnsembleConfig:
    preset: SizePreset
    fnd_concentration: float = 10.0  # ug/ml
    depth_mode: str = "volume"
    max_emitters: int = 2048


@dataclass(frozen=True)
class TargetConfig:
    gd_concentration: float  # mM, in the measured suspension
    coupling_constant: float
    softening_depth: float = 1.0
    dilution: float = 1.0  # FND concentration factor after the spike

    def spec(self) -> TargetSpec:
        return TargetSpec(self.gd_concentration, self.coupling_constant, self.softening_depth)


@dataclass(frozen=True)
class AnalysisConfig:
    windows: WindowSpec = WindowSpec()
    fix_p: float | None = None
    n_bootstrap: int = 200
    noise_factor: float | None = None  # sigma inflation; defaults to the simulated factor


@dataclass(frozen=True)
class PlanConfig:
    total_time: float = 3000.0
    gamma_measured: float | None = None


@dataclass(frozen=True)
class RunConfig:
    ensemble: EnsembleConfig
    schedule: PulseSchedule
    noise: NoiseConfig
    stop: StopCondition
    analysis: AnalysisConfig = AnalysisConfig()
    target: TargetConfig | None = None
    plan: PlanConfig = PlanConfig()
    compare: ComparisonSettings = field(default_factory=ComparisonSettings)
    out_dir: str = "fndrelax-out"
    seed: int = 0
    source: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def noise_factor(self) -> float:
        f = self.analysis.noise_factor
        return self.noise.excess_noise_factor if f is None else f

    def ensemble_spec(self, seed: int) -> EnsembleSpec:
        spec = preset_ensemble_spec(self.ensemble.preset, self.schedule, self.noise,
                                    self.analysis.windows, self.ensemble.fnd_concentration,
                                    seed=seed, max_emitters=self.ensemble.max_emitters)
        return replace(spec, depth_mode=self.ensemble.depth_mode)

    def normalized(self) -> dict:
        """Plain-data view in internal units; the basis of the config hash."""
        return _plain({
            "ensemble": asdict(self.ensemble),
            "schedule": asdict(self.schedule),
            "noise": asdict(self.noise),
            "stop": asdict(self.stop),
            "analysis": asdict(self.analysis),
            "target": None if self.target is None else asdict(self.target),
            "plan": asdict(self.plan),
            "compare": _compare_plain(self.compare),
            "seed": self.seed,
        })

    def config_hash(self) -> str:
        blob = json.dumps(self.normalized(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None,
                       preset: str | None = None) -> "RunConfig":
        cfg = self
        if preset is not None:
            # the ND filter and default grid depend on the preset, so re-derive them
            _preset(preset, "--preset")
            src = dict(self.source)
            ens = dict(src.get("ensemble") or {})
            ens["preset"] = preset
            src["ensemble"] = ens
            cfg = replace(config_from_dict(src), seed=cfg.seed, out_dir=cfg.out_dir)
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if out_dir is not None:
            cfg = replace(cfg, out_dir=str(out_dir))
        return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and obj != obj:
        return None
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def _compare_plain(c: ComparisonSettings) -> dict:
    d = asdict(c)
    d["presets"] = {k: asdict(v) for k, v in c.presets.items()}
    return d


def _preset(name: str, where: str) -> SizePreset:
    if name not in PRESETS:
        raise ConfigError(f"{where}: unknown preset {name!r}; known: {sorted(PRESETS)}")
    return PRESETS[name]


def _ensemble(sec: _Section) -> EnsembleConfig:
    name = sec.raw("preset")
    if name is not None:
        base = _preset(name, sec.where("preset"))
    else:
        missing = [k for k in ("diameter", "brightness", "contrast", "gamma_intrinsic")
                   if not sec.has(k)]
        if missing:
            raise ConfigError(f"{sec.name}: give a preset or all of {missing}")
        base = SizePreset("custom", 1.0, 1.0, 0.01, 1.0)
    updates = {
        "diameter": sec.q("diameter", "length"),
        "brightness": sec.q("brightness", "rate"),
        "ratio_contrast": sec.num("contrast"),
        "gamma_intrinsic_median": sec.q("gamma_intrinsic", "rate"),
        "gamma_intrinsic_logsigma": sec.num("gamma_logsigma"),
        "diameter_cv": sec.num("diameter_cv"),
    }
    try:
        preset = replace(base, **{k: v for k, v in updates.items() if v is not None})
        if preset.brightness <= 0 or preset.diameter <= 0 or preset.gamma_intrinsic_median <= 0:
            raise ConfigError(f"{sec.name}: diameter, brightness and gamma_intrinsic must be > 0")
        out = EnsembleConfig(
            preset,
            fnd_concentration=sec.q("fnd_concentration", "mass_conc", 10.0),
            depth_mode=sec.raw("depth_mode", "volume"),
            max_emitters=sec.num("max_emitters", 2048, integer=True),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{sec.name}: {exc}") from None
    if out.depth_mode not in ("volume", "surface"):
        raise ConfigError(f"{sec.where('depth_mode')}: expected 'volume' or 'surface'")
    sec.done()
    return out


def _schedule(sec: _Section, preset: SizePreset) -> PulseSchedule:
    readout = sec.q("readout_len", "time", 80e-6)
    bin_width = sec.q("bin_width", "time", 0.5e-6)
    interleave = sec.flag("interleave", True)
    if sec.has("tau"):
        raw = sec.raw("tau")
        if not isinstance(raw, list) or not raw:
            raise ConfigError(f"{sec.where('tau')}: expected a non-empty list of times")
        tau = [parse_quantity(v, "time", f"{sec.where('tau')}[{i}]") for i, v in enumerate(raw)]
    else:
        grid = sec.sub("grid")
        gamma = grid.q("gamma_guess", "rate", preset.gamma_intrinsic_median)
        n = grid.num("n_points", 20, integer=True)
        grid.done()
        try:
            tau = design_tau_grid(gamma, n, bin_width)
        except ValueError as exc:
            raise ConfigError(f"{sec.name}.grid: {exc}") from None
    sec.done()
    try:
        return PulseSchedule(tuple(tau), readout, bin_width, interleave)
    except ValueError as exc:
        raise ConfigError(f"{sec.name}: {exc}") from None


def _noise(sec: _Section, preset: SizePreset) -> NoiseConfig:
    limit = sec.q("detector_linear_limit", "rate", 2e6)
    od = sec.raw("nd_optical_density", "auto")
    if od == "auto":
        od = preset.attenuation(limit)
    else:
        od = _number(od, sec.where("nd_optical_density"))
    try:
        noise = NoiseConfig(
            drift_amplitude=sec.num("drift_amplitude", 0.025),
            drift_timescale=sec.q("drift_timescale", "time", 300.0),
            excess_noise_factor=sec.num("excess_noise_factor", 2.0),
            detector_linear_limit=limit,
            dead_time=sec.q("dead_time", "time", 25e-9),
            spin_mixed_mode=sec.flag("spin_mixed_mode", False),
            nd_optical_density=od,
            pol_time=sec.q("pol_time", "time", 20e-6),
        )
    except ValueError as exc:
        raise ConfigError(f"{sec.name}: {exc}") from None
    sec.done()
    return noise


def _stop(sec: _Section, windows: WindowSpec) -> StopCondition:
    kinds = [k for k in ("photons", "time", "repeats") if sec.has(k)]
    if len(kinds) > 1:
        raise ConfigError(f"{sec.name}: give one of photons/time/repeats, not {kinds}")
    kind = kinds[0] if kinds else "photons"
    if kind == "time":
        value = sec.q("time", "time")
    else:
        value = sec.num(kind, 1.2e6 if kind == "photons" else None)
    try:
        stop = StopCondition(kind, value, n_blocks=sec.num("n_blocks", 50, integer=True),
                             max_blocks=sec.num("max_blocks", 2000, integer=True),
                             reference_len=windows.reference_len)
    except ValueError as exc:
        raise ConfigError(f"{sec.name}: {exc}") from None
    sec.done()
    return stop


def _analysis(sec: _Section) -> AnalysisConfig:
    windows = WindowSpec(sec.q("signal_start", "time", 0.0), sec.q("signal_len", "time", 2e-6),
                         sec.q("reference_len", "time", 10e-6))
    fix_p = sec.raw("fix_p")
    if fix_p is not None:
        fix_p = _number(fix_p, sec.where("fix_p"))
        if not 0 < fix_p <= 2:
            raise ConfigError(f"{sec.where('fix_p')}: must lie in (0, 2]")
    out = AnalysisConfig(windows, fix_p, sec.num("n_bootstrap", 200, integer=True),
                         sec.num("noise_factor"))
    sec.done()
    return out


def _target(sec: _Section) -> TargetConfig:
    coupling = sec.q("coupling_constant", "coupling", 1e8)
    soft = sec.q("softening_depth", "length", 1.0)
    if sec.has("gd_concentration"):
        conc, dilution = sec.q("gd_concentration", "molar"), 1.0
    else:
        # spike a stock into the suspension, which also dilutes the particles
        v0 = sec.q("control_volume", "volume", CONTROL_VOLUME)
        v1 = sec.q("spike_volume", "volume", SPIKE_VOLUME)
        stock = sec.q("spike_concentration", "molar", SPIKE_CONCENTRATION)
        if v0 <= 0 or v1 < 0:
            raise ConfigError(f"{sec.name}: volumes must be positive")
        conc = mix_solutions([v0, v1], [0.0, stock])
        dilution = v0 / (v0 + v1)
    sec.done()
    try:
        out = TargetConfig(conc, coupling, soft, dilution)
        out.spec()
    except ValueError as exc:
        raise ConfigError(f"{sec.name}: {exc}") from None
    return out


def _compare(sec: _Section, noise: NoiseConfig, analysis: AnalysisConfig,
             schedule: PulseSchedule) -> ComparisonSettings:
    sizes = sec.raw("sizes", list(ComparisonSettings.sizes))
    if not isinstance(sizes, list) or not all(isinstance(s, str) for s in sizes):
        raise ConfigError(f"{sec.where('sizes')}: expected a list of preset names")
    for s in sizes:
        _preset(s, sec.where("sizes"))
    defaults = ComparisonSettings()
    guess = sec.raw("gamma_guess", "2000 /s")
    photons = sec.num("photons")
    out = ComparisonSettings(
        sizes=tuple(sizes),
        gamma_guess=None if guess == "per-preset" else parse_quantity(
            guess, "rate", sec.where("gamma_guess")),
        n_tau=sec.num("n_tau", defaults.n_tau, integer=True),
        total_time=sec.q("total_time", "time", defaults.total_time),
        photons=photons,
        coupling_constant=sec.q("coupling_constant", "coupling", defaults.coupling_constant),
        fnd_concentration=sec.q("fnd_concentration", "mass_conc", defaults.fnd_concentration),
        with_target=sec.flag("with_target", True),
        n_bootstrap=sec.num("n_bootstrap", defaults.n_bootstrap, integer=True),
        share_stretch=sec.flag("share_stretch", True),
        noise=replace(noise, nd_optical_density=0.0),
        windows=analysis.windows,
        readout_len=schedule.readout_len,
        bin_width=schedule.bin_width,
    )
    sec.done()
    return out


def config_from_dict(data: dict | None) -> RunConfig:
    """Validate a parsed YAML document and build a :class:`RunConfig`."""
    top = _Section(data, "")
    seed = top.num("seed", 0, integer=True)
    out_dir = top.raw("out_dir", "fndrelax-out")
    ensemble = _ensemble(top.sub("ensemble"))
    analysis = _analysis(top.sub("analysis"))
    schedule = _schedule(top.sub("schedule"), ensemble.preset)
    noise = _noise(top.sub("noise"), ensemble.preset)
    stop = _stop(top.sub("stop"), analysis.windows)
    target = _target(top.sub("target")) if top.has("target") else None
    plan_sec = top.sub("plan")
    plan = PlanConfig(plan_sec.q("total_time", "time", 3000.0),
                      plan_sec.q("gamma_measured", "rate"))
    plan_sec.done()
    compare = _compare(top.sub("compare"), noise, analysis, schedule)
    top.done()
    if stop.reference_len > schedule.readout_len:
        raise ConfigError("analysis.reference_len is longer than the readout pulse")
    return RunConfig(ensemble, schedule, noise, stop, analysis, target, plan, compare,
                     str(out_dir), int(seed), source=dict(data or {}))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return config_from_dict(data)


def default_config() -> RunConfig:
    return config_from_dict({"ensemble": {"preset": "100nm"}})
