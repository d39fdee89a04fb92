"""Heterogeneous FND/NV populations, target coupling and sample optics.

A sampled ensemble holds a fixed number of representative emitters. Each one
stands for an equal share of the NV centres in the beam, so the summed
brightness is the sample brightness regardless of how many real NVs exist.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Sequence

import numpy as np

DIAMOND_DENSITY = 3.51  # g/cm^3
DEFAULT_BEAM_VOLUME = math.pi * (50e-4) ** 2 * 0.2  # cm^3, 100 um waist over 2 mm
DEFAULT_NV_DENSITY = 1.0e-3  # NV per nm^3 (~500 NV in a 100 nm particle)


@dataclass(frozen=True)
class NVEmitter:
    gamma_intrinsic: float
    depth: float
    brightness: float
    contrast: float


@dataclass(frozen=True)
class TargetSpec:
    """Paramagnetic target coarse-grained to a bulk concentration."""

    gd_concentration: float = 0.0  # mM
    coupling_constant: float = 0.0  # s^-1 nm^6 mM^-1
    softening_depth: float = 1.0  # nm

    def __post_init__(self):
        if self.gd_concentration < 0 or self.coupling_constant < 0:
            raise ValueError("target concentration and coupling must be >= 0")
        if self.softening_depth <= 0:
            raise ValueError("softening_depth must be > 0")


@dataclass(frozen=True)
class EnsembleSpec:
    particle_diameter: float  # nm
    gamma_intrinsic_median: float  # s^-1
    brightness_per_particle: float  # counts/s at the detector
    fnd_concentration: float = 10.0  # ug/ml
    diameter_cv: float = 0.0
    gamma_intrinsic_logsigma: float = 0.0
    contrast: float = 0.1
    nv_per_particle_mean: float | None = None
    nv_density: float = DEFAULT_NV_DENSITY
    beam_volume: float = DEFAULT_BEAM_VOLUME
    depth_mode: str = "volume"
    max_emitters: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.particle_diameter <= 0:
            raise ValueError("particle_diameter must be > 0")
        if self.fnd_concentration < 0:
            raise ValueError("fnd_concentration must be >= 0")
        if self.gamma_intrinsic_logsigma < 0 or self.diameter_cv < 0:
            raise ValueError("spread parameters must be >= 0")
        if self.gamma_intrinsic_median <= 0:
            raise ValueError("gamma_intrinsic_median must be > 0")
        if self.brightness_per_particle < 0:
            raise ValueError("brightness_per_particle must be >= 0")
        if self.depth_mode not in ("volume", "surface"):
            raise ValueError(f"unknown depth_mode {self.depth_mode!r}")
        if self.max_emitters < 1:
            raise ValueError("max_emitters must be >= 1")

    @property
    def particle_volume(self) -> float:
        """Nominal particle volume in nm^3."""
        return math.pi / 6 * self.particle_diameter ** 3

    @property
    def nv_per_particle(self) -> float:
        if self.nv_per_particle_mean is not None:
            return self.nv_per_particle_mean
        return self.nv_density * self.particle_volume

    @property
    def particle_count_in_beam(self) -> float:
        mass = DIAMOND_DENSITY * self.particle_volume * 1e-21  # g
        per_ml = self.fnd_concentration * 1e-6 / mass
        return per_ml * self.beam_volume

    @property
    def sample_brightness(self) -> float:
        return self.particle_count_in_beam * self.brightness_per_particle


@dataclass
class Ensemble:
    """Representative emitters, stored column-wise."""

    gamma_intrinsic: np.ndarray
    depth: np.ndarray
    brightness: np.ndarray
    contrast: np.ndarray
    particle_diameter: np.ndarray
    n_particles: float = 0.0
    n_nv_total: float = 0.0
    spec: EnsembleSpec | None = field(default=None, repr=False)

    @property
    def empty(self) -> bool:
        return len(self.gamma_intrinsic) == 0

    def __len__(self) -> int:
        return len(self.gamma_intrinsic)

    def __iter__(self) -> Iterator[NVEmitter]:
        for g, d, b, c in zip(self.gamma_intrinsic, self.depth, self.brightness, self.contrast):
            yield NVEmitter(float(g), float(d), float(b), float(c))

    def emitters(self) -> list[NVEmitter]:
        return list(self)

    @property
    def total_brightness(self) -> float:
        return float(self.brightness.sum())

    def target_rates(self, target: TargetSpec | None) -> np.ndarray:
        if target is None:
            return np.zeros(len(self))
        return _kernel(self.depth, target)


def sample_ensemble(spec: EnsembleSpec) -> Ensemble:
    """Draw representative emitters for ``spec``; deterministic given ``spec.seed``."""
    n_particles = spec.particle_count_in_beam
    n_nv = n_particles * spec.nv_per_particle
    if spec.fnd_concentration == 0 or n_nv == 0:
        warnings.warn("zero FND concentration gives an empty ensemble", stacklevel=2)
        e = np.empty(0)
        return Ensemble(e, e.copy(), e.copy(), e.copy(), e.copy(), 0.0, 0.0, spec)

    rng = np.random.default_rng(spec.seed)
    m = int(min(spec.max_emitters, max(1, round(n_nv))))

    # NV count scales with particle volume, so draw diameters volume-weighted:
    # for a lognormal this only shifts the log-mean by 3 sigma^2.
    if spec.diameter_cv > 0:
        s2 = math.log1p(spec.diameter_cv ** 2)
        mu = math.log(spec.particle_diameter) - s2 / 2 + 3 * s2
        diam = rng.lognormal(mu, math.sqrt(s2), m)
    else:
        diam = np.full(m, float(spec.particle_diameter))
    radius = diam / 2

    u = rng.random(m)
    if spec.depth_mode == "volume":
        depth = radius * (1.0 - np.cbrt(u))
    else:
        # exponential profile with 10% of the radius as its scale, truncated at the centre
        scale = radius / 10
        depth = -scale * np.log1p(-u * -np.expm1(-radius / scale))
    depth = np.clip(depth, 0.0, radius)

    gamma = spec.gamma_intrinsic_median * np.exp(
        spec.gamma_intrinsic_logsigma * rng.standard_normal(m))
    brightness = np.full(m, spec.sample_brightness / m)
    contrast = np.full(m, float(spec.contrast))
    return Ensemble(gamma, depth, brightness, contrast, diam, n_particles, n_nv, spec)


def _kernel(depth, target: TargetSpec):
    depth = np.asarray(depth, dtype=float)
    return (target.coupling_constant * target.gd_concentration
            / (depth + target.softening_depth) ** 6)


def target_rate_for_emitter(emitter: NVEmitter, target: TargetSpec) -> float:
    """Target-induced relaxation rate from the r^-6 proximity kernel."""
    return float(_kernel(emitter.depth, target))


class ScatteringFactors(NamedTuple):
    intensity: float
    contrast: float


@dataclass(frozen=True)
class ScatteringLaw:
    """Beer-Lambert style attenuation switching on above ``onset`` ug/ml.

    The default coefficients leave 60% of the intensity and 30% of the
    contrast at 300 ug/ml.
    """

    onset: float = 25.0
    intensity_coeff: float = math.log(1 / 0.6) / 275.0
    contrast_coeff: float = math.log(1 / 0.3) / 275.0


DEFAULT_SCATTERING = ScatteringLaw()


def scattering_factor(fnd_concentration: float,
                      law: ScatteringLaw = DEFAULT_SCATTERING) -> ScatteringFactors:
    if fnd_concentration < 0:
        raise ValueError("concentration must be >= 0")
    excess = max(0.0, fnd_concentration - law.onset)
    return ScatteringFactors(math.exp(-law.intensity_coeff * excess),
                             math.exp(-law.contrast_coeff * excess))


def mix_solutions(volumes: Sequence[float], concentrations: Sequence[float]) -> float:
    """Concentration after pooling solutions, conserving moles."""
    if len(volumes) == 0 or len(volumes) != len(concentrations):
        raise ValueError("volumes and concentrations must be non-empty and equal length")
    v = np.asarray(volumes, dtype=float)
    c = np.asarray(concentrations, dtype=float)
    if np.any(v <= 0):
        raise ValueError("volumes must be > 0")
    return float(np.dot(c, v) / v.sum())


def with_seed(spec: EnsembleSpec, seed: int) -> EnsembleSpec:
    return replace(spec, seed=seed)
