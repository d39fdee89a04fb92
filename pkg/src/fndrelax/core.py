"""Closed-form relaxation physics for NV ensembles.

Every rate is in s^-1 and every time in s. Nothing here holds state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class PhysicalConstants:
    zero_field_splitting: float = 2.87e9
    gd_electron_spin: float = 3.5
    dipolar_exponent: int = 6


CONSTANTS = PhysicalConstants()

#: polarization time constant under the low-power cuvette excitation
DEFAULT_POL_TIME = 20e-6
#: saturation rate, 1 / (shortest resolvable dark time of 5 us)
DEFAULT_GAMMA_MAX = 2.0e5


@dataclass(frozen=True)
class RelaxationParams:
    """Parameters of ``contrast * exp(-(rate * tau) ** stretch) + offset``."""

    contrast: float
    rate: float
    stretch: float = 1.0
    offset: float = 1.0

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValueError(f"rate must be >= 0, got {self.rate}")
        if not 0 < self.stretch <= 2:
            raise ValueError(f"stretch must lie in (0, 2], got {self.stretch}")
        if not -0.05 <= self.contrast <= 0.5:
            raise ValueError(f"contrast must lie in [-0.05, 0.5], got {self.contrast}")
        if not self.offset >= 0:
            raise ValueError(f"offset must be >= 0, got {self.offset}")

    @property
    def t1(self) -> float:
        return 1.0 / self.rate if self.rate > 0 else math.inf

    def as_array(self) -> np.ndarray:
        return np.array([self.contrast, self.rate, self.stretch, self.offset])


def decay_signal(params: RelaxationParams, tau):
    """Evaluate the stretched-exponential decay at dark time(s) ``tau``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau must be non-negative")
    out = params.contrast * np.exp(-((params.rate * tau) ** params.stretch)) + params.offset
    return float(out) if out.ndim == 0 else out


def single_nv_intensity(gamma_intrinsic: float, target_rates: Sequence[float],
                        contrast: float, offset: float, tau):
    """Single-emitter decay with the target rates added to the intrinsic one."""
    if gamma_intrinsic < 0 or any(r < 0 for r in target_rates):
        raise ValueError("relaxation rates must be non-negative")
    total = gamma_intrinsic + sum(target_rates)
    tau = np.asarray(tau, dtype=float)
    out = contrast * np.exp(-total * tau) + offset
    return float(out) if out.ndim == 0 else out


class TargetRate(NamedTuple):
    rate: float
    below_control: bool


def isolate_target_rate(gamma_measured: float, gamma_intrinsic: float) -> TargetRate:
    """Target-induced rate as measured minus control.

    Negative values are returned unchanged and flagged; clamping would bias
    titration series near the detection limit.
    """
    if gamma_measured < 0 or gamma_intrinsic < 0:
        raise ValueError("rates must be non-negative")
    diff = gamma_measured - gamma_intrinsic
    return TargetRate(diff, diff < 0)


@dataclass(frozen=True)
class SnrInputs:
    photon_rate: float
    readout_len: float
    total_time: float
    contrast: float
    gamma_intrinsic: float
    gamma_measured: float

    def __post_init__(self):
        for name in ("photon_rate", "readout_len", "total_time", "gamma_intrinsic", "gamma_measured"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.contrast < 0:
            raise ValueError("contrast must be >= 0")
        if self.gamma_measured < self.gamma_intrinsic:
            raise ValueError("gamma_measured must be >= gamma_intrinsic")


def snr(inputs: SnrInputs, tau):
    """Shot-noise-limited SNR of a T1 measurement at dark time ``tau``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("tau must be > 0")
    prefactor = np.sqrt(inputs.photon_rate * inputs.readout_len * inputs.total_time / tau)
    out = (prefactor * 0.75 * inputs.contrast
           * np.exp(-inputs.gamma_intrinsic * tau)
           * -np.expm1(-inputs.gamma_measured * tau))
    return float(out) if out.ndim == 0 else out


def polarization_level(t_illuminated, pol_time_constant: float = DEFAULT_POL_TIME,
                       gamma=0.0):
    """Spin polarization above the thermal baseline after ``t_illuminated`` of light.

    Relaxation at ``gamma`` competes with optical pumping at ``1 / pol_time_constant``,
    so fast-relaxing centres settle at a lower steady state and the achievable
    contrast shrinks as ``gamma`` approaches the pumping rate.
    """
    t = np.asarray(t_illuminated, dtype=float)
    g = np.asarray(gamma, dtype=float)
    if np.any(t < 0):
        raise ValueError("illumination time must be non-negative")
    if np.any(g < 0):
        raise ValueError("gamma must be non-negative")
    pump = 1.0 / pol_time_constant
    total = pump + g
    out = pump / total * -np.expm1(-t * total)
    return float(out) if out.ndim == 0 else out


def dynamic_range(gamma_intrinsic: float, gamma_max: float = DEFAULT_GAMMA_MAX) -> float:
    """Usable rate span between the control rate and the saturation rate."""
    if gamma_max <= gamma_intrinsic:
        raise ValueError(
            f"gamma_max ({gamma_max:g}) must exceed gamma_intrinsic ({gamma_intrinsic:g}); "
            "the sensor is saturated before any target is added")
    return gamma_max - gamma_intrinsic
