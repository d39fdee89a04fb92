"""Photon-count traces for the two-pulse T1 protocol.

Each cycle is a dark evolution time ``tau`` followed by a readout pulse that
both reads and repolarizes the spins. Pulses are accumulated in blocks: a
block holds a fixed number of pulses per dark time and one drift value. Every
(block, tau) cell draws from its own seed substream, so blocks can be filled
in any order or in parallel without changing a single count.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import DEFAULT_POL_TIME, polarization_level
from .ensemble import (DEFAULT_SCATTERING, Ensemble, ScatteringLaw, TargetSpec,
                       scattering_factor)

log = logging.getLogger(__name__)

_DRIFT_STREAM = 2 ** 31 - 1


class AcquisitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PulseSchedule:
    tau_list: tuple[float, ...]
    readout_len: float = 80e-6
    bin_width: float = 0.5e-6
    interleave: bool = True

    def __post_init__(self):
        object.__setattr__(self, "tau_list", tuple(float(t) for t in self.tau_list))
        if not self.tau_list:
            raise ValueError("tau_list is empty")
        if any(t <= 0 for t in self.tau_list):
            raise ValueError("dark times must be strictly positive")
        if self.readout_len <= 0 or self.bin_width <= 0:
            raise ValueError("readout_len and bin_width must be > 0")
        nb = self.readout_len / self.bin_width
        if abs(nb - round(nb)) > 1e-6 * nb:
            raise ValueError(
                f"bin_width {self.bin_width:g} s does not divide readout_len {self.readout_len:g} s")

    @property
    def n_bins(self) -> int:
        return int(round(self.readout_len / self.bin_width))

    @property
    def cycle_time(self) -> float:
        """Duration of one pass over every dark time."""
        return sum(self.tau_list) + len(self.tau_list) * self.readout_len

    def bin_edges(self) -> np.ndarray:
        return np.arange(self.n_bins + 1) * self.bin_width


@dataclass(frozen=True)
class NoiseConfig:
    drift_amplitude: float = 0.025
    drift_timescale: float = 300.0
    excess_noise_factor: float = 2.0
    detector_linear_limit: float = 2e6
    dead_time: float = 25e-9
    spin_mixed_mode: bool = False
    nd_optical_density: float = 0.0
    pol_time: float = DEFAULT_POL_TIME

    def __post_init__(self):
        if not 0 <= self.drift_amplitude <= 0.1:
            raise ValueError("drift_amplitude must lie in [0, 0.1]")
        if self.excess_noise_factor < 1:
            raise ValueError("excess_noise_factor must be >= 1")
        if self.drift_timescale <= 0 or self.pol_time <= 0:
            raise ValueError("timescales must be > 0")
        if self.dead_time < 0 or self.nd_optical_density < 0:
            raise ValueError("dead_time and nd_optical_density must be >= 0")


@dataclass(frozen=True)
class StopCondition:
    """When to stop accumulating.

    kind is ``"repeats"`` (pulses per dark time), ``"time"`` (simulated
    seconds) or ``"photons"`` (reference-window photons at the first dark time).
    """

    kind: str
    value: float
    n_blocks: int = 50
    max_blocks: int = 2000
    reference_len: float = 10e-6

    def __post_init__(self):
        if self.kind not in ("repeats", "time", "photons"):
            raise ValueError(f"unknown stop kind {self.kind!r}")
        if self.value <= 0:
            raise ValueError("stop value must be > 0")
        if self.n_blocks < 1 or self.max_blocks < self.n_blocks:
            raise ValueError("need 1 <= n_blocks <= max_blocks")


@dataclass
class BinnedTrace:
    tau: float
    bin_width: float
    counts: np.ndarray
    pulses_accumulated: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")


@dataclass
class Block:
    index: int
    counts: np.ndarray  # (n_tau, n_bins)
    pulses: np.ndarray  # (n_tau,)
    drift: np.ndarray  # (n_tau,)
    elapsed: float


@dataclass
class Acquisition:
    """Accumulated blocks of one run, plus what produced them."""

    schedule: PulseSchedule
    noise: NoiseConfig
    seed: int
    counts: np.ndarray  # (n_blocks, n_tau, n_bins)
    pulses: np.ndarray  # (n_blocks, n_tau)
    drift: np.ndarray  # (n_blocks, n_tau)
    elapsed_time: float
    meta: dict = field(default_factory=dict)

    @property
    def tau(self) -> np.ndarray:
        return np.asarray(self.schedule.tau_list)

    @property
    def n_blocks(self) -> int:
        return self.counts.shape[0]

    @property
    def total_pulses(self) -> int:
        return int(self.pulses.sum())

    def traces(self) -> list[BinnedTrace]:
        summed = self.counts.sum(axis=0)
        per_tau = self.pulses.sum(axis=0)
        return [BinnedTrace(t, self.schedule.bin_width, summed[j], int(per_tau[j]))
                for j, t in enumerate(self.schedule.tau_list)]

    def block_traces(self, tau_index: int = 0) -> list[BinnedTrace]:
        t = self.schedule.tau_list[tau_index]
        return [BinnedTrace(t, self.schedule.bin_width, self.counts[k, tau_index],
                            int(self.pulses[k, tau_index]))
                for k in range(self.n_blocks)]


def apply_dead_time(true_rate, dead_time: float):
    """Non-paralyzable detector response ``r / (1 + r * dead_time)``."""
    r = np.asarray(true_rate, dtype=float)
    if np.any(r < 0):
        raise ValueError("rate must be >= 0")
    out = r / (1.0 + r * dead_time)
    return float(out) if out.ndim == 0 else out


def spin_bin_profile(schedule: PulseSchedule, pol_time: float) -> np.ndarray:
    """Bin-averaged ``exp(-t / pol_time)`` across the readout pulse."""
    edges = schedule.bin_edges()
    return pol_time / schedule.bin_width * (np.exp(-edges[:-1] / pol_time)
                                            - np.exp(-edges[1:] / pol_time))


def expected_rate(ensemble: Ensemble, schedule: PulseSchedule, noise: NoiseConfig,
                  target: TargetSpec | None = None,
                  scattering: ScatteringLaw = DEFAULT_SCATTERING) -> np.ndarray:
    """Mean photon rate (counts/s) per (tau, bin) before drift and dead time.

    Each emitter emits ``brightness * (1 + contrast * m0 * exp(-t / pol_time))``
    during the pulse, where ``m0`` is the spin memory left after the dark
    time. The readout laser erases that memory, so the tail of the pulse sits
    at the spin-independent steady state.
    """
    if ensemble.empty:
        raise AcquisitionError("cannot simulate an empty ensemble")
    conc = ensemble.spec.fnd_concentration if ensemble.spec is not None else 0.0
    scat = scattering_factor(conc, scattering)
    gain = scat.intensity * 10.0 ** (-noise.nd_optical_density)

    tau = np.asarray(schedule.tau_list)
    base = ensemble.brightness.sum()
    if noise.spin_mixed_mode:
        spin = np.zeros(len(tau))
    else:
        rates = ensemble.gamma_intrinsic + ensemble.target_rates(target)
        weight = ensemble.brightness * ensemble.contrast * scat.contrast
        p0 = polarization_level(schedule.readout_len, noise.pol_time, rates)
        spin = ((weight * p0)[None, :] * np.exp(-np.outer(tau, rates))).sum(axis=1)
    profile = spin_bin_profile(schedule, noise.pol_time)
    return gain * (base + spin[:, None] * profile[None, :])


def _drift_walk(rng: np.random.Generator, previous: float, dark_time: float,
                noise: NoiseConfig) -> float:
    amp = noise.drift_amplitude
    if amp == 0:
        return 0.0
    x = previous + amp * math.sqrt(dark_time / noise.drift_timescale) * rng.standard_normal()
    # reflect into [-amp, amp]
    period = 4 * amp
    x = (x + amp) % period
    return (x if x <= 2 * amp else period - x) - amp


def _draw_counts(mean: np.ndarray, factor: float, rng: np.random.Generator) -> np.ndarray:
    if factor == 1.0:
        return rng.poisson(mean)
    # negative binomial with p = 1/f^2 keeps the mean and scales the variance by f^2
    p = 1.0 / factor ** 2
    n = mean * p / (1.0 - p)
    out = np.zeros(mean.shape, dtype=np.int64)
    ok = n > 0
    out[ok] = rng.negative_binomial(n[ok], p)
    return out


class _Engine:
    def __init__(self, ensemble, schedule, noise, target, seed, scattering):
        self.schedule = schedule
        self.noise = noise
        self.seed = int(seed)
        self.rate = expected_rate(ensemble, schedule, noise, target, scattering)
        peak = float(self.rate.max())
        if peak > noise.detector_linear_limit:
            warnings.warn(f"peak count rate {peak:.3g} cps exceeds the detector linear limit "
                          f"{noise.detector_linear_limit:.3g} cps", RuntimeWarning, stacklevel=3)
        self._drift_rng = np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=(_DRIFT_STREAM,)))
        self._drift = 0.0
        self.ref_slice = slice(schedule.n_bins, schedule.n_bins)

    def set_reference(self, reference_len: float) -> None:
        n = self.schedule.n_bins
        self.ref_slice = slice(n - int(round(reference_len / self.schedule.bin_width)), n)

    def expected_ref_per_pulse(self, j: int = 0) -> float:
        r = apply_dead_time(self.rate[j, self.ref_slice], self.noise.dead_time)
        return float(r.sum() * self.schedule.bin_width)

    def next_drift(self, dark_time: float) -> float:
        self._drift = _drift_walk(self._drift_rng, self._drift, dark_time, self.noise)
        return self._drift

    def cell(self, k: int, j: int, pulses: int, drift: float) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(k, j)))
        rate = apply_dead_time(self.rate[j] * (1.0 + drift), self.noise.dead_time)
        mean = rate * self.schedule.bin_width * pulses
        return _draw_counts(mean, self.noise.excess_noise_factor, rng)


def iter_blocks(engine: _Engine, pulses_per_block: int,
                tau_indices: Sequence[int] | None = None,
                start: int = 0) -> Iterator[Block]:
    """Endless stream of blocks; each block covers ``tau_indices``."""
    sched = engine.schedule
    n_tau = len(sched.tau_list)
    idx = list(range(n_tau)) if tau_indices is None else list(tau_indices)
    dark = pulses_per_block * sum(sched.tau_list[j] for j in idx)
    busy = dark + pulses_per_block * len(idx) * sched.readout_len
    k = start
    while True:
        d = engine.next_drift(dark)
        counts = np.zeros((n_tau, sched.n_bins), dtype=np.int64)
        pulses = np.zeros(n_tau, dtype=np.int64)
        drift = np.zeros(n_tau)
        for j in idx:
            counts[j] = engine.cell(k, j, pulses_per_block, d)
            pulses[j] = pulses_per_block
            drift[j] = d
        yield Block(k, counts, pulses, drift, busy)
        k += 1


def run_until(stop: StopCondition, stream: Iterable[Block], ref_slice: slice,
              tau_index: int = 0) -> list[Block]:
    """Consume ``stream`` until ``stop`` is met on the given dark time."""
    blocks: list[Block] = []
    photons = 0
    elapsed = 0.0
    pulses = 0
    for block in stream:
        blocks.append(block)
        photons += int(block.counts[tau_index, ref_slice].sum())
        elapsed += block.elapsed
        pulses += int(block.pulses[tau_index])
        if stop.kind == "photons" and photons >= stop.value:
            break
        if stop.kind == "time" and elapsed >= stop.value:
            break
        if stop.kind == "repeats" and pulses >= stop.value:
            break
        if len(blocks) >= stop.max_blocks:
            raise AcquisitionError(
                f"stop condition {stop.kind}={stop.value:g} not met after {len(blocks)} blocks "
                f"({photons} reference photons, {elapsed:.3g} s simulated)")
    return blocks


def _pulses_per_block(engine: _Engine, stop: StopCondition) -> int:
    if stop.kind == "repeats":
        total = int(stop.value)
    elif stop.kind == "time":
        total = max(1, int(stop.value // engine.schedule.cycle_time))
    else:
        per_pulse = engine.expected_ref_per_pulse(0)
        if per_pulse <= 0:
            return 1000
        total = math.ceil(stop.value / per_pulse)
    return max(1, math.ceil(total / stop.n_blocks))


def simulate_trace(ensemble: Ensemble, schedule: PulseSchedule, noise: NoiseConfig | None = None,
                   target: TargetSpec | None = None, stop: StopCondition | None = None,
                   seed: int = 0, scattering: ScatteringLaw = DEFAULT_SCATTERING,
                   n_jobs: int = 1) -> Acquisition:
    """Run the pulse schedule on ``ensemble`` and return the binned counts."""
    noise = noise or NoiseConfig()
    stop = stop or StopCondition("repeats", 1000)
    engine = _Engine(ensemble, schedule, noise, target, seed, scattering)
    engine.set_reference(stop.reference_len)
    ppb = _pulses_per_block(engine, stop)
    if stop.kind == "repeats":
        ppb = min(ppb, int(stop.value))
    n_tau = len(schedule.tau_list)

    if schedule.interleave:
        if stop.kind == "photons":
            blocks = run_until(stop, iter_blocks(engine, ppb), engine.ref_slice)
        else:
            blocks = _fixed_blocks(engine, stop, ppb, list(range(n_tau)), n_jobs)
    else:
        # tau-major sweep: the first dark time sets the block count for the rest
        if stop.kind == "photons":
            first = run_until(stop, iter_blocks(engine, ppb, [0]), engine.ref_slice)
        else:
            first = _fixed_blocks(engine, stop, ppb, [0], n_jobs)
        per_tau = [first]
        for j in range(1, n_tau):
            stream = iter_blocks(engine, ppb, [j], start=0)
            per_tau.append([next(stream) for _ in range(len(first))])
        blocks = []
        for k in range(len(first)):
            merged = per_tau[0][k]
            for j in range(1, n_tau):
                b = per_tau[j][k]
                merged.counts[j] = b.counts[j]
                merged.pulses[j] = b.pulses[j]
                merged.drift[j] = b.drift[j]
                merged.elapsed += b.elapsed
            blocks.append(merged)

    counts = np.stack([b.counts for b in blocks])
    pulses = np.stack([b.pulses for b in blocks])
    drift = np.stack([b.drift for b in blocks])
    elapsed = float(sum(b.elapsed for b in blocks))
    log.debug("simulated %d blocks, %d pulses per block, %.3g s", len(blocks), ppb, elapsed)
    meta = {
        "pulses_per_block": ppb,
        "detected_rate": apply_dead_time(float(engine.rate[:, engine.ref_slice].mean()),
                                         noise.dead_time),
        "stop": {"kind": stop.kind, "value": stop.value, "n_blocks": stop.n_blocks},
    }
    return Acquisition(schedule, noise, int(seed), counts, pulses, drift, elapsed, meta)


def _fixed_blocks(engine: _Engine, stop: StopCondition, ppb: int, idx: list[int],
                  n_jobs: int) -> list[Block]:
    sched = engine.schedule
    if stop.kind == "repeats":
        total = int(stop.value)
    else:
        total = max(1, int(stop.value // sched.cycle_time))
    n_blocks = math.ceil(total / ppb)
    if n_blocks > stop.max_blocks:
        raise AcquisitionError(f"{n_blocks} blocks requested, cap is {stop.max_blocks}")
    sizes = [ppb] * (n_blocks - 1) + [total - ppb * (n_blocks - 1)]

    # drift is inherently sequential; draw it first, then fill cells independently
    n_tau = len(sched.tau_list)
    plan = []
    for k, size in enumerate(sizes):
        dark = size * sum(sched.tau_list[j] for j in idx)
        plan.append((k, size, engine.next_drift(dark),
                     dark + size * len(idx) * sched.readout_len))

    def fill(item):
        k, size, d, busy = item
        counts = np.zeros((n_tau, sched.n_bins), dtype=np.int64)
        pulses = np.zeros(n_tau, dtype=np.int64)
        drift = np.zeros(n_tau)
        for j in idx:
            counts[j] = engine.cell(k, j, size, d)
            pulses[j] = size
            drift[j] = d
        return Block(k, counts, pulses, drift, busy)

    if n_jobs == 1:
        return [fill(item) for item in plan]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fill, plan))


def nd_for_linear_range(peak_rate: float, linear_limit: float = 2e6, step: float = 0.1) -> float:
    """Smallest neutral-density OD, in ``step`` increments, keeping ``peak_rate`` linear."""
    if peak_rate <= linear_limit:
        return 0.0
    return math.ceil(round(math.log10(peak_rate / linear_limit) / step, 9)) * step


def emitter_contrast_for(ratio_contrast: float, schedule: PulseSchedule,
                         noise: NoiseConfig | None = None,
                         signal_len: float = 2e-6, reference_len: float = 10e-6) -> float:
    """Emitter contrast whose window ratio at ``tau -> 0`` exceeds 1 by ``ratio_contrast``.

    Solves ``(1 + c p a) / (1 + c p b) = 1 + ratio_contrast`` for ``c``, with
    ``a`` and ``b`` the mean spin profile over the signal and reference windows
    and ``p`` the polarization left by the previous pulse.
    """
    noise = noise or NoiseConfig()
    prof = spin_bin_profile(schedule, noise.pol_time)
    ns = int(round(signal_len / schedule.bin_width))
    nr = int(round(reference_len / schedule.bin_width))
    a = prof[:ns].mean()
    b = prof[-nr:].mean()
    p = polarization_level(schedule.readout_len, noise.pol_time)
    r = ratio_contrast
    return r / (p * (a - b * (1 + r)))
