"""From binned traces to T1 curves, target rates and noise figures."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .acquisition import BinnedTrace
from .fitting import FitResult


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    signal_start: float = 0.0
    signal_len: float = 2e-6
    reference_len: float = 10e-6

    def __post_init__(self):
        if self.signal_len <= 0 or self.reference_len <= 0 or self.signal_start < 0:
            raise ValueError("window lengths must be > 0 and start >= 0")

    def slices(self, n_bins: int, bin_width: float) -> tuple[slice, slice]:
        def nbins(x):
            k = x / bin_width
            if abs(k - round(k)) > 1e-6:
                raise AnalysisError(f"{x:g} s is not a whole number of {bin_width:g} s bins")
            return int(round(k))

        s0 = nbins(self.signal_start)
        s1 = s0 + nbins(self.signal_len)
        r0 = n_bins - nbins(self.reference_len)
        if s1 > r0 or r0 < 0:
            raise AnalysisError("signal and reference windows overlap or leave the pulse")
        return slice(s0, s1), slice(r0, n_bins)


class Ratio(NamedTuple):
    ratio: float
    sigma: float


def _ratio(signal, reference, ws, wr, noise_factor):
    signal = np.asarray(signal, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if np.any(reference <= 0):
        raise AnalysisError("reference window has zero counts; cannot normalize")
    scale = wr / ws
    ratio = scale * signal / reference
    var = scale ** 2 * (np.maximum(signal, 1.0) / reference ** 2 + signal ** 2 / reference ** 3)
    return ratio, noise_factor * np.sqrt(var)


def window_ratio(trace: BinnedTrace, windows: WindowSpec = WindowSpec(),
                 noise_factor: float = 1.0) -> Ratio:
    """Width-normalized signal/reference ratio of one trace, with its error."""
    sig, ref = windows.slices(len(trace.counts), trace.bin_width)
    r, s = _ratio(trace.counts[sig].sum(), trace.counts[ref].sum(),
                  windows.signal_len, windows.reference_len, noise_factor)
    return Ratio(float(r), float(s))


class WindowRatioTransformer(TransformerMixin, BaseEstimator):
    """Map rows of binned counts to ``[ratio, sigma]`` columns."""

    def __init__(self, bin_width=0.5e-6, signal_start=0.0, signal_len=2e-6,
                 reference_len=10e-6, noise_factor=1.0):
        self.bin_width = bin_width
        self.signal_start = signal_start
        self.signal_len = signal_len
        self.reference_len = reference_len
        self.noise_factor = noise_factor

    def fit(self, X, y=None):
        X = check_array(X)
        self.windows_ = WindowSpec(self.signal_start, self.signal_len, self.reference_len)
        self.slices_ = self.windows_.slices(X.shape[1], self.bin_width)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "slices_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} bins, got {X.shape[1]}")
        sig, ref = self.slices_
        r, s = _ratio(X[:, sig].sum(axis=1), X[:, ref].sum(axis=1),
                      self.signal_len, self.reference_len, self.noise_factor)
        return np.column_stack([r, s])


@dataclass
class T1Curve:
    tau: np.ndarray
    ratio: np.ndarray
    sigma: np.ndarray
    photons_signal: np.ndarray
    photons_reference: np.ndarray
    order: np.ndarray

    def __len__(self) -> int:
        return len(self.tau)

    @property
    def points(self):
        return list(zip(self.tau.tolist(), self.ratio.tolist(), self.sigma.tolist(),
                        self.photons_signal.tolist(), self.photons_reference.tolist()))

    def sorted(self) -> "T1Curve":
        i = np.argsort(self.tau, kind="stable")
        return T1Curve(self.tau[i], self.ratio[i], self.sigma[i], self.photons_signal[i],
                       self.photons_reference[i], self.order[i])


MIN_POINTS = 5


def build_curve(traces: Sequence[BinnedTrace], windows: WindowSpec = WindowSpec(),
                noise_factor: float = 1.0) -> T1Curve:
    """One curve point per distinct dark time; repeated dark times are pooled."""
    pooled: dict[float, list] = {}
    for i, tr in enumerate(traces):
        if tr.tau in pooled:
            pooled[tr.tau][0] = pooled[tr.tau][0] + tr.counts
        else:
            pooled[tr.tau] = [np.array(tr.counts), tr.bin_width, i]
    if len(pooled) < MIN_POINTS:
        raise AnalysisError(f"need at least {MIN_POINTS} distinct dark times, got {len(pooled)}")
    rows = []
    for tau, (counts, bw, first) in pooled.items():
        sig, ref = windows.slices(len(counts), bw)
        s, r = int(counts[sig].sum()), int(counts[ref].sum())
        ratio, sigma = _ratio(s, r, windows.signal_len, windows.reference_len, noise_factor)
        rows.append((tau, float(ratio), float(sigma), s, r, first))
    t, ra, sg, ps, pr, od = (np.array(c) for c in zip(*rows))
    return T1Curve(t.astype(float), ra, sg, ps, pr, od)


class TargetIsolation(NamedTuple):
    gamma_target: float
    sigma: float
    below_control: bool


def isolate_target(fit_measured: FitResult, fit_intrinsic: FitResult,
                   force: bool = False) -> TargetIsolation:
    """Target rate and its quadrature error from a control fit and a target fit."""
    if not force and not (fit_measured.reliable and fit_intrinsic.reliable):
        raise AnalysisError("cannot isolate a target rate from an unreliable fit "
                            "(pass force=True to override)")
    diff = fit_measured.rate - fit_intrinsic.rate
    sigma = math.hypot(fit_measured.rate_sigma, fit_intrinsic.rate_sigma)
    return TargetIsolation(diff, sigma, diff < 0)


class NoiseAudit(NamedTuple):
    factor: float
    n_repeats: int
    degenerate: bool


def noise_audit(traces: Sequence[BinnedTrace], windows: WindowSpec = WindowSpec(),
                min_repeats: int = 20) -> NoiseAudit:
    """Observed spread of repeated window ratios relative to the Poisson prediction."""
    if len(traces) < min_repeats:
        raise AnalysisError(f"noise audit needs >= {min_repeats} repeats, got {len(traces)}")
    ratios = np.array([window_ratio(t, windows) for t in traces])
    r, s = ratios[:, 0], ratios[:, 1]
    if np.all(r == r[0]):
        return NoiseAudit(0.0, len(traces), True)
    w = 1.0 / s ** 2
    mean = np.sum(w * r) / np.sum(w)
    chi2 = np.sum(w * (r - mean) ** 2) / (len(r) - 1)
    return NoiseAudit(float(math.sqrt(chi2)), len(traces), False)


def snr_empirical(fits: Sequence[FitResult], tau_eval: float, min_runs: int = 10) -> float:
    """Mean over standard deviation of the fitted spin signal at ``tau_eval``."""
    if len(fits) < 2:
        raise AnalysisError("need at least two runs")
    if len(fits) < min_runs:
        warnings.warn(f"only {len(fits)} runs; the SNR estimate has a wide interval",
                      stacklevel=2)
    vals = np.array([f.decay_at(tau_eval) for f in fits])
    sd = vals.std(ddof=1)
    if sd == 0:
        return math.inf if vals.mean() != 0 else 0.0
    return float(vals.mean() / sd)
