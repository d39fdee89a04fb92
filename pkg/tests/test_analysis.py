import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import QUIET, single_emitter
from fndrelax.acquisition import BinnedTrace, NoiseConfig, StopCondition, simulate_trace
from fndrelax.analysis import (AnalysisError, T1Curve, WindowRatioTransformer, WindowSpec,
                               build_curve, isolate_target, noise_audit, snr_empirical,
                               window_ratio)
from fndrelax.core import RelaxationParams
from fndrelax.fitting import FitResult


def trace(counts, tau=1e-3):
    return BinnedTrace(tau, 0.5e-6, np.asarray(counts), 1)


def fake_fit(rate, sigma, reliable=True, contrast=0.1):
    return FitResult(RelaxationParams(contrast, rate), {"contrast": 0.01, "rate": sigma,
                                                        "stretch": 0.0, "offset": 0.0},
                     np.zeros((4, 4)), {}, 1.0, reliable)


class TestWindowRatio:
    def test_flat(self):
        r = window_ratio(trace(np.full(160, 1000)))
        assert r.ratio == pytest.approx(1.0, rel=1e-14) and r.sigma > 0

    def test_step(self):
        counts = np.full(160, 1000)
        counts[:4] = 1100
        assert window_ratio(trace(counts)).ratio == pytest.approx(1.10, rel=1e-14)

    def test_zero_reference(self):
        counts = np.zeros(160, dtype=int)
        counts[:4] = 10
        with pytest.raises(AnalysisError):
            window_ratio(trace(counts))

    def test_noise_factor_scales_sigma(self):
        t = trace(np.full(160, 500))
        assert window_ratio(t, noise_factor=2).sigma == 2 * window_ratio(t).sigma

    @given(st.integers(1, 1000))
    def test_scale_invariance(self, k):
        rng = np.random.default_rng(k)
        counts = rng.poisson(200, 160) + 1
        assert window_ratio(trace(counts * k)).ratio == pytest.approx(
            window_ratio(trace(counts)).ratio, rel=1e-14)

    def test_bad_windows(self):
        with pytest.raises(ValueError):
            WindowSpec(signal_len=0)
        with pytest.raises(AnalysisError):
            window_ratio(trace(np.ones(160)), WindowSpec(signal_len=75e-6))
        with pytest.raises(AnalysisError):
            window_ratio(trace(np.ones(160)), WindowSpec(signal_len=1.2e-6))

    def test_transformer(self):
        X = np.full((3, 160), 1000.0)
        X[1, :4] = 1100
        out = WindowRatioTransformer().fit_transform(X)
        assert out.shape == (3, 2)
        assert out[1, 0] == pytest.approx(1.1)
        with pytest.raises(ValueError):
            WindowRatioTransformer().fit(X).transform(np.ones((2, 100)))


class TestBuildCurve:
    def test_cardinality(self):
        traces = [trace(np.full(160, 100), tau) for tau in np.geomspace(1e-4, 1e-2, 10)]
        assert len(build_curve(traces)) == 10

    def test_pooling(self):
        taus = np.geomspace(1e-4, 1e-2, 5)
        a = [trace(np.full(160, 100), t) for t in taus]
        counts = np.full(160, 300)
        counts[:4] = 360
        b = [trace(counts, taus[0])]
        curve = build_curve(a + b)
        assert len(curve) == 5
        assert curve.ratio[0] == pytest.approx(460 / 400)
        assert curve.photons_reference[0] == 400 * 20

    def test_too_few(self):
        with pytest.raises(AnalysisError):
            build_curve([trace(np.full(160, 100), t) for t in (1e-3, 2e-3, 3e-3, 4e-3)])

    def test_order_kept(self):
        taus = [3e-3, 1e-3, 5e-3, 2e-3, 4e-3]
        curve = build_curve([trace(np.full(160, 100), t) for t in taus])
        assert list(curve.tau) == taus
        assert list(curve.sorted().order) == [1, 3, 0, 4, 2]

    def test_round_trip(self, schedule_200):
        ens = single_emitter(200, 0.1, schedule_200)
        acq = simulate_trace(ens, schedule_200, QUIET, stop=StopCondition("photons", 5e6), seed=3)
        curve = build_curve(acq.traces())
        assert curve.ratio[0] == pytest.approx(1 + 0.1 * math.exp(-200 * curve.tau[0]), abs=0.005)
        assert curve.ratio[-1] == pytest.approx(1.0, abs=0.005)


class TestIsolateTarget:
    def test_quadrature(self):
        res = isolate_target(fake_fit(500, 30), fake_fit(300, 20))
        assert res.gamma_target == 200
        assert res.sigma == pytest.approx(36.0555127546398929, rel=1e-14)
        assert not res.below_control

    def test_identical(self):
        res = isolate_target(fake_fit(300, 20), fake_fit(300, 20))
        assert res == (0, pytest.approx(math.sqrt(2) * 20), False)

    def test_below(self):
        res = isolate_target(fake_fit(280, 20), fake_fit(300, 20))
        assert res.gamma_target == -20 and res.below_control

    def test_unreliable(self):
        with pytest.raises(AnalysisError):
            isolate_target(fake_fit(500, 30, reliable=False), fake_fit(300, 20))
        assert isolate_target(fake_fit(500, 30, False), fake_fit(300, 20), force=True).gamma_target == 200


class TestNoiseAudit:
    @pytest.mark.parametrize("factor", [1.0, 2.0])
    def test_generator_factor(self, factor):
        from fndrelax.acquisition import PulseSchedule
        sched = PulseSchedule((1e-3,))
        noise = NoiseConfig(drift_amplitude=0.0, excess_noise_factor=factor)
        ens = single_emitter(200, 0.1, sched, noise)
        acq = simulate_trace(ens, sched, noise, seed=11,
                             stop=StopCondition("repeats", 300 * 500, n_blocks=500, max_blocks=500))
        audit = noise_audit(acq.block_traces(0))
        assert audit.factor == pytest.approx(factor, rel=0.1)
        assert audit.n_repeats == 500 and not audit.degenerate

    def test_degenerate(self):
        audit = noise_audit([trace(np.full(160, 100))] * 25)
        assert audit == (0.0, 25, True)

    def test_insufficient(self):
        with pytest.raises(AnalysisError):
            noise_audit([trace(np.full(160, 100))] * 5)


class TestSnrEmpirical:
    def test_zero_contrast(self):
        fits = [fake_fit(300, 20, contrast=0.0) for _ in range(10)]
        assert snr_empirical(fits, 1e-3) == 0.0

    def test_value(self):
        fits = [fake_fit(100, 5, contrast=c) for c in np.linspace(0.09, 0.11, 11)]
        vals = np.linspace(0.09, 0.11, 11) * math.exp(-0.1)
        assert snr_empirical(fits, 1e-3) == pytest.approx(vals.mean() / vals.std(ddof=1))

    def test_few_runs(self):
        with pytest.warns(UserWarning):
            snr_empirical([fake_fit(100, 5, contrast=c) for c in (0.1, 0.11, 0.12)], 1e-3)
        with pytest.raises(AnalysisError):
            snr_empirical([fake_fit(100, 5)], 1e-3)


def test_curve_dataclass_points():
    c = T1Curve(np.array([1e-3]), np.array([1.1]), np.array([0.01]), np.array([10]),
                np.array([50]), np.array([0]))
    assert c.points == [(1e-3, 1.1, 0.01, 10, 50)]
