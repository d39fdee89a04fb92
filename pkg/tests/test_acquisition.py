import math

import numpy as np
import pytest

from conftest import QUIET, log_grid, single_emitter
from fndrelax.acquisition import (AcquisitionError, NoiseConfig, PulseSchedule, StopCondition,
                                  apply_dead_time, expected_rate, nd_for_linear_range,
                                  simulate_trace)
from fndrelax.analysis import build_curve, noise_audit, window_ratio
from fndrelax.core import polarization_level
from fndrelax.ensemble import EnsembleSpec, sample_ensemble


class TestPulseSchedule:
    def test_bins(self):
        s = PulseSchedule((1e-3,))
        assert s.n_bins == 160
        assert s.cycle_time == pytest.approx(1e-3 + 80e-6)

    @pytest.mark.parametrize("kw", [dict(tau_list=()), dict(tau_list=(0.0,)),
                                    dict(tau_list=(1e-3,), bin_width=0.3e-6)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PulseSchedule(**kw)

    def test_noise_validation(self):
        with pytest.raises(ValueError):
            NoiseConfig(drift_amplitude=0.2)
        with pytest.raises(ValueError):
            NoiseConfig(excess_noise_factor=0.5)


class TestDeadTime:
    def test_examples(self):
        assert apply_dead_time(0.0, 25e-9) == 0.0
        assert apply_dead_time(4e7, 25e-9) == pytest.approx(2e7)
        # 2 Mcps at 25 ns: 1 - 1/(1 + 0.05)
        assert 1 - apply_dead_time(2e6, 25e-9) / 2e6 == pytest.approx(0.047619047619047616)

    def test_bounded_and_monotone(self):
        r = np.geomspace(1, 1e12, 200)
        out = apply_dead_time(r, 25e-9)
        assert np.all(np.diff(out) > 0) and np.all(out < 1 / 25e-9)

    def test_linear_regime(self):
        r = np.linspace(0, 0.01 / 25e-9, 50)
        assert np.all(r - apply_dead_time(r, 25e-9) <= 0.01 * r + 1e-12)

    def test_nd(self):
        assert nd_for_linear_range(1e6) == 0.0
        assert nd_for_linear_range(11e6) == pytest.approx(0.8)


class TestSimulateTrace:
    def test_flat_source(self, schedule_200):
        ens = single_emitter(200, 0.0, schedule_200)
        acq = simulate_trace(ens, schedule_200, QUIET, stop=StopCondition("repeats", 20000), seed=1)
        for tr in acq.traces():
            r = window_ratio(tr)
            assert abs(r.ratio - 1) < 4 * r.sigma

    def test_single_emitter_matches_decay(self, schedule_200):
        noise = NoiseConfig(drift_amplitude=0.0, excess_noise_factor=1.0, dead_time=0.0)
        ens = single_emitter(200, 0.10, schedule_200, noise)
        acq = simulate_trace(ens, schedule_200, noise, stop=StopCondition("photons", 2e7), seed=2)
        curve = build_curve(acq.traces())
        # window means of exp(-t / 20 us): first 2 us and last 10 us of the 80 us pulse
        a = 10 * (1 - math.exp(-0.1))
        b = 2 * (math.exp(-3.5) - math.exp(-4.0))
        amp = ens.contrast[0] * polarization_level(80e-6, 20e-6, 200.0)
        spin = amp * np.exp(-200 * curve.tau)
        expected = (1 + a * spin) / (1 + b * spin)
        assert np.all(np.abs(curve.ratio - expected) < 3 * curve.sigma)

    def test_fixed_repeats(self, schedule_200):
        ens = single_emitter(200, 0.1, schedule_200)
        acq = simulate_trace(ens, schedule_200, QUIET, stop=StopCondition("repeats", 1))
        traces = acq.traces()
        assert len(traces) == len(schedule_200.tau_list)
        assert all(t.pulses_accumulated == 1 for t in traces)

    def test_photon_budget_time(self):
        sched = PulseSchedule(log_grid(900.0))
        noise = NoiseConfig(nd_optical_density=0.9)
        ens = single_emitter(900, 0.1, sched, noise, rate=13e6, max_emitters=50)
        acq = simulate_trace(ens, sched, noise, stop=StopCondition("photons", 1.2e6), seed=0)
        ref = acq.counts[:, 0, -20:].sum()
        assert ref >= 1.2e6
        per_pulse = float(expected_rate(ens, sched, noise)[0, -20:].mean())
        per_pulse = apply_dead_time(per_pulse, noise.dead_time) * 10e-6
        expected = 1.2e6 / per_pulse * sched.cycle_time
        assert acq.elapsed_time == pytest.approx(expected, rel=0.03)

    def test_zero_brightness(self, schedule_200):
        spec = EnsembleSpec(100, 200.0, 0.0, max_emitters=4)
        with pytest.raises(AcquisitionError):
            simulate_trace(sample_ensemble(spec), schedule_200, QUIET,
                           stop=StopCondition("photons", 1e3, n_blocks=5, max_blocks=20))

    def test_empty(self, schedule_200):
        with pytest.warns(UserWarning):
            ens = sample_ensemble(EnsembleSpec(100, 200.0, 1.0, fnd_concentration=0))
        with pytest.raises(AcquisitionError):
            simulate_trace(ens, schedule_200)

    def test_spin_mixed(self, schedule_200):
        noise = NoiseConfig(spin_mixed_mode=True, excess_noise_factor=1.0)
        ens = single_emitter(200, 0.1, schedule_200, noise)
        acq = simulate_trace(ens, schedule_200, noise, stop=StopCondition("time", 600), seed=4)
        curve = build_curve(acq.traces())
        assert np.all(np.abs(curve.ratio - 1) < 4 * curve.sigma)
        assert np.ptp(acq.drift) > 0.01

    def test_deterministic_and_parallel(self, schedule_200):
        ens = single_emitter(200, 0.1, schedule_200)
        stop = StopCondition("time", 30)
        a = simulate_trace(ens, schedule_200, NoiseConfig(), stop=stop, seed=9)
        b = simulate_trace(ens, schedule_200, NoiseConfig(), stop=stop, seed=9, n_jobs=4)
        assert np.array_equal(a.counts, b.counts) and np.array_equal(a.drift, b.drift)
        c = simulate_trace(ens, schedule_200, NoiseConfig(), stop=stop, seed=10)
        assert not np.array_equal(a.counts, c.counts)

    def test_tau_major_order(self, schedule_200):
        from dataclasses import replace
        sched = replace(schedule_200, interleave=False)
        ens = single_emitter(200, 0.1, sched)
        acq = simulate_trace(ens, sched, QUIET, stop=StopCondition("repeats", 500))
        assert np.all(acq.pulses.sum(axis=0) == 500)

    def test_excess_noise_calibration(self):
        sched = PulseSchedule((1e-3,))
        ens = single_emitter(200, 0.1, sched)
        stop = StopCondition("repeats", 200 * 400, n_blocks=400, max_blocks=400)
        for factor in (1.0, 2.0):
            noise = NoiseConfig(drift_amplitude=0.0, excess_noise_factor=factor)
            acq = simulate_trace(ens, sched, noise, stop=stop, seed=5)
            audit = noise_audit(acq.block_traces(0))
            assert audit.factor ** 2 / factor ** 2 == pytest.approx(1.0, abs=0.13)
