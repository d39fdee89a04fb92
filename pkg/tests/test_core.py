import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fndrelax.core import (RelaxationParams, SnrInputs, decay_signal, dynamic_range,
                           isolate_target_rate, polarization_level, single_nv_intensity, snr)

# reference values evaluated with mpmath at 30 digits
ORACLE_STRETCHED_20MS = 1.01970092114490911006234424952   # 1 + 0.1 exp(-2**0.7)
ORACLE_ONE_OVER_E = 1.03678794411714423215955237702       # 1 + 0.1 / e
ORACLE_POL_80US = 0.981684361111265819706281978727        # 1 - exp(-4)
ORACLE_SNR_100NM = 1923.38521081924002307452083092        # R=11e6, t=80us, T=3000, C=.09, G=2700


class TestRelaxationParams:
    def test_t1(self):
        assert RelaxationParams(0.1, 200).t1 == pytest.approx(5e-3)
        assert RelaxationParams(0.1, 0).t1 == math.inf

    @pytest.mark.parametrize("kw", [dict(rate=-1), dict(stretch=0), dict(stretch=2.1),
                                    dict(contrast=0.6), dict(contrast=-0.06), dict(offset=-1)])
    def test_invalid(self, kw):
        base = dict(contrast=0.1, rate=100.0)
        with pytest.raises(ValueError):
            RelaxationParams(**{**base, **kw})


class TestDecaySignal:
    def test_tau_zero(self):
        assert decay_signal(RelaxationParams(0.1, 100), 0.0) == pytest.approx(1.10, abs=1e-15)

    def test_one_t1(self):
        assert decay_signal(RelaxationParams(0.1, 100), 10e-3) == pytest.approx(
            ORACLE_ONE_OVER_E, rel=1e-14)

    def test_stretched(self):
        assert decay_signal(RelaxationParams(0.1, 100, 0.7), 20e-3) == pytest.approx(
            ORACLE_STRETCHED_20MS, rel=1e-14)

    def test_vectorized(self):
        out = decay_signal(RelaxationParams(0.1, 100), [0.0, 10e-3])
        assert out.shape == (2,)

    def test_negative_tau(self):
        with pytest.raises(ValueError):
            decay_signal(RelaxationParams(0.1, 100), -1.0)

    @given(st.floats(0.0, 0.5), st.floats(1.0, 1e6), st.floats(0.3, 1.5), st.floats(0.5, 2))
    def test_value_at_zero(self, c, g, p, off):
        assert decay_signal(RelaxationParams(c, g, p, off), 0.0) == c + off

    @given(st.floats(1e-3, 0.5), st.floats(1.0, 1e6), st.floats(0.3, 1.5))
    def test_monotone(self, c, g, p):
        tau = np.geomspace(1e-3, 1e3, 400) / g
        y = decay_signal(RelaxationParams(c, g, p), tau)
        assert np.all(np.diff(y) <= 0)


class TestSingleNV:
    def test_no_targets(self):
        assert single_nv_intensity(100, [], 0.1, 1.0, 10e-3) == decay_signal(
            RelaxationParams(0.1, 100), 10e-3)

    def test_targets_add(self):
        assert single_nv_intensity(100, [50, 50], 0.1, 1.0, 5e-3) == decay_signal(
            RelaxationParams(0.1, 200), 5e-3)

    def test_oracle(self):
        assert single_nv_intensity(300, [200], 0.1, 1.0, 2e-3) == pytest.approx(
            ORACLE_ONE_OVER_E, rel=1e-14)

    @given(st.floats(0, 1e4), st.lists(st.floats(0, 1e4), max_size=5), st.floats(0, 1e-2))
    def test_additivity(self, g, targets, tau):
        a = single_nv_intensity(g, targets, 0.1, 1.0, tau)
        b = decay_signal(RelaxationParams(0.1, g + sum(targets)), tau)
        assert a == pytest.approx(b, rel=1e-15, abs=0)

    def test_negative_rate(self):
        with pytest.raises(ValueError):
            single_nv_intensity(100, [-1], 0.1, 1.0, 0.0)


class TestIsolateTargetRate:
    @pytest.mark.parametrize("m,i,rate,below", [(500, 300, 200, False), (300, 300, 0, False),
                                                (280, 300, -20, True)])
    def test_examples(self, m, i, rate, below):
        assert isolate_target_rate(m, i) == (rate, below)

    @given(st.floats(0, 1e6), st.floats(0, 1e6))
    def test_split(self, a, b):
        assert isolate_target_rate(a + b, a).rate == pytest.approx(b, abs=1e-9 * (a + b))


class TestSnr:
    base = SnrInputs(11e6, 80e-6, 3000, 0.09, 2700, 2700)

    def test_zero_contrast(self):
        inp = SnrInputs(1e6, 80e-6, 3000, 0.0, 100, 100)
        assert np.all(snr(inp, np.geomspace(1e-5, 1, 50)) == 0)

    def test_100nm_example(self):
        assert snr(self.base, 1 / (2 * 2700)) == pytest.approx(ORACLE_SNR_100NM, rel=1e-12)

    @pytest.mark.parametrize("field,factor,expected", [
        ("total_time", 2, math.sqrt(2)), ("photon_rate", 4, 2.0),
        ("readout_len", 9, 3.0), ("contrast", 0.5, 0.5)])
    def test_scaling(self, field, factor, expected):
        from dataclasses import replace
        scaled = replace(self.base, **{field: getattr(self.base, field) * factor})
        tau = 1e-4
        assert snr(scaled, tau) / snr(self.base, tau) == pytest.approx(expected, rel=1e-12)

    @settings(max_examples=50)
    @given(st.floats(10, 1e5), st.floats(0, 10))
    def test_unimodal(self, gi, extra):
        inp = SnrInputs(1e6, 80e-6, 100, 0.1, gi, gi * (1 + extra))
        tau = np.geomspace(0.01 / gi, 100 / gi, 4000)
        d = np.sign(np.diff(snr(inp, tau)))
        d = d[d != 0]
        assert np.count_nonzero(np.diff(d)) == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            SnrInputs(1e6, 80e-6, 100, 0.1, 200, 100)
        with pytest.raises(ValueError):
            snr(self.base, 0.0)


class TestPolarization:
    def test_examples(self):
        assert polarization_level(0.0) == 0.0
        assert polarization_level(80e-6) == pytest.approx(ORACLE_POL_80US, rel=1e-14)
        assert polarization_level(1.0) == pytest.approx(1.0)

    def test_relaxation_lowers_steady_state(self):
        # pumping at 5e4 s^-1 against relaxation at 5e4 s^-1 saturates at one half
        assert polarization_level(1.0, 20e-6, 5e4) == pytest.approx(0.5)
        assert polarization_level(80e-6, 20e-6, 4e4) < polarization_level(80e-6)

    def test_negative(self):
        with pytest.raises(ValueError):
            polarization_level(-1e-6)


class TestDynamicRange:
    def test_examples(self):
        assert dynamic_range(1000, 10000) == 9000
        assert dynamic_range(5, 6) == 1
        with pytest.raises(ValueError):
            dynamic_range(40000, 40000)
