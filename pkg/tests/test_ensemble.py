import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fndrelax.ensemble import (EnsembleSpec, NVEmitter, ScatteringLaw, TargetSpec, mix_solutions,
                               sample_ensemble, scattering_factor, target_rate_for_emitter)


def spec(**kw):
    base = dict(particle_diameter=100, gamma_intrinsic_median=1000, brightness_per_particle=1e3,
                gamma_intrinsic_logsigma=0.4, max_emitters=500, seed=3)
    return EnsembleSpec(**{**base, **kw})


class TestSampleEnsemble:
    def test_degenerate_rates(self):
        ens = sample_ensemble(spec(gamma_intrinsic_logsigma=0.0))
        assert np.all(ens.gamma_intrinsic == 1000)

    def test_deterministic(self):
        a, b = sample_ensemble(spec()), sample_ensemble(spec())
        assert a.emitters() == b.emitters()
        assert sample_ensemble(spec(seed=4)).emitters() != a.emitters()

    def test_volume_scaling(self):
        big, small = spec(particle_diameter=140), spec(particle_diameter=30)
        assert big.nv_per_particle / small.nv_per_particle == pytest.approx((140 / 30) ** 3)

    def test_depths_inside_particle(self):
        for mode in ("volume", "surface"):
            ens = sample_ensemble(spec(diameter_cv=0.2, depth_mode=mode))
            assert np.all(ens.depth >= 0)
            assert np.all(ens.depth <= ens.particle_diameter / 2)

    def test_volume_depth_distribution(self):
        # uniform over the ball: P(depth > r/2) = (1/2)^3
        ens = sample_ensemble(spec(max_emitters=2048, seed=1))
        frac = np.mean(ens.depth > 25)
        assert frac == pytest.approx(0.125, abs=0.03)

    def test_lognormal_median(self):
        ens = sample_ensemble(spec(max_emitters=2048))
        assert np.median(ens.gamma_intrinsic) == pytest.approx(1000, rel=0.05)
        assert np.std(np.log(ens.gamma_intrinsic)) == pytest.approx(0.4, rel=0.08)

    def test_brightness_conserved(self):
        s = spec()
        assert sample_ensemble(s).total_brightness == pytest.approx(s.sample_brightness)

    def test_zero_concentration(self):
        with pytest.warns(UserWarning):
            ens = sample_ensemble(spec(fnd_concentration=0.0))
        assert ens.empty and len(ens) == 0

    @pytest.mark.parametrize("kw", [dict(particle_diameter=0), dict(fnd_concentration=-1),
                                    dict(gamma_intrinsic_logsigma=-0.1), dict(depth_mode="x")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            spec(**kw)

    def test_surface_bias_with_size(self):
        target = TargetSpec(1.0, 1e8)
        means = [sample_ensemble(spec(particle_diameter=d, max_emitters=2048))
                 .target_rates(target).mean() for d in (30, 50, 100, 140)]
        assert all(a > b for a, b in itertools.pairwise(means))


class TestTargetRate:
    emitter = NVEmitter(1000, 2.0, 1.0, 0.1)

    def test_no_target(self):
        assert target_rate_for_emitter(self.emitter, TargetSpec(0.0, 1e8)) == 0

    def test_linear_in_concentration(self):
        a = target_rate_for_emitter(self.emitter, TargetSpec(1.5, 1e8))
        assert target_rate_for_emitter(self.emitter, TargetSpec(3.0, 1e8)) == 2 * a

    def test_depth_kernel(self):
        t = TargetSpec(1.0, 1e8, softening_depth=1.0)
        shallow = target_rate_for_emitter(NVEmitter(1, 2.0, 1, 0.1), t)
        deep = target_rate_for_emitter(NVEmitter(1, 4.0, 1, 0.1), t)
        assert shallow / deep == pytest.approx((5 / 3) ** 6, rel=1e-14)

    def test_invalid(self):
        with pytest.raises(ValueError):
            TargetSpec(-1.0, 1.0)


class TestScattering:
    def test_clear(self):
        assert scattering_factor(0.0) == (1.0, 1.0)

    def test_threshold(self):
        f = scattering_factor(25.0)
        assert f.intensity >= 0.98 and f.contrast >= 0.98

    def test_high_concentration(self):
        law = ScatteringLaw()
        f = scattering_factor(300.0, law)
        assert f.contrast == pytest.approx(np.exp(-law.contrast_coeff * 275))
        assert f.contrast < scattering_factor(25.0).contrast
        assert f.contrast < f.intensity < 1

    def test_monotone(self):
        vals = [scattering_factor(c) for c in np.linspace(0, 500, 60)]
        assert all(a.contrast >= b.contrast and a.intensity >= b.intensity
                   for a, b in itertools.pairwise(vals))

    def test_negative(self):
        with pytest.raises(ValueError):
            scattering_factor(-1.0)


class TestMixSolutions:
    def test_titration(self):
        assert mix_solutions([170, 30], [0, 26.6]) == pytest.approx(0 * 170 / 200 + 26.6 * 30 / 200)
        assert mix_solutions([170, 30], [0, 26.6]) == pytest.approx(3.99)

    def test_trivial(self):
        assert mix_solutions([100], [5]) == 5
        assert mix_solutions([50, 50], [2, 4]) == 3

    @pytest.mark.parametrize("v,c", [([], []), ([1, 2], [1]), ([0, 1], [1, 1])])
    def test_invalid(self, v, c):
        with pytest.raises(ValueError):
            mix_solutions(v, c)

    @given(st.lists(st.tuples(st.floats(0.1, 1e3), st.floats(0, 100)), min_size=1, max_size=6),
           st.randoms())
    def test_permutation_and_split(self, pairs, rnd):
        v, c = map(list, zip(*pairs))
        ref = mix_solutions(v, c)
        shuffled = pairs[:]
        rnd.shuffle(shuffled)
        assert mix_solutions(*zip(*shuffled)) == pytest.approx(ref, rel=1e-12, abs=1e-12)
        split_v = [v[0] / 2, v[0] / 2] + v[1:]
        split_c = [c[0], c[0]] + c[1:]
        assert mix_solutions(split_v, split_c) == pytest.approx(ref, rel=1e-12, abs=1e-12)
