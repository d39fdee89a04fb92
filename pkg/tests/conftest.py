import warnings

import numpy as np
import pytest

from fndrelax.acquisition import NoiseConfig, PulseSchedule, emitter_contrast_for
from fndrelax.ensemble import EnsembleSpec, sample_ensemble

QUIET = NoiseConfig(drift_amplitude=0.0, excess_noise_factor=1.0)


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def log_grid(gamma: float, n: int = 20) -> tuple[float, ...]:
    return tuple(float(t) for t in np.geomspace(0.05 / gamma, 5 / gamma, n))


def single_emitter(gamma: float, ratio_contrast: float, schedule: PulseSchedule,
                   noise: NoiseConfig = QUIET, rate: float = 3e5, logsigma: float = 0.0,
                   max_emitters: int = 1, seed: int = 0):
    """Ensemble with the given window-ratio contrast and total brightness ``rate``."""
    c = emitter_contrast_for(ratio_contrast, schedule, noise)
    probe = EnsembleSpec(100, gamma, 1.0, contrast=c)
    spec = EnsembleSpec(100, gamma, rate / probe.particle_count_in_beam, contrast=c,
                        gamma_intrinsic_logsigma=logsigma, max_emitters=max_emitters,
                        seed=seed)
    return sample_ensemble(spec)


@pytest.fixture
def schedule_200():
    return PulseSchedule(log_grid(200.0))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.line(n))
