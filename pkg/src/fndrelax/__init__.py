"""Simulation and analysis of in-solution T1 relaxometry with nanodiamond ensembles."""
__version__ = "0.1.0"

from .core import (CONSTANTS, PhysicalConstants, RelaxationParams, SnrInputs, decay_signal,
                   dynamic_range, isolate_target_rate, polarization_level, single_nv_intensity,
                   snr)
from .ensemble import (EnsembleSpec, NVEmitter, TargetSpec, mix_solutions, sample_ensemble,
                       scattering_factor, target_rate_for_emitter)
from .acquisition import (BinnedTrace, NoiseConfig, PulseSchedule, StopCondition,
                          apply_dead_time, simulate_trace)
from .fitting import FitResult, StretchedExponentialRegressor, fit_stretched
from .analysis import (T1Curve, WindowRatioTransformer, WindowSpec, build_curve,
                       isolate_target, noise_audit, snr_empirical, window_ratio)
from .planner import (PRESETS, ComparisonSettings, SizeComparisonReport, compare_sizes,
                      design_tau_grid, optimal_tau, plan_experiment)
from .config import RunConfig, load_config
from .pipeline import run_pipeline
