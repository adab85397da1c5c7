"""Simulation and calibration of an up-conversion + SiPM photon-number-resolving detector."""

__version__ = "0.1.0"

from .analysis import (
    CalibrationReport,
    CountHistogram,
    analyze_sweep,
    build_count_histogram,
    calibrate,
    correct_efficiency,
    estimate_crosstalk,
    fit_fano_slope,
    fit_poisson,
    noise_floor,
    sweep_bias_analysis,
)
from .detector import (
    BiasModel,
    DetectorConfig,
    ShotRecord,
    ShotTable,
    apply_bias,
    expected_fired_pixels,
    mean_input_for_target,
    simulate_run,
    simulate_shot,
)
from .errors import BiasRangeError, EstimationError, InputError, ParameterError
from .stochastic import CascadeParams, RandomStream, compound_poisson_moments
from .waveform import PulseHeightSpectrum, PulseShape, build_spectrum, estimate_gain
