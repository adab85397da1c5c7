import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gaussian_tail
from pnrdet.detector import DetectorConfig, mean_input_for_target, simulate_run
from pnrdet.errors import EstimationError, InputError, ParameterError
from pnrdet.stochastic import RandomStream
from pnrdet.waveform import (
    PulseHeightSpectrum,
    PulseShape,
    Trace,
    build_spectrum,
    discriminate_count,
    estimate_gain,
    extract_height,
    find_peaks,
    synthesize_height,
    synthesize_heights,
    synthesize_trace,
)

CFG = DetectorConfig()


def spectrum_at(target, shots=100_000, seed=3):
    run = simulate_run(CFG, mean_input_for_target(CFG, target), shots, master_seed=seed)
    return run, build_spectrum(run.pulse_height)


def test_empty_height_without_baseline_noise():
    assert synthesize_height(0, CFG, RandomStream(1), baseline_sigma=0.0) == 0.0


def test_height_rejects_negative_and_overflow():
    with pytest.raises(ParameterError):
        synthesize_height(-1, CFG, RandomStream(1))
    with pytest.raises(ParameterError):
        synthesize_height(101, CFG, RandomStream(1))


@pytest.mark.parametrize("n", [1, 4, 9, 16])
def test_height_linearity(n):
    h = synthesize_heights(RandomStream(2, n), np.full(100_000, n), CFG)
    se_mean = math.sqrt(n) * 0.07 / math.sqrt(h.size)
    assert abs(h.mean() - n * CFG.gain_single) < 3 * se_mean
    sd = math.sqrt(n) * 0.07
    assert abs(h.std(ddof=1) - sd) < 3 * sd / math.sqrt(2 * (h.size - 1))


def test_height_spread_at_four():
    h = synthesize_heights(RandomStream(3), np.full(100_000, 4), CFG)
    assert h.std(ddof=1) == pytest.approx(0.14, abs=3 * 0.14 / math.sqrt(2e5))


def test_neighbour_overlap_at_ten():
    z = 0.5 / (math.sqrt(10.5) * 0.07)
    assert gaussian_tail(z) == pytest.approx(0.01375, abs=5e-5)
    h = synthesize_heights(RandomStream(4), np.full(200_000, 10), CFG)
    above = np.mean(h > 10.5)
    # spread at N=10 is slightly narrower than the midpoint approximation
    assert above == pytest.approx(gaussian_tail(0.5 / (math.sqrt(10) * 0.07)), abs=0.001)


def test_trace_geometry():
    shape = PulseShape()
    tr = synthesize_trace(5, shape, CFG, RandomStream(5))
    assert len(tr) == math.ceil(50 / 2) + 1
    assert tr.t_ns[0] == 0 and tr.t_ns[-1] == pytest.approx(50.0)
    peak = int(np.argmax(tr.amplitude))
    assert peak == shape.peak_index
    assert tr.t_ns[peak] <= (shape.rise_fraction * shape.duration_ns) + 2 * shape.sample_period_ns
    height = synthesize_height(5, CFG, RandomStream(5))
    assert tr.amplitude.max() == height


def test_trace_of_nothing_is_flat_zero():
    tr = synthesize_trace(0, PulseShape(), CFG, RandomStream(6), baseline_sigma=0.0)
    assert not tr.amplitude.any()
    assert extract_height(tr) == 0.0


@pytest.mark.parametrize("n", [1, 3, 10, 40])
def test_extract_height_round_trip(n):
    tr = synthesize_trace(n, PulseShape(), CFG, RandomStream(7, n))
    assert extract_height(tr) == pytest.approx(synthesize_height(n, CFG, RandomStream(7, n)), abs=1e-9)


def test_extract_height_ignores_offset():
    clean = synthesize_trace(6, PulseShape(), CFG, RandomStream(8))
    shifted = synthesize_trace(6, PulseShape(), CFG, RandomStream(8), offset=0.37)
    assert extract_height(shifted) == pytest.approx(extract_height(clean), abs=1e-12)
    assert extract_height(np.column_stack([shifted.t_ns, shifted.amplitude])) == pytest.approx(
        extract_height(clean), abs=1e-12
    )


def test_extract_height_rejects_empty():
    with pytest.raises(InputError):
        extract_height(np.array([]))


@pytest.mark.parametrize(
    "kwargs", [{"duration_ns": 1.0}, {"sample_period_ns": 0.0}, {"rise_fraction": 1.0}, {"rise_fraction": 0.0}]
)
def test_pulse_shape_validation(kwargs):
    with pytest.raises(ParameterError):
        PulseShape(**kwargs)


def test_discriminate_examples():
    assert discriminate_count(0.02, 1.0) == 0
    assert discriminate_count(4.96, 1.0) == 5
    assert discriminate_count(-0.8, 1.0) == 0
    assert discriminate_count(9.0, 2.0) == 5
    with pytest.raises(ParameterError):
        discriminate_count(1.0, 0.0)


def test_round_trip_discrimination_up_to_ten():
    shape = PulseShape()
    for n in range(11):
        hits = sum(
            discriminate_count(extract_height(synthesize_trace(n, shape, CFG, RandomStream(9 + n, i))), 1.0) == n
            for i in range(400)
        )
        assert hits / 400 >= 0.97


def test_end_to_end_discrimination_at_five():
    run, _ = spectrum_at(5.0)
    counts = discriminate_count(run.pulse_height, CFG.gain_single)
    assert np.mean(counts == run.n_detected) > 0.99


def test_spectrum_invariants():
    heights = synthesize_heights(RandomStream(10), np.arange(1000) % 7, CFG)
    spec = build_spectrum(heights)
    assert spec.counts.sum() == spec.total_shots == 1000
    assert np.all(np.diff(spec.bin_edges) > 0)
    assert list(spec.rows())[0][2] == spec.counts[0]
    with pytest.raises(InputError):
        PulseHeightSpectrum(np.array([0.0, 1.0, 0.5]), np.array([1, 1]), 2)
    with pytest.raises(InputError):
        PulseHeightSpectrum(np.array([0.0, 1.0]), np.array([1]), 3)
    with pytest.raises(InputError):
        build_spectrum([])


@pytest.mark.parametrize("target", [0.6, 5.0])
def test_resolved_peaks_at_integer_multiples(target):
    _, spec = spectrum_at(target)
    peaks = find_peaks(spec)
    top = 2 if target < 1 else 10
    for k in range(top + 1):
        assert np.min(np.abs(peaks - k)) < 0.05, k


def test_peaks_survive_tail_overlap_at_10_4():
    _, spec = spectrum_at(10.4)
    peaks = find_peaks(spec)
    assert all(np.min(np.abs(peaks - k)) < 0.1 for k in range(11))
    c = spec.centers
    valleys = [spec.counts[np.argmin(np.abs(c - (k + 0.5)))] for k in range(6, 12)]
    assert min(valleys) > 0


def test_gain_from_low_mean_spectrum():
    _, spec = spectrum_at(0.6)
    assert estimate_gain(spec) == pytest.approx(CFG.gain_single, rel=0.02)


def test_gain_needs_two_peaks():
    h = synthesize_heights(RandomStream(11), np.full(10_000, 3), CFG)
    with pytest.raises(EstimationError):
        estimate_gain(build_spectrum(h))


@settings(max_examples=20, deadline=None)
@given(factor=st.floats(0.1, 20.0))
def test_gain_homogeneous_in_scale(factor):
    heights = synthesize_heights(RandomStream(12), np.arange(20_000) % 4, CFG)
    spec = build_spectrum(heights)
    assert estimate_gain(spec.scaled(factor)) == pytest.approx(factor * estimate_gain(spec), rel=1e-9)


def test_raw_trace_default_baseline():
    assert extract_height(np.array([0.2, 0.2, 1.2, 0.5])) == pytest.approx(1.0)
    assert extract_height(Trace(np.arange(3.0), np.array([1.0, 2.0, 5.0]), baseline_samples=1)) == 4.0
