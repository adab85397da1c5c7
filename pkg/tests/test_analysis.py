import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import poisson_pmf
from pnrdet.analysis import (
    CalibrationReport,
    SaturationWarning,
    UnderDispersionWarning,
    analyze_sweep,
    build_count_histogram,
    calibrate,
    correct_efficiency,
    estimate_crosstalk,
    estimate_total_efficiency,
    fit_fano_slope,
    fit_poisson,
    histogram_from_counts,
    noise_floor,
    sweep_bias_analysis,
)
from pnrdet.detector import BiasModel, DetectorConfig, apply_bias, detection_pmf, mean_input_for_target, simulate_run
from pnrdet.errors import InputError, ParameterError

CFG = DetectorConfig()
F_NOMINAL = (1 + 0.314) / (1 - 0.314)


def sweep(config, targets, shots, seed):
    return [
        build_count_histogram(simulate_run(config, mean_input_for_target(config, t), shots, master_seed=seed + i))
        for i, t in enumerate(targets)
    ]


# geometric spacing keeps most weight where primary pile-up is small
LOW_TARGETS = np.geomspace(0.5, 14, 10)


@pytest.fixture(scope="module")
def default_sweep():
    return sweep(CFG, LOW_TARGETS, 100_000, 1000)


@pytest.fixture(scope="module")
def dark_hist():
    return build_count_histogram(simulate_run(CFG, 0.0, 1_000_000, master_seed=77))


def test_histogram_small_example():
    h = build_count_histogram([0, 0, 1, 1])
    assert h.frequencies == {0: 0.5, 1: 0.5}
    assert h.mean_det == 0.5
    assert h.var_det == pytest.approx(1 / 3, abs=1e-15)


def test_histogram_constant_counts():
    h = build_count_histogram([3] * 10)
    assert h.var_det == 0.0 and h.mean_det == 3.0


def test_histogram_rejects_empty_and_negative():
    with pytest.raises(InputError):
        build_count_histogram([])
    with pytest.raises(InputError):
        build_count_histogram([1, -1])
    with pytest.raises(InputError):
        histogram_from_counts({})


def test_histogram_invariants_from_records():
    run = simulate_run(CFG, 150.0, 20_000, master_seed=5)
    h = build_count_histogram(run)
    assert sum(h.frequencies.values()) == pytest.approx(1.0, abs=1e-12)
    ks = np.array(list(h.frequencies))
    fs = np.array(list(h.frequencies.values()))
    assert h.mean_det == pytest.approx(float(ks @ fs), abs=1e-9)
    n = h.total_shots
    assert h.var_det == pytest.approx(float(((ks - h.mean_det) ** 2) @ fs) * n / (n - 1), abs=1e-9)
    assert h.mean_input == 150.0
    assert h.mean_n_input == pytest.approx(run.n_input.mean())
    # record list and column store give the same histogram
    assert build_count_histogram(list(run)[:500]).counts == build_count_histogram(run.n_detected[:500]).counts


def test_poisson_self_fit():
    pmf = poisson_pmf(2.0, 30)
    counts = {k: int(round(c)) for k, c in enumerate(pmf * 1e6) if round(c) > 0}
    fit = fit_poisson(histogram_from_counts(counts))
    assert fit.mean == pytest.approx(2.0, abs=1e-3)
    assert fit.chi2_pvalue > 0.99


def test_poisson_rejects_compound_data():
    h = sweep(CFG, [5.0], 100_000, 31)[0]
    assert fit_poisson(h).chi2_pvalue < 0.01


def test_poisson_accepts_data_without_crosstalk():
    cfg = replace(CFG, crosstalk_p=0.0, n_pixels=1_000_000)
    h = sweep(cfg, [5.0], 100_000, 32)[0]
    assert fit_poisson(h).chi2_pvalue > 0.01


def test_poisson_degenerate_and_small():
    assert math.isnan(fit_poisson(build_count_histogram([4] * 200)).chi2_pvalue)
    with pytest.raises(InputError):
        fit_poisson(build_count_histogram([1, 2, 3]))


def test_fano_exact_line():
    pts = [(m, F_NOMINAL * m) for m in (1.0, 3.0, 7.0, 12.0)]
    fit = fit_fano_slope(pts)
    assert fit.fano == pytest.approx(F_NOMINAL, rel=1e-12)
    assert fit.stderr == pytest.approx(0.0, abs=1e-12)
    assert fit.n_points == 4


def test_fano_poisson_line_and_cutoff():
    pts = [(m, m) for m in (0.5, 2.0, 8.0)] + [(40.0, 5.0)]
    assert fit_fano_slope(pts).fano == pytest.approx(1.0, rel=1e-12)
    assert fit_fano_slope(pts, max_mean=50).n_points == 4


def test_fano_needs_three_points():
    with pytest.raises(InputError):
        fit_fano_slope([(1.0, 2.0), (2.0, 4.0), (30.0, 60.0)])


def test_fano_from_default_sweep(default_sweep):
    fit = fit_fano_slope(default_sweep)
    # N = 100 pile-up pulls the slope slightly under the ideal line
    assert fit.fano == pytest.approx(F_NOMINAL, abs=0.06)
    assert fit.fano < F_NOMINAL


def test_fano_pileup_bias_from_exact_pmf():
    pts = []
    for t in LOW_TARGETS:
        pmf = detection_pmf(CFG, mean_input_for_target(CFG, t))
        k = np.arange(pmf.size)
        m = float(k @ pmf)
        pts.append((m, float(k * k @ pmf) - m * m, 100_000))
    fano = fit_fano_slope(pts).fano
    assert 1.85 < fano < F_NOMINAL
    assert estimate_crosstalk(fano) == pytest.approx(0.302, abs=0.002)


@pytest.mark.parametrize("fano,p", [(1.0, 0.0), (F_NOMINAL, 0.314), (3.0, 0.5)])
def test_crosstalk_examples(fano, p):
    assert estimate_crosstalk(fano) == pytest.approx(p, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(p=st.floats(0.0, 0.9))
def test_crosstalk_round_trip(p):
    assert estimate_crosstalk((1 + p) / (1 - p)) == pytest.approx(p, abs=1e-12)


def test_under_dispersion_warns():
    with pytest.warns(UnderDispersionWarning):
        assert estimate_crosstalk(0.8) == 0.0
    with pytest.raises(ParameterError):
        estimate_crosstalk(float("nan"))


def test_correct_efficiency_examples():
    qe, pp = correct_efficiency(0.36, 0.314)
    assert pp == pytest.approx(0.4577, abs=5e-5)
    assert qe == pytest.approx(0.247, abs=5e-4)
    assert correct_efficiency(0.04, 0.314)[0] == pytest.approx(0.02744, abs=5e-5)
    assert correct_efficiency(0.3, 0.0) == (0.3, 0.0)


def test_correct_efficiency_rejects_bad_input():
    with pytest.raises(ParameterError):
        correct_efficiency(0.3, 1.0)
    with pytest.raises(ParameterError):
        correct_efficiency(-0.1, 0.2)


def test_noise_floor_examples():
    assert noise_floor(0.023, 0.04) == (0.023, pytest.approx(0.575, abs=1e-12))
    assert noise_floor(0.0, 0.3) == (0.0, 0.0)
    with pytest.raises(ParameterError):
        noise_floor(0.023, 0.0)


def test_noise_floor_from_dark_run(dark_hist):
    noise, _ = noise_floor(dark_hist, 0.04)
    assert noise == pytest.approx(0.023, abs=0.0005)


def _report(qe_eta=0.04, noise=0.023, fano=F_NOMINAL):
    return CalibrationReport.from_estimates(fano, 0.0, qe_eta, noise)


def test_calibrate_headline():
    rep = replace(_report(), qe_total=0.027, noise_mean=0.0)
    assert calibrate(rep, 20.0).photons == pytest.approx(740.7, abs=0.1)


def test_calibrate_noise_floor_is_zero():
    rep = _report()
    est = calibrate(rep, rep.noise_mean)
    assert est.photons == 0.0 and est.below_noise
    assert calibrate(rep, 0.0).photons == 0.0


def test_calibrate_linear_in_noise_subtracted_mean():
    rep = _report()
    slope = 1 / (rep.qe_total * (1 + rep.crosstalk_p_prime))
    for n in (2.0, 7.0, 15.0):
        got = calibrate(rep, n, correct_crosstalk=True).photons
        assert got == pytest.approx((n - rep.noise_mean) * slope, rel=1e-12)
        assert calibrate(rep, n).photons == pytest.approx((n - rep.noise_mean) / rep.qe_total, rel=1e-12)


def test_calibrate_saturation_warning_and_errors():
    rep = _report()
    with pytest.warns(SaturationWarning):
        assert calibrate(rep, 60.0).saturated
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert not calibrate(rep, 20.0).saturated
    with pytest.raises(ParameterError):
        calibrate(rep, -1.0)


def test_calibrate_round_trip_at_300(default_sweep, dark_hist):
    rep = analyze_sweep(default_sweep, dark_hist)
    h = build_count_histogram(simulate_run(CFG, 300.0, 100_000, master_seed=41))
    assert calibrate(rep, h.mean_det, correct_crosstalk=True).photons == pytest.approx(300.0, rel=0.05)


def test_analyze_defaults(default_sweep, dark_hist):
    rep = analyze_sweep(default_sweep, dark_hist)
    assert rep.crosstalk_p == pytest.approx(0.314, abs=0.02)
    assert rep.qe_total == pytest.approx(0.027, abs=0.002)
    assert rep.noise_mean == dark_hist.mean_det
    assert rep.min_sensitivity_photons == pytest.approx(0.58, abs=0.03)
    # the direct path counts primaries, i.e. the efficiency before cross-talk
    assert rep.qe_total_direct == pytest.approx(CFG.eta_chain_optical * CFG.qe_sipm, rel=0.02)


def test_efficiency_needs_plateau_points():
    h = build_count_histogram([50] * 10, mean_input=2000.0)
    with pytest.raises(InputError):
        estimate_total_efficiency([h])


@settings(max_examples=100, deadline=None)
@given(
    fano=st.floats(1.0, 5.0),
    eta=st.floats(0.001, 0.9),
    noise=st.floats(0.0, 1.0),
)
def test_report_identities(fano, eta, noise):
    rep = CalibrationReport.from_estimates(fano, 0.01, eta, noise)
    p = rep.crosstalk_p
    assert (1 + p) / (1 - p) == pytest.approx(fano, rel=1e-12)
    assert rep.crosstalk_p_prime == pytest.approx(p / (1 - p), rel=1e-12, abs=1e-15)
    assert rep.qe_total * (1 + rep.crosstalk_p_prime) == pytest.approx(eta, rel=1e-12)
    assert rep.min_sensitivity_photons == pytest.approx(noise / eta, rel=1e-12, abs=1e-15)
    assert CalibrationReport.from_dict(rep.to_dict()) == rep


def test_report_dict_keys_and_missing():
    d = _report().to_dict()
    for key in ("fano", "p", "p_prime", "eta_total", "qe_total", "noise_mean", "min_sensitivity"):
        assert key in d
    del d["qe_total"]
    with pytest.raises(InputError):
        CalibrationReport.from_dict(d)


def _bias_runs(biases, shots=50_000, seed=500):
    model = BiasModel()
    return [(b, sweep(apply_bias(CFG, model, b), LOW_TARGETS[::2], shots, seed)) for b in biases]


def test_bias_sweep_monotonic_and_ordered():
    runs = _bias_runs([1.7, 0.9, 1.3])
    out = sweep_bias_analysis(runs)
    assert [b.excess_bias_V for b in out] == [0.9, 1.3, 1.7]
    ps = [b.p for b in out]
    assert ps == sorted(ps) and len(set(ps)) == 3


def test_bias_sweep_duplicate_points_agree():
    runs = _bias_runs([1.3])
    out = sweep_bias_analysis(runs + runs)
    assert out[0].fano == out[1].fano
    assert out[0].p == pytest.approx(0.314, abs=0.02)
    with pytest.raises(InputError):
        sweep_bias_analysis(runs)


@pytest.mark.slow
@pytest.mark.parametrize("p", [0.0, 0.1, 0.2, 0.314, 0.45])
def test_estimator_consistency(p):
    cfg = replace(CFG, crosstalk_p=p, n_pixels=10_000)
    fit = fit_fano_slope(sweep(cfg, LOW_TARGETS, 50_000, 900))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnderDispersionWarning)
        est = estimate_crosstalk(fit.fano)
    se = 2 * fit.stderr / (fit.fano + 1) ** 2
    assert abs(est - p) < max(3 * se, 0.005)


def test_saturation_pulls_slope_down():
    targets = np.linspace(2, 45, 8)
    small = fit_fano_slope(sweep(CFG, targets, 30_000, 600), max_mean=50)
    large = fit_fano_slope(sweep(replace(CFG, n_pixels=100_000), targets, 30_000, 600), max_mean=50)
    assert small.fano < large.fano
    assert large.fano == pytest.approx(F_NOMINAL, abs=0.05)
