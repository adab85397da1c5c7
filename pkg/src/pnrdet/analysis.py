"""Count statistics, cross-talk estimation and detector calibration."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import stats

from .errors import InputError, ParameterError
from .stochastic import CascadeParams

DEFAULT_FIT_MAX_MEAN = 15.0
# detected mean up to which the Poisson statistics of the input survive
LINEAR_REGIME_BOUND = 20.0
PLATEAU_MAX_MEAN = 6.0


class UnderDispersionWarning(UserWarning):
    """A Fano factor below 1 was seen; saturated data probably entered the fit."""


class SaturationWarning(UserWarning):
    """A detected mean lies beyond the linear regime of the detector."""


@dataclass(frozen=True)
class CountHistogram:
    """Relative frequencies of fired-pixel counts over a set of shots.

    ``counts`` keeps the raw integer tallies; the optional ``mean_*`` fields
    carry per-run context (configured input mean, sample means of the input
    photon number and of primary avalanches) when the source records have it.
    """

    frequencies: dict[int, float]
    total_shots: int
    mean_det: float
    var_det: float
    counts: dict[int, int] = field(default_factory=dict)
    mean_input: float | None = None
    mean_n_input: float | None = None
    mean_primary: float | None = None

    @property
    def fano(self) -> float:
        return self.var_det / self.mean_det if self.mean_det > 0 else float("nan")

    @property
    def input_mean(self) -> float | None:
        """Best available mean input photon number."""
        return self.mean_n_input if self.mean_n_input is not None else self.mean_input

    def values_and_counts(self) -> tuple[np.ndarray, np.ndarray]:
        ks = np.array(sorted(self.counts), dtype=np.int64)
        return ks, np.array([self.counts[k] for k in ks], dtype=np.int64)


def _counts_from(records) -> tuple[np.ndarray, dict]:
    extra = {}
    if hasattr(records, "n_detected") and isinstance(getattr(records, "n_detected"), np.ndarray):
        n = records.n_detected
        if len(n):
            extra = {
                "mean_n_input": float(np.mean(records.n_input)),
                "mean_primary": float(np.mean(records.n_primary)),
            }
            mi = getattr(records, "mean_input", None)
            if mi is not None and math.isfinite(mi):
                extra["mean_input"] = float(mi)
        return np.asarray(n, dtype=np.int64), extra
    items = list(records)
    if items and hasattr(items[0], "n_detected"):
        extra = {
            "mean_n_input": float(np.mean([r.n_input for r in items])),
            "mean_primary": float(np.mean([r.n_primary for r in items])),
        }
        return np.array([r.n_detected for r in items], dtype=np.int64), extra
    return np.asarray(items, dtype=np.int64), extra


def build_count_histogram(records, **context) -> CountHistogram:
    """Histogram of detections from shot records or plain integer counts."""
    n, extra = _counts_from(records)
    if n.size == 0:
        raise InputError("cannot build a histogram from no shots")
    if np.any(n < 0):
        raise InputError("detection counts must be non-negative")
    extra.update(context)
    return histogram_from_counts(dict(zip(*np.unique(n, return_counts=True))), **extra)


def histogram_from_counts(counts: dict[int, int], **context) -> CountHistogram:
    counts = {int(k): int(v) for k, v in sorted(counts.items()) if v > 0}
    total = sum(counts.values())
    if total == 0:
        raise InputError("histogram has no shots")
    ks = np.array(list(counts), dtype=float)
    cs = np.array(list(counts.values()), dtype=float)
    mean = float(np.dot(ks, cs) / total)
    var = float(np.dot((ks - mean) ** 2, cs) / (total - 1)) if total > 1 else 0.0
    freqs = {k: c / total for k, c in counts.items()}
    return CountHistogram(freqs, total, mean, var, counts, **context)


class PoissonFit(NamedTuple):
    mean: float
    chi2_pvalue: float  # nan when the test has no degrees of freedom


def _merge_bins(observed: np.ndarray, expected: np.ndarray, min_expected: float = 5.0):
    obs, exp = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(observed, expected):
        o_acc += o
        e_acc += e
        if e_acc >= min_expected:
            obs.append(o_acc)
            exp.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0 or o_acc > 0:
        if exp:
            obs[-1] += o_acc
            exp[-1] += e_acc
        else:
            obs.append(o_acc)
            exp.append(e_acc)
    return np.array(obs), np.array(exp)


def fit_poisson(hist: CountHistogram, min_shots: int = 100) -> PoissonFit:
    """Maximum-likelihood Poisson mean with a chi-square goodness of fit."""
    if hist.total_shots < min_shots:
        raise InputError(f"need at least {min_shots} shots for a Poisson fit, got {hist.total_shots}")
    mean = hist.mean_det
    ks, cs = hist.values_and_counts()
    if len(ks) < 2 or mean <= 0:
        return PoissonFit(mean, float("nan"))
    kmax = int(ks.max())
    support = np.arange(kmax + 1)
    observed = np.zeros(kmax + 1)
    observed[ks] = cs
    expected = hist.total_shots * stats.poisson.pmf(support, mean)
    expected[-1] += hist.total_shots * stats.poisson.sf(kmax, mean)
    obs, exp = _merge_bins(observed, expected)
    dof = len(obs) - 2
    if dof < 1:
        return PoissonFit(mean, float("nan"))
    chi2 = float(np.sum((obs - exp) ** 2 / exp))
    return PoissonFit(mean, float(stats.chi2.sf(chi2, dof)))


class FanoFit(NamedTuple):
    fano: float
    stderr: float
    n_points: int


def _as_point(item) -> tuple[float, float, float]:
    if isinstance(item, CountHistogram):
        return item.mean_det, item.var_det, float(item.total_shots)
    if len(item) == 3:
        return float(item[0]), float(item[1]), float(item[2])
    return float(item[0]), float(item[1]), 1.0


def fit_fano_slope(points: Iterable, max_mean: float = DEFAULT_FIT_MAX_MEAN) -> FanoFit:
    """Through-origin weighted least-squares slope of variance against mean.

    ``points`` holds ``(mean, var)``, ``(mean, var, shots)`` or
    :class:`CountHistogram` items; only means in ``(0, max_mean]`` are used.
    Each point is weighted by ``shots / (v + 2 v**2)``, the inverse sampling
    variance of a Poisson-like variance estimate, which reduces to
    ``shots / mean`` at small means.
    """
    pts = [_as_point(p) for p in points]
    sel = [(x, y, n) for x, y, n in pts if 0 < x <= max_mean]
    if len(sel) < 3:
        raise InputError(
            f"Fano fit needs at least 3 points with 0 < mean <= {max_mean}, got {len(sel)}"
        )
    x, y, n = (np.array(c, dtype=float) for c in zip(*sel))
    v = np.maximum(y, x)
    w = n / (v + 2.0 * v * v)
    sxx = float(np.sum(w * x * x))
    slope = float(np.sum(w * x * y) / sxx)
    resid = y - slope * x
    s2 = float(np.sum(w * resid * resid)) / (len(x) - 1)
    return FanoFit(slope, math.sqrt(s2 / sxx), len(x))


def estimate_crosstalk(fano: float) -> float:
    """Invert ``F = (1 + p)/(1 - p)``; under-dispersion clamps to 0 and warns."""
    if not math.isfinite(fano):
        raise ParameterError(f"Fano factor must be finite, got {fano}")
    if fano < 1.0:
        warnings.warn(
            f"Fano factor {fano:.4f} < 1: saturated data in the fit; cross-talk set to 0",
            UnderDispersionWarning,
            stacklevel=2,
        )
        return 0.0
    return (fano - 1.0) / (fano + 1.0)


def crosstalk_stderr(fano: float, fano_stderr: float) -> float:
    return 2.0 * fano_stderr / (fano + 1.0) ** 2


def correct_efficiency(eta_measured: float, p: float) -> tuple[float, float]:
    """Quantum efficiency and ``p' = p/(1-p)`` from ``eta = QE (1 + p')``."""
    p_prime = CascadeParams(p).p_prime
    if not (math.isfinite(eta_measured) and 0.0 <= eta_measured <= 1.0 + p_prime):
        raise ParameterError(f"measured efficiency {eta_measured} outside [0, 1 + p']")
    return eta_measured / (1.0 + p_prime), p_prime


def noise_floor(dark, eta_total: float) -> tuple[float, float]:
    """Noise detections per shot and the input photon number they mimic."""
    if not (math.isfinite(eta_total) and eta_total > 0):
        raise ParameterError(f"eta_total must be positive, got {eta_total}")
    noise = dark.mean_det if isinstance(dark, CountHistogram) else float(dark)
    if noise < 0:
        raise ParameterError("noise mean must be non-negative")
    return noise, noise / eta_total


@dataclass(frozen=True)
class CalibrationReport:
    fano: float
    fano_stderr: float
    crosstalk_p: float
    crosstalk_p_stderr: float
    crosstalk_p_prime: float
    crosstalk_p_prime_stderr: float
    eta_total: float
    qe_total: float
    noise_mean: float
    min_sensitivity_photons: float
    fit_range_max_mean: float = DEFAULT_FIT_MAX_MEAN
    under_dispersed: bool = False
    n_fit_points: int = 0
    qe_total_direct: float | None = None

    @classmethod
    def from_estimates(
        cls,
        fano: float,
        fano_stderr: float,
        eta_total: float,
        noise_mean: float,
        fit_range_max_mean: float = DEFAULT_FIT_MAX_MEAN,
        n_fit_points: int = 0,
        qe_total_direct: float | None = None,
    ) -> CalibrationReport:
        """Derive p, p', QE and the sensitivity so the identities hold exactly."""
        under = fano < 1.0
        p = estimate_crosstalk(fano)
        p_se = 0.0 if under else crosstalk_stderr(fano, fano_stderr)
        qe, p_prime = correct_efficiency(eta_total, p)
        _, sensitivity = noise_floor(noise_mean, eta_total)
        return cls(
            fano=fano,
            fano_stderr=fano_stderr,
            crosstalk_p=p,
            crosstalk_p_stderr=p_se,
            crosstalk_p_prime=p_prime,
            crosstalk_p_prime_stderr=p_se / (1.0 - p) ** 2,
            eta_total=eta_total,
            qe_total=qe,
            noise_mean=noise_mean,
            min_sensitivity_photons=sensitivity,
            fit_range_max_mean=fit_range_max_mean,
            under_dispersed=under,
            n_fit_points=n_fit_points,
            qe_total_direct=qe_total_direct,
        )

    @property
    def linear_bound(self) -> float:
        return max(self.fit_range_max_mean, LINEAR_REGIME_BOUND)

    _KEYS = {
        "fano": "fano",
        "fano_stderr": "fano_stderr",
        "p": "crosstalk_p",
        "p_stderr": "crosstalk_p_stderr",
        "p_prime": "crosstalk_p_prime",
        "p_prime_stderr": "crosstalk_p_prime_stderr",
        "eta_total": "eta_total",
        "qe_total": "qe_total",
        "noise_mean": "noise_mean",
        "min_sensitivity": "min_sensitivity_photons",
        "fit_range_max_mean": "fit_range_max_mean",
        "under_dispersed": "under_dispersed",
        "n_fit_points": "n_fit_points",
        "qe_total_direct": "qe_total_direct",
    }

    def to_dict(self) -> dict:
        """Serialisable mapping with the stable public key names."""
        values = asdict(self)
        return {key: values[attr] for key, attr in self._KEYS.items()}

    @classmethod
    def from_dict(cls, data: dict) -> CalibrationReport:
        missing = [k for k in ("fano", "p", "p_prime", "eta_total", "qe_total", "noise_mean") if k not in data]
        if missing:
            raise InputError(f"calibration report lacks keys: {', '.join(missing)}")
        kwargs = {}
        for key, attr in cls._KEYS.items():
            if key in data and data[key] is not None:
                kwargs[attr] = data[key]
        kwargs.setdefault("fano_stderr", 0.0)
        kwargs.setdefault("crosstalk_p_stderr", 0.0)
        kwargs.setdefault("crosstalk_p_prime_stderr", 0.0)
        if "min_sensitivity_photons" not in kwargs:
            eta = float(kwargs["eta_total"])
            kwargs["min_sensitivity_photons"] = float(kwargs["noise_mean"]) / eta if eta > 0 else float("inf")
        for attr, value in list(kwargs.items()):
            if attr == "under_dispersed":
                kwargs[attr] = value if isinstance(value, bool) else str(value).lower() == "true"
            elif attr == "n_fit_points":
                kwargs[attr] = int(value)
            else:
                kwargs[attr] = float(value)
        return cls(**kwargs)


class PhotonEstimate(NamedTuple):
    photons: float
    saturated: bool
    below_noise: bool


def calibrate(report: CalibrationReport, n_detected_mean: float, correct_crosstalk: bool = False) -> PhotonEstimate:
    """Estimated input photons behind a mean detected count.

    The noise floor is subtracted and the remainder divided by the total
    quantum efficiency, the convention under which 20 detections correspond
    to about 740 photons.  With ``correct_crosstalk`` the cross-talk gain is
    divided out as well, i.e. the divisor becomes ``qe_total * (1 + p')``,
    which is the inverse of the simulated forward model.
    """
    if not (math.isfinite(n_detected_mean) and n_detected_mean >= 0):
        raise ParameterError(f"detected mean must be finite and non-negative, got {n_detected_mean}")
    if not report.qe_total > 0:
        raise ParameterError("report has no positive quantum efficiency")
    divisor = report.qe_total * ((1.0 + report.crosstalk_p_prime) if correct_crosstalk else 1.0)
    photons = max(0.0, (n_detected_mean - report.noise_mean) / divisor)
    saturated = n_detected_mean > report.linear_bound
    if saturated:
        warnings.warn(
            f"detected mean {n_detected_mean} exceeds the linear regime ({report.linear_bound}); "
            "the estimate is a lower bound",
            SaturationWarning,
            stacklevel=2,
        )
    return PhotonEstimate(photons, saturated, n_detected_mean <= report.noise_mean)


def estimate_total_efficiency(
    hists: Sequence[CountHistogram], noise_mean: float = 0.0, plateau_max: float = PLATEAU_MAX_MEAN
) -> float:
    """Noise-subtracted detections per input photon over the linear plateau."""
    sel = [h for h in hists if h.input_mean and 0 < h.mean_det <= plateau_max]
    if not sel:
        raise InputError(f"no sweep point with input mean and 0 < detected mean <= {plateau_max}")
    det = sum((h.mean_det - noise_mean) * h.total_shots for h in sel)
    inp = sum(h.input_mean * h.total_shots for h in sel)
    return det / inp


def efficiency_table(hists: Sequence[CountHistogram]) -> list[tuple[float, float, float]]:
    """``(mean_input, mean_det, eta)`` rows sorted by detected mean."""
    rows = [(h.input_mean, h.mean_det, h.mean_det / h.input_mean) for h in hists if h.input_mean]
    return sorted(rows, key=lambda r: r[1])


def variance_table(hists: Sequence[CountHistogram]) -> list[tuple[float, float, float, int]]:
    """``(mean_det, var_det, fano, shots)`` rows sorted by detected mean."""
    return sorted(((h.mean_det, h.var_det, h.fano, h.total_shots) for h in hists), key=lambda r: r[0])


def analyze_sweep(
    hists: Sequence[CountHistogram],
    dark: CountHistogram | None = None,
    max_mean: float = DEFAULT_FIT_MAX_MEAN,
    plateau_max: float = PLATEAU_MAX_MEAN,
) -> CalibrationReport:
    """Full calibration from an intensity sweep and an optional dark run."""
    signal = [h for h in hists if h is not dark]
    fit = fit_fano_slope(signal, max_mean=max_mean)
    noise_mean = dark.mean_det if dark is not None else 0.0
    eta = estimate_total_efficiency(signal, noise_mean, plateau_max)
    direct = None
    plateau = [h for h in signal if h.mean_primary is not None and h.input_mean and 0 < h.mean_det <= plateau_max]
    if plateau:
        dark_primary = dark.mean_primary if dark is not None and dark.mean_primary is not None else 0.0
        direct = sum((h.mean_primary - dark_primary) * h.total_shots for h in plateau) / sum(
            h.input_mean * h.total_shots for h in plateau
        )
    return CalibrationReport.from_estimates(
        fit.fano, fit.stderr, eta, noise_mean, max_mean, fit.n_points, qe_total_direct=direct
    )


class BiasPoint(NamedTuple):
    excess_bias_V: float
    fano: float
    fano_stderr: float
    p: float
    p_stderr: float


def sweep_bias_analysis(
    runs: Sequence[tuple[float, Sequence[CountHistogram]]], max_mean: float = DEFAULT_FIT_MAX_MEAN
) -> list[BiasPoint]:
    """Fano factor and cross-talk per excess bias, ordered by bias."""
    if len(runs) < 2:
        raise InputError(f"bias analysis needs at least 2 bias points, got {len(runs)}")
    out = []
    for bias, hists in sorted(runs, key=lambda r: r[0]):
        fit = fit_fano_slope(hists, max_mean=max_mean)
        p = estimate_crosstalk(fit.fano)
        out.append(BiasPoint(float(bias), fit.fano, fit.stderr, p, crosstalk_stderr(fit.fano, fit.stderr)))
    return out
