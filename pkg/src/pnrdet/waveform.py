"""Pulse heights, stylised traces and photon-number discrimination."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy import signal

from .errors import EstimationError, InputError, ParameterError
from .stochastic import RandomStream

if TYPE_CHECKING:
    from .detector import DetectorConfig

DEFAULT_BIN_WIDTH = 0.05
BASELINE_SAMPLES = 2


@dataclass(frozen=True)
class PulseShape:
    duration_ns: float = 50.0
    sample_period_ns: float = 2.0
    rise_fraction: float = 0.1

    def __post_init__(self):
        if not (self.sample_period_ns > 0 and math.isfinite(self.sample_period_ns)):
            raise ParameterError(f"sample_period_ns must be positive, got {self.sample_period_ns}")
        if not (math.isfinite(self.duration_ns) and self.duration_ns > self.sample_period_ns):
            raise ParameterError("duration_ns must exceed sample_period_ns")
        if not 0.0 < self.rise_fraction < 1.0:
            raise ParameterError(f"rise_fraction must lie in (0, 1), got {self.rise_fraction}")

    @property
    def n_samples(self) -> int:
        return math.ceil(self.duration_ns / self.sample_period_ns) + 1

    @property
    def rise_samples(self) -> int:
        return max(1, round(self.rise_fraction * self.duration_ns / self.sample_period_ns))

    def template(self) -> np.ndarray:
        """Unit-height shape: flat baseline, linear rise, exponential tail."""
        n = self.n_samples
        peak = min(BASELINE_SAMPLES + self.rise_samples, n - 1)
        out = np.zeros(n)
        rise = np.arange(BASELINE_SAMPLES, peak + 1)
        out[rise] = (rise - BASELINE_SAMPLES) / (peak - BASELINE_SAMPLES)
        tail = np.arange(peak + 1, n)
        if len(tail):
            tau = max(len(tail), 1) / 5.0
            out[tail] = np.exp(-(tail - peak) / tau)
        return out

    @property
    def peak_index(self) -> int:
        return min(BASELINE_SAMPLES + self.rise_samples, self.n_samples - 1)


@dataclass(frozen=True)
class Trace:
    t_ns: np.ndarray
    amplitude: np.ndarray
    baseline_samples: int = BASELINE_SAMPLES

    def __len__(self) -> int:
        return len(self.amplitude)


def synthesize_heights(
    stream: RandomStream, n_detected, config: DetectorConfig, baseline_sigma: float | None = None
) -> np.ndarray:
    """Vectorised pulse heights: ``N*gain`` plus Gaussian spread ``sqrt(N)*sigma``.

    Empty shots get baseline noise only (``sigma_single/2`` unless overridden).
    """
    n = np.asarray(n_detected)
    if np.any(n < 0):
        raise ParameterError("n_detected must be non-negative")
    base = 0.5 * config.sigma_single if baseline_sigma is None else baseline_sigma
    z = stream.rng.standard_normal(n.shape)
    spread = np.where(n > 0, np.sqrt(n) * config.sigma_single, base)
    return n * config.gain_single + z * spread


def synthesize_height(
    n_detected: int, config: DetectorConfig, stream: RandomStream, baseline_sigma: float | None = None
) -> float:
    if n_detected > config.n_pixels:
        raise ParameterError(f"n_detected {n_detected} exceeds the {config.n_pixels} pixels")
    return float(synthesize_heights(stream, n_detected, config, baseline_sigma))


def synthesize_trace(
    n_detected: int,
    shape: PulseShape,
    config: DetectorConfig,
    stream: RandomStream,
    baseline_sigma: float | None = None,
    sample_noise: float = 0.0,
    offset: float = 0.0,
) -> Trace:
    """Single-pulse waveform whose peak sample equals one height draw.

    ``sample_noise`` adds independent Gaussian noise to every sample and
    ``offset`` shifts the whole trace; both default to a clean trace.
    """
    if not isinstance(shape, PulseShape):
        raise ParameterError("shape must be a PulseShape")
    height = synthesize_height(n_detected, config, stream, baseline_sigma)
    amp = height * shape.template()
    if sample_noise > 0:
        amp = amp + stream.rng.normal(0.0, sample_noise, size=amp.shape)
    t = np.arange(shape.n_samples) * shape.sample_period_ns
    return Trace(t, amp + offset)


def extract_height(trace, baseline_samples: int | None = None) -> float:
    """Peak amplitude above the mean of the pre-pulse samples."""
    if isinstance(trace, Trace):
        amp = trace.amplitude
        nb = trace.baseline_samples if baseline_samples is None else baseline_samples
    else:
        amp = np.asarray(trace, dtype=float)
        if amp.ndim == 2:
            amp = amp[:, 1]
        nb = BASELINE_SAMPLES if baseline_samples is None else baseline_samples
    if amp.size == 0:
        raise InputError("empty trace")
    nb = max(1, min(nb, amp.size))
    return float(amp.max() - amp[:nb].mean())


def discriminate_count(height, gain_estimate: float):
    """Nearest integer number of avalanches, never negative."""
    if not (gain_estimate > 0 and math.isfinite(gain_estimate)):
        raise ParameterError(f"gain_estimate must be positive, got {gain_estimate}")
    n = np.maximum(np.floor(np.asarray(height, dtype=float) / gain_estimate + 0.5), 0).astype(np.int64)
    return int(n) if n.ndim == 0 else n


@dataclass(frozen=True)
class PulseHeightSpectrum:
    bin_edges: np.ndarray
    counts: np.ndarray
    total_shots: int

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=float)
        counts = np.asarray(self.counts, dtype=np.int64)
        if edges.ndim != 1 or len(edges) != len(counts) + 1:
            raise InputError("need exactly one more bin edge than counts")
        if np.any(np.diff(edges) <= 0):
            raise InputError("bin edges must be strictly increasing")
        if np.any(counts < 0) or int(counts.sum()) != self.total_shots:
            raise InputError("counts must be non-negative and sum to total_shots")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    def scaled(self, factor: float) -> PulseHeightSpectrum:
        return PulseHeightSpectrum(self.bin_edges * factor, self.counts, self.total_shots)

    def rows(self):
        """``(bin_low, bin_high, count)`` tuples for tabular export."""
        return zip(self.bin_edges[:-1].tolist(), self.bin_edges[1:].tolist(), self.counts.tolist())


def height_bin_index(heights, bin_width: float) -> np.ndarray:
    """Bin index on a grid whose centres are the integer multiples of ``bin_width``."""
    return np.floor(np.asarray(heights, dtype=float) / bin_width + 0.5).astype(np.int64)


def spectrum_from_bins(bin_counts: dict[int, int], bin_width: float) -> PulseHeightSpectrum:
    """Contiguous spectrum from sparse ``{bin index: count}`` tallies."""
    if not bin_counts:
        raise InputError("no pulse heights")
    lo, hi = min(bin_counts), max(bin_counts)
    counts = np.zeros(hi - lo + 1, dtype=np.int64)
    for k, c in bin_counts.items():
        counts[k - lo] += c
    edges = (np.arange(lo, hi + 2) - 0.5) * bin_width
    return PulseHeightSpectrum(edges, counts, int(counts.sum()))


def build_spectrum(heights, bin_width: float = DEFAULT_BIN_WIDTH) -> PulseHeightSpectrum:
    h = np.asarray(heights, dtype=float)
    if h.size == 0:
        raise InputError("no pulse heights")
    if not bin_width > 0:
        raise ParameterError("bin_width must be positive")
    idx = height_bin_index(h, bin_width)
    keys, counts = np.unique(idx, return_counts=True)
    return spectrum_from_bins(dict(zip(keys.tolist(), counts.tolist())), bin_width)


def smoothed_counts(spectrum: PulseHeightSpectrum, window: int = 3) -> np.ndarray:
    return np.convolve(spectrum.counts.astype(float), np.ones(window) / window, mode="same")


def find_peaks(
    spectrum: PulseHeightSpectrum, window: int = 3, min_count: float = 3.0, significance: float = 4.0
) -> np.ndarray:
    """Positions of the local maxima of the moving-average spectrum.

    A maximum must reach ``min_count`` and stand out from its surroundings by
    ``significance`` times the Poisson error of its own height; this rejects
    counting-noise wiggles.  Positions are refined by a three-point parabola.
    """
    s = smoothed_counts(spectrum, window)
    padded = np.concatenate(([0.0], s, [0.0]))
    idx, props = signal.find_peaks(padded, height=min_count, prominence=0)
    keep = props["prominences"] >= significance * np.sqrt(props["peak_heights"] / window)
    idx = idx[keep]
    centers = spectrum.centers
    width = np.diff(spectrum.bin_edges)
    out = []
    for i in idx:
        y0, y1, y2 = padded[i - 1], padded[i], padded[i + 1]
        denom = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
        out.append(centers[i - 1] + float(np.clip(shift, -0.5, 0.5)) * width[i - 1])
    return np.asarray(out)


def estimate_gain(spectrum: PulseHeightSpectrum, **peak_kwargs) -> float:
    """Single-avalanche amplitude as the median spacing of adjacent peaks."""
    peaks = find_peaks(spectrum, **peak_kwargs)
    if len(peaks) < 2:
        raise EstimationError(f"found {len(peaks)} peak(s); need at least 2 to estimate the gain")
    gain = float(np.median(np.diff(peaks)))
    if not gain > 0:
        raise EstimationError("non-positive peak spacing")
    return gain
