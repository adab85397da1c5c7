"""Monte-Carlo model of the up-conversion + multi-pixel APD detection chain.

One shot goes through: coherent input -> optical losses -> up-conversion
noise photons -> per-photon detection on a uniformly random pixel (pixels
saturate at one avalanche) -> geometric cross-talk cascades into unfired
pixels -> pulse height.

Shots are simulated in fixed-size blocks.  Block ``b`` of a run always draws
from ``RandomStream(master_seed, b)``, so a run is reproducible whatever the
number of worker threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np
from scipy import optimize, stats

from .errors import BiasRangeError, ParameterError
from .stochastic import CascadeParams, RandomStream, sample_poisson, sample_secondaries, thin_binomial
from .waveform import synthesize_heights

SHOTS_PER_STREAM = 4096
# Above this pixel count occupancy is computed by sorting hit indices
# instead of a dense multinomial draw per shot.
_DENSE_PIXEL_LIMIT = 4096

RECORD_COLUMNS = ("shot_id", "n_input", "n_after_optics", "n_primary", "n_detected", "pulse_height")


def _is_prob(x: float) -> bool:
    return math.isfinite(x) and 0.0 <= x <= 1.0


@dataclass(frozen=True)
class DetectorConfig:
    """Parameters of the full chain.

    ``eta_chain_optical`` lumps fibre-to-waveguide coupling (about 23%),
    conversion and the 85% interference filter into one transmission.  The
    SiPM fill factor is folded into ``qe_sipm``.  ``dark_mean_per_shot`` is
    the detected noise mean, cross-talk included.
    """

    n_pixels: int = 100
    qe_sipm: float = 0.24
    eta_chain_optical: float = 0.11
    crosstalk_p: float = 0.314
    dark_mean_per_shot: float = 0.023
    dark_sipm_fraction: float = 0.02
    excess_bias_V: float = 1.3
    gain_single: float = 1.0
    sigma_single: float = 0.07

    def __post_init__(self):
        if int(self.n_pixels) != self.n_pixels or self.n_pixels < 1:
            raise ParameterError(f"n_pixels must be a positive integer, got {self.n_pixels}")
        for name in ("qe_sipm", "eta_chain_optical", "dark_sipm_fraction"):
            if not _is_prob(getattr(self, name)):
                raise ParameterError(f"{name} must be a probability, got {getattr(self, name)}")
        CascadeParams(self.crosstalk_p)
        if not (math.isfinite(self.dark_mean_per_shot) and self.dark_mean_per_shot >= 0):
            raise ParameterError(f"dark_mean_per_shot must be non-negative, got {self.dark_mean_per_shot}")
        if not (self.gain_single > 0 and math.isfinite(self.gain_single)):
            raise ParameterError(f"gain_single must be positive, got {self.gain_single}")
        if not (self.sigma_single >= 0 and math.isfinite(self.sigma_single)):
            raise ParameterError(f"sigma_single must be non-negative, got {self.sigma_single}")
        if not math.isfinite(self.excess_bias_V):
            raise ParameterError("excess_bias_V must be finite")

    @property
    def cascade(self) -> CascadeParams:
        return CascadeParams(self.crosstalk_p)

    @property
    def p_prime(self) -> float:
        return self.cascade.p_prime

    @property
    def qe_total(self) -> float:
        """Probability that an input photon produces a primary avalanche."""
        return self.eta_chain_optical * self.qe_sipm

    @property
    def total_efficiency(self) -> float:
        """Detected pixels per input photon in the linear regime."""
        return self.qe_total * (1.0 + self.p_prime)

    @property
    def uc_noise_photon_mean(self) -> float:
        """Spurious up-converted photons per shot arriving at the SiPM."""
        if self.qe_sipm == 0:
            return 0.0
        uc_detected = self.dark_mean_per_shot * (1.0 - self.dark_sipm_fraction)
        return uc_detected / (self.qe_sipm * (1.0 + self.p_prime))

    @property
    def sipm_dark_primary_mean(self) -> float:
        return self.dark_mean_per_shot * self.dark_sipm_fraction / (1.0 + self.p_prime)

    def primary_hit_mean(self, mean_input: float) -> float:
        """Mean number of avalanche-triggering hits (before pixel saturation)."""
        photons = mean_input * self.eta_chain_optical + self.uc_noise_photon_mean
        return photons * self.qe_sipm + self.sipm_dark_primary_mean


@dataclass(frozen=True)
class BiasModel:
    """Linear excess-bias dependence around a reference operating point.

    Slopes are absolute changes per 0.1 V: total efficiency as a fraction,
    amplitude relative to the reference single-avalanche gain.  The
    cross-talk table is interpolated linearly and bounds the usable range.
    """

    eta_slope_per_0p1V: float = 0.0031
    amp_slope_per_0p1V: float = 0.0039
    reference_bias_V: float = 1.3
    crosstalk_table: tuple[tuple[float, float], ...] = (
        (0.9, 0.205),
        (1.1, 0.262),
        (1.3, 0.314),
        (1.5, 0.361),
        (1.7, 0.405),
    )

    def __post_init__(self):
        table = tuple((float(v), float(p)) for v, p in self.crosstalk_table)
        object.__setattr__(self, "crosstalk_table", table)
        volts = [v for v, _ in table]
        if any(b <= a for a, b in zip(volts, volts[1:])):
            raise ParameterError("crosstalk_table biases must be strictly increasing")
        for _, p in table:
            CascadeParams(p)

    def crosstalk_at(self, excess_bias_V: float) -> float | None:
        if not self.crosstalk_table:
            return None
        volts, ps = zip(*self.crosstalk_table)
        if not volts[0] <= excess_bias_V <= volts[-1]:
            raise BiasRangeError(
                f"excess bias {excess_bias_V} V outside cross-talk table range [{volts[0]}, {volts[-1]}] V"
            )
        return float(np.interp(excess_bias_V, volts, ps))


def apply_bias(config: DetectorConfig, bias_model: BiasModel, excess_bias_V: float) -> DetectorConfig:
    """Return ``config`` moved to another excess bias.

    Cross-talk comes from the table; the SiPM efficiency is rescaled so that
    the total efficiency (cross-talk included) follows the linear trend.
    """
    if not math.isfinite(excess_bias_V):
        raise BiasRangeError("excess bias must be finite")
    dv = (excess_bias_V - bias_model.reference_bias_V) / 0.1
    p = bias_model.crosstalk_at(excess_bias_V)
    if p is None:
        p = config.crosstalk_p
    if dv == 0 and p == config.crosstalk_p:
        return replace(config, excess_bias_V=float(excess_bias_V))

    eta_tot = config.total_efficiency + bias_model.eta_slope_per_0p1V * dv
    denom = config.eta_chain_optical * (1.0 + p / (1.0 - p))
    qe = eta_tot / denom if denom > 0 else config.qe_sipm
    gain = config.gain_single * (1.0 + bias_model.amp_slope_per_0p1V * dv)
    if not (0.0 <= qe <= 1.0) or gain <= 0:
        raise BiasRangeError(f"excess bias {excess_bias_V} V drives the linear model out of its valid range")
    return replace(config, qe_sipm=qe, gain_single=gain, crosstalk_p=p, excess_bias_V=float(excess_bias_V))


@dataclass(frozen=True)
class ShotRecord:
    shot_id: int
    n_input: int
    n_after_optics: int
    n_primary: int
    n_detected: int
    pulse_height: float


@dataclass
class ShotTable:
    """Column store of shot records; iterates and indexes as ShotRecord."""

    shot_id: np.ndarray
    n_input: np.ndarray
    n_after_optics: np.ndarray
    n_primary: np.ndarray
    n_detected: np.ndarray
    pulse_height: np.ndarray
    mean_input: float = field(default=float("nan"))

    def __len__(self) -> int:
        return len(self.shot_id)

    def __getitem__(self, i: int) -> ShotRecord:
        return ShotRecord(
            int(self.shot_id[i]),
            int(self.n_input[i]),
            int(self.n_after_optics[i]),
            int(self.n_primary[i]),
            int(self.n_detected[i]),
            float(self.pulse_height[i]),
        )

    def __iter__(self) -> Iterator[ShotRecord]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ShotTable):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in RECORD_COLUMNS)

    @classmethod
    def concat(cls, blocks: list[ShotTable]) -> ShotTable:
        cols = {c: np.concatenate([getattr(b, c) for b in blocks]) for c in RECORD_COLUMNS}
        return cls(**cols, mean_input=blocks[0].mean_input if blocks else float("nan"))


def expected_fired_pixels(n_pixels: int, photons_at_array: int) -> float:
    """Expected number of distinct pixels hit by ``photons_at_array`` uniform hits."""
    if n_pixels < 1 or photons_at_array < 0:
        raise ParameterError("n_pixels must be >= 1 and photons_at_array >= 0")
    return n_pixels * -math.expm1(photons_at_array * math.log1p(-1.0 / n_pixels)) if n_pixels > 1 else float(
        photons_at_array > 0
    )


def _occupied_pixels(rng: np.random.Generator, hits: np.ndarray, n_pixels: int) -> np.ndarray:
    if n_pixels == 1:
        return (hits > 0).astype(np.int64)
    if n_pixels <= _DENSE_PIXEL_LIMIT:
        counts = rng.multinomial(hits, np.full(n_pixels, 1.0 / n_pixels))
        return np.count_nonzero(counts, axis=-1).astype(np.int64)
    total = int(hits.sum())
    shot = np.repeat(np.arange(len(hits), dtype=np.int64), hits)
    keys = shot * n_pixels + rng.integers(0, n_pixels, size=total, dtype=np.int64)
    keys.sort()
    first = np.ones(total, dtype=bool)
    first[1:] = keys[1:] != keys[:-1]
    return np.bincount(keys[first] // n_pixels, minlength=len(hits)).astype(np.int64)


def simulate_block(
    config: DetectorConfig, mean_input: float, n_shots: int, stream: RandomStream, first_shot_id: int = 0
) -> ShotTable:
    """Simulate ``n_shots`` shots from a single stream."""
    if not (math.isfinite(mean_input) and mean_input >= 0):
        raise ParameterError(f"mean_input must be finite and non-negative, got {mean_input}")
    rng = stream.rng
    n_input = sample_poisson(stream, mean_input, size=n_shots)
    transmitted = thin_binomial(stream, n_input, config.eta_chain_optical)
    noise_photons = sample_poisson(stream, config.uc_noise_photon_mean, size=n_shots)
    at_array = transmitted + noise_photons
    hits = thin_binomial(stream, at_array, config.qe_sipm)
    hits = hits + sample_poisson(stream, config.sipm_dark_primary_mean, size=n_shots)

    n_primary = _occupied_pixels(rng, hits, config.n_pixels)
    secondaries = sample_secondaries(stream, n_primary, config.cascade)
    n_detected = np.minimum(n_primary + secondaries, config.n_pixels)
    heights = synthesize_heights(stream, n_detected, config)
    return ShotTable(
        shot_id=np.arange(first_shot_id, first_shot_id + n_shots, dtype=np.int64),
        n_input=n_input.astype(np.int64),
        n_after_optics=at_array.astype(np.int64),
        n_primary=n_primary,
        n_detected=n_detected.astype(np.int64),
        pulse_height=heights,
        mean_input=float(mean_input),
    )


def simulate_shot(
    config: DetectorConfig, mean_input: float, stream: RandomStream, shot_id: int | None = None
) -> ShotRecord:
    table = simulate_block(config, mean_input, 1, stream, first_shot_id=0)
    rec = table[0]
    return replace(rec, shot_id=stream.stream_index if shot_id is None else shot_id)


def iter_run_blocks(
    config: DetectorConfig, mean_input: float, n_shots: int, master_seed: int, workers: int = 1
) -> Iterator[ShotTable]:
    """Yield a run block by block, in shot order, for streaming consumers."""
    if int(n_shots) != n_shots or n_shots < 1:
        raise ParameterError(f"n_shots must be a positive integer, got {n_shots}")
    n_blocks = -(-n_shots // SHOTS_PER_STREAM)

    def block(b: int) -> ShotTable:
        start = b * SHOTS_PER_STREAM
        size = min(SHOTS_PER_STREAM, n_shots - start)
        return simulate_block(config, mean_input, size, RandomStream(master_seed, b), first_shot_id=start)

    if workers <= 1:
        for b in range(n_blocks):
            yield block(b)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # bounded look-ahead keeps memory flat for long runs
        window = 4 * workers
        pending = [pool.submit(block, b) for b in range(min(window, n_blocks))]
        nxt = len(pending)
        while pending:
            yield pending.pop(0).result()
            if nxt < n_blocks:
                pending.append(pool.submit(block, nxt))
                nxt += 1


def simulate_run(
    config: DetectorConfig, mean_input: float, n_shots: int, master_seed: int, workers: int = 1
) -> ShotTable:
    """``n_shots`` independent shots, reproducible from ``master_seed``."""
    return ShotTable.concat(list(iter_run_blocks(config, mean_input, n_shots, master_seed, workers)))


def detection_pmf(config: DetectorConfig, mean_input: float) -> np.ndarray:
    """Exact distribution of fired pixels per shot under the model.

    Hits are Poisson, so pixel occupancy is Binomial(N, 1 - exp(-lambda/N));
    each occupied pixel adds a negative-binomial number of secondaries and the
    total is capped at N.  Returns probabilities for 0..N.
    """
    n = config.n_pixels
    lam = config.primary_hit_mean(mean_input)
    q = -math.expm1(-lam / n)
    p = config.crosstalk_p
    occ = stats.binom.pmf(np.arange(n + 1), n, q)
    out = np.zeros(n + 1)
    out[0] += occ[0]
    s = np.arange(n + 1)
    for m in range(1, n + 1):
        if occ[m] < 1e-300:
            continue
        room = n - m
        sec = stats.nbinom.pmf(s[:room], m, 1.0 - p) if room else np.zeros(0)
        out[m : m + room] += occ[m] * sec
        out[n] += occ[m] * (1.0 - sec.sum())
    return out


def expected_detected(config: DetectorConfig, mean_input: float) -> float:
    """Model mean of fired pixels per shot, saturation included."""
    if config.n_pixels > 2000:
        # cascade truncation is negligible for arrays this large
        occupied = config.n_pixels * -math.expm1(-config.primary_hit_mean(mean_input) / config.n_pixels)
        return occupied / (1.0 - config.crosstalk_p)
    pmf = detection_pmf(config, mean_input)
    return float(np.dot(np.arange(len(pmf)), pmf))


def mean_input_for_target(config: DetectorConfig, target_detected: float) -> float:
    """Input photon mean whose expected detected count equals ``target_detected``."""
    floor = expected_detected(config, 0.0)
    if target_detected <= floor:
        return 0.0
    if target_detected >= config.n_pixels:
        raise ParameterError(f"target {target_detected} not reachable with {config.n_pixels} pixels")
    if config.qe_total == 0:
        raise ParameterError("zero efficiency: no input level reaches the target")
    hi = max(1.0, target_detected / config.total_efficiency)
    while expected_detected(config, hi) < target_detected:
        hi *= 2.0
        if hi > 1e12:
            raise ParameterError(f"target {target_detected} not reachable")
    return float(optimize.brentq(lambda x: expected_detected(config, x) - target_detected, 0.0, hi, xtol=1e-10))
