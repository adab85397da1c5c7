"""Experiment configuration: flat dotted keys in a TOML file.

Example::

    detector.n_pixels = 100
    detector.crosstalk_p = 0.314
    sweep.target_n_det = [0.5, 2.0, 5.0, 10.4]
    run.n_shots = 100000
    run.master_seed = 20100415

Keys may also be grouped under ``[detector]``-style tables; either way
they are flattened to ``section.name`` before validation.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import tomli

from .analysis import DEFAULT_FIT_MAX_MEAN, PLATEAU_MAX_MEAN
from .detector import BiasModel, DetectorConfig
from .errors import ParameterError
from .waveform import DEFAULT_BIN_WIDTH, PulseShape


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = path or "<config>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


_SECTIONS = {
    "detector": {f.name for f in fields(DetectorConfig)},
    "bias": {f.name for f in fields(BiasModel)} | {"points"},
    "pulse": {f.name for f in fields(PulseShape)},
    "sweep": {"mean_input", "target_n_det", "target_logspace", "dark"},
    "run": {"n_shots", "master_seed", "output_dir", "workers", "spectrum_bin_width"},
    "analysis": {"max_mean", "plateau_max"},
}
# keys that change where or how fast data is produced, not the data itself
_NON_DATA_KEYS = {"run.output_dir", "run.workers"}


def _flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def parse_value(text: str):
    """Interpret an override value as a TOML literal, else as a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


@dataclass(frozen=True)
class ExperimentConfig:
    detector: DetectorConfig
    bias_model: BiasModel | None
    bias_points: tuple[float, ...]
    pulse_shape: PulseShape
    sweep_mean_input: tuple[float, ...] | None
    sweep_targets: tuple[float, ...] | None
    include_dark: bool
    n_shots: int
    master_seed: int
    output_dir: Path
    workers: int
    spectrum_bin_width: float
    max_mean: float
    plateau_max: float
    raw: dict

    @property
    def config_hash(self) -> str:
        data = {k: v for k, v in sorted(self.raw.items()) if k not in _NON_DATA_KEYS}
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


class _Locator:
    def __init__(self, text: str, path: str | None):
        self.lines = text.splitlines()
        self.path = path

    def line_of(self, key: str) -> int | None:
        section, _, name = key.rpartition(".")
        full = re.compile(rf"^\s*{re.escape(key)}\s*=")
        short = re.compile(rf"^\s*{re.escape(name)}\s*=")
        current = ""
        for i, line in enumerate(self.lines, 1):
            header = re.match(r"^\s*\[([^\]]+)\]", line)
            if header:
                current = header.group(1).strip()
                continue
            if full.match(line) or (current == section and short.match(line)):
                return i
        return None

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(f"{key}: {message}", self.path, self.line_of(key))


def load_config(path: str | Path | None = None, text: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read, override and validate an experiment configuration."""
    src = str(path) if path is not None else None
    if text is None:
        if path is None:
            raise ConfigError("no configuration given")
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror or exc}", src) from exc
    try:
        raw = _flatten(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(str(exc), src, int(m.group(1)) if m else None) from exc
    raw.update(overrides or {})
    loc = _Locator(text, src)

    for key in raw:
        section, _, name = key.partition(".")
        if section not in _SECTIONS or name not in _SECTIONS[section]:
            raise loc.error(key, "unknown key")

    def section(name: str) -> dict:
        return {k.split(".", 1)[1]: v for k, v in raw.items() if k.startswith(name + ".")}

    def build(cls, sec: str):
        values = section(sec)
        values.pop("points", None)
        try:
            if cls is BiasModel and "crosstalk_table" in values:
                values["crosstalk_table"] = tuple(tuple(pair) for pair in values["crosstalk_table"])
            return cls(**values)
        except (ParameterError, TypeError, ValueError) as exc:
            bad = next((f"{sec}.{k}" for k in values if k in str(exc)), f"{sec}.{next(iter(values), '')}")
            raise loc.error(bad, str(exc)) from exc

    detector = build(DetectorConfig, "detector")
    has_bias = any(k.startswith("bias.") for k in raw)
    bias_model = build(BiasModel, "bias") if has_bias else None
    pulse = build(PulseShape, "pulse")

    def number(key, default=None, kind=float, check=None, message=""):
        value = raw.get(key, default)
        if value is None:
            raise loc.error(key, "required key is missing")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise loc.error(key, f"expected a number, got {value!r}")
        if kind is int and (not float(value).is_integer()):
            raise loc.error(key, f"expected an integer, got {value!r}")
        value = kind(value)
        if check is not None and not check(value):
            raise loc.error(key, message)
        return value

    def number_list(key):
        value = raw.get(key)
        if value is None:
            return None
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) and v >= 0 for v in value
        ):
            raise loc.error(key, "expected a list of non-negative numbers")
        return tuple(float(v) for v in value)

    means = number_list("sweep.mean_input")
    targets = number_list("sweep.target_n_det")
    logspace = raw.get("sweep.target_logspace")
    if logspace is not None:
        if not (isinstance(logspace, list) and len(logspace) == 3 and 0 < logspace[0] < logspace[1] and logspace[2] >= 2):
            raise loc.error("sweep.target_logspace", "expected [start, stop, count] with 0 < start < stop, count >= 2")
        if targets is not None:
            raise loc.error("sweep.target_logspace", "give either target_n_det or target_logspace")
        targets = tuple(np.geomspace(float(logspace[0]), float(logspace[1]), int(logspace[2])).tolist())
    if means is not None and targets is not None:
        raise loc.error("sweep.target_n_det", "give either mean_input or target values, not both")
    include_dark = raw.get("sweep.dark", True)
    if not isinstance(include_dark, bool):
        raise loc.error("sweep.dark", "expected true or false")
    if not means and not targets and not include_dark:
        raise ConfigError("sweep is empty: set sweep.mean_input, sweep.target_n_det or sweep.target_logspace", src)

    points = raw.get("bias.points")
    if points is None:
        points = [v for v, _ in bias_model.crosstalk_table] if bias_model else []
    elif not (isinstance(points, list) and all(isinstance(v, (int, float)) for v in points)):
        raise loc.error("bias.points", "expected a list of excess bias voltages")

    n_shots = number("run.n_shots", kind=int, check=lambda v: v >= 1, message="must be >= 1")
    seed = number("run.master_seed", kind=int, check=lambda v: 0 <= v < 2**64, message="must be a 64-bit unsigned integer")
    workers = number("run.workers", 1, int, lambda v: v >= 1, "must be >= 1")
    bw = number("run.spectrum_bin_width", DEFAULT_BIN_WIDTH, float, lambda v: v > 0, "must be positive")
    max_mean = number("analysis.max_mean", DEFAULT_FIT_MAX_MEAN, float, lambda v: v > 0, "must be positive")
    plateau = number("analysis.plateau_max", PLATEAU_MAX_MEAN, float, lambda v: v > 0, "must be positive")
    out = raw.get("run.output_dir", "out")
    if not isinstance(out, str):
        raise loc.error("run.output_dir", "expected a path string")

    return ExperimentConfig(
        detector=detector,
        bias_model=bias_model,
        bias_points=tuple(float(v) for v in points),
        pulse_shape=pulse,
        sweep_mean_input=means,
        sweep_targets=targets,
        include_dark=include_dark,
        n_shots=n_shots,
        master_seed=seed,
        output_dir=Path(out),
        workers=workers,
        spectrum_bin_width=bw,
        max_mean=max_mean,
        plateau_max=plateau,
        raw=raw,
    )
