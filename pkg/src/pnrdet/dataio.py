"""On-disk formats: shot-record CSV, histogram JSON, spectrum CSV, manifest."""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import CalibrationReport, CountHistogram, build_count_histogram, histogram_from_counts
from .detector import RECORD_COLUMNS, SHOTS_PER_STREAM, DetectorConfig, iter_run_blocks
from .errors import InputError
from .waveform import PulseHeightSpectrum, height_bin_index, spectrum_from_bins

MANIFEST = "manifest.json"
RECORD_UNITS = {
    "shot_id": "index",
    "n_input": "photons",
    "n_after_optics": "photons",
    "n_primary": "pixels",
    "n_detected": "pixels",
    "pulse_height": "single-avalanche gain units",
}


@dataclass
class PointResult:
    histogram: CountHistogram
    spectrum: PulseHeightSpectrum


def simulate_point_to_csv(
    config: DetectorConfig,
    mean_input: float,
    n_shots: int,
    seed: int,
    records_path: Path,
    bin_width: float,
    workers: int = 1,
) -> PointResult:
    """Stream one sweep point to CSV, tallying histogram and spectrum on the way."""
    det_counts = np.zeros(config.n_pixels + 1, dtype=np.int64)
    bins: dict[int, int] = {}
    sum_input = sum_primary = 0
    with open(records_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for block in iter_run_blocks(config, mean_input, n_shots, seed, workers):
            writer.writerows(zip(*(getattr(block, c).tolist() for c in RECORD_COLUMNS)))
            det_counts += np.bincount(block.n_detected, minlength=config.n_pixels + 1)
            sum_input += int(block.n_input.sum())
            sum_primary += int(block.n_primary.sum())
            keys, counts = np.unique(height_bin_index(block.pulse_height, bin_width), return_counts=True)
            for k, c in zip(keys.tolist(), counts.tolist()):
                bins[k] = bins.get(k, 0) + c
    hist = histogram_from_counts(
        {k: int(c) for k, c in enumerate(det_counts) if c},
        mean_input=float(mean_input),
        mean_n_input=sum_input / n_shots,
        mean_primary=sum_primary / n_shots,
    )
    return PointResult(hist, spectrum_from_bins(bins, bin_width))


def histogram_to_dict(hist: CountHistogram, **meta) -> dict:
    out = dict(meta)
    out.update(
        total_shots=hist.total_shots,
        mean_det=hist.mean_det,
        var_det=hist.var_det,
        mean_input=hist.mean_input,
        mean_n_input=hist.mean_n_input,
        mean_primary=hist.mean_primary,
        frequencies={str(k): v for k, v in hist.frequencies.items()},
        counts={str(k): v for k, v in hist.counts.items()},
    )
    return out


def write_json(path: Path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def histogram_from_dict(data: dict) -> CountHistogram:
    try:
        if data.get("counts"):
            counts = {int(k): int(v) for k, v in data["counts"].items()}
        else:
            total = int(data["total_shots"])
            counts = {int(k): round(float(v) * total) for k, v in data["frequencies"].items()}
        context = {k: (None if data.get(k) is None else float(data[k])) for k in ("mean_input", "mean_n_input", "mean_primary")}
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise InputError(f"malformed histogram: {exc}") from exc
    return histogram_from_counts(counts, **context)


def write_table(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_spectrum(path: Path, spectrum: PulseHeightSpectrum) -> None:
    write_table(path, ["bin_low [a.u.]", "bin_high [a.u.]", "count [shots]"], spectrum.rows())


def _strip_unit(name: str) -> str:
    return re.sub(r"\s*\[.*\]\s*$", "", name.strip())


def read_records_histogram(path: Path) -> CountHistogram:
    """Histogram from a shot-record CSV (extra columns ignored)."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [_strip_unit(h) for h in next(reader)]
            col = {name: header.index(name) for name in ("n_input", "n_primary", "n_detected") if name in header}
            if "n_detected" not in col:
                raise InputError(f"{path}: no n_detected column")
            rows = [r for r in reader if r]
    except (OSError, StopIteration) as exc:
        raise InputError(f"{path}: unreadable records ({exc})") from exc
    try:
        det = np.array([int(r[col["n_detected"]]) for r in rows], dtype=np.int64)
        context = {}
        if "n_input" in col:
            context["mean_n_input"] = float(np.mean([int(r[col["n_input"]]) for r in rows]))
        if "n_primary" in col:
            context["mean_primary"] = float(np.mean([int(r[col["n_primary"]]) for r in rows]))
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: malformed record row ({exc})") from exc
    if det.size == 0:
        raise InputError(f"{path}: no records")
    return build_count_histogram(det, **context)


@dataclass
class DatasetPoint:
    kind: str
    histogram: CountHistogram
    source: str


def load_dataset(data_dir: Path) -> list[DatasetPoint]:
    """Sweep points from a simulate output directory or conforming external data."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise InputError(f"{data_dir}: not a directory")
    manifest = data_dir / MANIFEST
    points = []
    if manifest.exists():
        try:
            meta = json.loads(manifest.read_text())
            entries = meta["points"]
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{manifest}: malformed manifest ({exc})") from exc
        for entry in entries:
            hist_path = data_dir / entry["histogram"]
            if hist_path.exists():
                hist = histogram_from_dict(_read_json(hist_path))
            else:
                hist = read_records_histogram(data_dir / entry["records"])
            points.append(DatasetPoint(entry.get("kind", "signal"), hist, str(hist_path.name)))
        return points
    hist_files = sorted(data_dir.glob("hist_*.json"))
    if hist_files:
        for path in hist_files:
            data = _read_json(path)
            points.append(DatasetPoint(data.get("kind", _kind_from_name(path)), histogram_from_dict(data), path.name))
        return points
    for path in sorted(data_dir.glob("*.csv")):
        hist = read_records_histogram(path)
        kind = "dark" if "dark" in path.stem or hist.mean_n_input == 0 else "signal"
        points.append(DatasetPoint(kind, hist, path.name))
    if not points:
        raise InputError(f"{data_dir}: no manifest, histogram or record files found")
    return points


def _kind_from_name(path: Path) -> str:
    return "dark" if "dark" in path.stem else "signal"


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: unreadable JSON ({exc})") from exc


def manifest_dict(config_hash: str, master_seed: int, points: list[dict], extra: dict | None = None) -> dict:
    data = {
        "tool": "pnrdet",
        "version": __version__,
        "config_hash": config_hash,
        "master_seed": master_seed,
        "shots_per_stream": SHOTS_PER_STREAM,
        "record_units": RECORD_UNITS,
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "points": points,
    }
    data.update(extra or {})
    return data


def write_report(path: Path, report: CalibrationReport, fmt: str = "json") -> Path:
    data = report.to_dict()
    if fmt == "json":
        path = path.with_suffix(".json")
        write_json(path, data)
    else:
        path = path.with_suffix(".csv")
        write_table(path, ["key", "value"], data.items())
    return path


def read_report(path: Path) -> CalibrationReport:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"{path}: cannot read report ({exc.strerror or exc})") from exc
    if path.suffix == ".csv":
        rows = list(csv.reader(text.splitlines()))
        data = {r[0]: (None if r[1] in ("", "None") else r[1]) for r in rows[1:] if len(r) >= 2}
    else:
        try:
            data = json.loads(text)
        except ValueError as exc:
            raise InputError(f"{path}: malformed report ({exc})") from exc
    try:
        return CalibrationReport.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed report ({exc})") from exc
