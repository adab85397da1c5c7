"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 I/O error,
4 statistical precondition not met.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import __version__
from .analysis import (
    SaturationWarning,
    analyze_sweep,
    build_count_histogram,
    calibrate,
    crosstalk_stderr,
    efficiency_table,
    estimate_crosstalk,
    estimate_total_efficiency,
    fit_fano_slope,
    noise_floor,
    variance_table,
)
from .config import ConfigError, ExperimentConfig, load_config, parse_value
from .dataio import (
    MANIFEST,
    histogram_to_dict,
    load_dataset,
    manifest_dict,
    read_report,
    simulate_point_to_csv,
    write_json,
    write_report,
    write_spectrum,
    write_table,
)
from .detector import DetectorConfig, apply_bias, mean_input_for_target, simulate_run
from .errors import EstimationError, InputError, ParameterError
from .stochastic import derive_seed
from .waveform import build_spectrum, estimate_gain

EXIT_OK, EXIT_INPUT, EXIT_IO, EXIT_STATS = 0, 2, 3, 4


class StatsPreconditionError(Exception):
    pass


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    if getattr(args, "seed", None) is not None:
        out["run.master_seed"] = args.seed
    if getattr(args, "shots", None) is not None:
        out["run.n_shots"] = args.shots
    if getattr(args, "out", None) is not None:
        out["run.output_dir"] = str(args.out)
    if getattr(args, "workers", None) is not None:
        out["run.workers"] = args.workers
    return out


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    return load_config(args.config, overrides=_overrides(args))


def sweep_inputs(cfg: ExperimentConfig, detector: DetectorConfig | None = None) -> list[tuple[float, float | None]]:
    """``(mean_input, target)`` pairs for the signal points of the sweep."""
    det = detector or cfg.detector
    if cfg.sweep_mean_input is not None:
        return [(m, None) for m in cfg.sweep_mean_input]
    if cfg.sweep_targets is not None:
        return [(mean_input_for_target(det, t), t) for t in cfg.sweep_targets]
    return []


def signal_seed(cfg: ExperimentConfig, index: int) -> int:
    return derive_seed(cfg.master_seed, 0, index)


def dark_seed(cfg: ExperimentConfig) -> int:
    return derive_seed(cfg.master_seed, 1)


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    if cfg.include_dark:
        jobs.append(("dark", 0.0, None, dark_seed(cfg), "dark"))
    for i, (mean_input, target) in enumerate(sweep_inputs(cfg)):
        jobs.append(("signal", mean_input, target, signal_seed(cfg, i), f"{i:03d}"))

    entries = []
    for kind, mean_input, target, seed, tag in jobs:
        records = f"records_{tag}.csv"
        result = simulate_point_to_csv(
            cfg.detector, mean_input, cfg.n_shots, seed, out / records, cfg.spectrum_bin_width, cfg.workers
        )
        write_json(out / f"hist_{tag}.json", histogram_to_dict(result.histogram, kind=kind, target_n_det=target))
        write_spectrum(out / f"spectrum_{tag}.csv", result.spectrum)
        entries.append(
            {
                "kind": kind,
                "mean_input": mean_input,
                "target_n_det": target,
                "seed": seed,
                "records": records,
                "histogram": f"hist_{tag}.json",
                "spectrum": f"spectrum_{tag}.csv",
            }
        )
        print(f"{kind:6s} mean_input={mean_input:.6g} <n_det>={result.histogram.mean_det:.4f} "
              f"var={result.histogram.var_det:.4f}", file=sys.stderr)
    extra = {"n_shots": cfg.n_shots, "config": cfg.raw}
    write_json(out / MANIFEST, manifest_dict(cfg.config_hash, cfg.master_seed, entries, extra))
    return EXIT_OK


def cmd_analyze(args) -> int:
    data_dir = Path(args.data_dir)
    points = load_dataset(data_dir)
    dark = [p.histogram for p in points if p.kind == "dark"]
    signal = [p.histogram for p in points if p.kind != "dark"]
    if not signal and dark:
        return _analyze_dark_only(args, data_dir, dark[0])
    if not signal:
        raise StatsPreconditionError("analysis needs at least one signal sweep point")
    max_mean = args.max_mean
    try:
        report = analyze_sweep(signal, dark[0] if dark else None, max_mean=max_mean, plateau_max=args.plateau_max)
    except InputError as exc:
        raise StatsPreconditionError(str(exc)) from exc
    if not dark:
        print("note: no dark run found; noise floor taken as 0", file=sys.stderr)
    out = Path(args.out) if args.out else data_dir
    out.mkdir(parents=True, exist_ok=True)
    write_table(
        out / "variance_vs_mean.csv",
        ["mean_det [pixels]", "var_det [pixels^2]", "fano [1]", "shots [1]"],
        variance_table(signal),
    )
    write_table(
        out / "efficiency_vs_mean.csv",
        ["mean_input [photons]", "mean_det [pixels]", "eta [1]"],
        efficiency_table(signal),
    )
    path = write_report(out / "calibration_report", report, args.format)
    print(json.dumps(report.to_dict(), indent=1))
    print(f"report written to {path}", file=sys.stderr)
    return EXIT_OK


def _configured_efficiency(data_dir: Path) -> float | None:
    try:
        raw = json.loads((data_dir / MANIFEST).read_text())["config"]
        values = {k.split(".", 1)[1]: v for k, v in raw.items() if k.startswith("detector.")}
        return DetectorConfig(**values).total_efficiency
    except (OSError, ValueError, KeyError, TypeError, AttributeError):
        return None


def _analyze_dark_only(args, data_dir: Path, dark) -> int:
    eta = args.eta if args.eta is not None else _configured_efficiency(data_dir)
    if eta is None:
        raise StatsPreconditionError("dark-only data needs --eta or a manifest with the detector config")
    noise, sensitivity = noise_floor(dark, eta)
    result = {"noise_mean": noise, "eta_total": eta, "min_sensitivity": sensitivity, "shots": dark.total_shots}
    out = Path(args.out) if args.out else data_dir
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        path = out / "noise_report.json"
        write_json(path, result)
    else:
        path = out / "noise_report.csv"
        write_table(path, ["key", "value"], result.items())
    print(json.dumps(result, indent=1))
    print(f"dark-only data: noise report written to {path}", file=sys.stderr)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    report = read_report(Path(args.report))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturationWarning)
        est = calibrate(report, args.detected_mean)
        corrected = calibrate(report, args.detected_mean, correct_crosstalk=True)
    result = {
        "detected_mean": args.detected_mean,
        "input_photons": est.photons,
        "input_photons_crosstalk_corrected": corrected.photons,
        "saturation_warning": est.saturated,
        "below_noise_floor": est.below_noise,
    }
    if args.format == "json":
        print(json.dumps(result, indent=1))
    else:
        for key, value in result.items():
            print(f"{key},{value}")
    if est.saturated:
        print(f"warning: {args.detected_mean} detections exceed the linear regime "
              f"({report.linear_bound}); estimate is a lower bound", file=sys.stderr)
    if est.below_noise:
        print("note: detected mean at or below the noise floor", file=sys.stderr)
    return EXIT_OK


def cmd_sweep_bias(args) -> int:
    cfg = _load(args)
    if cfg.bias_model is None:
        raise ConfigError("sweep-bias needs a bias model (bias.* keys)", args.config)
    if not cfg.bias_points:
        raise ConfigError("sweep-bias needs bias.points or a cross-talk table", args.config)
    rows = []
    for bias in cfg.bias_points:
        det = apply_bias(cfg.detector, cfg.bias_model, bias)
        hists, heights = [], None
        for i, (mean_input, target) in enumerate(sweep_inputs(cfg, det)):
            if target is not None and target > cfg.max_mean:
                continue
            run = simulate_run(det, mean_input, cfg.n_shots, signal_seed(cfg, i), cfg.workers)
            hists.append(build_count_histogram(run))
            if heights is None:
                heights = run.pulse_height
        noise = 0.0
        if cfg.include_dark:
            noise = build_count_histogram(simulate_run(det, 0.0, cfg.n_shots, dark_seed(cfg), cfg.workers)).mean_det
        try:
            fit = fit_fano_slope(hists, cfg.max_mean)
            eta = estimate_total_efficiency(hists, noise, cfg.plateau_max)
        except InputError as exc:
            raise StatsPreconditionError(f"bias {bias} V: {exc}") from exc
        try:
            gain = estimate_gain(build_spectrum(heights, cfg.spectrum_bin_width))
        except (EstimationError, InputError, TypeError):
            gain = det.gain_single
        p = estimate_crosstalk(fit.fano)
        rows.append((bias, eta, gain, fit.fano, fit.stderr, p, crosstalk_stderr(fit.fano, fit.stderr)))
        print(f"bias {bias:.3f} V: eta={eta:.5f} gain={gain:.4f} F={fit.fano:.4f} p={p:.4f}", file=sys.stderr)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_table(
        out / "bias_sweep.csv",
        ["excess_bias_V [V]", "eta [1]", "gain [a.u.]", "fano [1]", "fano_stderr [1]", "p [1]", "p_stderr [1]"],
        rows,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnrdet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", required=True, help="experiment config (TOML, dotted keys)")
        p.add_argument("--seed", type=int, help="override run.master_seed")
        p.add_argument("--shots", type=int, help="override run.n_shots")
        p.add_argument("--out", help="override run.output_dir")
        p.add_argument("--workers", type=int, help="parallel worker threads per run")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    p = sub.add_parser("simulate", help="run a simulation campaign")
    run_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="calibrate from a data directory")
    p.add_argument("data_dir")
    p.add_argument("--out", help="write tables and report here (default: data_dir)")
    p.add_argument("--format", choices=("csv", "json"), default="json", help="report format")
    p.add_argument("--max-mean", type=float, default=15.0, help="largest detected mean in the Fano fit")
    p.add_argument("--plateau-max", type=float, default=6.0, help="largest detected mean in the efficiency estimate")
    p.add_argument("--eta", type=float, help="total efficiency for dark-only data (default: from the manifest)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("calibrate", help="input photons for a detected mean")
    p.add_argument("report")
    p.add_argument("detected_mean", type=float)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sweep-bias", help="cross-talk and efficiency against excess bias")
    run_flags(p)
    p.set_defaults(func=cmd_sweep_bias)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ParameterError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StatsPreconditionError as exc:
        print(f"statistical precondition failed: {exc}", file=sys.stderr)
        return EXIT_STATS
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
