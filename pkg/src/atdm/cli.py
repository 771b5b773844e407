"""Command line: ``atdm identify|simulate|sweep|synth``.

Exit codes: 0 success, 2 usage, 3 data or schema, 4 identification,
5 game non-convergence.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, config as config_mod, ctm, scenario, synthdata
from .errors import (CalibrationError, DataFormatError, DomainError, GameNotConverged,
                     IdentificationError)
from .identification import DEFAULT_QUANTILE, DEFAULT_THRESHOLD_KMH, identify_stretch, read_sensor_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IDENT, EXIT_GAME = 0, 2, 3, 4, 5
log = logging.getLogger("atdm")


class UsageError(Exception):
    pass


def _quantile(text: str) -> float:
    q = float(text)
    if not 0 < q < 1:
        raise argparse.ArgumentTypeError(f"quantile must lie in (0, 1), got {text}")
    return q


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _number(text: str):
    v = float(text)
    return int(v) if v.is_integer() and "." not in text and "e" not in text.lower() else v


def parse_axis(text: str) -> tuple[str, list]:
    """``name=start:stop:step`` (stop inclusive) or ``name=a,b,c``."""
    name, sep, values = text.partition("=")
    name = name.strip()
    if not sep or not name:
        raise UsageError(f"axis {text!r} is not of the form name=values")
    if name not in scenario.SWEEP_AXES:
        raise UsageError(f"unknown axis {name!r}; known: {', '.join(scenario.SWEEP_AXES)}")
    values = values.strip()
    if not values:
        raise UsageError(f"axis {name!r} has no values")
    if name == "incentive_schedule":
        out = [v.strip() for v in values.split(",") if v.strip()]
    elif ":" in values:
        parts = values.split(":")
        if len(parts) != 3:
            raise UsageError(f"range {values!r} must be start:stop:step")
        try:
            start, stop, step = (_number(p) for p in parts)
        except ValueError as exc:
            raise UsageError(f"bad range {values!r}") from exc
        if step <= 0 or stop < start:
            raise UsageError(f"range {values!r} needs step > 0 and stop >= start")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        out = [start + i * step for i in range(n)]
        if not all(isinstance(v, int) for v in (start, stop, step)):
            out = [round(float(v), 12) for v in out]
    else:
        try:
            out = [_number(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"bad value list {values!r}") from exc
    if not out:
        raise UsageError(f"axis {name!r} has no values")
    return name, out


def _write_manifest(out: Path, command: str, seed, outputs, digest: str | None = None,
                    extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config_sha256": digest,
        "seed": seed,
        "created_utc": _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
        **(extra or {}),
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def cmd_identify(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame = read_sensor_csv(args.data)
    result = identify_stretch(frame, step_s=args.step, threshold_kmh=args.speed_threshold,
                              quantile=args.quantile)
    params_path, report_path = out / "params.csv", out / "fit_report.json"
    ctm.write_params_csv(result.params, params_path)
    result.write_report(report_path)
    _write_manifest(out, "identify", None, [params_path, report_path],
                    extra={"data": str(args.data), "quantile": args.quantile,
                           "speed_threshold_kmh": args.speed_threshold})
    print(f"identified {result.params.n_cells} cells -> {params_path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    loaded = config_mod.load(args.config)
    cfg = loaded.scenario
    if args.seed is not None:
        cfg = scenario.replace(cfg, seed=args.seed)
    baseline = scenario.run_baseline(cfg)
    if args.baseline_only:
        paths = scenario.write_baseline(baseline, cfg.interval_times_h(), out)
        summary = {"sum_delta0_h": float(baseline.total.sum()),
                   "peak_delta0_h": float(baseline.total.max(initial=0.0))}
        spath = out / "summary.json"
        with open(spath, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(out, "simulate --baseline-only", cfg.seed, [*paths, spath],
                        loaded.digest)
        print(f"baseline written to {out}")
        return EXIT_OK
    trace = [] if args.decisions else None
    try:
        result = scenario.run_atdm(cfg, baseline, trace=trace)
    except GameNotConverged as exc:
        diag = out / "diagnostics.json"
        with open(diag, "w") as fh:
            json.dump({"error": str(exc), "interval_index": exc.interval,
                       "max_sweeps": cfg.game.max_sweeps, "eps": cfg.game.eps}, fh, indent=2)
            fh.write("\n")
        _write_manifest(out, "simulate", cfg.seed, [diag], loaded.digest)
        print(f"error: {exc}; diagnostics in {diag}", file=sys.stderr)
        return EXIT_GAME
    paths = scenario.write_result(result, out, trace)
    _write_manifest(out, "simulate", cfg.seed, paths, loaded.digest)
    print(f"pi = {result.pi:.4f} %  ({out})")
    return EXIT_OK


def cmd_sweep(args) -> int:
    axes = dict(parse_axis(a) for a in args.axis)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    loaded = config_mod.load(args.config)
    seeds = tuple(args.seeds) if args.seeds else (loaded.scenario.seed,)
    spec = scenario.SweepSpec(axes, seeds)
    table = scenario.sweep(spec, loaded.scenario, workers=args.workers)
    path = out / "sweep.csv"
    table.to_csv(path, index=False, float_format="%.17g")
    failed = table[table["status"] != "ok"]
    _write_manifest(out, "sweep", list(seeds), [path], loaded.digest,
                    extra={"axes": {k: list(v) for k, v in axes.items()},
                           "failed_points": failed.drop(columns=["pi"]).to_dict("records")})
    print(f"{len(table)} rows ({len(failed)} failed) -> {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = synthdata.default_truth(args.noise / 100.0)
    frame = synthdata.generate_day(truth, args.seed)
    sensors, demand, params = out / "sensors.csv", out / "demand.csv", out / "truth_params.csv"
    synthdata.write_sensor_csv(frame, sensors)
    synthdata.generate_demand(args.seed).write_csv(demand)
    ctm.write_params_csv(truth.params, params)
    _write_manifest(out, "synth", args.seed, [sensors, demand, params],
                    extra={"noise_pct": args.noise})
    print(f"wrote {sensors.name}, {demand.name}, {params.name} to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atdm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"atdm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("identify", help="fit the CTM stretch to sensor data")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--quantile", type=_quantile, default=DEFAULT_QUANTILE)
    s.add_argument("--speed-threshold", type=_positive, default=DEFAULT_THRESHOLD_KMH)
    s.add_argument("--step", type=_positive, default=10.0, help="CTM step in seconds")
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("simulate", help="run the baseline and the closed-loop day")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--baseline-only", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--decisions", action="store_true", help="also write per-agent decisions")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="performance index over a parameter grid")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", action="append", required=True, metavar="NAME=VALUES")
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("synth", help="generate a synthetic sensor day and demand profile")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0, help="noise level in percent")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "noise", 0.0) < 0:
        parser.error("--noise must be nonnegative")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IdentificationError as exc:
        print(f"identification failed: {exc}", file=sys.stderr)
        return EXIT_IDENT
    except GameNotConverged as exc:
        print(f"game did not converge: {exc}", file=sys.stderr)
        return EXIT_GAME
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DomainError, CalibrationError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
