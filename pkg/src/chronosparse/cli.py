"""Command-line entry point: run, eval, synth, inspect.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import missing_rate
from .errors import ChronoSparseError, ConfigError, DataError
from .ingest import load_csv, to_csv_wide
from .runner import (
    _SOURCE_KEYS,
    ExperimentConfig,
    SyntheticSpec,
    _section,
    evaluate_checkpoint,
    make_synthetic,
    run_experiment,
    tomllib,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("chronosparse")


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    report = run_experiment(cfg, args.out_dir)
    if not args.quiet:
        print(report.table())
        print(f"report: {Path(args.out_dir) / (cfg.run_name + '.report.json')}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    report = evaluate_checkpoint(cfg, args.checkpoint, args.out_dir)
    if not args.quiet:
        print(report.table())
    return EXIT_OK


def _cmd_synth(args) -> int:
    try:
        raw = tomllib.loads(Path(args.spec).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {args.spec}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{args.spec}: not valid TOML ({exc})") from None
    if "data" in raw:
        raw = raw["data"]
    name = raw.pop("name", "synthetic")
    src = _section(raw, _SOURCE_KEYS, "data")
    spec = SyntheticSpec(
        length=src["length"],
        channels=src["channels"],
        period=float(src["period"]),
        slope=float(src["slope"]),
        noise=float(src["noise"]),
        missing_rate=float(src["missing_rate"]),
        seed=src["seed"] or 0,
        start=src["start"],
        amplitude=float(src["amplitude"]),
    )
    series = make_synthetic(spec, name)
    Path(args.out).write_text(to_csv_wide(series), encoding="utf-8")
    if not args.quiet:
        print(f"wrote {series.n_ticks} x {series.n_channels} to {args.out}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    path = Path(args.csv)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    s = load_csv(text, path.stem)
    print(f"T={s.n_ticks}")
    print(f"C={s.n_channels}")
    print(f"channels={','.join(s.channels)}")
    print(f"missing_rate={missing_rate(s):.6f}")
    print(f"ticks=[{int(s.timestamps[0])}, {int(s.timestamps[-1])}]")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chronosparse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress normal output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("config")
    p.add_argument("--out-dir", default=".", help="where the report and checkpoint go")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the config's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic series as wide CSV")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("inspect", help="print shape, missing rate and tick range of a CSV")
    p.add_argument("csv")
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ChronoSparseError, ArithmeticError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
