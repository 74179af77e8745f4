"""Command line entry point.

    sdhfl run --config <path> [--preset <name>] [--seed <u64>] [--out <dir>] [--jobs <n>]
    sdhfl presets

Exit codes: 0 success, 2 configuration error, 3 non-convergence or
divergence, 4 I/O error.  MNIST is read from $SDHFL_DATA.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, default_config, parse_config
from .csvio import OutputError
from .data import ConfigurationError, IdxError
from .game import GameError
from .presets import PRESETS, UnknownPreset, run_config, run_preset

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("sdhfl")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdhfl", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a config or a figure preset")
    run.add_argument("--config", help="experiment config file")
    run.add_argument("--preset", help="figure preset name (see `sdhfl presets`)")
    run.add_argument("--seed", type=int, help="master seed override")
    run.add_argument("--out", help="output directory override")
    run.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    run.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("presets", help="list figure presets")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "presets":
        for name, preset in PRESETS.items():
            print(f"{name:28s} {preset.figure}")
        return EXIT_OK

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.config:
            try:
                with open(args.config) as f:
                    cfg = parse_config(f.read())
            except OSError as e:
                print(f"error: cannot read config: {e}", file=sys.stderr)
                return EXIT_IO
        elif args.preset:
            cfg = None
        else:
            print("error: give --config, --preset or both", file=sys.stderr)
            return EXIT_CONFIG
        if args.seed is not None:
            cfg = (cfg or default_config()).with_value("run.master_seed", args.seed)
            if args.config is None:
                cfg.lines[("run", "master_seed")] = 0
        if args.preset:
            res, manifest = run_preset(args.preset, cfg, out=args.out, jobs=args.jobs)
        else:
            res, manifest = run_config(cfg, out=args.out, jobs=args.jobs)
    except UnknownPreset as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ConfigurationError, GameError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OutputError, IdxError, FileNotFoundError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO

    for note in manifest.notes:
        log.info(note)
    print(f"{manifest.status}: {len(manifest.artifacts)} artifacts, config {manifest.config_hash}")
    return EXIT_OK if res.status == "ok" else EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
