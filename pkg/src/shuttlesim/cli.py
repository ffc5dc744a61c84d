"""Command line entry point: ``shuttlesim run|validate|report``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from shuttlesim.config import ConfigError, load_config, validate

EXIT_OK, EXIT_CONFIG, EXIT_FIT, EXIT_IO = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shuttlesim", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run an experiment and write its bundle")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    r.add_argument("--jobs", type=int, default=None)
    r.add_argument("--out", default=None, help="output root directory")

    v = sub.add_parser("validate", help="check a config without running")
    v.add_argument("--config", required=True, type=Path)

    rep = sub.add_parser("report", help="re-fit data.csv of an existing bundle")
    rep.add_argument("bundle", type=Path, nargs="?", default=None)
    rep.add_argument("--out", default=None, help="bundle directory (alias for the positional)")
    rep.add_argument("--jobs", type=int, default=1)
    return p


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)

    if args.verb == "validate":
        if not args.config.is_file():
            _err(f"{args.config}: no such file")
            return EXIT_IO
        problems = validate(args.config)
        for msg in problems:
            print(msg)
        return EXIT_CONFIG if problems else EXIT_OK

    # heavy imports only for the verbs that need them
    from shuttlesim import experiments

    if args.verb == "run":
        if args.jobs is not None and args.jobs < 1:
            _err("--jobs: must be >= 1")
            return EXIT_CONFIG
        overrides = {} if args.seed is None else {"seed": args.seed}
        try:
            cfg = load_config(args.config, overrides)
        except ConfigError as exc:
            for msg in exc.problems:
                _err(msg)
            return EXIT_CONFIG
        except OSError as exc:
            _err(str(exc))
            return EXIT_IO
        try:
            result = experiments.run(cfg, out=args.out, jobs=args.jobs)
        except OSError as exc:
            _err(f"cannot write output: {exc}")
            return EXIT_IO
        print(result.directory)
        for msg in result.fit_failures:
            _err(f"fit failed: {msg}")
        return result.exit_code

    bundle = args.bundle or (Path(args.out) if args.out else None)
    if bundle is None:
        _err("report: give the bundle directory")
        return EXIT_CONFIG
    try:
        result = experiments.report(bundle, jobs=args.jobs)
    except (OSError, KeyError, ValueError, yaml.YAMLError) as exc:
        _err(f"cannot read bundle {bundle}: {exc}")
        return EXIT_IO
    print(result.directory)
    for msg in result.fit_failures:
        _err(f"fit failed: {msg}")
    return result.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
