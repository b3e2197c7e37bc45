"""Command-line entry point: ``diffblend <subcommand> <config.toml> [flags]``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .. import __version__
from .config import ConfigError, apply_cli, build, default_out_dir, load_config, OUT_DIR_ENV
from .runner import RUNNERS

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

HELP = {
    "pareto": "sweep preference weights w over methods; writes pareto.csv, pareto.svg, run.json",
    "kla": "sweep the KL-strength factor lambda; writes kla.csv, kla.svg, run.json",
    "jensen": "Jensen-gap bound report on an (x, t) grid; writes jensen.csv, run.json",
    "sample": "raw terminal samples of one method; writes samples.csv, run.json",
    "fit": "denoising score matching fit; writes model.json, run.json",
    "validate": "invariant checks on the configured models; writes validate.json, run.json",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffblend", description="Drift-blending experiments on analytic diffusion models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True
    for name, text in HELP.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("config", help="TOML experiment config")
        sp.add_argument("--seed", type=int, help="run a single seed instead of run.seeds")
        sp.add_argument("--out-dir", help=f"output directory (default: run.out_dir, ${OUT_DIR_ENV}/<cmd> or runs/<cmd>)")
        sp.add_argument("--steps", type=int, help="Euler-Maruyama steps (overrides run.steps)")
        sp.add_argument("--samples", type=int, help="samples per seed (overrides run.samples)")
        sp.add_argument("--no-plots", action="store_true", help="skip SVG output")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a dotted config key, e.g. --override alpha=2 (repeatable)")
        sp.add_argument("-q", "--quiet", action="store_true", help="suppress progress messages")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    say = (lambda s: None) if args.quiet else (lambda s: print(s, file=sys.stderr))
    try:
        cfg = load_config(args.config, args.override)
        cfg = apply_cli(cfg, args.seed, args.steps, args.samples)
        exp = build(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir(args.command, cfg)
    try:
        record = RUNNERS[args.command](exp, out_dir, plots=not args.no_plots, log=say)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, path in sorted(record.outputs.items()):
        say(f"wrote {path}")
    if args.command == "validate" and not record.settings.get("all_passed", False):
        print("validation failed; see validate.json", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
