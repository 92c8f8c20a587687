"""Command-line interface: ``mcsplit <command> [options]``.

Commands: ``run`` (all stages), ``upscale``, ``split``, ``stability``,
``solve``, ``reference``, ``errors`` and ``report``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import pipeline
from .config import FULL_FINE_N, PRESETS, load_config
from .exceptions import ConfigurationError, ContinuumError, SolverError
from .macrosystem import SCHEMES, n_steps

COMMANDS = ("run",) + pipeline.STAGES + ("report",)


def _tau(text: str):
    if text == "auto":
        return "auto"
    try:
        val = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}")
    if not val > 0:
        raise argparse.ArgumentTypeError("tau must be positive")
    return val


def _layers(text: str):
    if text == "auto":
        return "auto"
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got {text!r}")
    if val < 0:
        raise argparse.ArgumentTypeError("layers must be >= 0")
    return val


def _floats(text: str):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcsplit", description="Multicontinuum upscaling with partially explicit time stepping.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a preset (overridden by --config keys)")
    p.add_argument("--out", type=Path, default=Path("mcsplit-out"), help="artifact directory")
    p.add_argument("--threads", type=int, default=1, help="worker processes for the upscale stage")
    p.add_argument("--scheme", choices=SCHEMES, help="run only this scheme")
    p.add_argument("--tau", type=_tau, help="time step, or 'auto' (0.9 x the scheme's bound)")
    p.add_argument("--cache-dir", type=Path, help="cache for per-block bases and tensors")
    p.add_argument("--fine-n", type=int, help="fine cells per side")
    p.add_argument("--coarse-n", type=int, action="append", help="coarse blocks per side (repeatable)")
    p.add_argument("--layers", type=_layers, help="oversampling layers or 'auto'")
    p.add_argument("--contrast-sweep", type=_floats, help="comma-separated contrasts for the stability tables")
    p.add_argument("--full-scale", action="store_true", help=f"use the fine grid h=1/{FULL_FINE_N} (slow)")
    p.add_argument("--dry-run", action="store_true", help="validate the config and print the plan; touch nothing")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    o: dict = {}
    mesh = {}
    if args.full_scale:
        mesh["fine_n"] = FULL_FINE_N
    if args.fine_n is not None:
        mesh["fine_n"] = args.fine_n
    if args.coarse_n:
        mesh["coarse_n"] = list(args.coarse_n)
    if args.layers is not None:
        mesh["layers"] = args.layers
    if mesh:
        o["mesh"] = mesh
    if args.contrast_sweep is not None:
        o["contrast_sweep"] = args.contrast_sweep
    if args.scheme:
        o["schemes"] = [args.scheme]
    return o


def describe(cfg, tau=None) -> dict:
    """Resolved plan printed by ``--dry-run``."""
    step = cfg.tau if tau in (None, "auto") else tau
    return {
        "name": cfg.name,
        "fine_n": cfg.fine_n,
        "coarse_n": cfg.coarse_sizes,
        "layers": {f"H{c}": cfg.layers_for(c) for c in cfg.coarse_sizes},
        "field": cfg.field_spec().to_dict(),
        "continua": cfg.continua,
        "split": cfg.split,
        "schemes": cfg.schemes,
        "T": cfg.T,
        "tau": "auto" if tau == "auto" else step,
        "steps": None if tau == "auto" else n_steps(cfg.T, step),
        "contrast_sweep": cfg.contrast_sweep,
        "config_sha256": cfg.digest(),
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.config is None and args.preset is None:
        print("mcsplit: error: give --config or --preset", file=sys.stderr)
        return 2
    if args.full_scale:
        warnings.warn(f"full scale h=1/{FULL_FINE_N}: upscaling and reference solves take hours", RuntimeWarning)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore" if args.full_scale else "default")
            cfg = load_config(args.config, args.preset, _overrides(args))
    except (ConfigurationError, ContinuumError, OSError) as err:
        print(f"mcsplit: invalid config: {err}", file=sys.stderr)
        return 2

    if args.dry_run:
        print(json.dumps(describe(cfg, args.tau), indent=2, sort_keys=True))
        return 0

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    cache = args.cache_dir
    try:
        if args.command == "run":
            failures = pipeline.run_all(cfg, out, cache, args.threads, tau=args.tau)
            for f in failures:
                print(f"mcsplit: H{f['coarse_n']} {f['stage']} failed: {f['error']}", file=sys.stderr)
            return 1 if failures else 0
        if args.command == "report":
            pipeline.stage_report(cfg, out)
            return 0
        for cn in cfg.coarse_sizes:
            if args.command == "upscale":
                pipeline.stage_upscale(cfg, cn, out, cache, args.threads)
            elif args.command == "split":
                pipeline.stage_split(cfg, cn, out)
            elif args.command == "stability":
                pipeline.stage_stability(cfg, cn, out, cache, args.threads)
            elif args.command == "solve":
                pipeline.stage_solve(cfg, cn, out, tau=args.tau)
            elif args.command == "reference":
                pipeline.stage_reference(cfg, cn, out)
            elif args.command == "errors":
                pipeline.stage_errors(cfg, cn, out)
    except pipeline.MissingArtifact as err:
        print(f"mcsplit: {err}", file=sys.stderr)
        return 3
    except (ConfigurationError, ContinuumError, SolverError) as err:
        print(f"mcsplit: {args.command} failed: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
