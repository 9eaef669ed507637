"""Command-line entry point ``calderon-lab``.

Each subcommand runs one experiment stage (``all`` runs every stage) from an
optional YAML config, writes its tables and ``manifest.json`` to ``--out``,
and exits with status 0 exactly when every verdict is PASS.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .experiments import STAGES, ConfigError, run_experiment

log = logging.getLogger("calderon_lab")

EXIT_FAIL = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calderon-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(STAGES) + ["all"]:
        s = sub.add_parser(name, help=f"run the {name} experiment" if name != "all" else "run every experiment")
        s.add_argument("--config", type=Path, help="YAML file with sections grid, conductivity, ...")
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
        s.add_argument("--seed", type=int, default=0, help="seed for random directions and fields")
        s.add_argument("--threads", type=int, default=1, help="worker threads (stages and FFTs)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: {path} is not valid YAML: {exc}") from exc
    return data or {}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        manifest = run_experiment(cfg, args.out, stages=args.command, seed=args.seed,
                                  threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for name, st in manifest["stages"].items():
        if st["error"]:
            print(f"{name}: ERROR {st['error']}")
            continue
        for key, verdict in st["verdicts"].items():
            print(f"{name}.{key}: {verdict}")
    status = "PASS" if manifest["passed"] else "FAIL"
    print(f"overall: {status}  (manifest: {Path(args.out) / 'manifest.json'})")
    log.info(json.dumps(manifest["timings"]))
    return 0 if manifest["passed"] else EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
