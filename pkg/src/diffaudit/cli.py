"""Command-line entry point: ``diffaudit <stage> --config run.json``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .classify import ClientError, FixtureMissingError
from .destinations import DestinationError
from .flows import AuditError
from .ingest import IngestError
from .ontology import OntologyError
from .pipeline import ConfigError, Pipeline, StoreError, load_config

EXIT_CLEAN, EXIT_ERROR, EXIT_FINDINGS = 0, 1, 2
COMMANDS = ("ingest", "classify", "audit", "linkability", "validate-classifier", "run-all")

_EXPECTED_ERRORS = (ConfigError, StoreError, IngestError, OntologyError, DestinationError, AuditError,
                    ClientError, FixtureMissingError, FileNotFoundError, KeyError, ValueError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffaudit",
        description="Differential privacy audit of network traces across user age groups.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, type=Path, help="run configuration (JSON)")
    parser.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    parser.add_argument("--replay", type=Path, help="serve classifier responses from this fixture directory")
    parser.add_argument("--record", type=Path, help="store every classifier exchange as a replay fixture here")
    parser.add_argument("--threshold", type=float, help="confidence threshold for keeping a label")
    parser.add_argument("--vote", choices=("max", "avg"), help="confidence aggregation for the majority vote")
    parser.add_argument("--sample", type=Path, help="labeled sample CSV for validate-classifier")
    parser.add_argument("--run-log", type=Path, help="append timing and cache statistics (JSON lines) here")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config, out=args.out, replay=args.replay, record=args.record,
                             threshold=args.threshold, vote=args.vote)
        pipe = Pipeline(config, run_log=args.run_log)
        cmd = args.command
        if cmd == "ingest":
            result = pipe.ingest()
        elif cmd == "classify":
            result = pipe.classify()
        elif cmd == "audit":
            result = pipe.audit()
        elif cmd == "linkability":
            result = pipe.linkability()
        elif cmd == "validate-classifier":
            table = pipe.validate_classifier(args.sample)
            sys.stdout.write(table.to_text())
            return EXIT_CLEAN
        else:
            result = pipe.run_all()
    except _EXPECTED_ERRORS as exc:
        print(f"diffaudit: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(result, sort_keys=True))
    if cmd == "audit" or cmd == "run-all":
        findings = result["findings"] if cmd == "audit" else result["audit"]["findings"]
        return EXIT_FINDINGS if findings else EXIT_CLEAN
    return EXIT_CLEAN


if __name__ == "__main__":
    sys.exit(main())
