"""gsto command line: gen-data, build-graph, train, eval, gradcheck, mad.

Exit codes: 0 ok, 1 other contract failure, 2 missing input, 3 invalid
configuration, 4 training hit a non-finite value, 5 artifact mismatch.
Failures print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ABLATIONS, RunConfig, dump_config, load_config
from .errors import ConfigError, ContractViolation, MissingInputError, TrainingDiverged

EXIT_MISSING, EXIT_CONFIG, EXIT_NAN, EXIT_MISMATCH = 2, 3, 4, 5

COMMANDS = {
    "gen-data": (pipeline.gen_data, "generate a synthetic corpus, its planted world and pair labels"),
    "build-graph": (pipeline.build_graph_stage, "build the intention relation graph"),
    "train": (pipeline.train_stage, "train the sequence model; keeps the best VAL checkpoint"),
    "eval": (pipeline.eval_stage, "rank held-out labels and write a metrics report"),
    "gradcheck": (pipeline.gradcheck_stage, "finite-difference check of the full training loss"),
    "mad": (pipeline.mad_stage, "smoothness (MAD) of 1- vs 2-layer graph propagation"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsto", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat 'key = value' file")
        p.add_argument("--ablate", choices=[a for a in ABLATIONS if a], help="ablation variant")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    sub.add_parser("show-config", help="print the default configuration")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    dump = getattr(exc, "dump_path", None)
    if dump:
        err["dump"] = dump
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def _summary(result) -> str:
    def clean(v):
        if isinstance(v, dict):
            return {str(k): clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, (str, int, float, bool)) or v is None:
            return v
        return str(v)

    return json.dumps(clean(result), sort_keys=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "show-config":
        sys.stdout.write(dump_config(RunConfig()))
        return 0
    try:
        cfg = load_config(args.config, args.overrides, args.ablate)
        result = COMMANDS[args.command][0](cfg)
    except MissingInputError as exc:
        return _fail(EXIT_MISSING, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except TrainingDiverged as exc:
        return _fail(EXIT_NAN, exc)
    except pipeline.ArtifactMismatch as exc:
        return _fail(EXIT_MISMATCH, exc)
    except ContractViolation as exc:
        return _fail(1, exc)
    if args.command == "train":
        result = {"checkpoint": result["checkpoint"], **result["meta"]}
    print(_summary(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
