"""``pits`` command-line entry point.

Usage::

    pits <command> [--config FILE] [--key value ...]
    pits experiment {shift,classtoy} [--config FILE] [--key value ...]

Any RunConfig key can be given as a flag; flags override the config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

COMMANDS = ("pretrain", "finetune", "supervised", "eval", "toygen", "experiment",
            "gradcheck", "export-embeddings")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pits", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("experiment", nargs="?", choices=("shift", "classtoy"))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _set_threads(argv: list[str]) -> None:
    # BLAS pools are sized at numpy import time
    n = "1"
    for i, tok in enumerate(argv):
        if tok == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif tok.startswith("--threads="):
            n = tok.split("=", 1)[1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_threads(argv)
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from . import pipeline
    from .config import ConfigError, load_config
    from .data import DataError
    from .gradcheck import format_report
    from .model import ModelError

    try:
        cfg = load_config(args.config, rest)
        if args.command == "experiment":
            if args.experiment is None:
                raise ConfigError("experiment needs a name: shift or classtoy")
            result = pipeline.cmd_experiment(cfg, args.experiment)
        elif args.command == "gradcheck":
            results = pipeline.cmd_gradcheck(cfg)
            print(format_report(results))
            failed = [r for r in results if not r.passed]
            for r in failed:
                print(f"FAIL {r.task}/{r.kind}: {r.worst_param} rel. err {r.max_rel_err:.3e}",
                      file=sys.stderr)
            return 1 if failed else 0
        else:
            fn = getattr(pipeline, "cmd_" + args.command.replace("-", "_"))
            result = fn(cfg)
    except (ConfigError, DataError, ModelError, FileNotFoundError) as exc:
        print(f"pits {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
