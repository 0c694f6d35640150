"""``effserve`` command line.

Exit status: 0 on success, 1 for usage or config problems (including missing
input artifacts), 2 when a run fails or leaves messages unprocessed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment as ex
from .errors import SimulationTimeout

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="effserve", description="Synthetic experiments comparing a single "
                "unified classifier pipeline with one pipeline per task.")
    p.add_argument("-c", "--config", help="JSON experiment config (defaults apply to missing keys)")
    p.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry, e.g. train.epochs=5 (value parsed as JSON)")
    p.add_argument("-q", "--quiet", action="store_true", help="print nothing on success")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("config", help="print the resolved config and its hash")
    sub.add_parser("synth", help="generate the synthetic domain and its manifest")
    t = sub.add_parser("train", help="train and checkpoint models")
    t.add_argument("mode", choices=ex.MODES)
    t.add_argument("--task", help="with mode 'task': train only this task's model")
    e = sub.add_parser("eval", help="write an evaluation report")
    e.add_argument("suite", choices=ex.SUITES)
    s = sub.add_parser("simulate", help="run the configured topology over the inference set")
    s.add_argument("--live", action="store_true", help="use threads and wall-clock time")
    sub.add_parser("compare", help="run both topologies on the shared samples and compare")
    return p


def _print(obj, quiet):
    if not quiet:
        print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code
    logging.basicConfig(level=logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ex.load_config(args.config, args.overrides)
        if args.command == "config":
            _print({"config": cfg, "config_sha256": ex.config_hash(cfg)}, False)
            return EXIT_OK
        if args.command == "synth":
            out = ex.cmd_synth(cfg)
        elif args.command == "train":
            if args.task is not None and args.mode != "task":
                raise ex.ConfigError("--task only applies to mode 'task'")
            out = {k: {"checkpoint": v["checkpoint"], "final_loss": v["epoch_loss"][-1] if v["epoch_loss"] else None}
                   for k, v in ex.cmd_train(cfg, args.mode, args.task).items()}
        elif args.command == "eval":
            out = ex.cmd_eval(cfg, args.suite)
        elif args.command == "simulate":
            out = ex.cmd_simulate(cfg, live=args.live or None)
        else:
            out = ex.cmd_compare(cfg)
    except ex.ConfigError as exc:
        print(f"effserve: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationTimeout as exc:
        print(f"effserve: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"effserve: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _print(out, args.quiet)
    if isinstance(out, dict) and out.get("ok") is False:
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
