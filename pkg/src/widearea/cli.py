"""Command-line entry point.

Every stage subcommand runs the pipeline up to and including that stage,
writing all artifacts on the way into --out. Exit codes: 0 success,
2 configuration error, 3 stage failure, 4 protocol error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from widearea.config import ConfigError, PipelineConfig
from widearea.pipeline import ReportError, StageError, cmd_pipeline, cmd_report, local_role
from widearea.protocol import ProtocolError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_PROTOCOL = 4

STAGE_COMMANDS = {
    "simulate": "simulate",
    "group": "group",
    "identify": "identify",
    "identify-dist": "identify",
    "rank": "rank",
    "design": "design",
    "closedloop": "closedloop",
    "pipeline": "closedloop",
}

DEFAULTS_HELP = "defaults:\n" + PipelineConfig(PipelineConfig.defaults()).to_json()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="pipeline config JSON (omitted keys take defaults)")
    p.add_argument("--out", metavar="DIR", help="run directory (default: config 'out')")
    p.add_argument("--seed", type=int, metavar="N", help="seed for probe magnitudes and measurement noise")
    p.add_argument("--delay-ms", type=float, metavar="N", help="WADC transport delay in ms")
    p.add_argument("--global-addr", metavar="HOST:PORT",
                   help="global processor address (env WIDEAREA_GLOBAL_ADDR; default 127.0.0.1:0)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="widearea", description="Consensus identification and wide-area damping control.",
                 formatter_class=argparse.RawDescriptionHelpFormatter, epilog=DEFAULTS_HELP)
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "simulate": "simulate the probe and baseline scenarios",
        "group": "... then coherency grouping",
        "identify": "... then consensus identification",
        "identify-dist": "identify with one OS process per area over sockets",
        "rank": "... then mode/residue table and loop ranking",
        "design": "... then strong/weak WADC design",
        "closedloop": "... then closed-loop cases and summary",
        "pipeline": "all stages (same as closedloop)",
    }
    for name, h in helps.items():
        p = sub.add_parser(name, help=h, formatter_class=argparse.RawDescriptionHelpFormatter,
                           epilog=DEFAULTS_HELP)
        _common(p)
        if name != "identify-dist":
            p.add_argument("--dist", action="store_true", help="run identification distributed")
    p = sub.add_parser("report", help="plot-data CSVs and manifest from a finished run")
    p.add_argument("--out", metavar="DIR", required=True, help="completed run directory")
    p.add_argument("--report-dir", metavar="DIR", help="destination (default: <run>/report)")
    p = sub.add_parser("local")   # area process spawned by identify-dist
    _common(p)
    p.add_argument("--area", type=int, required=True)
    p = sub.add_parser("print-config", help="print the default config JSON")
    return ap


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "delay_ms", None) is not None:
        over["delay_ms"] = args.delay_ms
    return cfg.override(**over) if over else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        build_parser().print_help()
        return EXIT_CONFIG
    try:
        if args.command == "print-config":
            print(PipelineConfig(PipelineConfig.defaults()).to_json())
            return EXIT_OK
        if args.command == "report":
            files = cmd_report(args.out, args.report_dir)
            for f in files:
                print(f)
            return EXIT_OK
        cfg = _config(args)
        if args.command == "local":
            out = local_role(cfg, Path(args.out or cfg["out"]), args.area, args.global_addr)
            if out.selection is not None:
                print(json.dumps({"area": args.area, "tie": out.selection.tie, "gen": out.selection.gen}))
            return EXIT_OK
        dist = args.command == "identify-dist" or getattr(args, "dist", False)
        run = cmd_pipeline(cfg, args.out, dist=dist, global_addr=args.global_addr,
                           until=STAGE_COMMANDS[args.command])
        if args.command in ("pipeline", "closedloop"):
            s = json.loads((run.out / "summary.json").read_text())
            sel = s["loops"]["selected"]
            print(f"mode {s['identification']['f']:.4f} Hz zeta {s['identification']['zeta']:.4f}; "
                  f"loop {sel['tie']}->{sel['gen']}; wrote {run.out}")
        else:
            print(f"wrote {run.out}")
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (StageError, ReportError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
