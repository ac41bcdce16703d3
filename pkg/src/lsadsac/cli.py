"""Command line entry point: ``lsadsac {train,eval,inspect,render,oracle}``.

Exit codes: 0 success, 1 failed check or evaluation, 2 usage or config error.
"""

import argparse
import os
import sys

from . import harness
from .config import load_config, with_overrides
from .errors import CheckpointParseError, ConfigurationError, InvalidInputError, LsadsacError, UsageError
from .oracles import SUITES

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p, checkpoint=False):
    p.add_argument("--config", help="INI file with [run], [sim] and [dsac] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--encoder", help="RG, AW, SA or LSA (train accepts a comma list)")
    p.add_argument("--obstacles", type=int)
    p.add_argument("--scenario", choices=["circle", "square"])
    p.add_argument("--out")
    if checkpoint:
        p.add_argument("--checkpoint", required=True)


def build_parser():
    parser = _Parser(prog="lsadsac", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("train", help="train and write a run directory"))
    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    _common(p, checkpoint=True)
    p = sub.add_parser("inspect", help="dump attention weights for one episode")
    _common(p, checkpoint=True)
    p.add_argument("--episode-seed", type=int, default=0)
    p = sub.add_parser("render", help="draw a trajectory CSV as SVG")
    p.add_argument("trajectory")
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=0.3)
    p = sub.add_parser("oracle", help="run an oracle suite")
    p.add_argument("suite", choices=sorted(SUITES))
    return parser


def _config(args, encoder=None):
    cfg = load_config(args.config)
    return with_overrides(cfg, args.seed, args.episodes, encoder or args.encoder, args.obstacles, args.scenario, args.out)


def cmd_train(args):
    variants = args.encoder.split(",") if args.encoder else [None]
    for variant in variants:
        cfg = _config(args, variant)
        if len(variants) > 1:
            cfg = with_overrides(cfg, out=os.path.join(cfg.run.out, cfg.run.encoder))
        harness.train(cfg)
        print(f"run written to {cfg.run.out}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    summary = harness.eval_checkpoint(args.checkpoint, cfg, args.episodes or cfg.run.eval_episodes, out)
    print("\n".join(summary.lines()))
    return EXIT_OK


def cmd_inspect(args):
    cfg = _config(args)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    rows, record = harness.inspect_episode(args.checkpoint, cfg, args.episode_seed, out)
    print(f"{len(rows)} attention rows, outcome {record.outcome}, written to {out}")
    return EXIT_OK


def cmd_render(args):
    labels = harness.render_file(args.trajectory, args.out, args.radius)
    print(f"rendered {len(labels)} agents to {args.out}")
    return EXIT_OK


def cmd_oracle(args):
    checks = SUITES[args.suite]()
    for check in checks:
        print(check.line())
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAIL


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect, "render": cmd_render, "oracle": cmd_oracle}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, UsageError, InvalidInputError, CheckpointParseError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except LsadsacError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
