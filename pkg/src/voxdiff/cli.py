"""Command-line entry point: gen-data / train / infer / eval / gradcheck /
export. Exit codes: 0 ok, 1 usage, 2 data or format error, 3 numerical."""
import argparse
import sys

from . import pipeline
from .config import Config, load_config
from .errors import FormatError, UsageError
from .numerics import NonFiniteError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, "%s: error: %s\n" % (self.prog, message))


def _add_common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="override config seed")


def _add_sampler(p):
    p.add_argument("--steps", type=int, help="sampling step count")
    p.add_argument("--strategy", choices=["ddim", "ddpm"])
    p.add_argument("--td", type=int, help="time-pair offset")


def build_parser():
    p = _Parser(prog="voxdiff")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write procedural scene files")
    _add_common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)

    t = sub.add_parser("train", help="train on a generated scene set")
    _add_common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")

    i = sub.add_parser("infer", help="progressive inference on one scene")
    _add_common(i)
    _add_sampler(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--out")

    e = sub.add_parser("eval", help="metrics over a held-out scene set")
    _add_common(e)
    _add_sampler(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")

    c = sub.add_parser("gradcheck", help="finite-difference gradient sweep")
    _add_common(c)

    x = sub.add_parser("export", help="convert a grid file for viewing")
    x.add_argument("grid")
    x.add_argument("--format", required=True)
    x.add_argument("--out", required=True)
    return p


def _config_from(args):
    cfg = Config()
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def run(args):
    if args.command == "gen-data":
        paths = pipeline.cmd_gen_data(_config_from(args), args.out, args.count)
        print("wrote %d scenes to %s" % (len(paths), args.out))
        return 0
    if args.command == "train":
        out = pipeline.cmd_train(_config_from(args), args.data, args.out,
                                 resume=args.resume)
        print("trained %d optimizer steps; final loss %.4f; checkpoint %s"
              % (len(out["losses"]), out["final_loss"], out["checkpoint"]))
        return 0
    if args.command == "infer":
        out = pipeline.cmd_infer(args.checkpoint, args.scene, args.out,
                                 steps=args.steps, strategy=args.strategy,
                                 td=args.td, seed=args.seed)
        print("encoder passes: %d (%.3fs), decoder passes: %d (%.3fs)"
              % (out["enc_calls"], out["enc_seconds"],
                 out["dec_calls"], out["dec_seconds"]))
        return 0
    if args.command == "eval":
        out = pipeline.cmd_eval(args.checkpoint, args.data, args.out,
                                steps=args.steps, strategy=args.strategy,
                                td=args.td, seed=args.seed)
        print(out["summary"])
        return 0
    if args.command == "gradcheck":
        out = pipeline.cmd_gradcheck(_config_from(args))
        print(out["report"])
        return 0 if out["ok"] else 3
    if args.command == "export":
        path = pipeline.cmd_export(args.grid, args.format, args.out)
        print("wrote %s" % path)
        return 0
    raise UsageError("unknown command %r" % args.command)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return run(args)
    except FormatError as e:
        print("data error: %s" % e, file=sys.stderr)
        return 2
    except NonFiniteError as e:
        print("numerical failure: %s" % e, file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print("data error: %s" % e, file=sys.stderr)
        return 2
    except ValueError as e:  # UsageError included
        print("usage error: %s" % e, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
