"""``pbpnet`` command line: train, eval, gradcheck, ablate.

Exit status: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Failures print one line ``error <CODE>: <context>`` to stderr.
"""

import argparse
import sys

from .config import parse_config
from .errors import ConfigError, PbpError
from .train import format_ablation, run_ablate, run_eval, run_gradcheck, run_train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _parser():
    parser = argparse.ArgumentParser(prog="pbpnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("train", "train a model"),
                            ("eval", "evaluate a checkpoint"),
                            ("gradcheck", "compare backprop with finite differences"),
                            ("ablate", "train and score the ablation grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration key (repeatable)")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint to load (default: config checkpoint)")
        if name == "gradcheck":
            p.add_argument("--tolerance", type=float, default=1e-2)
    return parser


def _print_epoch(record):
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                   for k, v in record.items()), flush=True)


def _print_row(row):
    print(f"variant planes={row.planes} tnet={int(row.tnet)} multiscale={int(row.multiscale)} "
          f"additional={int(row.additional)} miou={row.miou:.4f} seconds={row.seconds:.1f}", flush=True)


def _fail(code, message, status):
    print(f"error {code}: {message}", file=sys.stderr)
    return status


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.set)
    except OSError as exc:
        return _fail("CONFIG_IO", f"cannot read config {args.config}: {exc.strerror or exc}", EXIT_CONFIG)
    except ConfigError as exc:
        return _fail(exc.code, str(exc), EXIT_CONFIG)
    except ValueError as exc:
        return _fail("CONFIG_ERROR", str(exc), EXIT_CONFIG)
    try:
        if args.command == "train":
            result = run_train(cfg, log=_print_epoch)
            print(f"checkpoint={result.checkpoint} seconds={result.seconds:.1f}")
        elif args.command == "eval":
            report = run_eval(cfg, args.checkpoint)
            sys.stdout.write(report.text)
        elif args.command == "gradcheck":
            report = run_gradcheck(cfg, args.tolerance)
            sys.stdout.write(report.format())
            if not report.passed:
                return _fail("GRADCHECK_FAILED", f"groups above tolerance: {sorted(report.failures())}",
                             EXIT_NUMERIC)
        elif args.command == "ablate":
            rows = run_ablate(cfg, log=_print_row)
            sys.stdout.write(format_ablation(rows))
    except PbpError as exc:
        return _fail(exc.code, str(exc), exc.exit_code)
    except OSError as exc:
        return _fail("DATA_IO", f"{exc.filename or ''}: {exc.strerror or exc}", EXIT_DATA)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
