"""Command line entry point: ``mdgsr <subcommand> [--config PATH] [--seed N] [--out DIR] [--threads N]``.

Exit codes: 0 success, 2 configuration error, 3 missing or mismatched
artifact, 4 training divergence.
"""

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import load_config, parse_kappa, parse_kappa_list
from .exceptions import ConfigError, MissingArtifactError, TensorFileError, TrainingDivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("mdgsr")


def _global_flags(suppress):
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=default, help="INI config file")
    p.add_argument("--seed", type=int, metavar="N", default=default, help="override [run] seed")
    p.add_argument("--out", metavar="DIR", default=default, help="override [run] out")
    p.add_argument("--threads", type=int, metavar="N", default=default, help="BLAS threads")
    p.add_argument("--cycles", type=int, metavar="N", default=default,
                   help="repeat stages 2-3 N times (default 1)")
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="mdgsr", parents=[_global_flags(False)],
                                     description="Super-resolution with Gaussian error covariances.")
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _global_flags(True)
    sub.add_parser("generate", parents=[flags], help="write the dataset and split manifest")
    sub.add_parser("stage1", parents=[flags], help="train the CNN on the MSE loss")
    sub.add_parser("stage2a", parents=[flags], help="estimate the global error spectrum")
    p = sub.add_parser("stage2b", parents=[flags], help="estimate per-image error spectra")
    p.add_argument("--kappa", help="dispersion reduction factor, 'inf' or 'unreg'")
    p = sub.add_parser("stage3", parents=[flags], help="retrain on the Gaussian likelihood loss")
    p.add_argument("--mode", choices=("global", "image"))
    p.add_argument("--kappa", help="kappa of the stage2b spectra used in image mode")
    p = sub.add_parser("sweep-kappa", parents=[flags], help="stage2b + stage3 over a list of kappas")
    p.add_argument("--kappas", help="comma list or start:stop:step")
    p.add_argument("--workers", type=int, help="parallel processes (default 1)")
    p.add_argument("--epochs", type=int, help="stage 3 epochs per kappa (default: [stage3] epochs)")
    sub.add_parser("evaluate", parents=[flags], help="metrics, coverage and boxplot slices on the test set")
    p = sub.add_parser("sample", parents=[flags], help="draw an ensemble for one test image")
    p.add_argument("--model", default="stage3-global", choices=pipeline.MODELS[1:])
    p.add_argument("--image", type=int, default=0, help="test image index")
    p.add_argument("--n", type=int, help="ensemble size (default: [evaluate] n_samples)")
    return parser


def _resolve(args):
    cfg = load_config(args.config)
    for key in ("seed", "out", "threads", "cycles"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.set("run", key, value)
    if getattr(args, "kappas", None):
        parse_kappa_list(args.kappas)
        cfg.set("sweep", "kappas", args.kappas)
    if getattr(args, "workers", None):
        cfg.set("sweep", "workers", args.workers)
    if getattr(args, "epochs", None):
        cfg.set("sweep", "epochs", args.epochs)
    return cfg.validate()


def _dispatch(args, ws):
    cmd = args.command
    if cmd == "generate":
        return pipeline.cmd_generate(ws)
    if cmd == "stage1":
        return pipeline.cmd_stage1(ws)
    if cmd == "stage2a":
        return pipeline.cmd_stage2a(ws)
    if cmd == "stage2b":
        kappa = parse_kappa(args.kappa) if args.kappa is not None else None
        return pipeline.cmd_stage2b(ws, kappa)
    if cmd == "stage3":
        kappa = parse_kappa(args.kappa) if args.kappa is not None else None
        return pipeline.cmd_stage3(ws, args.mode, kappa)
    if cmd == "sweep-kappa":
        report, best, _ = pipeline.cmd_sweep_kappa(ws)
        print(f"optimal kappa: {best}")
        return report
    if cmd == "evaluate":
        return pipeline.cmd_evaluate(ws)[0]
    if cmd == "sample":
        return pipeline.cmd_sample(ws, args.model, args.image, args.n)
    raise ConfigError(f"unknown command {cmd!r}")


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        ws = pipeline.Workspace(cfg["run"]["out"], cfg)
        with threadpool_limits(limits=cfg["run"]["threads"]):
            result = _dispatch(args, ws)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (MissingArtifactError, TensorFileError) as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except TrainingDivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    print(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
