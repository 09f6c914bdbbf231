"""Command-line entry point.

    refinedrive <command> [--config FILE] [--seed N] [--out DIR] [section.key=value ...]

Exit status: 0 success, 1 usage error, 2 runtime failure, 3 divergence abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file applied on top of the profile")
    common.add_argument("--seed", type=int, help="seed for collection, training and evaluation")
    common.add_argument("--out", default="runs/out", help="output directory (all artifacts go here)")
    common.add_argument("--profile", choices=("desk", "full"), default="desk", help="width preset (default: desk)")
    common.add_argument("overrides", nargs="*", metavar="section.key=value", help="dotted config overrides")

    p = _Parser(prog="refinedrive", description="Driving policy pipeline: collect, train, evaluate, ablate, plot.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("train-teacher", parents=[common], help="collect privileged frames and fit the privileged network")
    c = sub.add_parser("collect", parents=[common], help="record expert driving with teacher targets")
    c.add_argument("--teacher", required=True, help="teacher checkpoint")
    c.add_argument("--frames", type=int, help="number of frames (default: data.n_frames)")
    t = sub.add_parser("train", parents=[common], help="train the student on a collected dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--teacher", help="teacher checkpoint, checked against the dataset labels")
    e = sub.add_parser("eval", parents=[common], help="closed-loop evaluation on held-out routes")
    who = e.add_mutually_exclusive_group(required=True)
    who.add_argument("--checkpoint", help="student checkpoint")
    who.add_argument("--expert", action="store_true", help="evaluate the scripted expert instead")
    e.add_argument("--plots", action="store_true", help="also write per-step plots for the first route")
    a = sub.add_parser("ablate", parents=[common], help="train and evaluate the decoder ablation variants")
    a.add_argument("--data", required=True, help="dataset directory")
    a.add_argument("--variants", help="comma-separated subset of variants")
    a.add_argument("--repeats", type=int, default=3)
    pl = sub.add_parser("plot", parents=[common], help="render an episode log")
    pl.add_argument("--log", required=True, help="episode log file")
    pl.add_argument("--every", type=int, default=1)
    return p


def _manifest(args, cfg, out: Path) -> dict:
    manifest = {
        "command": args.command,
        "config_path": args.config,
        "config_hash": cfg.hash(),
        "seed": args.seed,
        "code_version": __version__,
        "out": str(out),
        "overrides": list(args.overrides),
        "config": cfg.to_dict(),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def _run(args, cfg, out: Path) -> None:
    from .evaluation import ExpertAgent, StudentAgent, ablation_suite, compute_metrics, emit_plots, evaluate_agent, EpisodeLog
    from .model import StudentModel
    from .teacher import TeacherParams, collect_privileged, train_teacher
    from .training import collect_dataset, train

    if args.command == "train-teacher":
        data = collect_privileged(cfg.data.teacher_frames, cfg.data.seed, cfg.sim)
        params = train_teacher(data, cfg, seed=cfg.train.seed)
        params.save(out / "teacher.rda")
        (out / "teacher_metrics.json").write_text(json.dumps(params.metrics, sort_keys=True, indent=1))
    elif args.command == "collect":
        teacher = TeacherParams.load(args.teacher)
        collect_dataset(out / "dataset", args.frames or cfg.data.n_frames, teacher, cfg)
    elif args.command == "train":
        teacher = TeacherParams.load(args.teacher) if args.teacher else None
        train(cfg, args.data, out, teacher)
    elif args.command == "eval":
        agent = ExpertAgent(cfg) if args.expert else StudentAgent(StudentModel.load(args.checkpoint))
        logs = []
        for rep in range(cfg.eval.repeats):
            logs += evaluate_agent(agent, cfg, rep, log_dir=out / "logs")
        summary = compute_metrics(logs).summary()
        (out / "metrics.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
        print(f"DS {summary['DS']:.3f}±{summary['DS_std']:.3f}  RC {summary['RC']:.3f}  IS {summary['IS']:.3f}")
        if args.plots and logs:
            emit_plots(logs[0], out / "plots")
    elif args.command == "ablate":
        variants = args.variants.split(",") if args.variants else None
        report = ablation_suite(cfg, args.data, out, variants, args.repeats)
        print((out / "ablation.txt").read_text())
        del report
    elif args.command == "plot":
        emit_plots(EpisodeLog.load(args.log), out / "plots", args.every)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config, args.overrides, args.profile)
        if args.seed is not None:
            cfg.train.seed = cfg.data.seed = args.seed
    except UsageError as exc:
        print(f"refinedrive: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (KeyError, ValueError, OSError) as exc:
        print(f"refinedrive: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    _manifest(args, cfg, out)
    from .training import DivergenceError

    try:
        _run(args, cfg, out)
    except DivergenceError as exc:
        print(f"refinedrive: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # one-line diagnostic for every runtime failure
        print(f"refinedrive: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
