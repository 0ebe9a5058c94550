"""``camnet`` command line.

stdout carries CSV only; diagnostics go to stderr.  Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .io import read_pnm, write_csv, write_flow, fmt
from .errors import CamnetError

log = logging.getLogger("camnet")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="camnet", description="Confidence-aware semantic matching on synthetic pairs.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_, *flags):
        p = sub.add_parser(name, help=help_)
        for flag in flags:
            spec = FLAGS[flag]
            p.add_argument(f"--{flag}", **spec)
        return p

    add("make-dataset", "write a synthetic pair corpus", "out", "count", "seed", "size")
    add("train", "run alternating adversarial training", "config", "data", "out", "seed", "size")
    add("eval", "PCK of a checkpoint on a pair corpus", "ckpt", "data", "alpha", "ref", "level")
    add("infer", "predict flows for one image pair", "ckpt", "src", "tgt", "out")
    add("gradcheck", "finite-difference check of every differentiable op", "seed")
    add("visualize", "confidence, warped and overlay images for one pair", "ckpt", "src", "tgt", "out")
    return parser


FLAGS = {
    "config": dict(type=Path, help="key = value training config"),
    "seed": dict(type=int, default=None),
    "out": dict(type=Path),
    "size": dict(type=int, default=None, help="image extent in pixels"),
    "count": dict(type=int, default=None),
    "ckpt": dict(type=Path),
    "data": dict(type=Path, help="corpus directory holding pairs.csv"),
    "alpha": dict(type=float, action="append", help="repeatable; default 0.05, 0.1, 0.15"),
    "ref": dict(choices=("image", "bbox"), default="image"),
    "level": dict(choices=("base", "refined"), action="append"),
    "src": dict(type=Path),
    "tgt": dict(type=Path),
}


# ---------------------------------------------------------------------------
# commands


def cmd_make_dataset(args, out):
    from .dataset import write_dataset
    from .synth import make_dataset

    _require(args, "out", "count")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    samples = make_dataset(args.count, seed=args.seed or 0, size=args.size or 64)
    index = write_dataset(samples, args.out)
    write_csv(out, ("pairs", "index"), [(len(samples), index)])


def cmd_train(args, out):
    from .trainer import TrainConfig, train

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.size is not None:
        overrides["image_size"] = args.size
    if args.out is not None:
        overrides["checkpoint_dir"] = str(args.out)
    if args.data is not None:
        overrides["train_data"] = str(args.data)
    text = args.config.read_text(encoding="utf-8") if args.config else ""
    config = TrainConfig.from_text(text, **overrides)
    result = train(config)
    write_csv(out, ("step", "pck_base", "pck_refined"),
              [(s, fmt(b), fmt(r)) for s, b, r in result.validation])


def cmd_eval(args, out):
    from .evaluation import evaluate_dataset, write_results

    _require(args, "ckpt", "data")
    alphas = tuple(args.alpha or (0.05, 0.1, 0.15))
    if any(not a > 0 for a in alphas):
        raise UsageError("--alpha must be positive")
    levels = tuple(args.level or ("base", "refined"))
    report = evaluate_dataset(str(args.ckpt), args.data, alphas, levels, args.ref)
    if report.skipped:
        log.warning("%d unreadable pairs skipped", report.skipped)
    for level, (good, bad) in report.confidence.items():
        log.info("%s: mean confidence %.4f on correct cells, %.4f on wrong cells", level, good, bad)
    write_results(out, report.results)


def _load_pair(args):
    source, target = read_pnm(args.src), read_pnm(args.tgt)
    if source.shape[0] != 3 or target.shape[0] != 3:
        raise CamnetError("--src and --tgt must be colour (P6) images")
    return source, target


def cmd_infer(args, out):
    from .engine.autodiff import Tensor, no_grad
    from .networks import forward_pass
    from .trainer import load_model

    _require(args, "ckpt", "src", "tgt", "out")
    model = load_model(str(args.ckpt))
    source, target = _load_pair(args)
    with no_grad():
        res = forward_pass(Tensor(source), Tensor(target), model)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for level in ("base", "refined"):
        path = args.out / f"flow_{level}.caflo"
        write_flow(path, getattr(res.st, f"flow_{level}").data)
        conf = getattr(res.st, f"conf_{level}").data
        rows.append((level, fmt(float(conf.mean())), path))
    write_csv(out, ("level", "mean_confidence", "flow"), rows)


def cmd_gradcheck(args, out):
    from .gradcheck import run_suite

    results = run_suite(args.seed or 0)
    write_csv(out, ("op", "max_rel", "max_abs", "status", "seconds"),
              [(r.name, fmt(r.max_rel), fmt(r.max_abs), "pass" if r.passed else "FAIL", fmt(r.seconds))
               for r in results])
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CamnetError(f"gradient check failed for {', '.join(failed)}")


def cmd_visualize(args, out):
    from .trainer import load_model
    from .visualize import render, write_visualization

    _require(args, "ckpt", "src", "tgt", "out")
    model = load_model(str(args.ckpt))
    source, target = _load_pair(args)
    paths = write_visualization(render(model, source, target), args.out)
    write_csv(out, ("artifact",), [(p,) for p in paths])


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "visualize": cmd_visualize,
}


def _thread_cap():
    raw = os.environ.get("CAMNET_THREADS")
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"CAMNET_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise UsageError("CAMNET_THREADS must be >= 1")
    return value


def run(argv=None, stdout=None) -> int:
    stdout = stdout if stdout is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        threads = _thread_cap()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](args, stdout)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (CamnetError, OSError, ValueError) as exc:
        print(f"camnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
