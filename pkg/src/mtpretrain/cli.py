"""Command line entry point: train, eval, ablate, gradcheck, gen-data.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical abort
(or a failed gradient check).
"""

import argparse
import json
import os
import sys

from .config import TrainConfig
from .data import SyntheticSpec, export_dataset, generate_shapes_dataset, load_manifest_dataset
from .errors import ConfigError, NumericalAbort
from .evaluate import probe_eval
from .experiments import ablate, gradcheck_cmd
from .train import TrainState, epoch_means, fit

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path, out=None, seed=None):
    cfg = TrainConfig.load(path) if path else TrainConfig()
    if out is not None:
        cfg.out_dir = out
    if seed is not None:
        cfg.seed = seed
    return cfg


def _load_spec(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        return SyntheticSpec(**raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_train(args):
    cfg = _load_config(args.config, args.out, args.seed)

    def progress(epoch, rows):
        mean = epoch_means(rows).get(epoch)
        print(f"epoch {epoch + 1}/{cfg.optim.epochs}  mean total loss {mean:.6f}", flush=True)

    result = fit(cfg, progress=progress)
    print(f"checkpoint: {result.checkpoint}\nrun log: {result.runlog}")
    return EXIT_OK


def cmd_eval(args):
    state = TrainState.load(args.ckpt)
    enc = state.cfg.encoder
    if args.data.endswith(".json"):
        dataset = generate_shapes_dataset(_load_spec(args.data))
    else:
        root = os.path.dirname(os.path.abspath(args.data))
        dataset = load_manifest_dataset(root, args.data, enc.num_classes, enc.image_size)
    metrics = probe_eval(state, dataset)
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args.config, args.out, args.seed)
    report = ablate(cfg, args.drop)
    print(report.to_text())
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _load_config(args.config) if args.config else None
    summary = gradcheck_cmd(cfg, tol=args.tol, seed=args.seed)
    print(summary.to_text())
    print("PASS" if summary.passed else "FAIL")
    return EXIT_OK if summary.passed else EXIT_NUMERIC


def cmd_gen_data(args):
    spec = _load_spec(args.spec) if args.spec else SyntheticSpec()
    dataset = generate_shapes_dataset(spec)
    path = export_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} images and {path}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="mtpretrain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run the multi-task training loop")
    p.add_argument("--config", help="JSON config file (missing keys take defaults)")
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="probe a checkpoint: per-class AP, mAP, MIM error")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True,
                   help="synthetic spec (.json) or a manifest file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full run plus one run per removed task")
    p.add_argument("--config")
    p.add_argument("--drop", default="mcls,cl,mim,mom",
                   help="comma-separated subset of mcls,cl,mim,mom")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="export the synthetic set as PNGs + manifest")
    p.add_argument("--spec", help="JSON synthetic spec (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        where = f" (diagnostics in {exc.dump_dir})" if exc.dump_dir else ""
        print(f"numerical abort: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
