"""Command line entry point: ``python -m mom <command>``.

Exit status is 0 when the command succeeds and its invariants hold, 1 when
a check fails, and 2 for unusable arguments or configs.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .backward import DIFFERENTIABLE_RULES
from .equivalence import run_equivalence
from .errors import InvalidArgument, TrainingDiverged, UnsupportedOperation
from .gradcheck import check_layer_gradients
from .kernels import RuleKind
from .layer import init_layer_params
from .recall.config import EXAMPLE_CONFIG, load_config
from .recall.experiments import compare
from .recall.train import train, write_run


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    record = train(cfg)
    out = write_run(record, args.out)
    print(f"{cfg.name}: accuracy {record.final_accuracy:.4f} "
          f"(train {record.train_accuracy:.4f}) -> {out}")
    return 0


def _cmd_compare(args) -> int:
    cfgs = [load_config(p) for p in args.configs]
    result = compare(cfgs, args.seeds, out_dir=args.out)
    print(result.table())
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    if RuleKind(cfg.rule) not in DIFFERENTIABLE_RULES:
        raise UnsupportedOperation(f"no backward pass for {cfg.rule}")
    shape = cfg.layer_shape()
    rng = np.random.default_rng(cfg.seed)
    params = init_layer_params(cfg.d, shape["num_memories"], shape["top_k"], cfg.rule,
                               d_k=shape["d_k"], d_v=shape["d_v"], shared=shape["shared"],
                               gamma=cfg.gamma, a_bias=cfg.a_bias, b_bias=cfg.b_bias, rng=rng)
    X = rng.normal(size=(2, args.seq_len, cfg.d))
    upstream = rng.normal(size=X.shape)
    report = check_layer_gradients(params, X, upstream, epsilon=args.epsilon, tol=args.tol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradreport.json").write_text(report.to_json())
    print(f"gradcheck {cfg.rule}: max relative error {report.worst_rel_error:.3e} "
          f"({'pass' if report.passed else 'FAIL'})")
    return 0 if report.passed else 1


def _cmd_equivalence(args) -> int:
    report = run_equivalence(args.trials, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "equivalence.json").write_text(report.to_json())
    worst = ", ".join(f"{k} {v:.2e}" for k, v in report.max_error.items())
    print(f"equivalence over {report.trials} configs: max error {worst} "
          f"({'pass' if report.passed else 'FAIL'})")
    return 0 if report.passed else 1


def _cmd_example_config(args) -> int:
    sys.stdout.write(EXAMPLE_CONFIG)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mom", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write run artifacts")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("compare", help="train several configs over seeds")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", default="runs/compare")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference layer gradients")
    p.add_argument("--config", required=True)
    p.add_argument("--seq-len", type=int, default=8)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", default="runs/gradcheck")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("equivalence", help="varlen vs token-by-token forward on random configs")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/equivalence")
    p.set_defaults(func=_cmd_equivalence)

    p = sub.add_parser("example-config", help="print a commented example config")
    p.set_defaults(func=_cmd_example_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidArgument, UnsupportedOperation, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
