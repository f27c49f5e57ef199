"""Command-line entry point.

Exit codes are part of the contract:
  0 success, 1 usage or config error, 2 data or alignment error,
  3 missing or malformed artifact, 4 numerical abort during training,
  5 selfcheck failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .config import ConfigError, RunConfig, load_config
from .data import (
    ArtifactError,
    DatasetError,
    SplitDataset,
    atomic_text_write,
    freeze_splits,
    read_split_artifact,
    write_split_artifact,
)
from .evaluation import evaluate_model
from .experiments import ablate, sweep
from .graph import build_bipartite_adjacency
from .model import build_model, load_model, save_model
from .selfcheck import run_selfcheck
from .synthetic import SyntheticSpec, generate_synthetic, parse_spec_text
from .training import NumericalAbortError, train_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4
EXIT_SELFCHECK = 5


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we pin usage to 1
        raise _UsageError(message)


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise ArtifactError(f"config file not found: {args.config}")
        cfg = load_config(args.config, cfg)
    for flag in ("seed", "epochs", "variant", "fusion", "k", "l", "lr", "batch_size"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg = replace(cfg, **{flag: value})
    if getattr(args, "alternating", False):
        cfg = replace(cfg, alternating=True)
    if getattr(args, "threads", None) is not None:
        cfg = replace(cfg, eval_threads=args.threads)
    cfg.validate()
    return cfg


def _load_data_dir(data_dir: str) -> tuple[SplitDataset, SplitDataset]:
    split_a, _ = read_split_artifact(os.path.join(data_dir, "domain_a"))
    split_b, _ = read_split_artifact(os.path.join(data_dir, "domain_b"))
    if split_a.train.num_users != split_b.train.num_users:
        raise ArtifactError("domain artifacts disagree on the aligned user count")
    return split_a, split_b


def _write_prepared(out_dir: str, split_a, split_b, meta: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    meta_a = dict(meta)
    meta_a["num_items"] = split_a.train.num_items
    meta_b = dict(meta)
    meta_b["num_items"] = split_b.train.num_items
    write_split_artifact(os.path.join(out_dir, "domain_a"), split_a, meta_a)
    write_split_artifact(os.path.join(out_dir, "domain_b"), split_b, meta_b)


def _print_summary(split_a, split_b) -> None:
    print(f"users = {split_a.train.num_users}")
    for tag, split in (("a", split_a), ("b", split_b)):
        print(
            f"domain_{tag}: items = {split.train.num_items}, "
            f"train = {len(split.train.interactions)}, test = {len(split.test)}"
        )


def _cmd_prepare(args) -> int:
    for path in (args.domain_a, args.domain_b):
        if not os.path.isfile(path):
            raise DatasetError(f"input ratings file not found: {path}")
    from .data import prepare_datasets

    split_a, split_b, meta = prepare_datasets(
        args.domain_a,
        args.domain_b,
        min_count=args.min_count,
        seed=args.seed,
        n_candidates=args.candidates,
    )
    _write_prepared(args.out, split_a, split_b, meta)
    _print_summary(split_a, split_b)
    print(f"artifacts written to {args.out}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    if args.spec:
        if not os.path.isfile(args.spec):
            raise ArtifactError(f"spec file not found: {args.spec}")
        with open(args.spec, encoding="utf-8") as fh:
            spec = parse_spec_text(fh.read())
    else:
        spec = SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    set_a, set_b = generate_synthetic(spec)
    split_a, split_b = freeze_splits(set_a, set_b, spec.seed, args.candidates)
    meta = {
        "num_users": set_a.num_users,
        "seed": spec.seed,
        "n_candidates": args.candidates,
        "source": "synthetic",
    }
    _write_prepared(args.out, split_a, split_b, meta)
    _print_summary(split_a, split_b)
    print(f"artifacts written to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    split_a, split_b = _load_data_dir(args.data)
    os.makedirs(args.out, exist_ok=True)
    try:
        result = train_model(split_a, split_b, cfg)
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_model(os.path.join(args.out, "model.npz"), result.model)
    atomic_text_write(os.path.join(args.out, "train.log"), "\n".join(result.log_lines) + "\n")
    print(result.log_lines[0])
    print(result.log_lines[-1])
    print(f"model written to {os.path.join(args.out, 'model.npz')}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    split_a, split_b = _load_data_dir(args.data)
    adjacency_a = build_bipartite_adjacency(split_a.train)
    adjacency_b = build_bipartite_adjacency(split_b.train)
    model = load_model(args.model, adjacency_a, adjacency_b)
    if args.threads is not None:
        model.config = replace(model.config, eval_threads=args.threads)
        model.config.validate()
    report = evaluate_model(model, split_a, split_b)
    atomic_text_write(args.out, report.to_text())
    print(f"hr_a = {report.domain_a.hr:.6f}, ndcg_a = {report.domain_a.ndcg:.6f}")
    print(f"hr_b = {report.domain_b.hr:.6f}, ndcg_b = {report.domain_b.ndcg:.6f}")
    print(f"report written to {args.out}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    split_a, split_b = _load_data_dir(args.data)
    try:
        _, table = ablate(split_a, split_b, cfg)
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    atomic_text_write(args.out, table)
    print(table, end="")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _load_run_config(args)
    split_a, split_b = _load_data_dir(args.data)
    values = [v for v in (piece.strip() for piece in args.grid.split(",")) if v]
    try:
        _, table = sweep(args.param, values, split_a, split_b, cfg)
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    atomic_text_write(args.out, table)
    print(table, end="")
    return EXIT_OK


def _cmd_selfcheck(args) -> int:
    ok, lines = run_selfcheck(inject_gradient_fault=args.inject_gradient_fault)
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_SELFCHECK


def _add_config_flags(sub) -> None:
    sub.add_argument("--config", help="path to a key = value config file")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--epochs", type=int, help="override the epoch count")
    sub.add_argument("--k", type=int, help="override the embedding width")
    sub.add_argument("--l", type=int, help="override the propagation depth")
    sub.add_argument("--lr", type=float, help="override the learning rate")
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--variant", help="model variant tag")
    sub.add_argument("--fusion", help="fusion strategy: concat, sum, attention")
    sub.add_argument("--alternating", action="store_true", help="alternate domain updates")


def build_parser() -> _Parser:
    parser = _Parser(prog="dualrec", description="dual-target cross-domain recommender")
    commands = parser.add_subparsers(dest="command")

    prepare = commands.add_parser("prepare", help="preprocess two rating files")
    prepare.add_argument("--domain-a", required=True, dest="domain_a")
    prepare.add_argument("--domain-b", required=True, dest="domain_b")
    prepare.add_argument("--out", required=True)
    prepare.add_argument("--min-count", type=int, default=5, dest="min_count")
    prepare.add_argument("--candidates", type=int, default=999)
    prepare.add_argument("--seed", type=int, default=0)
    prepare.set_defaults(func=_cmd_prepare)

    synth = commands.add_parser("synth", help="generate planted-factor data")
    synth.add_argument("--out", required=True)
    synth.add_argument("--spec", help="path to a key = value generator spec")
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--candidates", type=int, default=400)
    synth.set_defaults(func=_cmd_synth)

    train = commands.add_parser("train", help="train a model on prepared data")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    _add_config_flags(train)
    train.set_defaults(func=_cmd_train)

    evaluate = commands.add_parser("eval", help="rank held-out items with a trained model")
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--threads", type=int, default=None)
    evaluate.set_defaults(func=_cmd_eval)

    ablate_cmd = commands.add_parser("ablate", help="train and evaluate every variant")
    ablate_cmd.add_argument("--data", required=True)
    ablate_cmd.add_argument("--out", required=True)
    _add_config_flags(ablate_cmd)
    ablate_cmd.set_defaults(func=_cmd_ablate)

    sweep_cmd = commands.add_parser("sweep", help="grid over one hyperparameter")
    sweep_cmd.add_argument("--data", required=True)
    sweep_cmd.add_argument("--param", required=True)
    sweep_cmd.add_argument("--grid", required=True, help="comma-separated values")
    sweep_cmd.add_argument("--out", required=True)
    _add_config_flags(sweep_cmd)
    sweep_cmd.set_defaults(func=_cmd_sweep)

    selfcheck = commands.add_parser("selfcheck", help="run built-in integrity checks")
    selfcheck.add_argument(
        "--inject-gradient-fault",
        action="store_true",
        dest="inject_gradient_fault",
        help=argparse.SUPPRESS,
    )
    selfcheck.set_defaults(func=_cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
