"""Command-line entry point: ``gann run | diagnose | convert | gen-sbm``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as dio
from .experiment import ExperimentConfig, export_diagnostics, load_bundle, load_config, run_experiment
from .nn import NumericError

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

# run flags that land in the "model" section of the config
MODEL_FLAGS = ("layers", "hidden", "lr", "weight_decay", "dropout", "topk", "eta", "lam", "beta",
               "gamma", "tem", "patience", "max_iters", "precision")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gann", description="Layer-wise GNN node classifier with alignment losses.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train over several seeds and aggregate test accuracy")
    run.add_argument("--config", required=True, help="JSON config file or bundled preset name")
    run.add_argument("--dataset", help="dataset directory (overrides the config)")
    run.add_argument("--seeds", type=_int_list)
    run.add_argument("--out")
    run.add_argument("--per-class", type=int)
    run.add_argument("--val-size", type=int)
    run.add_argument("--jobs", type=int, help="seeds to run in parallel processes")
    run.add_argument("--layers", type=int)
    run.add_argument("--hidden", type=int)
    run.add_argument("--lr", type=float)
    run.add_argument("--weight-decay", type=float)
    run.add_argument("--dropout", type=float)
    run.add_argument("--topk", type=int)
    run.add_argument("--eta", type=float)
    run.add_argument("--lambda", dest="lam", type=float)
    run.add_argument("--beta", type=float)
    run.add_argument("--gamma", type=float)
    run.add_argument("--tem", type=float)
    run.add_argument("--patience", type=int)
    run.add_argument("--max-iters", type=int)
    run.add_argument("--precision", choices=["single", "double"])

    diag = sub.add_parser("diagnose", help="export hop densities, Gram matrix and entropies")
    diag.add_argument("--run", required=True, help="output directory of a finished run")
    diag.add_argument("--dataset", help="dataset directory (default: the run's dataset)")
    diag.add_argument("--out", help="default: <run>/diagnostics")
    diag.add_argument("--seed", type=int)
    diag.add_argument("--max-hop", type=int, default=5)
    diag.add_argument("--max-gram-nodes", type=int)

    conv = sub.add_parser("convert", help="convert a benchmark .npz into a dataset directory")
    conv.add_argument("--input", required=True)
    conv.add_argument("--out", required=True)
    conv.add_argument("--name")
    conv.add_argument("--no-lcc", action="store_true", help="keep every connected component")

    gen = sub.add_parser("gen-sbm", help="write a stochastic-block-model dataset directory")
    gen.add_argument("--blocks", type=_int_list, required=True)
    gen.add_argument("--p-in", type=float, required=True)
    gen.add_argument("--p-out", type=float, required=True)
    gen.add_argument("--feature-dim", type=int, default=16)
    gen.add_argument("--noise", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    return p


def parse_cli(argv) -> ExperimentConfig:
    """Resolve `gann run ...` arguments into an ExperimentConfig (flags beat the file)."""
    args = build_parser().parse_args(argv)
    if args.command != "run":
        raise UsageError("parse_cli only builds configs for the 'run' subcommand")
    return _experiment_config(args)


def _experiment_config(args) -> ExperimentConfig:
    raw = load_config(args.config)
    model = dict(raw.get("model", {}))
    for flag in MODEL_FLAGS:
        value = getattr(args, flag, None)
        if value is not None:
            model["max_iters_per_layer" if flag == "max_iters" else flag] = value
    raw["model"] = model
    for key in ("dataset", "seeds", "out", "per_class", "val_size", "jobs"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    try:
        return ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _cmd_run(args) -> int:
    cfg = _experiment_config(args)
    record = run_experiment(cfg)
    print(f"seeds={record['seeds']} mean={record['mean']:.4f} std={record['std']:.4f} "
          f"failures={len(record['failures'])} -> {Path(cfg.out) / 'results.json'}")
    return 0


def _cmd_diagnose(args) -> int:
    run_dir = Path(args.run)
    record = dio.load_results(run_dir / "results.json")
    spec = args.dataset or record["config"]["dataset"]
    seed = args.seed if args.seed is not None else (record["seeds"] or [0])[0]
    bundle = load_bundle(spec, seed)
    files = export_diagnostics(bundle, run_dir, args.out or run_dir / "diagnostics", seed=seed,
                               max_hop=args.max_hop, max_gram_nodes=args.max_gram_nodes)
    for name, path in files.items():
        print(f"{name}: {path}")
    return 0


def _cmd_convert(args) -> int:
    bundle = dio.convert_npz(args.input, name=args.name, lcc=not args.no_lcc)
    dio.save_dataset(bundle, args.out)
    print(f"{bundle.name}: N={bundle.num_nodes} edges={len(bundle.graph.edge_list())} "
          f"d={bundle.features.shape[1]} C={bundle.num_classes} -> {args.out}")
    return 0


def _cmd_gen_sbm(args) -> int:
    bundle = dio.generate_sbm(args.blocks, args.p_in, args.p_out, args.feature_dim, args.noise,
                              np.random.default_rng(args.seed))
    dio.save_dataset(bundle, args.out)
    print(f"sbm: N={bundle.num_nodes} edges={len(bundle.graph.edge_list())} -> {args.out}")
    return 0


COMMANDS = {"run": _cmd_run, "diagnose": _cmd_diagnose, "convert": _cmd_convert, "gen-sbm": _cmd_gen_sbm}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"gann: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"gann: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"gann: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
