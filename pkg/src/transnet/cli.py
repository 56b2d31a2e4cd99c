"""Command-line entry points: dataset synthesis and validation, training
runs with ablation switches, and checkpoint evaluation.

Config resolution for `run`, lowest to highest precedence: built-in
defaults, the TRANSNET_SEED environment variable (seed only), a JSON config
file mirroring the TrainConfig field names, then command-line flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .graphs import (
    DatasetError,
    SbmSpec,
    few_shot_split,
    generate_sbm,
    load_graph,
    save_graph,
)
from .training import (
    TrainConfig,
    evaluate_precision,
    load_model_checkpoint,
    run_experiment,
)
from .trinity import CONNECTION_MODES

_CENTERS_STREAM = 1
_PERMUTE_STREAM = 2

# (flag destination, TrainConfig field) for value flags of `run`
_CONFIG_VALUE_FLAGS = (
    ("pretrain_epochs", int),
    ("finetune_epochs", int),
    ("lr", float),
    ("gamma", float),
    ("alpha", float),
    ("k", int),
    ("n_shot", int),
    ("unified_dim", int),
    ("trinity_dim", int),
    ("seed", int),
    ("pos_fraction", float),
    ("target_fraction", float),
)

_ABLATION_FLAGS = (
    ("no-unif-f", "disable_unif_f"),
    ("no-unif-s", "disable_unif_s"),
    ("no-mixup", "disable_mixup"),
    ("no-node-signals", "disable_node_signals"),
    ("no-link-signals", "disable_link_signals"),
    ("no-target-signals", "disable_target_signals"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transnet",
        description="Knowledge transfer across graphs: train, evaluate, and "
                    "synthesize benchmark datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a block-model dataset directory")
    synth.add_argument("--out", required=True, help="output dataset directory")
    synth.add_argument("--nodes", type=int, required=True)
    synth.add_argument("--classes", type=int, required=True)
    synth.add_argument("--intra-p", type=float, required=True)
    synth.add_argument("--inter-p", type=float, required=True)
    synth.add_argument("--dim", type=int, required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--feature-noise", type=float, default=0.5)
    synth.add_argument("--center-scale", type=float, default=1.0)
    synth.add_argument("--centers-seed", type=int, default=None,
                       help="seed for class centers (defaults to --seed); share it "
                            "across a transfer pair to keep class semantics aligned")
    synth.add_argument("--permute-features", action="store_true",
                       help="apply a fixed coordinate permutation to the features")

    run = sub.add_parser("run", help="train on a source/target pair and report precision")
    run.add_argument("--source", required=True, help="source dataset directory")
    run.add_argument("--target", required=True, help="target dataset directory")
    run.add_argument("--out", default=None, help="metrics report JSON path")
    run.add_argument("--checkpoint", default=None, help="final model checkpoint path")
    run.add_argument("--seeds", type=int, default=1, help="number of independent trials")
    run.add_argument("--config", default=None, help="JSON config file")
    for dest, kind in _CONFIG_VALUE_FLAGS:
        run.add_argument(f"--{dest.replace('_', '-')}", type=kind, default=None)
    run.add_argument("--gnn-dims", type=str, default=None,
                     help="comma-separated hidden/output widths, e.g. 64,32,16")
    run.add_argument("--connection-mode", choices=CONNECTION_MODES, default=None)
    for flag, _ in _ABLATION_FLAGS:
        run.add_argument(f"--{flag}", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a target dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--target", required=True)

    val = sub.add_parser("validate", help="lint a dataset directory")
    val.add_argument("directory")
    return parser


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Merge defaults, TRANSNET_SEED, the config file, and explicit flags."""
    values = TrainConfig().to_dict()
    env_seed = os.environ.get("TRANSNET_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ValueError(f"TRANSNET_SEED must be an integer, got {env_seed!r}")
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError(f"{args.config}: config file must hold a JSON object")
        known = set(values)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{args.config}: unknown config keys {sorted(unknown)}")
        values.update(raw)
    for dest, _ in _CONFIG_VALUE_FLAGS:
        given = getattr(args, dest)
        if given is not None:
            values[dest] = given
    if args.gnn_dims is not None:
        values["gnn_dims"] = [int(part) for part in args.gnn_dims.split(",")]
    if args.connection_mode is not None:
        values["connection_mode"] = args.connection_mode
    for flag, field in _ABLATION_FLAGS:
        if getattr(args, flag.replace("-", "_")):
            values[field] = True
    return TrainConfig.from_dict(values)


def cmd_synth(args: argparse.Namespace) -> int:
    centers_seed = args.centers_seed if args.centers_seed is not None else args.seed
    centers_rng = np.random.default_rng([centers_seed, _CENTERS_STREAM])
    centers = args.center_scale * centers_rng.standard_normal((args.classes, args.dim))
    permutation = None
    if args.permute_features:
        permutation = np.random.default_rng([centers_seed, _PERMUTE_STREAM]).permutation(args.dim)
    spec = SbmSpec(
        num_nodes=args.nodes,
        num_classes=args.classes,
        intra_p=args.intra_p,
        inter_p=args.inter_p,
        feature_dim=args.dim,
        class_centers=centers,
        feature_noise=args.feature_noise,
        feature_permutation=permutation,
        seed=args.seed,
    )
    graph = generate_sbm(spec)
    save_graph(graph, args.out)
    print(f"wrote {args.out}: {graph.num_nodes} nodes, {graph.num_edges} edges, "
          f"{graph.num_classes} classes")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    source = load_graph(args.source)
    target = load_graph(args.target)
    report = run_experiment(source, target, cfg, args.seeds,
                            checkpoint_path=args.checkpoint)
    if args.out is not None:
        report.save(args.out)
    print(f"precision {report.precision_mean:.4f} +- {report.precision_std:.4f} "
          f"over {args.seeds} seed(s)")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, meta = load_model_checkpoint(args.checkpoint)
    if model.classifier_h is None:
        raise ValueError(f"checkpoint {args.checkpoint} has no downstream head")
    target = load_graph(args.target)
    if list(target.label_vocab) != meta["label_vocab"]:
        raise ValueError("target dataset label vocabulary differs from checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    split = few_shot_split(target, cfg.n_shot, cfg.seed)
    print(f"{evaluate_precision(model, target, split.eval_nodes):.6f}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    graph = load_graph(args.directory)
    labeled = graph.labeled_nodes().size
    print(f"ok: {graph.num_nodes} nodes, {graph.num_edges} edges, "
          f"{graph.feature_dim} features, {labeled} labeled, "
          f"{graph.num_classes} classes")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "run": cmd_run,
    "eval": cmd_eval,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DatasetError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
