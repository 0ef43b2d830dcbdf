import argparse
import json
from dataclasses import replace

import numpy as np
from pathier import Pathier
from rich.console import Console

from .core import (
    LOSS_NAMES,
    CheckpointError,
    ConfigError,
    DatasetError,
    HashIndexError,
    LabelError,
    LangevinDivergenceError,
    TrainConfig,
    TrainingDivergedError,
    validate_config,
)
from .data import Dataset, load_dataset, make_splits
from .evaluation import (
    CORRUPTIONS,
    ProbeCallback,
    build_index,
    classification_accuracy,
    encode,
    evaluate_retrieval,
    metrics_payload,
    probe_subsets,
)
from .models import ExperimentSpec
from .retrieval import HashIndex, binarize, search_many
from .sweep import AblationSweep
from .training import CooperativeTrainer, TrainState, latest_checkpoint

COMMANDS = ("train", "encode", "index", "query", "evaluate", "sweep")
FORMATS = ("idx", "png-dir")
INPUT_ERRORS = (ConfigError, CheckpointError, DatasetError, LabelError, HashIndexError)
DIVERGENCE_ERRORS = (TrainingDivergedError, LangevinDivergenceError)

console = Console()


def get_args(argv: list[str] | None = None) -> argparse.Namespace:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=str, default=None, help=""" Path to a JSON training config. """)
    shared.add_argument(
        "--train-source",
        type=str,
        default=None,
        help=""" Dataset the model is trained on; also the evaluation data unless --ood-eval-source is given. """,
    )
    shared.add_argument(
        "--format", type=str, choices=FORMATS, default="idx", help=""" Format of --train-source. """
    )
    shared.add_argument(
        "--ablate",
        type=str,
        nargs="*",
        choices=LOSS_NAMES,
        default=None,
        help=""" Objectives to disable. Overrides the config's `ablate` field. """,
    )
    shared.add_argument(
        "--ood-eval-source",
        type=str,
        default=None,
        help=""" Evaluate on this dataset instead of --train-source, keeping the trained checkpoint. """,
    )
    shared.add_argument(
        "--eval-format",
        type=str,
        choices=FORMATS,
        default=None,
        help=""" Format of --ood-eval-source. Defaults to --format. """,
    )
    shared.add_argument("--k", type=int, default=None, help=""" Cutoff for mAP@k and top-k search. """)
    shared.add_argument(
        "--precision-k", type=int, default=None, help=""" Cutoff for P@k. Defaults to --k. """
    )
    shared.add_argument("--bits", type=int, default=None, help=""" Hash code length K. """)
    shared.add_argument("--seed", type=int, default=None, help=""" Master seed. """)
    shared.add_argument("--iterations", type=int, default=None, help=""" Training iterations. """)
    shared.add_argument(
        "--out", type=str, default="runs", help=""" Directory for checkpoints, logs and results. """
    )
    shared.add_argument(
        "--checkpoint",
        type=str,
        default=None,
        help=""" Checkpoint to load. Defaults to the latest `ckpt_*.bin` in --out. """,
    )
    shared.add_argument(
        "--resume", action="store_true", help=""" Continue training from the checkpoint. """
    )
    shared.add_argument(
        "--corrupt", type=str, choices=CORRUPTIONS, default=None, help=""" Degrade query images. """
    )
    shared.add_argument(
        "--corrupt-level",
        type=float,
        default=0.5,
        help=""" Noise std for `gaussian`, or occluded fraction of the side for `mask`. """,
    )
    shared.add_argument(
        "--denoise",
        action="store_true",
        help=""" Reconstruct queries through the generator before hashing. """,
    )
    shared.add_argument(
        "--workers", type=int, default=1, help=""" Concurrent runs for `sweep`. """
    )
    shared.add_argument("--progress", action="store_true", help=""" Show a progress bar. """)

    parser = argparse.ArgumentParser(
        prog="coophash", description="Train and evaluate cooperative generative hashing models."
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "Train a model and write checkpoints, `train_log.jsonl` and `curves.csv`.",
        "encode": "Write real and packed hash codes of the query and database splits to `codes.npz`.",
        "index": "Build `index.bin` from the database split.",
        "query": "Search the index for every query and write `rankings.jsonl`.",
        "evaluate": "Score retrieval and classification; writes `metrics.json`.",
        "sweep": "Train the full model and each single-objective ablation; writes `ablation.json`.",
    }
    for command in COMMANDS:
        subparsers.add_parser(command, parents=[shared], help=helps[command])
    args = parser.parse_args(argv)
    args.out = Pathier(args.out)

    return args


def experiment_spec(args: argparse.Namespace) -> ExperimentSpec:
    mode = "ablation" if args.command == "sweep" else "ood" if args.ood_eval_source else "standard"
    return ExperimentSpec(
        args.config,
        args.train_source,
        args.ood_eval_source,
        args.format,
        mode,
        tuple(args.ablate or ()),
        str(args.out),
    )


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Config file (or defaults) with command line overrides applied."""
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {
        "bits": args.bits,
        "seed": args.seed,
        "iterations": args.iterations,
        "ablate": tuple(args.ablate) if args.ablate is not None else None,
    }
    return validate_config(replace(cfg, **{key: value for key, value in overrides.items() if value is not None}))


def split_sizes(cfg: TrainConfig) -> dict[str, int]:
    return {"train": cfg.train_size, "query": cfg.query_size, "database": cfg.database_size}


def load_splits(source: str | None, data_format: str, cfg: TrainConfig, flag: str) -> Dataset:
    if not source:
        raise ConfigError(f"{flag} is required for this command.")
    return make_splits(load_dataset(source, data_format), split_sizes(cfg), cfg.seed)


def check_shape(dataset: Dataset, cfg: TrainConfig):
    if dataset.image_shape != cfg.image_shape:
        raise ConfigError(
            f"Training images have shape {dataset.image_shape} but the config expects {cfg.image_shape}."
        )
    if dataset.num_classes > cfg.num_classes:
        raise ConfigError(
            f"Training data has {dataset.num_classes} classes but the config allows L={cfg.num_classes}."
        )


def load_trained(args: argparse.Namespace) -> tuple[TrainState, TrainConfig]:
    """The requested (or latest) checkpoint, checked against any K given on the command line or in --config."""
    path = Pathier(args.checkpoint) if args.checkpoint else latest_checkpoint(args.out)
    if path is None:
        raise CheckpointError(f"No checkpoint found in `{args.out}`.")
    state, cfg = TrainState.load(path)
    expected = args.bits if args.bits is not None else TrainConfig.load(args.config).bits if args.config else None
    if expected is not None and expected != cfg.bits:
        raise CheckpointError(f"Checkpoint `{path}` was trained with K={cfg.bits} but K={expected} was requested.")
    return state, cfg


def evaluation_data(args: argparse.Namespace, cfg: TrainConfig) -> Dataset:
    """
    Query/database data for the trained model.

    In OOD mode the eval source is split with the same sizes and seed as training data, then conformed to the training image shape.
    """
    spec = experiment_spec(args)
    if spec.mode == "ood":
        dataset = load_splits(spec.eval_source, args.eval_format or spec.data_format, cfg, "--ood-eval-source")
        return dataset.conform(cfg.image_shape)
    return load_splits(spec.train_source, spec.data_format, cfg, "--train-source")


def cmd_train(args: argparse.Namespace):
    cfg = resolve_config(args)
    spec = experiment_spec(args)
    dataset = load_splits(spec.train_source, spec.data_format, cfg, "--train-source")
    check_shape(dataset, cfg)
    state = None
    if args.resume:
        state, saved = load_trained(args)
        cfg = replace(saved, iterations=cfg.iterations)
    probe = ProbeCallback(*probe_subsets(dataset), cfg, args.out / "curves.csv")
    trainer = CooperativeTrainer(cfg, dataset, args.out, [probe], show_progress=args.progress)
    state = trainer.fit(state)
    console.print(f"Trained {state.iteration} iterations; checkpoint written to `{args.out}`.")


def cmd_encode(args: argparse.Namespace):
    state, cfg = load_trained(args)
    dataset = evaluation_data(args, cfg)
    arrays: dict[str, np.ndarray] = {}
    for split in ("query", "database"):
        items = dataset.split_of(split)
        codes = encode(state.descriptor, items.images)
        arrays[f"{split}_ids"] = items.ids
        arrays[f"{split}_codes"] = codes
        arrays[f"{split}_packed"] = binarize(codes)
    np.savez(args.out / "codes.npz", **arrays)
    console.print(f"Encoded {len(arrays['query_ids'])} queries and {len(arrays['database_ids'])} database items.")


def cmd_index(args: argparse.Namespace):
    state, cfg = load_trained(args)
    database = evaluation_data(args, cfg).split_of("database")
    index = build_index(state.descriptor, database)
    index.save(args.out / "index.bin")
    console.print(f"Indexed {len(index)} items with K={index.bits}.")


def cmd_query(args: argparse.Namespace):
    state, cfg = load_trained(args)
    dataset = evaluation_data(args, cfg)
    index_path = args.out / "index.bin"
    index = HashIndex.load(index_path) if index_path.exists() else build_index(state.descriptor, dataset.split_of("database"))
    if index.bits != cfg.bits:
        raise CheckpointError(f"`{index_path}` holds K={index.bits} codes but the checkpoint has K={cfg.bits}.")
    queries = dataset.split_of("query")
    rankings = search_many(index, binarize(encode(state.descriptor, queries.images)), queries.ids, args.k or cfg.probe_k)
    lines = [
        json.dumps({"query_id": ranking.query_id, "ids": ranking.ids, "distances": ranking.distances})
        for ranking in rankings
    ]
    (args.out / "rankings.jsonl").write_text("\n".join(lines) + "\n")
    console.print(f"Wrote top-{args.k or cfg.probe_k} rankings for {len(rankings)} queries.")


def cmd_evaluate(args: argparse.Namespace):
    state, cfg = load_trained(args)
    spec = experiment_spec(args)
    dataset = evaluation_data(args, cfg)
    queries, database = dataset.split_of("query"), dataset.split_of("database")
    k = args.k or cfg.probe_k
    metrics, _ = evaluate_retrieval(
        state.descriptor,
        queries,
        database,
        k,
        args.precision_k,
        generator=state.generator,
        corruption=args.corrupt,
        corruption_level=args.corrupt_level,
        denoise_queries=args.denoise,
        seed=cfg.seed,
    )
    payload = metrics_payload(
        metrics,
        classification_accuracy(state.descriptor, queries),
        mode=spec.mode,
        bits=cfg.bits,
        iteration=state.iteration,
        corruption=args.corrupt,
        denoise=args.denoise,
    )
    (args.out / "metrics.json").json_dumps(payload)
    for metric in metrics:
        console.print(f"{metric.metric}@{metric.k}: {metric.value:.4f}")


def cmd_sweep(args: argparse.Namespace):
    cfg = resolve_config(args)
    spec = experiment_spec(args)
    dataset = load_splits(spec.train_source, spec.data_format, cfg, "--train-source")
    check_shape(dataset, cfg)
    results = AblationSweep(cfg, dataset, args.out, max_workers=args.workers, k=args.k).sweep()
    key = f"mAP@{results['k']}"
    for run in results["runs"]:
        console.print(f"{'-'.join(run['mask']) or 'full'}: {key}={run[key]:.4f}")


HANDLERS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "index": cmd_index,
    "query": cmd_query,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(args: argparse.Namespace | None = None) -> int:
    """Run a command; returns 2 for bad input (config, data, checkpoint) and 3 if training diverged."""
    if not args:
        args = get_args()
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        HANDLERS[args.command](args)
    except INPUT_ERRORS as e:
        console.print(str(e), style="red", markup=False)
        return 2
    except DIVERGENCE_ERRORS as e:
        console.print(str(e), style="red", markup=False)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main(get_args()))
