from dataclasses import replace

import loggi
import quickpool
from noiftimer import Timer
from pathier import Pathier, Pathish
from typing_extensions import Any, Sequence

from .core import LOSS_NAMES, TrainConfig, validate_config
from .data import Dataset
from .evaluation import classification_accuracy, evaluate_retrieval
from .training import ChoresMixin, CooperativeTrainer

FULL_MODEL = "full"

# The full model first, then each objective removed on its own.
DEFAULT_MASKS: tuple[tuple[str, ...], ...] = ((),) + tuple((name,) for name in LOSS_NAMES)


def mask_name(mask: Sequence[str]) -> str:
    return "-".join(mask) if mask else FULL_MODEL


class AblationSweep(loggi.LoggerMixin, ChoresMixin):
    """
    Train one model per ablation mask with the same seed and data, then score each on the same query/database split.

    Architecture stays fixed across runs; a mask only removes objectives.
    Runs can execute concurrently, each one writing to `out_dir/<mask name>`.

    >>> results = AblationSweep(cfg, dataset, "runs/ablation").sweep()
    >>> results["full_model_best"]
    True
    """

    def __init__(
        self,
        cfg: TrainConfig,
        dataset: Dataset,
        out_dir: Pathish = "runs",
        masks: Sequence[Sequence[str]] = DEFAULT_MASKS,
        max_workers: int = 1,
        k: int | None = None,
    ):
        """
        #### :params:

        `cfg`: Base config; each run replaces only its `ablate` field.

        `dataset`: Data with `train`, `query` and `database` splits.

        `out_dir`: Each run writes its checkpoints and logs to a subdirectory named after its mask.

        `masks`: Objective sets to disable, one run per mask. Defaults to the full model plus every single-objective ablation.

        `max_workers`: Number of runs trained at once.

        `k`: Cutoff for mAP@k and P@k. Defaults to `cfg.probe_k`.
        """
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Pathier(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.masks = [tuple(mask) for mask in masks]
        for mask in self.masks:
            validate_config(replace(cfg, ablate=mask))
        self.max_workers = max_workers
        self.k = k or cfg.probe_k
        self.init_logger("ablation_sweep", self.out_dir / "logs")
        self.timer = Timer()

    def pretrain_chores(self):
        self.timer.start()
        self.logger.logprint(
            f"Sweeping {len(self.masks)} ablation masks: {[mask_name(mask) for mask in self.masks]}."
        )

    def posttrain_chores(self):
        self.timer.stop()
        self.logger.logprint(f"Sweep completed in {self.timer.elapsed_str}.")
        self.logger.close()

    def run_one(self, mask: tuple[str, ...]) -> dict[str, Any]:
        """Train and evaluate the model for a single ablation mask."""
        name = mask_name(mask)
        cfg = replace(self.cfg, ablate=mask)
        run_dir = self.out_dir / name
        state = CooperativeTrainer(cfg, self.dataset, run_dir, log_name=f"train_{name}").fit()
        queries = self.dataset.split_of("query")
        database = self.dataset.split_of("database")
        metrics, _ = evaluate_retrieval(state.descriptor, queries, database, self.k)
        result = {
            "mask": list(mask),
            "out_dir": str(run_dir),
            **{f"{metric.metric}@{metric.k}": metric.value for metric in metrics},
            "accuracy": classification_accuracy(state.descriptor, queries),
        }
        self.logger.info(f"Run `{name}` finished with mAP@{self.k}={result[f'mAP@{self.k}']:.4f}.")
        return result

    def train(self) -> list[dict[str, Any]]:
        """Execute every run, `max_workers` at a time. Results keep the order of `self.masks`."""
        pool = quickpool.ThreadPool(
            [self.run_one] * len(self.masks),
            [(mask,) for mask in self.masks],
            max_workers=self.max_workers,
        )
        return pool.execute()

    def sweep(self) -> dict[str, Any]:
        """
        Execute pipeline.

        1. self.pretrain_chores()
        2. self.train()
        3. write `ablation.json`
        4. self.posttrain_chores()
        """
        self.pretrain_chores()
        try:
            runs = self.train()
        except Exception:
            self.logger.exception("Exception occured during sweep():")
            self.posttrain_chores()
            raise
        key = f"mAP@{self.k}"
        by_name = {mask_name(run["mask"]): run[key] for run in runs}
        results: dict[str, Any] = {"k": self.k, "seed": self.cfg.seed, "runs": runs}
        if FULL_MODEL in by_name:
            results["full_model_best"] = all(
                by_name[FULL_MODEL] > value for name, value in by_name.items() if name != FULL_MODEL
            )
        (self.out_dir / "ablation.json").json_dumps(results)
        self.posttrain_chores()
        return results
