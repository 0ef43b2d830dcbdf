import copy
import json
import math
from dataclasses import dataclass

import loggi
import numpy as np
import torch
from noiftimer import Timer
from pathier import Pathier, Pathish
from printbuddies import track
from typing_extensions import Any, Self, Sequence

from .checkpoint import (
    load_checkpoint,
    restore_module,
    restore_optimizer,
    restore_streams,
    save_checkpoint,
)
from .core import DatasetError, RandomStreams, TrainConfig, TrainingDivergedError, seeded_rng, validate_config
from .data import Dataset, LabelSampler, assemble_real_triplets, batch_indices
from .losses import TripletBatch, descriptor_loss, generator_loss
from .mcmc import LangevinConfig, cooperative_sample, langevin_revise
from .models import LossReport
from .nets import Descriptor, Generator, build_networks, frozen, generate_contrastive_pair


class ChoresMixin:
    """Adds `pretrain_chores` and `posttrain_chores` methods to inheriting classes."""

    def posttrain_chores(self):
        """Chores to do after training."""
        ...

    def pretrain_chores(self):
        """Chores to do before training."""
        ...


def checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration}.bin"


def latest_checkpoint(directory: Pathish) -> Pathier | None:
    """The `ckpt_{iter}.bin` in `directory` with the highest iteration, if any."""
    candidates = [
        (int(path.stem.removeprefix("ckpt_")), path)
        for path in Pathier(directory).glob("ckpt_*.bin")
        if path.stem.removeprefix("ckpt_").isdigit()
    ]
    if not candidates:
        return None
    return Pathier(max(candidates)[1])


def make_optimizers(
    cfg: TrainConfig, generator: Generator, descriptor: Descriptor
) -> tuple[torch.optim.Adam, torch.optim.Adam]:
    return (
        torch.optim.Adam(generator.parameters(), lr=cfg.generator_lr, betas=cfg.adam_betas),
        torch.optim.Adam(descriptor.parameters(), lr=cfg.descriptor_lr, betas=cfg.adam_betas),
    )


@dataclass
class TrainState:
    """Everything that evolves during training: networks, optimizers, random streams, and the iteration counter."""

    iteration: int
    generator: Generator
    descriptor: Descriptor
    generator_optimizer: torch.optim.Adam
    descriptor_optimizer: torch.optim.Adam
    streams: RandomStreams

    @classmethod
    def initial(cls, cfg: TrainConfig) -> Self:
        generator, descriptor = build_networks(cfg, seeded_rng(cfg.seed))
        return cls(0, generator, descriptor, *make_optimizers(cfg, generator, descriptor), RandomStreams.from_seed(cfg.seed))

    def save(self, path: Pathish, cfg: TrainConfig):
        save_checkpoint(
            path,
            cfg,
            self.iteration,
            self.generator,
            self.descriptor,
            self.generator_optimizer,
            self.descriptor_optimizer,
            self.streams,
        )

    @classmethod
    def load(cls, path: Pathish) -> tuple[Self, TrainConfig]:
        """Rebuild a state from a checkpoint; returns the state and the config it was trained with."""
        checkpoint = load_checkpoint(path)
        cfg = checkpoint.config
        state = cls.initial(cfg)
        restore_module(state.generator, "generator", checkpoint)
        restore_module(state.descriptor, "descriptor", checkpoint)
        restore_optimizer(state.generator_optimizer, state.generator, "generator", checkpoint)
        restore_optimizer(state.descriptor_optimizer, state.descriptor, "descriptor", checkpoint)
        restore_streams(state.streams, checkpoint)
        state.iteration = checkpoint.iteration
        return state, cfg

    def capture(self) -> dict[str, Any]:
        """Copies of everything `train_step` mutates, for `rollback`."""
        return {
            "iteration": self.iteration,
            "generator": copy.deepcopy(self.generator.state_dict()),
            "descriptor": copy.deepcopy(self.descriptor.state_dict()),
            "generator_optimizer": copy.deepcopy(self.generator_optimizer.state_dict()),
            "descriptor_optimizer": copy.deepcopy(self.descriptor_optimizer.state_dict()),
            "streams": copy.deepcopy(self.streams.state()),
        }

    def rollback(self, captured: dict[str, Any]):
        """Return to the state recorded by `capture`."""
        self.iteration = captured["iteration"]
        self.generator.load_state_dict(captured["generator"])
        self.descriptor.load_state_dict(captured["descriptor"])
        self.generator_optimizer.load_state_dict(captured["generator_optimizer"])
        self.descriptor_optimizer.load_state_dict(captured["descriptor_optimizer"])
        self.streams.restore(captured["streams"])

    def snapshot(self) -> tuple[Generator, Descriptor]:
        """Detached copies of both networks for readers that shouldn't touch live parameters."""
        return copy.deepcopy(self.generator), copy.deepcopy(self.descriptor)


@dataclass(frozen=True)
class Batch:
    images: torch.Tensor
    labels: torch.Tensor


@dataclass(frozen=True)
class SynthesisResult:
    """Revised samples for the NLL/VAE terms and the triplets for the hash loss; `x_tilde` is `None` when synthesis is ablated."""

    x_tilde: torch.Tensor | None
    triplets: TripletBatch | None


def _check_finite(report: LossReport, iteration: int, components: Sequence[str]):
    values = report.as_dict()
    for component in components:
        if not math.isfinite(values[component]):
            raise TrainingDivergedError(component, iteration)


def synthesize(
    state: TrainState, batch: Batch, cfg: TrainConfig, label_sampler: LabelSampler
) -> SynthesisResult:
    """
    Cooperative sampling for the batch labels plus triplet assembly.

    Synthetic pairs reuse the chains' latent codes.
    With `NLL` ablated no sampling happens and the triplets come from the real batch alone.
    """
    synthesis = not cfg.is_ablated("NLL")
    x_tilde = None
    x_plus = x_minus = None
    if synthesis:
        sample = cooperative_sample(batch.labels, state.generator, state.descriptor, cfg, state.streams)
        x_tilde = sample.x_tilde
        if cfg.loss_weights["TR"] > 0:
            with torch.no_grad():
                x_plus, x_minus, c_minus = generate_contrastive_pair(
                    state.generator,
                    batch.labels,
                    sample.z_hat,
                    label_sampler,
                    state.streams.data,
                    state.streams.noise,
                    cfg.sigma,
                )
            if cfg.revise_pairs:
                langevin = LangevinConfig.from_config(cfg)
                with frozen(state.descriptor):
                    x_plus = langevin_revise(
                        x_plus, batch.labels, state.descriptor.energy, langevin, state.streams.langevin
                    )
                    x_minus = langevin_revise(
                        x_minus, c_minus, state.descriptor.energy, langevin, state.streams.langevin
                    )
    real_positive = real_negative = None
    if cfg.loss_weights["TR"] > 0 and (cfg.real_triplets or not synthesis):
        positives, negatives = assemble_real_triplets(batch.labels.cpu().numpy(), state.streams.data)
        real_positive = torch.as_tensor(positives, device=batch.labels.device)
        real_negative = torch.as_tensor(negatives, device=batch.labels.device)
    triplets = TripletBatch(x_plus, x_minus, real_positive, real_negative)
    return SynthesisResult(x_tilde, triplets)


def descriptor_step(
    state: TrainState, batch: Batch, synthesis: SynthesisResult, cfg: TrainConfig
) -> LossReport:
    """One Adam step on the combined descriptor objective; generator parameters aren't touched."""
    state.descriptor_optimizer.zero_grad(set_to_none=True)
    total, report = descriptor_loss(
        batch.images,
        batch.labels,
        synthesis.x_tilde,
        synthesis.triplets,
        cfg,
        state.descriptor,
        state.generator,
        state.streams.inference,
    )
    _check_finite(
        report,
        state.iteration,
        ["nll_surrogate", "vae", "triplet", "classification", "descriptor_total"],
    )
    total.backward()
    state.descriptor_optimizer.step()
    return report


def generator_step(
    state: TrainState, batch: Batch, synthesis: SynthesisResult, cfg: TrainConfig
) -> float:
    """One Adam step on the generator's variational loss; descriptor parameters aren't touched."""
    target = synthesis.x_tilde if synthesis.x_tilde is not None else batch.images
    state.generator_optimizer.zero_grad(set_to_none=True)
    loss = generator_loss(
        target,
        batch.labels,
        state.generator,
        state.descriptor,
        cfg.gamma,
        cfg.sigma,
        state.streams.inference,
    )
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError("generator_total", state.iteration)
    loss.backward()
    state.generator_optimizer.step()
    return value


def train_step(
    state: TrainState,
    batch: Batch,
    cfg: TrainConfig,
    label_sampler: LabelSampler | None = None,
) -> tuple[TrainState, LossReport]:
    """
    One cooperative iteration:
    1. sample `x̂`/`x̃` for the batch labels
    2. build contrastive triplets around the real anchors
    3. update the descriptor
    4. update the generator

    `label_sampler` defaults to the histogram of the batch labels.
    The step is all-or-nothing: if anything raises (including `KeyboardInterrupt`), `state` is rolled back
    to how it was on entry before the error propagates.
    """
    labels = batch.labels.cpu().numpy()
    if len(labels) < 2 or len(np.unique(labels)) < 2:
        raise DatasetError("A training batch needs at least 2 items with 2 distinct labels.")
    label_sampler = label_sampler or LabelSampler.from_labels(labels)
    captured = state.capture()
    try:
        synthesis = synthesize(state, batch, cfg, label_sampler)
        report = descriptor_step(state, batch, synthesis, cfg)
        report.generator_total = generator_step(state, batch, synthesis, cfg)
    except BaseException:
        state.rollback(captured)
        raise
    state.iteration += 1
    return state, report


class TrainCallback:
    """Hooks called by `CooperativeTrainer.fit()`. Override the ones you need."""

    def on_train_start(self, state: TrainState):
        ...

    def on_iteration_end(self, state: TrainState, report: LossReport):
        ...

    def on_train_end(self, state: TrainState):
        ...


class TrainLog:
    """Appends one JSON record per iteration to `train_log.jsonl`."""

    def __init__(self, path: Pathish, include_wall_time: bool = True):
        self.path = Pathier(path)
        self.include_wall_time = include_wall_time

    def reset(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def write(self, iteration: int, report: LossReport, wall_ms: float):
        record: dict[str, float | int] = {"iter": iteration, **report.as_dict()}
        if self.include_wall_time:
            record["wall_ms"] = round(wall_ms, 3)
        with self.path.open("a", encoding="utf-8") as file:
            file.write(json.dumps(record) + "\n")

    def read(self) -> list[dict[str, float]]:
        return [json.loads(line) for line in self.path.read_text().splitlines() if line]


class CooperativeTrainer(loggi.LoggerMixin, ChoresMixin):
    """
    Runs the cooperative training loop over a dataset's `train` split.

    Writes `train_log.jsonl`, periodic `ckpt_{iter}.bin` files and a final checkpoint to `out_dir`.
    A checkpoint is also flushed if the run is interrupted or diverges.

    >>> trainer = CooperativeTrainer(cfg, dataset, "runs/mnist", [ProbeCallback(...)])
    >>> state = trainer.fit()
    """

    def __init__(
        self,
        cfg: TrainConfig,
        dataset: Dataset,
        out_dir: Pathish = "runs",
        callbacks: Sequence[TrainCallback] = [],
        show_progress: bool = False,
        log_name: str | int | loggi.LogName = loggi.LogName.CLASSNAME,
    ):
        """
        #### :params:
        * `cfg`: A validated training config.
        * `dataset`: Training data; items tagged `train` are used, or every item if none are tagged.
        * `out_dir`: Where logs, the JSON-lines loss log and checkpoints are written.
        * `callbacks`: Hooks run after each iteration (e.g. probe evaluation).
        * `show_progress`: Display a progress bar.
        """
        self.cfg = validate_config(cfg)
        self.out_dir = Pathier(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.init_logger(log_name, self.out_dir / "logs")
        train = dataset.split_of("train")
        self.train_data = train if len(train) else dataset
        if self.train_data.num_classes > cfg.num_classes:
            raise DatasetError(
                f"Dataset has {self.train_data.num_classes} classes but the config allows {cfg.num_classes}."
            )
        self.batch_labels = self.train_data.primary_labels
        if len(np.unique(self.batch_labels)) < 2:
            raise DatasetError("The training split needs items from at least 2 classes.")
        self.callbacks = list(callbacks)
        self.show_progress = show_progress
        self.label_sampler = LabelSampler.from_dataset(self.train_data)
        self.train_log = TrainLog(self.out_dir / "train_log.jsonl", cfg.log_wall_time)
        self.timer = Timer()

    def pretrain_chores(self):
        self.timer.start()
        self.logger.info(
            f"Training on {len(self.train_data)} items for {self.cfg.iterations} iterations with K={self.cfg.bits}, ablate={list(self.cfg.ablate)}."
        )
        self.cfg.save(self.out_dir / "config.json")

    def posttrain_chores(self):
        self.timer.stop()
        self.logger.info(f"Training completed in {self.timer.elapsed_str}.")
        self.logger.close()

    def _batch(self, state: TrainState) -> Batch:
        """The batch for `state.iteration`; depends only on `(seed, iteration)` and never touches `state.streams`."""
        indices = batch_indices(
            len(self.train_data), self.cfg.batch_size, self.cfg.seed, state.iteration, self.batch_labels
        )
        labels = self.train_data.conditioning_labels(
            indices, np.random.default_rng([self.cfg.seed, state.iteration, 2])
        )
        return Batch(
            torch.from_numpy(self.train_data.images[indices]).to(self.cfg.device),
            torch.as_tensor(labels, dtype=torch.long, device=self.cfg.device),
        )

    def save(self, state: TrainState) -> Pathier:
        path = self.out_dir / checkpoint_name(state.iteration)
        state.save(path, self.cfg)
        self.logger.info(f"Wrote checkpoint `{path.name}`.")
        return path

    def fit(self, state: TrainState | None = None) -> TrainState:
        """Train until `cfg.iterations`, resuming from `state` when given."""
        self.pretrain_chores()
        state = state or TrainState.initial(self.cfg)
        if state.iteration == 0:
            self.train_log.reset()
        for callback in self.callbacks:
            callback.on_train_start(state)
        try:
            for _ in track(
                range(state.iteration, self.cfg.iterations),
                description="Training",
                disable=not self.show_progress,
            ):
                step_timer = Timer()
                step_timer.start()
                state, report = train_step(state, self._batch(state), self.cfg, self.label_sampler)
                step_timer.stop()
                self.train_log.write(state.iteration, report, step_timer.elapsed * 1000)
                for callback in self.callbacks:
                    callback.on_iteration_end(state, report)
                if self.cfg.checkpoint_every and state.iteration % self.cfg.checkpoint_every == 0:
                    self.save(state)
        except (Exception, KeyboardInterrupt):
            self.logger.exception(f"Training stopped at iteration {state.iteration}.")
            self.save(state)
            self.posttrain_chores()
            raise
        self.save(state)
        for callback in self.callbacks:
            callback.on_train_end(state)
        self.posttrain_chores()
        return state


def fit(
    dataset: Dataset,
    cfg: TrainConfig,
    callbacks: Sequence[TrainCallback] = [],
    out_dir: Pathish = "runs",
    state: TrainState | None = None,
) -> TrainState:
    return CooperativeTrainer(cfg, dataset, out_dir, callbacks).fit(state)
