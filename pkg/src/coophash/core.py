import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from pathier import Pathier, Pathish
from typing_extensions import Any, Self

LOSS_NAMES = ("NLL", "VAE", "TR", "CLASS")


class CoopHashError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(CoopHashError):
    ...


class DatasetError(CoopHashError):
    ...


class LabelError(CoopHashError, ValueError):
    ...


class LossError(CoopHashError, ValueError):
    ...


class CheckpointError(CoopHashError):
    ...


class HashIndexError(CoopHashError):
    ...


class LangevinDivergenceError(CoopHashError):
    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"Non-finite energy gradient at Langevin step {step}.")


class TrainingDivergedError(CoopHashError):
    def __init__(self, component: str, iteration: int):
        self.component = component
        self.iteration = iteration
        super().__init__(
            f"Loss component `{component}` became non-finite at iteration {iteration}."
        )


@dataclass(frozen=True)
class TrainConfig:
    """
    Every hyperparameter of a training run.

    The JSON config file holds exactly these field names.
    Symbols in error messages follow the usual notation:
    `K` bits, `d` latent dim, `L` classes, `σ` generator noise, `δ` Langevin step,
    `T` Langevin steps, `γ` KL weight, `β_I/β_H/β_C` loss weights, `m` margin, `λ` quantization weight.
    `energy_penalty` weighs the squared energies added to the NLL term.
    """

    bits: int = 16
    latent_dim: int = 64
    num_classes: int = 10
    channels: int = 1
    height: int = 28
    width: int = 28
    sigma: float = 0.3
    langevin_step: float = 0.01
    langevin_steps: int = 15
    clamp: bool = True
    gamma: float = 1.0
    beta_inference: float = 1.0
    beta_hash: float = 1.0
    beta_class: float = 0.1
    margin: float | None = None
    quantization_weight: float = 0.1
    energy_penalty: float = 1.0
    batch_size: int = 64
    descriptor_lr: float = 2e-4
    generator_lr: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    iterations: int = 10000
    seed: int = 0
    feature_dim: int = 256
    embed_dim: int = 16
    real_triplets: bool = False
    revise_pairs: bool = False
    ablate: tuple[str, ...] = field(default_factory=tuple)
    probe_every: int = 500
    checkpoint_every: int = 0
    probe_k: int = 100
    train_size: int = 5000
    query_size: int = 1000
    database_size: int = 10000
    device: str = "cpu"
    log_wall_time: bool = True

    def __post_init__(self):
        # JSON gives lists; keep the dataclass hashable and comparable
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "ablate", tuple(self.ablate))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def triplet_margin(self) -> float:
        """`margin` or, when unset, `√K` (half the largest possible distance between tanh codes)."""
        if self.margin is None:
            return math.sqrt(self.bits)
        return self.margin

    def is_ablated(self, loss: str) -> bool:
        return loss in self.ablate

    @property
    def loss_weights(self) -> dict[str, float]:
        """The β weights after the ablation mask has zeroed masked objectives."""
        return {
            "VAE": 0.0 if self.is_ablated("VAE") else self.beta_inference,
            "TR": 0.0 if self.is_ablated("TR") else self.beta_hash,
            "CLASS": 0.0 if self.is_ablated("CLASS") else self.beta_class,
        }

    def to_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["adam_betas"] = list(self.adam_betas)
        data["ablate"] = list(self.ablate)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Self:
        """Build a config from `data`, rejecting keys that aren't config fields."""
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}.")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: Pathish) -> Self:
        path = Pathier(path)
        if not path.exists():
            raise ConfigError(f"Config file `{path}` does not exist.")
        try:
            data = path.json_loads()
        except ValueError as e:
            raise ConfigError(f"Config file `{path}` is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file `{path}` must hold a JSON object.")
        return cls.from_dict(data)

    def save(self, path: Pathish):
        Pathier(path).json_dumps(self.to_dict())


def validate_config(cfg: TrainConfig) -> TrainConfig:
    """Return `cfg` unchanged if every constraint holds, otherwise raise `ConfigError` naming the first violation."""
    positive: list[tuple[str, float]] = [
        ("K", cfg.bits),
        ("d", cfg.latent_dim),
        ("channels", cfg.channels),
        ("height", cfg.height),
        ("width", cfg.width),
        ("σ", cfg.sigma),
        ("δ", cfg.langevin_step),
        ("batch size", cfg.batch_size),
        ("descriptor lr", cfg.descriptor_lr),
        ("feature_dim", cfg.feature_dim),
        ("embed_dim", cfg.embed_dim),
        ("probe_k", cfg.probe_k),
    ]
    for name, value in positive:
        if not value > 0:
            raise ConfigError(f"{name} must be > 0 (got {value}).")
    if cfg.batch_size < 2:
        raise ConfigError(f"batch size must be ≥ 2 (got {cfg.batch_size}).")
    if cfg.num_classes < 2:
        raise ConfigError(f"L must be ≥ 2 (got {cfg.num_classes}).")
    non_negative: list[tuple[str, float]] = [
        ("T", cfg.langevin_steps),
        ("γ", cfg.gamma),
        ("β_I", cfg.beta_inference),
        ("β_H", cfg.beta_hash),
        ("β_C", cfg.beta_class),
        ("λ", cfg.quantization_weight),
        ("energy_penalty", cfg.energy_penalty),
        ("generator lr", cfg.generator_lr),
        ("iterations", cfg.iterations),
        ("probe_every", cfg.probe_every),
        ("checkpoint_every", cfg.checkpoint_every),
        ("train_size", cfg.train_size),
        ("query_size", cfg.query_size),
        ("database_size", cfg.database_size),
    ]
    for name, value in non_negative:
        if value < 0:
            raise ConfigError(f"{name} must be ≥ 0 (got {value}).")
    if cfg.margin is not None and not cfg.margin > 0:
        raise ConfigError(f"margin must be > 0 (got {cfg.margin}).")
    if not all(0 <= beta < 1 for beta in cfg.adam_betas) or len(cfg.adam_betas) != 2:
        raise ConfigError(f"adam_betas must be two values in [0, 1) (got {cfg.adam_betas}).")
    if cfg.seed < 0:
        raise ConfigError(f"seed must be ≥ 0 (got {cfg.seed}).")
    unknown = [name for name in cfg.ablate if name not in LOSS_NAMES]
    if unknown:
        raise ConfigError(
            f"Unknown ablation targets {unknown}; choose from {list(LOSS_NAMES)}."
        )
    if set(cfg.ablate) >= set(LOSS_NAMES):
        raise ConfigError("The ablation mask can't disable all four losses.")
    return cfg


def seeded_rng(seed: int) -> torch.Generator:
    """Returns a CPU `torch.Generator` seeded with `seed`; identical seeds give identical draws."""
    generator = torch.Generator(device="cpu")
    generator.manual_seed(seed)
    return generator


@dataclass
class RandomStreams:
    """
    Per-purpose random substreams fanned out from one global seed.

    * `data`: numpy stream for label draws and batch-level bookkeeping
    * `latent`: latent code draws for the generator
    * `noise`: generator observation noise ε
    * `langevin`: Langevin noise
    * `inference`: reparameterization noise for the inference head

    Each stream has a single owner; don't share one between threads.
    """

    data: np.random.Generator
    latent: torch.Generator
    noise: torch.Generator
    langevin: torch.Generator
    inference: torch.Generator

    _torch_streams = ("latent", "noise", "langevin", "inference")

    @classmethod
    def from_seed(cls, seed: int) -> Self:
        children = np.random.SeedSequence(seed).spawn(5)
        torch_seeds = [int(child.generate_state(1, np.uint64)[0] >> 1) for child in children[1:]]
        return cls(
            np.random.default_rng(children[0]),
            *(seeded_rng(torch_seed) for torch_seed in torch_seeds),
        )

    def state(self) -> dict[str, Any]:
        """Returns the numpy state dict and the raw torch generator states."""
        return {
            "data": self.data.bit_generator.state,
            **{name: getattr(self, name).get_state() for name in self._torch_streams},
        }

    def restore(self, state: dict[str, Any]):
        self.data.bit_generator.state = state["data"]
        for name in self._torch_streams:
            getattr(self, name).set_state(state[name])
