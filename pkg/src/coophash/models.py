from dataclasses import dataclass, field

import numpy as np
import torch
from typing_extensions import Any, Self

from .core import LOSS_NAMES, ConfigError, LabelError


@dataclass(frozen=True)
class LabeledImage:
    """A `(C, H, W)` pixel array in `[-1, 1]` and its integer label."""

    pixels: np.ndarray
    label: int

    def validate(self, num_classes: int) -> Self:
        if self.pixels.ndim != 3:
            raise ValueError(f"Expected a (C, H, W) array, got shape {self.pixels.shape}.")
        if self.pixels.size and (self.pixels.min() < -1 or self.pixels.max() > 1):
            raise ValueError("Pixel values must lie in [-1, 1].")
        if not 0 <= self.label < num_classes:
            raise LabelError(f"Label {self.label} is outside [0, {num_classes}).")
        return self


@dataclass(frozen=True)
class LatentCode:
    z: torch.Tensor

    def validate(self, latent_dim: int) -> Self:
        if self.z.shape[-1] != latent_dim:
            raise ValueError(
                f"Latent code has dimension {self.z.shape[-1]}, expected {latent_dim}."
            )
        if not torch.isfinite(self.z).all():
            raise ValueError("Latent code has non-finite entries.")
        return self


def sign(values: torch.Tensor | np.ndarray) -> np.ndarray:
    """Elementwise sign in `{-1, +1}` with `sign(0) = +1`."""
    values = np.asarray(values.detach().cpu() if isinstance(values, torch.Tensor) else values)
    return np.where(values >= 0, 1, -1).astype(np.int8)


@dataclass(frozen=True)
class HashCode:
    """The hash head's real output and its `{-1, +1}` binarization."""

    real_code: np.ndarray

    @property
    def bits(self) -> int:
        return self.real_code.shape[-1]

    @property
    def binary_code(self) -> np.ndarray:
        return sign(self.real_code)


@dataclass(frozen=True)
class DescriptorOutput:
    """
    Everything one pass of the descriptor produces for a batch.

    Shapes: `energy (B,)`, `post_mean (B, d)`, `post_logvar (B, d)`, `hash (B, K)`, `logits (B, L)`, `features (B, F)`.
    """

    energy: torch.Tensor
    post_mean: torch.Tensor
    post_logvar: torch.Tensor
    hash: torch.Tensor
    logits: torch.Tensor
    features: torch.Tensor

    @property
    def post_var(self) -> torch.Tensor:
        return self.post_logvar.exp()

    @property
    def is_finite(self) -> bool:
        return all(
            bool(torch.isfinite(tensor).all())
            for tensor in (self.energy, self.post_mean, self.post_var, self.hash, self.logits)
        )


@dataclass
class LossReport:
    """Scalar values of every objective for one iteration."""

    nll_surrogate: float = 0.0
    vae: float = 0.0
    triplet: float = 0.0
    classification: float = 0.0
    descriptor_total: float = 0.0
    generator_total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "nll_surrogate": self.nll_surrogate,
            "vae": self.vae,
            "triplet": self.triplet,
            "classification": self.classification,
            "descriptor_total": self.descriptor_total,
            "generator_total": self.generator_total,
        }

    def weighted_total(self, weights: dict[str, float]) -> float:
        """Recompute the descriptor objective from the components and `weights` (keys `VAE`, `TR`, `CLASS`)."""
        return (
            self.nll_surrogate
            + weights["VAE"] * self.vae
            + weights["TR"] * self.triplet
            + weights["CLASS"] * self.classification
        )


@dataclass(frozen=True)
class RankingResult:
    """Top-k items for one query, ordered by distance then item id."""

    query_id: int
    items: tuple[tuple[int, int], ...]
    k: int

    @property
    def ids(self) -> list[int]:
        return [item_id for item_id, _ in self.items]

    @property
    def distances(self) -> list[int]:
        return [distance for _, distance in self.items]


@dataclass(frozen=True)
class MetricResult:
    metric: str
    k: int
    value: float
    n_queries: int

    def as_dict(self) -> dict[str, Any]:
        return {"metric": self.metric, "k": self.k, "value": self.value, "n_queries": self.n_queries}


@dataclass(frozen=True)
class ExperimentSpec:
    """What a CLI invocation should run and where its artifacts go."""

    config_path: str | None
    train_source: str | None
    eval_source: str | None = None
    data_format: str = "idx"
    mode: str = "standard"
    ablate: tuple[str, ...] = field(default_factory=tuple)
    out_dir: str = "runs"

    def __post_init__(self):
        if self.mode not in ("standard", "ood", "ablation"):
            raise ConfigError(f"Unknown experiment mode `{self.mode}`.")
        if set(self.ablate) >= set(LOSS_NAMES):
            raise ConfigError("The ablation mask can't disable all four losses.")
