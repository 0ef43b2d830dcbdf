import math
from contextlib import contextmanager
from typing import TYPE_CHECKING, Iterator

import numpy as np
import torch
import torch.nn as nn
from typing_extensions import Sequence, override

from .core import LabelError, TrainConfig
from .models import DescriptorOutput

if TYPE_CHECKING:
    from .data import LabelSampler

INIT_STD = 0.02
MAX_CHANNELS = 128


def spatial_schedule(height: int, width: int) -> list[tuple[int, int]]:
    """
    Spatial sizes visited by the stride-2 stack, from the input size down to at most 4x4.

    e.g. 28x28 -> [(28, 28), (14, 14), (7, 7), (4, 4)]
    """
    sizes = [(height, width)]
    while max(sizes[-1]) > 4:
        h, w = sizes[-1]
        sizes.append((math.ceil(h / 2), math.ceil(w / 2)))
    return sizes


def channel_schedule(num_blocks: int) -> list[int]:
    return [min(32 * 2**i, MAX_CHANNELS) for i in range(num_blocks)]


def init_weights(module: nn.Module, rng: torch.Generator):
    """Zero-mean Gaussian weights with std 0.02 and zero biases, drawn from `rng`."""
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                param.copy_(
                    torch.randn(param.shape, generator=rng, dtype=torch.float32) * INIT_STD
                )


def check_labels(labels: torch.Tensor, num_classes: int):
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0].item()
        raise LabelError(f"Label {bad} is outside [0, {num_classes}).")


@contextmanager
def frozen(*modules: nn.Module) -> Iterator[None]:
    """Temporarily stop gradients from reaching the parameters of `modules`."""
    params = [param for module in modules for param in module.parameters()]
    flags = [param.requires_grad for param in params]
    for param in params:
        param.requires_grad_(False)
    try:
        yield
    finally:
        for param, flag in zip(params, flags):
            param.requires_grad_(flag)


def module_device(module: nn.Module) -> torch.device:
    return next(module.parameters()).device


class Generator(nn.Module):
    """Top-down decoder `g(c, z; Λ)`: label embedding ⊕ latent code -> image in `[-1, 1]`."""

    def __init__(
        self,
        image_shape: Sequence[int],
        latent_dim: int,
        num_classes: int,
        embed_dim: int = 16,
    ):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.latent_dim = latent_dim
        self.num_classes = num_classes
        channels, height, width = self.image_shape
        sizes = spatial_schedule(height, width)
        widths = channel_schedule(len(sizes))
        self.start_shape = (widths[-1], *sizes[-1])
        self.embedding = nn.Embedding(num_classes, embed_dim)
        self.project = nn.Sequential(
            nn.Linear(latent_dim + embed_dim, math.prod(self.start_shape)), nn.SiLU()
        )
        blocks: list[nn.Module] = []
        for i in range(len(sizes) - 1, 0, -1):
            (small_h, small_w), (big_h, big_w) = sizes[i], sizes[i - 1]
            blocks += [
                nn.ConvTranspose2d(
                    widths[i],
                    widths[i - 1],
                    3,
                    stride=2,
                    padding=1,
                    output_padding=(big_h - (2 * small_h - 1), big_w - (2 * small_w - 1)),
                ),
                nn.SiLU(),
            ]
        blocks += [nn.Conv2d(widths[0], channels, 3, padding=1), nn.Tanh()]
        self.decode = nn.Sequential(*blocks)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Generator":
        return cls(cfg.image_shape, cfg.latent_dim, cfg.num_classes, cfg.embed_dim)

    @override
    def forward(self, labels: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        check_labels(labels, self.num_classes)
        hidden = self.project(torch.cat([self.embedding(labels), z], dim=1))
        return self.decode(hidden.view(-1, *self.start_shape))


class Descriptor(nn.Module):
    """
    Bottom-up multipurpose network: one shared base `f_0` feeding four heads.

    * energy head `h_E(c, f_0(x))` -> scalar `f_E(x, c)`
    * inference head -> posterior mean and log-variance of `z` given `(x, c)`
    * hash head -> `K` reals in `(-1, 1)`
    * classifier `θ_C` of shape `(K, L)` applied to the hash head output
    """

    def __init__(
        self,
        image_shape: Sequence[int],
        latent_dim: int,
        num_classes: int,
        bits: int,
        feature_dim: int = 256,
        embed_dim: int = 16,
    ):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.latent_dim = latent_dim
        self.num_classes = num_classes
        self.bits = bits
        channels, height, width = self.image_shape
        sizes = spatial_schedule(height, width)
        widths = channel_schedule(len(sizes))
        layers: list[nn.Module] = [nn.Conv2d(channels, widths[0], 3, padding=1), nn.SiLU()]
        for i in range(1, len(sizes)):
            layers += [nn.Conv2d(widths[i - 1], widths[i], 3, stride=2, padding=1), nn.SiLU()]
        layers += [
            nn.Flatten(),
            nn.Linear(widths[-1] * math.prod(sizes[-1]), feature_dim),
            nn.SiLU(),
        ]
        self.base = nn.Sequential(*layers)
        self.energy_embedding = nn.Embedding(num_classes, embed_dim)
        self.energy_head = nn.Sequential(
            nn.Linear(feature_dim + embed_dim, feature_dim), nn.SiLU(), nn.Linear(feature_dim, 1)
        )
        self.inference_embedding = nn.Embedding(num_classes, embed_dim)
        self.inference_head = nn.Sequential(
            nn.Linear(feature_dim + embed_dim, feature_dim),
            nn.SiLU(),
            nn.Linear(feature_dim, 2 * latent_dim),
        )
        self.hash_head = nn.Sequential(
            nn.Linear(feature_dim, feature_dim), nn.SiLU(), nn.Linear(feature_dim, bits), nn.Tanh()
        )
        self.theta_c = nn.Parameter(torch.zeros(bits, num_classes))

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Descriptor":
        return cls(
            cfg.image_shape,
            cfg.latent_dim,
            cfg.num_classes,
            cfg.bits,
            cfg.feature_dim,
            cfg.embed_dim,
        )

    def head_views(self) -> dict[str, list[nn.Parameter]]:
        """Parameter groups `Θ_E`, `Θ_I`, `Θ_H`, `Θ_C`; the first three hold the very same `θ_0` tensors."""
        base = list(self.base.parameters())
        return {
            "energy": base
            + list(self.energy_embedding.parameters())
            + list(self.energy_head.parameters()),
            "inference": base
            + list(self.inference_embedding.parameters())
            + list(self.inference_head.parameters()),
            "hash": base + list(self.hash_head.parameters()),
            "class": base + list(self.hash_head.parameters()) + [self.theta_c],
        }

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x)

    def energy_from_features(self, features: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        hidden = torch.cat([features, self.energy_embedding(labels)], dim=1)
        return self.energy_head(hidden).squeeze(-1)

    def energy(self, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """`f_E(x, c)` for a batch; only the base and the energy head run."""
        check_labels(labels, self.num_classes)
        return self.energy_from_features(self.base(x), labels)

    def posterior(self, x: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Mean and log-variance of `π(z | x, c)`."""
        check_labels(labels, self.num_classes)
        hidden = torch.cat([self.base(x), self.inference_embedding(labels)], dim=1)
        mean, logvar = self.inference_head(hidden).chunk(2, dim=1)
        return mean, logvar

    def hash(self, x: torch.Tensor) -> torch.Tensor:
        return self.hash_head(self.base(x))

    @override
    def forward(self, x: torch.Tensor, labels: torch.Tensor) -> DescriptorOutput:
        check_labels(labels, self.num_classes)
        features = self.base(x)
        energy = self.energy_from_features(features, labels)
        hidden = torch.cat([features, self.inference_embedding(labels)], dim=1)
        mean, logvar = self.inference_head(hidden).chunk(2, dim=1)
        hash_ = self.hash_head(features)
        return DescriptorOutput(
            energy=energy,
            post_mean=mean,
            post_logvar=logvar,
            hash=hash_,
            logits=hash_ @ self.theta_c,
            features=features,
        )


def build_networks(cfg: TrainConfig, rng: torch.Generator) -> tuple[Generator, Descriptor]:
    """Construct and initialize both networks from `cfg` on `cfg.device`."""
    generator = Generator.from_config(cfg)
    descriptor = Descriptor.from_config(cfg)
    init_weights(generator, rng)
    init_weights(descriptor, rng)
    return generator.to(cfg.device), descriptor.to(cfg.device)


def draw_noise(
    shape: Sequence[int], sigma: float, rng: torch.Generator, like: torch.Tensor
) -> torch.Tensor:
    """`ε ~ N(0, σ² I)` drawn on the CPU stream `rng` and moved next to `like`."""
    return (torch.randn(tuple(shape), generator=rng) * sigma).to(like.device, like.dtype)


def draw_latent(count: int, latent_dim: int, rng: torch.Generator, like: torch.Tensor) -> torch.Tensor:
    """`z ~ N(0, I_d)` for `count` chains."""
    return torch.randn((count, latent_dim), generator=rng).to(like.device, like.dtype)


def generate(
    generator: Generator,
    labels: torch.Tensor,
    z: torch.Tensor,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """`x = g(c, z; Λ) + ε`; deterministic in `(c, z, Λ)` when `noise` is omitted."""
    images = generator(labels, z)
    if noise is not None:
        images = images + noise
    return images


def generate_contrastive_pair(
    generator: Generator,
    c_plus: torch.Tensor,
    z: torch.Tensor,
    label_sampler: "LabelSampler",
    data_rng: np.random.Generator,
    noise_rng: torch.Generator | None = None,
    sigma: float = 0.3,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Synthesize `(x⁺, x⁻, c⁻)` for a batch of anchor labels `c_plus`.

    `c⁻` is drawn from the label histogram with `c⁺` removed.
    Both images share the latent code `z` and, when `noise_rng` is given, the same `ε`.
    """
    c_minus_np = label_sampler.sample_negatives(c_plus.cpu().numpy(), data_rng)
    c_minus = torch.as_tensor(c_minus_np, dtype=torch.long, device=c_plus.device)
    noise = None
    if noise_rng is not None:
        noise = draw_noise((len(c_plus), *generator.image_shape), sigma, noise_rng, z)
    x_plus = generate(generator, c_plus, z, noise)
    x_minus = generate(generator, c_minus, z, noise)
    return x_plus, x_minus, c_minus


def descriptor_forward(descriptor: Descriptor, x: torch.Tensor, labels: torch.Tensor) -> DescriptorOutput:
    return descriptor(x, labels)


def reparameterize(
    mean: torch.Tensor, logvar: torch.Tensor, rng: torch.Generator, noise_scale: float = 1.0
) -> torch.Tensor:
    """`z = μ + sqrt(v) ⊙ ε`, with `ε ~ N(0, I)` from `rng` scaled by `noise_scale`."""
    eps = torch.randn(tuple(mean.shape), generator=rng).to(mean.device, mean.dtype)
    return mean + (0.5 * logvar).exp() * eps * noise_scale


def infer_latent(
    descriptor: Descriptor,
    x: torch.Tensor,
    labels: torch.Tensor,
    rng: torch.Generator,
    noise_scale: float = 1.0,
) -> torch.Tensor:
    """
    Sample `z ~ π(z | x, c)` through the inference head.

    `noise_scale=0` collapses the variance and returns `μ(x, c)` exactly.
    """
    mean, logvar = descriptor.posterior(x, labels)
    return reparameterize(mean, logvar, rng, noise_scale)


def predict_labels(descriptor: Descriptor, x: torch.Tensor) -> torch.Tensor:
    """Discriminative head prediction, used when a query's label is unknown."""
    return (descriptor.hash(x) @ descriptor.theta_c).argmax(dim=1)


def reconstruct(
    generator: Generator,
    descriptor: Descriptor,
    x: torch.Tensor,
    labels: torch.Tensor | None = None,
) -> torch.Tensor:
    """
    `g(c, μ(x, c))`, the noise-free reconstruction of `x`.

    When `labels` is `None` the discriminative head's prediction is used for `c`.
    """
    if labels is None:
        labels = predict_labels(descriptor, x)
    mean, _ = descriptor.posterior(x, labels)
    return generator(labels, mean)
