from dataclasses import dataclass

import torch
from typing_extensions import Callable, Self

from .core import ConfigError, LangevinDivergenceError, RandomStreams, TrainConfig
from .nets import Descriptor, Generator, draw_latent, frozen, generate

EnergyFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class LangevinConfig:
    """Step size `δ`, number of steps `T`, and whether iterates are projected back to `[-1, 1]`."""

    delta: float = 0.01
    steps: int = 15
    clamp: bool = True

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError(f"δ must be > 0 (got {self.delta}).")
        if self.steps < 0:
            raise ConfigError(f"T must be ≥ 0 (got {self.steps}).")

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> Self:
        return cls(cfg.langevin_step, cfg.langevin_steps, cfg.clamp)


def langevin_revise(
    x0: torch.Tensor,
    labels: torch.Tensor,
    energy_fn: EnergyFn,
    cfg: LangevinConfig,
    rng: torch.Generator,
) -> torch.Tensor:
    """
    Run `T` Langevin updates starting at `x0`:

    >>> x_{t+1} = x_t - (δ²/2) ∂f_E(x_t, c)/∂x + δ N(0, I)

    `energy_fn(x, labels)` returns one energy per sample.
    Only the gradient with respect to `x` is taken; whatever parameters `energy_fn` closes over are left alone.
    Raises `LangevinDivergenceError` with the step index if a gradient goes non-finite.
    """
    x = x0.detach().clone()
    half_step = 0.5 * cfg.delta**2
    for step in range(cfg.steps):
        x.requires_grad_(True)
        energy = energy_fn(x, labels).sum()
        (grad,) = torch.autograd.grad(energy, x)
        if not torch.isfinite(grad).all():
            raise LangevinDivergenceError(step)
        noise = torch.randn(tuple(x.shape), generator=rng).to(x.device, x.dtype)
        x = (x.detach() - half_step * grad + cfg.delta * noise).detach()
        if cfg.clamp:
            x = x.clamp(-1.0, 1.0)
    return x


@dataclass(frozen=True)
class CooperativeSample:
    """Generator proposals `x̂`, their Langevin revisions `x̃`, and the latent codes `ẑ` behind them."""

    x_hat: torch.Tensor
    x_tilde: torch.Tensor
    z_hat: torch.Tensor


def cooperative_sample(
    labels: torch.Tensor,
    generator: Generator,
    descriptor: Descriptor,
    cfg: TrainConfig,
    streams: RandomStreams,
) -> CooperativeSample:
    """
    Draw `ẑ ~ N(0, I)`, generate `x̂ = g(c, ẑ)`, then revise `x̂` under the energy head.

    Every chain is conditioned on its own label; descriptor parameters are frozen while sampling.
    """
    anchor = next(generator.parameters())
    z_hat = draw_latent(len(labels), generator.latent_dim, streams.latent, anchor)
    with torch.no_grad():
        x_hat = generate(generator, labels, z_hat)
    with frozen(descriptor):
        x_tilde = langevin_revise(
            x_hat, labels, descriptor.energy, LangevinConfig.from_config(cfg), streams.langevin
        )
    return CooperativeSample(x_hat, x_tilde, z_hat)
