from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import LossError, TrainConfig
from .models import LossReport
from .nets import Descriptor, Generator, check_labels, frozen, reparameterize


def energy_gap(real_energy: torch.Tensor, synth_energy: torch.Tensor) -> torch.Tensor:
    """`mean f_E(real) - mean f_E(synth)`, the surrogate whose gradient is the contrastive NLL gradient."""
    if real_energy.shape[0] != synth_energy.shape[0]:
        raise LossError(
            f"Real and synthetic batches differ in size ({real_energy.shape[0]} vs {synth_energy.shape[0]})."
        )
    return real_energy.mean() - synth_energy.mean()


def energy_magnitude(real_energy: torch.Tensor, synth_energy: torch.Tensor) -> torch.Tensor:
    """`mean f_E(real)² + mean f_E(synth)²`, the penalty that keeps the energy gap bounded."""
    return real_energy.pow(2).mean() + synth_energy.pow(2).mean()


def nll_surrogate(
    descriptor: Descriptor,
    real_x: torch.Tensor,
    real_c: torch.Tensor,
    synth_x: torch.Tensor,
    synth_c: torch.Tensor,
) -> torch.Tensor:
    """Negative log-likelihood surrogate; synthetic images are treated as constants."""
    if real_x.shape[0] != synth_x.shape[0]:
        raise LossError(
            f"Real and synthetic batches differ in size ({real_x.shape[0]} vs {synth_x.shape[0]})."
        )
    return energy_gap(descriptor.energy(real_x, real_c), descriptor.energy(synth_x.detach(), synth_c))


def gaussian_kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample `KL(N(μ, diag v) || N(0, I)) = ½ Σ (v + μ² - 1 - log v)`."""
    return 0.5 * (logvar.exp() + mean.pow(2) - 1.0 - logvar).sum(dim=-1)


def reconstruction_error(
    target: torch.Tensor, reconstruction: torch.Tensor, sigma: float
) -> torch.Tensor:
    """Per-sample `‖x - g(c, z)‖² / (2σ²)`."""
    return (target - reconstruction).pow(2).flatten(1).sum(dim=1) / (2 * sigma**2)


def _variational_bound(
    x: torch.Tensor,
    labels: torch.Tensor,
    generator: Generator,
    mean: torch.Tensor,
    logvar: torch.Tensor,
    gamma: float,
    sigma: float,
    rng: torch.Generator,
) -> torch.Tensor:
    # non-finite heads fall through to the caller's divergence check
    finite = bool(torch.isfinite(mean).all()) and bool(torch.isfinite(logvar).all())
    if finite and not bool((logvar.exp() > 0).all()):
        raise LossError("Posterior variance must be strictly positive.")
    z = reparameterize(mean, logvar, rng)
    recon = reconstruction_error(x, generator(labels, z), sigma)
    return (recon + gamma * gaussian_kl(mean, logvar)).mean()


def vae_loss(
    x_tilde: torch.Tensor,
    labels: torch.Tensor,
    generator: Generator,
    descriptor: Descriptor,
    gamma: float,
    sigma: float,
    rng: torch.Generator,
) -> torch.Tensor:
    """
    Variational bound on `-log p(x̃ | c; Λ)` with the inference head as encoder.

    Reconstruction `‖x̃ - g(c, z_q)‖² / (2σ²)` plus `γ·KL(π(z | x̃, c) || N(0, I))`, averaged over the batch.
    `x̃` is detached; gradients reach both the inference head (with the base) and the generator.
    """
    x_tilde = x_tilde.detach()
    mean, logvar = descriptor.posterior(x_tilde, labels)
    return _variational_bound(x_tilde, labels, generator, mean, logvar, gamma, sigma, rng)


def generator_loss(
    x_tilde: torch.Tensor,
    labels: torch.Tensor,
    generator: Generator,
    descriptor: Descriptor,
    gamma: float,
    sigma: float,
    rng: torch.Generator,
) -> torch.Tensor:
    """Same value as `vae_loss` for the same inputs and `rng` state, but only `Λ` receives gradients."""
    x_tilde = x_tilde.detach()
    with torch.no_grad():
        mean, logvar = descriptor.posterior(x_tilde, labels)
    return _variational_bound(x_tilde, labels, generator, mean, logvar, gamma, sigma, rng)


def triplet_ranking_loss(
    h: torch.Tensor,
    h_plus: torch.Tensor,
    h_minus: torch.Tensor,
    margin: float,
    lambda_q: float,
) -> torch.Tensor:
    """
    `‖h - h⁺‖ + max(m - ‖h - h⁻‖, 0) + λ(‖|h| - 1‖ + ‖|h⁺| - 1‖ + ‖|h⁻| - 1‖)`.

    Accepts single codes `(K,)` or batches `(B, K)`; batches are averaged.
    """
    if not h.shape == h_plus.shape == h_minus.shape:
        raise LossError(
            f"Triplet codes must share a shape, got {tuple(h.shape)}, {tuple(h_plus.shape)}, {tuple(h_minus.shape)}."
        )
    similar = torch.linalg.vector_norm(h - h_plus, dim=-1)
    dissimilar = torch.clamp(margin - torch.linalg.vector_norm(h - h_minus, dim=-1), min=0)
    quantization = sum(
        torch.linalg.vector_norm(code.abs() - 1, dim=-1) for code in (h, h_plus, h_minus)
    )
    return (similar + dissimilar + lambda_q * quantization).mean()


def classification_loss(
    hash_real: torch.Tensor, labels: torch.Tensor, theta_c: torch.Tensor
) -> torch.Tensor:
    """Mean cross-entropy of `softmax(θ_Cᵀ h)` against `labels`."""
    check_labels(labels, theta_c.shape[1])
    return F.cross_entropy(hash_real @ theta_c, labels)


@dataclass(frozen=True)
class TripletBatch:
    """
    Positives and negatives for the real anchors of a batch.

    `x_plus`/`x_minus` are synthetic images, one pair per anchor.
    `real_positive`/`real_negative` index into the real batch for real-real triplets.
    Either kind may be absent.
    """

    x_plus: torch.Tensor | None = None
    x_minus: torch.Tensor | None = None
    real_positive: torch.Tensor | None = None
    real_negative: torch.Tensor | None = None

    @property
    def has_synthetic(self) -> bool:
        return self.x_plus is not None and self.x_minus is not None

    @property
    def has_real(self) -> bool:
        return self.real_positive is not None and self.real_negative is not None


def _triplet_codes(
    descriptor: Descriptor, anchor_hash: torch.Tensor, triplets: TripletBatch
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    anchors: list[torch.Tensor] = []
    positives: list[torch.Tensor] = []
    negatives: list[torch.Tensor] = []
    if triplets.has_synthetic:
        assert triplets.x_plus is not None and triplets.x_minus is not None
        pair_hash = descriptor.hash(torch.cat([triplets.x_plus, triplets.x_minus]).detach())
        h_plus, h_minus = pair_hash.chunk(2)
        anchors.append(anchor_hash)
        positives.append(h_plus)
        negatives.append(h_minus)
    if triplets.has_real:
        assert triplets.real_positive is not None and triplets.real_negative is not None
        anchors.append(anchor_hash)
        positives.append(anchor_hash[triplets.real_positive])
        negatives.append(anchor_hash[triplets.real_negative])
    return torch.cat(anchors), torch.cat(positives), torch.cat(negatives)


def descriptor_loss(
    real_x: torch.Tensor,
    real_c: torch.Tensor,
    x_tilde: torch.Tensor | None,
    triplets: TripletBatch | None,
    cfg: TrainConfig,
    descriptor: Descriptor,
    generator: Generator,
    rng: torch.Generator,
) -> tuple[torch.Tensor, LossReport]:
    """
    `L_NLL + β_I·L_VAE + β_H·L_TR + β_C·L_CLASS` for one batch.

    Returns the differentiable total and a `LossReport` of its components.
    Masked objectives (zero weight or listed in `cfg.ablate`) are skipped and reported as 0.
    The NLL term carries `cfg.energy_penalty` times the squared energy magnitudes.
    When `x_tilde` is `None` (synthesis disabled) the NLL term is 0 and the VAE term fits the real batch.
    Gradients reach every descriptor parameter; the generator is frozen.
    """
    weights = cfg.loss_weights
    zero = real_x.new_zeros(())
    out = descriptor(real_x, real_c)
    nll = zero
    if x_tilde is not None and not cfg.is_ablated("NLL"):
        synth_energy = descriptor.energy(x_tilde.detach(), real_c)
        nll = energy_gap(out.energy, synth_energy)
        if cfg.energy_penalty > 0:
            nll = nll + cfg.energy_penalty * energy_magnitude(out.energy, synth_energy)
    vae = zero
    if weights["VAE"] > 0:
        target = x_tilde if x_tilde is not None else real_x
        with frozen(generator):
            vae = vae_loss(target, real_c, generator, descriptor, cfg.gamma, cfg.sigma, rng)
    triplet = zero
    if weights["TR"] > 0 and triplets is not None and (triplets.has_synthetic or triplets.has_real):
        h, h_plus, h_minus = _triplet_codes(descriptor, out.hash, triplets)
        triplet = triplet_ranking_loss(
            h, h_plus, h_minus, cfg.triplet_margin, cfg.quantization_weight
        )
    classification = zero
    if weights["CLASS"] > 0:
        classification = classification_loss(out.hash, real_c, descriptor.theta_c)
    total = nll + weights["VAE"] * vae + weights["TR"] * triplet + weights["CLASS"] * classification
    report = LossReport(
        nll_surrogate=nll.item(),
        vae=vae.item(),
        triplet=triplet.item(),
        classification=classification.item(),
    )
    report.descriptor_total = report.weighted_total(weights)
    return total, report
