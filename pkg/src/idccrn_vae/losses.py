"""Training objectives for pretraining, latent matching and fine-tuning."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInputError
from .latent import ComplexDiagGaussian, kl_between, kl_to_prior


@dataclass
class LossWeights:
    beta: float = 0.01
    alpha: float = 1.0
    adv_weight: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("beta", "alpha", "adv_weight", "epsilon"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be nonnegative")


def _bins(x):
    return x.bins if hasattr(x, "bins") else x


def recon_loss(est, ref) -> torch.Tensor:
    """Complex plus magnitude squared error, summed over bins, averaged over frames.

    Inputs are (..., F, N); leading axes (batch) are averaged as well.
    """
    e, r = _bins(est), _bins(ref)
    if e.shape != r.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(e.shape)} vs {tuple(r.shape)}")
    per_bin = (r - e).abs() ** 2 + (r.abs() - e.abs()) ** 2
    return per_bin.sum(-2).mean()


def frame_kl(dist: ComplexDiagGaussian) -> torch.Tensor:
    """KL to the prior averaged over frames (and batch)."""
    return kl_to_prior(dist).mean()


def pretrain_loss(dist: ComplexDiagGaussian, est, ref, w: LossWeights) -> torch.Tensor:
    return recon_loss(est, ref) + w.beta * frame_kl(dist)


def nsvae_loss(
    speech_q: ComplexDiagGaussian,
    speech_p: ComplexDiagGaussian,
    noise_q: ComplexDiagGaussian | None,
    noise_p: ComplexDiagGaussian | None,
    w: LossWeights,
) -> torch.Tensor:
    """Frame-averaged KL(q(z_x|Y) || q(z_x|X)) + alpha KL(q(z_v|Y) || q(z_v|V)).

    The targets (``*_p``) are detached here so no gradient reaches the
    pretrained encoders even if the caller forgot ``no_grad``.
    """
    if speech_q.shape != speech_p.shape:
        raise InvalidInputError(f"speech sequences differ: {tuple(speech_q.shape)} vs {tuple(speech_p.shape)}")
    loss = kl_between(speech_q, speech_p.detach()).mean()
    if w.alpha == 0:
        return loss
    if noise_q is None or noise_p is None:
        raise InvalidInputError("alpha > 0 needs both noise posteriors")
    if noise_q.shape != noise_p.shape or noise_q.shape != speech_q.shape:
        raise InvalidInputError("noise and speech sequences must have equal lengths")
    return loss + w.alpha * kl_between(noise_q, noise_p.detach()).mean()


def _project(est: torch.Tensor, ref: torch.Tensor, eps: float = 0.0):
    ref_energy = (ref * ref).sum(-1, keepdim=True)
    scale = (est * ref).sum(-1, keepdim=True) / (ref_energy + eps)
    target = scale * ref
    return target, target - est


def si_sdr_loss(est: torch.Tensor, ref: torch.Tensor, epsilon: float = 1e-8) -> torch.Tensor:
    """Negative SI-SDR in dB, averaged over leading axes.

    ``epsilon`` floors both the projected-target and distortion energies.
    """
    if est.shape != ref.shape:
        raise InvalidInputError(f"length mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    if ((ref * ref).sum(-1) <= epsilon).any():
        raise InvalidInputError("reference signal has (near) zero energy")
    target, distortion = _project(est, ref)
    num = (target * target).sum(-1).clamp_min(epsilon)
    den = (distortion * distortion).sum(-1) + epsilon
    return (-10 * torch.log10(num / den)).mean()


def adversarial_losses(disc_real: torch.Tensor, disc_fake: torch.Tensor):
    """Least-squares GAN terms: returns ``(generator_term, discriminator_term)``."""
    disc_term = 0.5 * (disc_real - 1) ** 2 + 0.5 * disc_fake ** 2
    gen_term = 0.5 * (disc_fake - 1) ** 2
    return gen_term.mean(), disc_term.mean()
