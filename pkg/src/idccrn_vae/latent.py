"""Diagonal improper complex Gaussians N(mu, diag(sigma), diag(delta)).

``sigma`` is the variance E|z - mu|^2 and ``delta`` the relation
(pseudo-variance) E[(z - mu)^2].  Each coordinate is equivalent to a real
bivariate Gaussian on (Re z, Im z) with covariance

    1/2 * [[sigma + Re delta, Im delta], [Im delta, sigma - Re delta]]

and every KL divergence here is evaluated on that embedding.  All tensors
may carry arbitrary leading batch/frame axes; the latent axis is last.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInputError

PSD_MARGIN = 1e-6
LOG_VAR_CLAMP = 10.0


@dataclass
class ComplexDiagGaussian:
    mu: torch.Tensor
    sigma: torch.Tensor
    delta: torch.Tensor

    def __post_init__(self):
        if not (self.mu.shape == self.sigma.shape == self.delta.shape):
            raise InvalidInputError(
                f"parameter shapes differ: {tuple(self.mu.shape)}, "
                f"{tuple(self.sigma.shape)}, {tuple(self.delta.shape)}"
            )

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def shape(self):
        return self.mu.shape

    def is_valid(self) -> bool:
        with torch.no_grad():
            return bool(
                torch.isfinite(self.mu).all()
                and (self.sigma > 0).all()
                and (self.delta.abs() <= (1 - PSD_MARGIN) * self.sigma * (1 + 1e-12)).all()
            )

    def detach(self) -> "ComplexDiagGaussian":
        return ComplexDiagGaussian(self.mu.detach(), self.sigma.detach(), self.delta.detach())

    def __getitem__(self, idx) -> "ComplexDiagGaussian":
        return ComplexDiagGaussian(self.mu[idx], self.sigma[idx], self.delta[idx])


def standard_prior(shape, dtype=torch.float64, device=None) -> ComplexDiagGaussian:
    """N(0, I, 0) broadcast to ``shape`` (last axis = latent dimension)."""
    cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    return ComplexDiagGaussian(
        torch.zeros(shape, dtype=cdtype, device=device),
        torch.ones(shape, dtype=dtype, device=device),
        torch.zeros(shape, dtype=cdtype, device=device),
    )


def real_embedding(d: ComplexDiagGaussian):
    """Per-coordinate real mean ``(..., 2)`` and covariance ``(..., 2, 2)``."""
    mean = torch.stack([d.mu.real, d.mu.imag], dim=-1)
    c11 = 0.5 * (d.sigma + d.delta.real)
    c22 = 0.5 * (d.sigma - d.delta.real)
    c12 = 0.5 * d.delta.imag
    cov = torch.stack([torch.stack([c11, c12], -1), torch.stack([c12, c22], -1)], -2)
    return mean, cov


def _cov_entries(d: ComplexDiagGaussian):
    return 0.5 * (d.sigma + d.delta.real), 0.5 * d.delta.imag, 0.5 * (d.sigma - d.delta.real)


def sample(d: ComplexDiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterised draw using externally supplied standard normal noise.

    ``noise`` has shape ``d.shape + (2,)``; the draw is ``mu + A n`` with
    ``A`` the lower Cholesky factor of the 2x2 real covariance, read back as
    a complex number.  Differentiable in (mu, sigma, delta).
    """
    if noise.shape != d.shape + (2,):
        raise InvalidInputError(f"noise must have shape {tuple(d.shape) + (2,)}, got {tuple(noise.shape)}")
    if not torch.isfinite(noise).all():
        raise InvalidInputError("noise contains non-finite values")
    c11, c12, c22 = _cov_entries(d)
    a11 = torch.sqrt(c11)
    a21 = c12 / a11
    a22 = torch.sqrt(torch.clamp(c22 - a21 * a21, min=0.0))
    n1, n2 = noise[..., 0], noise[..., 1]
    return d.mu + torch.complex(a11 * n1, a21 * n1 + a22 * n2)


def sample_like(d: ComplexDiagGaussian, generator: torch.Generator | None = None) -> torch.Tensor:
    noise = torch.randn(d.shape + (2,), dtype=d.sigma.dtype, device=d.sigma.device, generator=generator)
    return sample(d, noise)


def _gauss2_kl(q: ComplexDiagGaussian, p: ComplexDiagGaussian) -> torch.Tensor:
    """Element-wise KL between the 2-D real embeddings, no reduction."""
    q11, q12, q22 = _cov_entries(q)
    p11, p12, p22 = _cov_entries(p)
    det_q = q11 * q22 - q12 * q12
    det_p = p11 * p22 - p12 * p12
    # Sigma_p^{-1} = [[p22, -p12], [-p12, p11]] / det_p
    trace = (p22 * q11 - 2 * p12 * q12 + p11 * q22) / det_p
    dm = p.mu - q.mu
    dx, dy = dm.real, dm.imag
    mahal = (p22 * dx * dx - 2 * p12 * dx * dy + p11 * dy * dy) / det_p
    return 0.5 * (trace + mahal - 2.0 + torch.log(det_p) - torch.log(det_q))


def kl_between(q: ComplexDiagGaussian, p: ComplexDiagGaussian) -> torch.Tensor:
    """KL(q || p) summed over the latent axis; leading axes are kept."""
    if q.shape != p.shape:
        raise InvalidInputError(f"dimension mismatch: {tuple(q.shape)} vs {tuple(p.shape)}")
    return _gauss2_kl(q, p).sum(-1)


def kl_to_prior(d: ComplexDiagGaussian) -> torch.Tensor:
    """KL(d || N(0, I, 0)) summed over the latent axis.

    Equals sum(sigma + |mu|^2 - 1 - log(sigma^2 - |delta|^2) / 2).
    """
    gap = d.sigma * d.sigma - d.delta.real ** 2 - d.delta.imag ** 2
    if (gap <= 0).any():
        raise InvalidInputError("sigma^2 - |delta|^2 must be positive")
    prior = ComplexDiagGaussian(torch.zeros_like(d.mu), torch.ones_like(d.sigma), torch.zeros_like(d.delta))
    return _gauss2_kl(d, prior).sum(-1)


def constrain_raw_outputs(raw_mu, raw_s, raw_t, raw_phase) -> ComplexDiagGaussian:
    """Map unconstrained head outputs into the valid parameter region.

    sigma = exp(clamp(raw_s, -10, 10)); |delta| = sigma (1 - 1e-6) tanh(raw_t)
    with phase ``raw_phase``.
    """
    if not (raw_mu.shape == raw_s.shape == raw_t.shape == raw_phase.shape):
        raise InvalidInputError("raw head outputs must have equal shapes")
    sigma = torch.exp(torch.clamp(raw_s, -LOG_VAR_CLAMP, LOG_VAR_CLAMP))
    if not torch.is_complex(raw_mu):
        raise InvalidInputError("raw_mu must be complex")
    rho = sigma * (1 - PSD_MARGIN) * torch.tanh(raw_t)
    delta = torch.complex(rho * torch.cos(raw_phase), rho * torch.sin(raw_phase))
    return ComplexDiagGaussian(raw_mu, sigma, delta)
