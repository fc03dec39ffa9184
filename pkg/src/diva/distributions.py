"""Probability primitives shared by all objectives.

Diagonal Gaussians with reparameterized sampling and closed-form KL,
categorical distributions, and the Bernoulli pixel reconstruction
likelihood. Everything here is a pure function of torch tensors and is
written to broadcast over a leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

# Scales below this are clamped before they enter any KL or log-density.
SCALE_FLOOR = 1e-6

# Probabilities are clamped here before a log in marginalization sums.
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianParams:
    """Mean and standard deviation of a diagonal Gaussian, shape (..., dim)."""

    mean: torch.Tensor
    scale: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.scale.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != scale shape "
                f"{tuple(self.scale.shape)}"
            )
        if not torch.all(self.scale > 0):
            raise ValueError("scale must be strictly positive in every dimension")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass(frozen=True)
class CategoricalParams:
    """Probabilities over K outcomes, shape (..., K). Rows sum to 1."""

    probs: torch.Tensor

    def __post_init__(self):
        if torch.any(self.probs < 0):
            raise ValueError("probabilities must be nonnegative")
        total = self.probs.sum(dim=-1)
        if not torch.all((total - 1.0).abs() <= 1e-6):
            raise ValueError("probabilities must sum to 1 within 1e-6")

    @property
    def num_outcomes(self) -> int:
        return self.probs.shape[-1]


def standard_normal(dim: int, *, dtype=torch.float32, device=None) -> GaussianParams:
    """The fixed prior N(0, I) of the residual subspace."""
    return GaussianParams(
        mean=torch.zeros(dim, dtype=dtype, device=device),
        scale=torch.ones(dim, dtype=dtype, device=device),
    )


def uniform_categorical(k: int, *, dtype=torch.float32, device=None) -> CategoricalParams:
    """The fixed uniform prior over domains or classes."""
    return CategoricalParams(probs=torch.full((k,), 1.0 / k, dtype=dtype, device=device))


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over dims.

    Broadcasts over leading batch dimensions; returns shape (...,).
    """
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    q_scale = q.scale.clamp_min(SCALE_FLOOR)
    p_scale = p.scale.clamp_min(SCALE_FLOOR)
    var_ratio = (q_scale / p_scale) ** 2
    mean_term = ((q.mean - p.mean) / p_scale) ** 2
    return 0.5 * (var_ratio + mean_term - 1.0 - torch.log(var_ratio)).sum(dim=-1)


def gaussian_log_density(g: GaussianParams, z: torch.Tensor) -> torch.Tensor:
    """log N(z; mean, diag(scale^2)), summed over the last dimension."""
    if z.shape[-1] != g.dim:
        raise ValueError(f"dimension mismatch: z has {z.shape[-1]}, params have {g.dim}")
    scale = g.scale.clamp_min(SCALE_FLOOR)
    log_two_pi = torch.log(torch.tensor(2.0 * torch.pi, dtype=z.dtype, device=z.device))
    return (
        -0.5 * (((z - g.mean) / scale) ** 2 + log_two_pi) - torch.log(scale)
    ).sum(dim=-1)


def reparam_sample(g: GaussianParams, noise: torch.Tensor) -> torch.Tensor:
    """mean + scale * noise. Differentiable w.r.t. mean and scale."""
    if noise.shape[-1] != g.dim:
        raise ValueError(
            f"dimension mismatch: noise has {noise.shape[-1]}, params have {g.dim}"
        )
    return g.mean + g.scale * noise


def recon_log_lik(x: torch.Tensor, decoder_logits: torch.Tensor) -> torch.Tensor:
    """Per-example Bernoulli log-likelihood of pixels, summed over pixels.

    `x` holds continuous targets in [0, 1] with shape (B, C, H, W) and
    `decoder_logits` the matching per-pixel logits. Returns shape (B,).
    """
    if x.shape != decoder_logits.shape:
        raise ValueError(
            f"shape mismatch: x {tuple(x.shape)} vs logits {tuple(decoder_logits.shape)}"
        )
    if torch.any(x < 0) or torch.any(x > 1):
        raise ValueError("pixel targets must lie in [0, 1]")
    per_pixel = -F.binary_cross_entropy_with_logits(decoder_logits, x, reduction="none")
    return per_pixel.flatten(start_dim=1).sum(dim=-1)


def categorical_log_prob(c: CategoricalParams, k) -> torch.Tensor:
    """log probs[..., k]; `k` may be an int or a batch of indices."""
    k = torch.as_tensor(k)
    if torch.any(k < 0) or torch.any(k >= c.num_outcomes):
        raise ValueError(f"index out of range for {c.num_outcomes} outcomes")
    probs = c.probs.clamp_min(PROB_FLOOR)
    if probs.dim() == 1:
        return torch.log(probs[k])
    return torch.log(probs.gather(-1, k.unsqueeze(-1)).squeeze(-1))
