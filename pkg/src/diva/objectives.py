"""Training objectives: supervised and unsupervised bounds, auxiliary
classifier terms, the semi-supervised combination, the labeled-ratio rule
for the class-loss weight, the KL warm-up schedule, and the single-latent
ablation objective.

All objectives are maximized; the trainer consumes negated totals. Every
component is a per-example value (reconstruction summed over pixels, KL
summed over latent dimensions) averaged over the batch, so the weighting
constants apply at the per-example level.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .distributions import (
    PROB_FLOOR,
    gaussian_kl,
    recon_log_lik,
    gaussian_log_density,
    reparam_sample,
    standard_normal,
    uniform_categorical,
)
from .model import Checkpoint, DivaModel, LatentTriple, SingleLatentVae


@dataclass(frozen=True)
class ObjectiveWeights:
    beta: float = 1.0
    alpha_d: float = 2000.0
    alpha_y: float = 3500.0

    def __post_init__(self):
        if min(self.beta, self.alpha_d, self.alpha_y) < 0:
            raise ValueError("objective weights must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-example-average components of one objective evaluation.

    ``total`` always recomposes as

        recon - beta * (kl_d + kl_x + kl_y)
        + alpha_d * aux_d + alpha_y * aux_y + class_marginal_terms

    where ``alpha_d``/``alpha_y`` are the *effective* weights stored here
    (zero whenever the objective excludes the corresponding term).
    """

    total: torch.Tensor
    recon: torch.Tensor
    kl_d: torch.Tensor
    kl_x: torch.Tensor
    kl_y: torch.Tensor
    aux_d: torch.Tensor
    aux_y: torch.Tensor
    class_marginal_terms: torch.Tensor
    beta: float
    alpha_d: float
    alpha_y: float

    def recompose(self) -> torch.Tensor:
        return (
            self.recon
            - self.beta * (self.kl_d + self.kl_x + self.kl_y)
            + self.alpha_d * self.aux_d
            + self.alpha_y * self.aux_y
            + self.class_marginal_terms
        )

    def detached(self) -> "LossBreakdown":
        values = {
            name: getattr(self, name).detach()
            for name in (
                "total", "recon", "kl_d", "kl_x", "kl_y",
                "aux_d", "aux_y", "class_marginal_terms",
            )
        }
        return LossBreakdown(
            **values, beta=self.beta, alpha_d=self.alpha_d, alpha_y=self.alpha_y
        )


@dataclass(frozen=True)
class LatentNoise:
    """Standard-normal draws for the reparameterized samples, (B, dim) each."""

    eps_d: torch.Tensor
    eps_x: torch.Tensor
    eps_y: torch.Tensor


def draw_noise(dims, batch_size, generator, *, dtype=torch.float32) -> LatentNoise:
    zd, zx, zy = dims
    draw = lambda d: torch.randn(batch_size, d, generator=generator, dtype=dtype)
    return LatentNoise(eps_d=draw(zd), eps_x=draw(zx), eps_y=draw(zy))


def _as_model(model):
    return model.model() if isinstance(model, Checkpoint) else model


def _zero(ref: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=ref.dtype, device=ref.device)


def _log_q(model, z: torch.Tensor, which: str) -> torch.Tensor:
    """Numerically stable log q_omega(.|z), shape (B, K)."""
    return F.log_softmax(model.classify_logits(z, which), dim=-1)


def _supervised_parts(model: DivaModel, x, d, y, noise: LatentNoise):
    qd = model.encode(x, "d")
    qx = model.encode(x, "x")
    qy = model.encode(x, "y")
    zd = reparam_sample(qd, noise.eps_d)
    zx = reparam_sample(qx, noise.eps_x)
    zy = reparam_sample(qy, noise.eps_y)
    logits = model.decode(LatentTriple(zd, zx, zy))
    recon = recon_log_lik(x, logits).mean()
    pd = model.prior(d, "d")
    py = model.prior(y, "y")
    px = standard_normal(qx.dim, dtype=x.dtype, device=x.device)
    kl_d = gaussian_kl(qd, pd).mean()
    kl_x = gaussian_kl(qx, px).mean()
    kl_y = gaussian_kl(qy, py).mean()
    return recon, kl_d, kl_x, kl_y, zd, zy


def supervised_elbo(batch, model, beta: float, noise: LatentNoise) -> LossBreakdown:
    """Variational lower bound on a labeled batch (no auxiliary terms)."""
    x, d, y = batch
    if y is None:
        raise ValueError("supervised bound requires class labels")
    model = _as_model(model)
    recon, kl_d, kl_x, kl_y, _, _ = _supervised_parts(model, x, d, y, noise)
    total = recon - beta * (kl_d + kl_x + kl_y)
    zero = _zero(recon)
    return LossBreakdown(
        total=total, recon=recon, kl_d=kl_d, kl_x=kl_x, kl_y=kl_y,
        aux_d=zero, aux_y=zero, class_marginal_terms=zero,
        beta=beta, alpha_d=0.0, alpha_y=0.0,
    )


def diva_objective(batch, model, weights: ObjectiveWeights, noise: LatentNoise) -> LossBreakdown:
    """Supervised bound plus the two auxiliary classification objectives.

    The auxiliary expectations reuse the same reparameterized samples as
    the reconstruction term.
    """
    x, d, y = batch
    if y is None:
        raise ValueError("labeled objective requires class labels")
    model = _as_model(model)
    recon, kl_d, kl_x, kl_y, zd, zy = _supervised_parts(model, x, d, y, noise)
    aux_d = _log_q(model, zd, "d").gather(-1, d.unsqueeze(-1)).mean()
    aux_y = _log_q(model, zy, "y").gather(-1, y.unsqueeze(-1)).mean()
    total = (
        recon
        - weights.beta * (kl_d + kl_x + kl_y)
        + weights.alpha_d * aux_d
        + weights.alpha_y * aux_y
    )
    return LossBreakdown(
        total=total, recon=recon, kl_d=kl_d, kl_x=kl_x, kl_y=kl_y,
        aux_d=aux_d, aux_y=aux_y, class_marginal_terms=_zero(recon),
        beta=weights.beta, alpha_d=weights.alpha_d, alpha_y=weights.alpha_y,
    )


def unsupervised_bound(batch, model, weights: ObjectiveWeights, noise: LatentNoise) -> LossBreakdown:
    """Lower bound for a batch without class labels.

    The missing label is imputed by the class classifier evaluated at one
    sampled z_y, with an explicit sum over all classes. The domain
    auxiliary term is reported in ``aux_d`` but enters the total only
    through the semi-supervised combination.
    """
    x, d = batch[0], batch[1]
    model = _as_model(model)
    qd = model.encode(x, "d")
    qx = model.encode(x, "x")
    qy = model.encode(x, "y")
    zd = reparam_sample(qd, noise.eps_d)
    zx = reparam_sample(qx, noise.eps_x)
    zy = reparam_sample(qy, noise.eps_y)
    logits = model.decode(LatentTriple(zd, zx, zy))
    recon = recon_log_lik(x, logits).mean()
    pd = model.prior(d, "d")
    px = standard_normal(qx.dim, dtype=x.dtype, device=x.device)
    kl_d = gaussian_kl(qd, pd).mean()
    kl_x = gaussian_kl(qx, px).mean()

    k = model.config.num_classes
    log_q_y = _log_q(model, zy, "y")  # (B, K)
    q_y = log_q_y.exp().clamp_min(PROB_FLOOR)
    all_classes = torch.arange(k, device=x.device)
    py_all = model.prior(all_classes, "y")  # (K, dim)
    log_p_zy = gaussian_log_density(py_all, zy.unsqueeze(1))  # (B, K)
    log_q_zy = gaussian_log_density(qy, zy)  # (B,)
    log_p_y = torch.log(
        uniform_categorical(k, dtype=x.dtype, device=x.device).probs
    )
    latent_line = (q_y * (log_p_zy - log_q_zy.unsqueeze(-1))).sum(dim=-1)
    label_line = (q_y * (log_p_y - log_q_y)).sum(dim=-1)
    class_marginal = (weights.beta * latent_line + label_line).mean()

    aux_d = _log_q(model, zd, "d").gather(-1, d.unsqueeze(-1)).mean()
    total = recon - weights.beta * (kl_d + kl_x) + class_marginal
    zero = _zero(recon)
    return LossBreakdown(
        total=total, recon=recon, kl_d=kl_d, kl_x=kl_x, kl_y=zero,
        aux_d=aux_d, aux_y=zero, class_marginal_terms=class_marginal,
        beta=weights.beta, alpha_d=0.0, alpha_y=0.0,
    )


def semi_supervised_objective(
    labeled_batches, unlabeled_batches, model, weights: ObjectiveWeights, noises
) -> LossBreakdown:
    """Example-weighted combination of the labeled objective over the labeled
    pool and the unsupervised bound (plus the domain auxiliary term) over the
    unlabeled pool.

    ``noises`` pairs up with ``labeled_batches + unlabeled_batches``.
    """
    labeled_batches = list(labeled_batches)
    unlabeled_batches = list(unlabeled_batches)
    if not labeled_batches and not unlabeled_batches:
        raise ValueError("at least one pool must be nonempty")
    noises = list(noises)
    if len(noises) != len(labeled_batches) + len(unlabeled_batches):
        raise ValueError("need one noise draw per batch")
    model = _as_model(model)

    fields = ["recon", "kl_d", "kl_x", "kl_y", "aux_d", "aux_y", "class_marginal_terms"]
    sums = {name: 0.0 for name in fields}
    n_total = 0
    for batch, noise in zip(labeled_batches, noises[: len(labeled_batches)]):
        b = diva_objective(batch, model, weights, noise)
        n = batch[0].shape[0]
        n_total += n
        for name in fields:
            sums[name] = sums[name] + n * getattr(b, name)
    for batch, noise in zip(unlabeled_batches, noises[len(labeled_batches):]):
        b = unsupervised_bound(batch, model, weights, noise)
        n = batch[0].shape[0]
        n_total += n
        for name in fields:
            sums[name] = sums[name] + n * getattr(b, name)
    means = {name: sums[name] / n_total for name in fields}
    total = (
        means["recon"]
        - weights.beta * (means["kl_d"] + means["kl_x"] + means["kl_y"])
        + weights.alpha_d * means["aux_d"]
        + weights.alpha_y * means["aux_y"]
        + means["class_marginal_terms"]
    )
    return LossBreakdown(
        total=total, beta=weights.beta,
        alpha_d=weights.alpha_d, alpha_y=weights.alpha_y, **means,
    )


def vae_ablation_objective(batch, model, weights: ObjectiveWeights, noise: torch.Tensor) -> LossBreakdown:
    """Single-latent VAE with a standard normal prior and both auxiliary
    classifiers attached to the one latent code."""
    x, d, y = batch
    model = _as_model(model)
    if not isinstance(model, SingleLatentVae):
        raise ValueError("ablation objective requires a single-latent checkpoint")
    q = model.encode(x)
    if isinstance(noise, LatentNoise):
        eps = torch.cat([noise.eps_d, noise.eps_x, noise.eps_y], dim=-1)
    else:
        eps = noise
    z = reparam_sample(q, eps)
    logits = model.decode_single(z)
    recon = recon_log_lik(x, logits).mean()
    px = standard_normal(q.dim, dtype=x.dtype, device=x.device)
    kl = gaussian_kl(q, px).mean()
    aux_d = _log_q(model, z, "d").gather(-1, d.unsqueeze(-1)).mean()
    aux_y = _log_q(model, z, "y").gather(-1, y.unsqueeze(-1)).mean()
    total = recon - weights.beta * kl + weights.alpha_d * aux_d + weights.alpha_y * aux_y
    zero = _zero(recon)
    return LossBreakdown(
        total=total, recon=recon, kl_d=zero, kl_x=kl, kl_y=zero,
        aux_d=aux_d, aux_y=aux_y, class_marginal_terms=zero,
        beta=weights.beta, alpha_d=weights.alpha_d, alpha_y=weights.alpha_y,
    )


def alpha_y_rule(gamma: float, n_labeled: int, m_unlabeled: int) -> float:
    """Scale the class-loss weight by the (labeled + unlabeled) / labeled ratio."""
    if n_labeled <= 0:
        raise ValueError("the labeled pool must be nonempty")
    return gamma * (m_unlabeled + n_labeled) / n_labeled


def beta_schedule(epoch: int, warmup_epochs: int, beta_max: float) -> float:
    """Linear warm-up from 0 to beta_max over the first warmup_epochs epochs."""
    if warmup_epochs <= 0:
        raise ValueError("warmup_epochs must be positive")
    return min(epoch / warmup_epochs, 1.0) * beta_max
