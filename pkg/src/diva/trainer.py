"""Gradient-based training: functional Adam with bias correction, the
epoch loop with KL warm-up and early stopping on the class auxiliary loss,
deterministic sub-seed derivation, CSV metrics logging, and a
finite-difference gradient checker for the objectives.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ExperimentConfig
from .data import Pool, Scenario, batches
from .model import Checkpoint, init_model
from .objectives import (
    LatentNoise,
    ObjectiveWeights,
    alpha_y_rule,
    beta_schedule,
    diva_objective,
    draw_noise,
    unsupervised_bound,
    vae_ablation_objective,
)

METRICS_HEADER = (
    "epoch,beta,total,recon,kl_d,kl_x,kl_y,aux_d,aux_y,class_loss,seconds"
)

# An epoch's class loss counts as an improvement only beyond this margin.
IMPROVEMENT_EPS = 1e-6


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


def derive_seed(base_seed: int, stream: int, *extra: int) -> int:
    """Independent sub-seed for one random stream (init / shuffle / noise)."""
    return int(
        np.random.SeedSequence((base_seed, stream) + extra).generate_state(1)[0]
    )


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamRates:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "AdamRates":
        return cls(
            learning_rate=config.learning_rate,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps,
        )


@dataclass
class AdamState:
    step: int
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]

    @classmethod
    def init(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            step=0,
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    rates: AdamRates,
) -> tuple[dict[str, torch.Tensor], AdamState]:
    """One first/second-moment update with bias correction. Mutates
    ``params`` and ``state`` in place and returns them."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - rates.beta1**t
    bias2 = 1.0 - rates.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            if not torch.isfinite(g).all():
                raise ValueError(f"non-finite gradient for {name!r}")
            m = state.m[name]
            v = state.v[name]
            m.mul_(rates.beta1).add_(g, alpha=1.0 - rates.beta1)
            v.mul_(rates.beta2).addcmul_(g, g, value=1.0 - rates.beta2)
            p.addcdiv_(m / bias1, (v / bias2).sqrt().add_(rates.eps), value=-rates.learning_rate)
    return params, state


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def to_csv(self) -> str:
        lines = [METRICS_HEADER]
        for r in self.rows:
            lines.append(
                f"{r['epoch']},{r['beta']!r},{r['total']!r},{r['recon']!r},"
                f"{r['kl_d']!r},{r['kl_x']!r},{r['kl_y']!r},{r['aux_d']!r},"
                f"{r['aux_y']!r},{r['class_loss']!r},{r['seconds']!r}"
            )
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_csv())

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]


# ---------------------------------------------------------------------------
# Training loop


def _to_torch(x: np.ndarray, d: np.ndarray, y: np.ndarray | None):
    images = torch.from_numpy(x).unsqueeze(1).to(torch.float32)
    domains = torch.from_numpy(d)
    classes = None if y is None else torch.from_numpy(y)
    return images, domains, classes


def _paired_batches(labeled: Pool, unlabeled: Pool | None, batch_size, epoch, seed):
    """One labeled and (when present) one unlabeled batch per step, cycling
    the shorter stream."""
    lab = list(batches(labeled, batch_size, derive_seed(seed, 1, epoch, 0)))
    if unlabeled is None:
        return [(b, None) for b in lab]
    unl = list(batches(unlabeled, batch_size, derive_seed(seed, 1, epoch, 1)))
    steps = max(len(lab), len(unl))
    return [(lab[i % len(lab)], unl[i % len(unl)]) for i in range(steps)]


def train(
    scenario: Scenario, config: ExperimentConfig, objective_choice: str | None = None
) -> tuple[Checkpoint, MetricsLog]:
    """Optimize the chosen objective on the scenario; returns the trained
    checkpoint and the per-epoch metrics log.

    Fully deterministic in config.seed: initialization, shuffling and noise
    use independently derived sub-seeds.
    """
    objective_choice = objective_choice or config.objective
    if objective_choice not in ("diva", "ss_diva", "vae_ablation"):
        raise ValueError(f"unknown objective {objective_choice!r}")
    if objective_choice == "ss_diva" and scenario.unlabeled is None:
        raise ValueError("ss_diva requires a scenario with an unlabeled pool")
    config = config.replace(
        objective=objective_choice, num_domains=scenario.num_train_domains
    )

    n_labeled = len(scenario.labeled)
    m_unlabeled = 0 if scenario.unlabeled is None else len(scenario.unlabeled)
    use_unlabeled = objective_choice == "ss_diva" and m_unlabeled > 0
    alpha_y = (
        alpha_y_rule(config.gamma, n_labeled, m_unlabeled)
        if use_unlabeled
        else config.gamma
    )

    model = init_model(config, derive_seed(config.seed, 0))
    model.train()
    dims = config.latent_dims
    params = dict(model.named_parameters())
    state = AdamState.init(params)
    rates = AdamRates.from_config(config)
    noise_gen = torch.Generator().manual_seed(derive_seed(config.seed, 2))

    log = MetricsLog()
    best_loss = float("inf")
    best_epoch = 0
    best_snapshot = None
    fields = ("total", "recon", "kl_d", "kl_x", "kl_y", "aux_d", "aux_y")

    for epoch in range(config.max_epochs):
        tic = time.perf_counter()
        beta = beta_schedule(epoch, config.warmup_epochs, config.beta_max)
        weights = ObjectiveWeights(beta=beta, alpha_d=config.alpha_d, alpha_y=alpha_y)
        sums = dict.fromkeys(fields, 0.0)
        class_loss_sum = 0.0
        n_seen = 0
        n_labeled_seen = 0

        pairs = _paired_batches(
            scenario.labeled,
            scenario.unlabeled if use_unlabeled else None,
            config.batch_size,
            epoch,
            config.seed,
        )
        for lab_batch, unl_batch in pairs:
            x, d, y = _to_torch(*lab_batch)
            noise = draw_noise(dims, x.shape[0], noise_gen)
            if objective_choice == "vae_ablation":
                breakdown = vae_ablation_objective((x, d, y), model, weights, noise)
            else:
                breakdown = diva_objective((x, d, y), model, weights, noise)
            loss = -breakdown.total
            n_batch = x.shape[0]
            if unl_batch is not None:
                ux, ud, _ = _to_torch(*unl_batch)
                unoise = draw_noise(dims, ux.shape[0], noise_gen)
                ub = unsupervised_bound((ux, ud), model, weights, unoise)
                loss = loss - (ub.total + config.alpha_d * ub.aux_d)
                n_batch += ux.shape[0]

            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch)
            for p in params.values():
                p.grad = None
            loss.backward()
            grads = {k: p.grad for k, p in params.items()}
            adam_step(params, grads, state, rates)

            detached = breakdown.detached()
            n_lab = x.shape[0]
            for name in fields:
                sums[name] += n_lab * float(getattr(detached, name))
            class_loss_sum += n_lab * float(-detached.aux_y)
            n_labeled_seen += n_lab
            n_seen += n_batch

        epoch_means = {name: sums[name] / n_labeled_seen for name in fields}
        class_loss = class_loss_sum / n_labeled_seen
        log.append(
            epoch=epoch,
            beta=beta,
            class_loss=class_loss,
            seconds=time.perf_counter() - tic,
            **epoch_means,
        )

        if class_loss < best_loss - IMPROVEMENT_EPS:
            best_loss = class_loss
            best_epoch = epoch
            if config.restore_best:
                best_snapshot = {
                    k: v.detach().clone() for k, v in model.state_dict().items()
                }
        if epoch - best_epoch >= config.patience:
            break

    if config.restore_best and best_snapshot is not None:
        model.load_state_dict(best_snapshot)
    model.eval()
    return Checkpoint.from_model(model, config), log


# ---------------------------------------------------------------------------
# Finite-difference gradient verification


def tiny_config(objective: str = "diva") -> ExperimentConfig:
    """A sub-500-parameter model for 64-bit finite-difference checks."""
    return ExperimentConfig(
        arch="mlp",
        image_size=4,
        dim_zd=2,
        dim_zx=2,
        dim_zy=2,
        num_domains=3,
        num_classes=4,
        objective=objective,
        max_epochs=1,
        patience=1,
        warmup_epochs=1,
    )


def _tiny_batches(config: ExperimentConfig, rng: np.random.Generator, n: int = 5):
    x = torch.from_numpy(rng.random((n, 1, config.image_size, config.image_size)))
    d = torch.from_numpy(rng.integers(0, config.num_domains, n))
    y = torch.from_numpy(rng.integers(0, config.num_classes, n))
    return x, d, y


def gradient_check(
    objective_choice: str,
    config: ExperimentConfig | None = None,
    noise_seed: int = 0,
    fd_step: float = 1e-5,
    corrupt_param: str | None = None,
) -> float:
    """Compare analytic gradients of an objective against central finite
    differences for every parameter of a tiny 64-bit model; returns the
    worst relative error. ``corrupt_param`` scales one analytic gradient
    entry by 2 to prove the harness would notice a wrong gradient.
    """
    config = config or tiny_config(objective_choice)
    model = init_model(config, seed=noise_seed).double()
    model.train()
    n_params = sum(p.numel() for p in model.parameters())
    if n_params > 500:
        raise ValueError(f"tiny model has {n_params} > 500 parameters")

    rng = np.random.default_rng(noise_seed)
    x, d, y = _tiny_batches(config, rng)
    gen = torch.Generator().manual_seed(noise_seed)
    dims = config.latent_dims
    noise = draw_noise(dims, x.shape[0], gen, dtype=torch.float64)
    weights = ObjectiveWeights(beta=0.7, alpha_d=3.0, alpha_y=5.0)

    if objective_choice == "ss_diva":
        ux, ud, _ = _tiny_batches(config, rng, n=4)
        unoise = draw_noise(dims, ux.shape[0], gen, dtype=torch.float64)

        def objective():
            lab = diva_objective((x, d, y), model, weights, noise)
            unl = unsupervised_bound((ux, ud), model, weights, unoise)
            return lab.total + unl.total + weights.alpha_d * unl.aux_d

    elif objective_choice == "diva":

        def objective():
            return diva_objective((x, d, y), model, weights, noise).total

    elif objective_choice == "vae_ablation":

        def objective():
            return vae_ablation_objective((x, d, y), model, weights, noise).total

    else:
        raise ValueError(f"unknown objective {objective_choice!r}")

    value = objective()
    analytic = torch.autograd.grad(value, list(model.parameters()))
    analytic = {
        name: g for (name, _), g in zip(model.named_parameters(), analytic)
    }
    if corrupt_param is not None:
        flat = analytic[corrupt_param].flatten()
        flat[0] = flat[0] * 2.0

    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            a = analytic[name].view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + fd_step
                up = objective().item()
                flat[i] = orig - fd_step
                down = objective().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * fd_step)
                err = abs(a[i].item() - fd) / max(abs(a[i].item()), abs(fd), 1e-4)
                worst = max(worst, err)
    return worst
