"""Held-out-domain evaluation and model inspection: accuracy, latent
embedding export, generation (prior samples, class/domain swaps, partial
reconstruction), the subspace predictiveness probe, and the multi-seed
benchmark harness.

All operations are read-only on checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ExperimentConfig
from .data import Pool, build_scenario
from .distributions import reparam_sample
from .model import Checkpoint, LatentTriple, predict_class
from .trainer import AdamRates, AdamState, adam_step, derive_seed, train

EVAL_BATCH = 500


def _image_batches(images: np.ndarray):
    for start in range(0, len(images), EVAL_BATCH):
        yield torch.from_numpy(images[start : start + EVAL_BATCH]).unsqueeze(1).to(
            torch.float32
        )


def accuracy(ckpt: Checkpoint, examples: Pool) -> float:
    """Fraction of examples whose predicted class matches the label."""
    if len(examples) == 0:
        raise ValueError("cannot evaluate accuracy on an empty set")
    if examples.classes is None:
        raise ValueError("accuracy needs labeled examples")
    hits = 0
    offset = 0
    for xb in _image_batches(examples.images):
        pred = predict_class(xb, ckpt).numpy()
        hits += int((pred == examples.classes[offset : offset + len(pred)]).sum())
        offset += len(pred)
    return hits / len(examples)


def export_embeddings(ckpt: Checkpoint, examples: Pool, subspace: str) -> np.ndarray:
    """Posterior-mean coordinates per example, with index/domain/class columns.

    Returns a float array of shape (N, 3 + latent_dim). The class column is
    -1 for unlabeled examples.
    """
    model = ckpt.model()
    means = []
    for xb in _image_batches(examples.images):
        with torch.no_grad():
            means.append(model.encode(xb, subspace).mean.numpy())
    coords = np.concatenate(means)
    n = len(examples)
    classes = (
        examples.classes
        if examples.classes is not None
        else np.full(n, -1, dtype=np.int64)
    )
    head = np.stack([np.arange(n), examples.domains, classes], axis=1)
    return np.concatenate([head.astype(np.float64), coords.astype(np.float64)], axis=1)


def embeddings_csv(table: np.ndarray) -> str:
    dim = table.shape[1] - 3
    header = "index,domain,class," + ",".join(f"dim{i}" for i in range(dim))
    lines = [header]
    for row in table:
        cells = [str(int(row[0])), str(int(row[1])), str(int(row[2]))]
        cells += [repr(float(v)) for v in row[3:]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _seeded_noise(shape, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen)


def sample_prior(
    ckpt: Checkpoint, d: int, y: int, noise_seed: int, count: int
) -> np.ndarray:
    """Draw latents from the (conditional) priors and decode to pixel means."""
    from .model import conditional_prior, decode

    dims = ckpt.config.latent_dims
    noise = _seeded_noise((count, sum(dims)), noise_seed)
    nd, nx, ny = torch.split(noise, list(dims), dim=-1)
    pd = conditional_prior(d, "d", ckpt)
    py = conditional_prior(y, "y", ckpt)
    zd = reparam_sample(pd, nd)
    zx = nx  # standard normal prior: mean 0, scale 1
    zy = reparam_sample(py, ny)
    logits = decode(LatentTriple(zd, zx, zy), ckpt)
    return torch.sigmoid(logits).numpy()


def swap_generate(
    ckpt: Checkpoint, x: torch.Tensor, swap: tuple[str, int], noise_seed: int
) -> np.ndarray:
    """Encode x to posterior means, replace one subspace with a conditional
    prior sample for the target label, decode."""
    from .model import conditional_prior, decode, encode

    which, target = swap
    if which not in ("d", "y"):
        raise ValueError("swap target must be the domain or class subspace")
    parts = {w: encode(x, w, ckpt).mean for w in "dxy"}
    prior = conditional_prior(target, which, ckpt)
    noise = _seeded_noise((x.shape[0], prior.dim), noise_seed)
    parts[which] = reparam_sample(prior, noise)
    logits = decode(LatentTriple(parts["d"], parts["x"], parts["y"]), ckpt)
    return torch.sigmoid(logits).numpy()


def partial_reconstruct(ckpt: Checkpoint, x: torch.Tensor, keep=("d", "x", "y")) -> np.ndarray:
    """Reconstruction from posterior means with the non-kept subspaces zeroed."""
    from .model import decode, encode

    parts = {}
    for w in "dxy":
        mean = encode(x, w, ckpt).mean
        parts[w] = mean if w in keep else torch.zeros_like(mean)
    logits = decode(LatentTriple(parts["d"], parts["x"], parts["y"]), ckpt)
    return torch.sigmoid(logits).numpy()


# ---------------------------------------------------------------------------
# Subspace predictiveness probe


class _Probe(nn.Module):
    def __init__(self, in_dim: int, hidden: int, num_labels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, num_labels)
        )

    def forward(self, z):
        return self.net(z)


def probe(
    ckpt: Checkpoint,
    train_examples: Pool,
    test_examples: Pool,
    subspace: str,
    target: str = "class",
    epochs: int = 100,
    batch_size: int = 100,
    seed: int = 0,
) -> tuple[float, float]:
    """Train a fresh 2-layer classifier on frozen posterior-mean embeddings
    and report (test accuracy, majority-class baseline)."""

    def labels_of(pool: Pool) -> np.ndarray:
        if target == "class":
            lab = pool.classes if pool.classes is not None else pool.hidden_classes
        else:
            lab = pool.domains
        if lab is None:
            raise ValueError("probe needs labels for its target")
        return lab

    z_train = export_embeddings(ckpt, train_examples, subspace)[:, 3:].astype(np.float32)
    z_test = export_embeddings(ckpt, test_examples, subspace)[:, 3:].astype(np.float32)
    y_train = labels_of(train_examples)
    y_test = labels_of(test_examples)
    num_labels = int(max(y_train.max(), y_test.max())) + 1

    torch.manual_seed(derive_seed(seed, 7))
    net = _Probe(z_train.shape[1], z_train.shape[1], num_labels)
    params = dict(net.named_parameters())
    state = AdamState.init(params)
    rates = AdamRates()
    zt = torch.from_numpy(z_train)
    yt = torch.from_numpy(y_train)
    rng = np.random.default_rng(derive_seed(seed, 8))
    for _ in range(epochs):
        order = rng.permutation(len(zt))
        for start in range(0, len(zt), batch_size):
            take = order[start : start + batch_size]
            logits = net(zt[take])
            loss = F.cross_entropy(logits, yt[take])
            for p in params.values():
                p.grad = None
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, state, rates)

    with torch.no_grad():
        pred = net(torch.from_numpy(z_test)).argmax(dim=-1).numpy()
    acc = float((pred == y_test).mean())
    majority = float(np.bincount(y_test).max() / len(y_test))
    return acc, majority


# ---------------------------------------------------------------------------
# Multi-seed benchmark


@dataclass
class BenchmarkReport:
    test_domain: int
    scenario: str
    seeds: list[int]
    accuracies: list[float]
    failures: dict[int, str]
    config: ExperimentConfig

    @property
    def n_seeds(self) -> int:
        return len(self.accuracies)

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def stderr(self) -> float:
        if len(self.accuracies) < 2:
            return float("nan")
        return float(np.std(self.accuracies, ddof=1) / np.sqrt(len(self.accuracies)))

    def to_csv(self) -> str:
        lines = ["test_domain,scenario,n_seeds,mean_acc,stderr"]
        lines.append(
            f"{self.test_domain},{self.scenario},{self.n_seeds},"
            f"{self.mean_acc!r},{self.stderr!r}"
        )
        lines.append("seed,accuracy")
        for seed, acc in zip(self.seeds, self.accuracies):
            lines.append(f"{seed},{acc!r}")
        return "\n".join(lines) + "\n"


def _benchmark_seed(
    base_config: ExperimentConfig,
    test_domain: int,
    scenario_mode: str,
    seed: int,
    images: np.ndarray,
    labels: np.ndarray,
    labeled_domains: tuple[int, ...] | None,
):
    config = base_config.replace(
        seed=seed, test_domain=test_domain, scenario_mode=scenario_mode
    )
    scenario = build_scenario(
        images,
        labels,
        test_domain=test_domain,
        mode=scenario_mode,
        seed=seed,
        per_class=config.per_class,
        unlabeled_factor=config.unlabeled_factor,
        extra_domain=config.extra_domain if config.extra_domain >= 0 else None,
        labeled_domains=labeled_domains,
    )
    ckpt, _ = train(scenario, config)
    return accuracy(ckpt, scenario.test), ckpt


def run_benchmark(
    base_config: ExperimentConfig,
    test_domain: int,
    scenario_mode: str,
    n_seeds: int,
    mnist: tuple[np.ndarray, np.ndarray],
    labeled_domains: tuple[int, ...] | None = None,
    on_result=None,
    jobs: int = 1,
) -> BenchmarkReport:
    """Train n_seeds independent runs (seed = base + i) on one scenario and
    aggregate mean and standard error of the test-domain accuracy. ``jobs``
    > 1 runs seeds in parallel worker processes."""
    if n_seeds < 2:
        raise ValueError("need at least 2 seeds for a standard error")
    images, labels = mnist
    all_seeds = [base_config.seed + i for i in range(n_seeds)]
    seeds, accs, failures = [], [], {}

    if jobs > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(
                    _benchmark_seed,
                    base_config,
                    test_domain,
                    scenario_mode,
                    seed,
                    images,
                    labels,
                    labeled_domains,
                ): seed
                for seed in all_seeds
            }
            results = {}
            for fut, seed in futures.items():
                try:
                    results[seed] = fut.result()
                except Exception as exc:
                    failures[seed] = str(exc)
        for seed in all_seeds:
            if seed in results:
                acc, ckpt = results[seed]
                seeds.append(seed)
                accs.append(acc)
                if on_result is not None:
                    on_result(seed, acc, ckpt)
    else:
        for seed in all_seeds:
            try:
                acc, ckpt = _benchmark_seed(
                    base_config,
                    test_domain,
                    scenario_mode,
                    seed,
                    images,
                    labels,
                    labeled_domains,
                )
            except Exception as exc:  # propagate per-seed failures into the report
                failures[seed] = str(exc)
                continue
            seeds.append(seed)
            accs.append(acc)
            if on_result is not None:
                on_result(seed, acc, ckpt)
    if len(accs) < 2:
        raise RuntimeError(f"fewer than 2 seeds succeeded: {failures}")
    return BenchmarkReport(
        test_domain=test_domain,
        scenario=scenario_mode,
        seeds=seeds,
        accuracies=accs,
        failures=failures,
        config=base_config,
    )


# ---------------------------------------------------------------------------
# PGM export


def write_pgm(image: np.ndarray, path) -> None:
    """Binary PGM (P5, maxval 255) from a (H, W) or (1, H, W) array in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError("expected a single-channel image")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_pgm_grid(images: np.ndarray, path, rows: int, cols: int) -> None:
    """Tile images row-major into one PGM; layout goes into a sidecar file."""
    imgs = np.asarray(images)
    if imgs.ndim == 4 and imgs.shape[1] == 1:
        imgs = imgs[:, 0]
    n, h, w = imgs.shape
    if n > rows * cols:
        raise ValueError(f"{n} images do not fit a {rows}x{cols} grid")
    canvas = np.zeros((rows * h, cols * w), dtype=np.float64)
    for i, img in enumerate(imgs):
        r, c = divmod(i, cols)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = img
    write_pgm(canvas, path)
    Path(str(path) + ".layout.txt").write_text(
        f"rows = {rows}\ncols = {cols}\ntile_height = {h}\ntile_width = {w}\n",
        encoding="utf-8",
    )
