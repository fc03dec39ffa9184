import numpy as np
import pytest
import torch

from diva.config import ExperimentConfig
from diva.data import Pool, Scenario, load_mnist_train
from diva.model import Checkpoint, init_model

MNIST_DIR = "data/mnist"


@pytest.fixture(scope="session")
def mnist():
    return load_mnist_train(MNIST_DIR)


def tiny_config(**overrides) -> ExperimentConfig:
    base = dict(
        arch="mlp",
        image_size=4,
        dim_zd=3,
        dim_zx=3,
        dim_zy=3,
        num_domains=3,
        num_classes=4,
        max_epochs=5,
        patience=5,
        warmup_epochs=2,
        batch_size=16,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def class_coded_pool(n_per_class: int, num_classes: int, num_domains: int,
                     image_size: int = 4, seed: int = 0,
                     labeled: bool = True) -> Pool:
    """Synthetic pool whose class is trivially readable from the pixels:
    class c lights up pixel c (plus small noise)."""
    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    classes = np.repeat(np.arange(num_classes), n_per_class).astype(np.int64)
    images = rng.uniform(0.0, 0.1, size=(n, image_size, image_size)).astype(np.float32)
    flat = images.reshape(n, -1)
    flat[np.arange(n), classes] = 1.0
    domains = rng.integers(0, num_domains, size=n).astype(np.int64)
    if labeled:
        return Pool(images=images, domains=domains, classes=classes)
    return Pool(images=images, domains=domains, classes=None, hidden_classes=classes)


def tiny_scenario(config: ExperimentConfig, n_per_class: int = 8,
                  with_unlabeled: bool = False, seed: int = 0) -> Scenario:
    labeled = class_coded_pool(
        n_per_class, config.num_classes, config.num_domains,
        config.image_size, seed=seed,
    )
    unlabeled = (
        class_coded_pool(
            n_per_class, config.num_classes, config.num_domains,
            config.image_size, seed=seed + 1, labeled=False,
        )
        if with_unlabeled
        else None
    )
    test = class_coded_pool(
        n_per_class, config.num_classes, 1, config.image_size, seed=seed + 2
    )
    return Scenario(
        labeled=labeled,
        unlabeled=unlabeled,
        test=test,
        train_domains=tuple(range(config.num_domains)),
        test_domain=config.num_domains,
        mode="factor" if with_unlabeled else "none",
        seed=seed,
    )


@pytest.fixture
def tiny_ckpt() -> Checkpoint:
    config = tiny_config()
    return Checkpoint.from_model(init_model(config, seed=0), config)


def param_fingerprint(ckpt: Checkpoint) -> dict[str, bytes]:
    return {name: value.tobytes() for name, value in ckpt.params.items()}


def tiny_batch(config: ExperimentConfig, n: int = 6, seed: int = 0,
               dtype=torch.float32):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(
        rng.random((n, 1, config.image_size, config.image_size))
    ).to(dtype)
    d = torch.from_numpy(rng.integers(0, config.num_domains, n))
    y = torch.from_numpy(rng.integers(0, config.num_classes, n))
    return x, d, y
