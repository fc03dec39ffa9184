import numpy as np
import pytest
import torch

from conftest import class_coded_pool, param_fingerprint, tiny_config, tiny_scenario
from diva.data import Pool
from diva.evaluation import (
    BenchmarkReport,
    accuracy,
    embeddings_csv,
    export_embeddings,
    partial_reconstruct,
    probe,
    sample_prior,
    swap_generate,
    write_pgm,
    write_pgm_grid,
)
from diva.model import init_params, predict_class


@pytest.fixture(scope="module")
def ckpt():
    config = tiny_config()
    return init_params(config, seed=0)


@pytest.fixture(scope="module")
def pool():
    config = tiny_config()
    return class_coded_pool(20, config.num_classes, config.num_domains, seed=0)


# ---------------------------------------------------------------------------
# Accuracy


def test_accuracy_matches_direct_recount(ckpt, pool):
    acc = accuracy(ckpt, pool)
    x = torch.from_numpy(pool.images).unsqueeze(1).to(torch.float32)
    pred = predict_class(x, ckpt).numpy()
    assert acc == pytest.approx(float((pred == pool.classes).mean()), abs=1e-12)


def test_accuracy_validates_inputs(ckpt, pool):
    from dataclasses import replace

    with pytest.raises(ValueError):
        accuracy(ckpt, replace(pool, classes=None))
    empty = replace(
        pool,
        images=pool.images[:0],
        domains=pool.domains[:0],
        classes=pool.classes[:0],
    )
    with pytest.raises(ValueError):
        accuracy(ckpt, empty)


# ---------------------------------------------------------------------------
# Embeddings


def test_export_embeddings_layout(ckpt, pool):
    table = export_embeddings(ckpt, pool, "y")
    n, dim = len(pool), ckpt.config.dim_zy
    assert table.shape == (n, 3 + dim)
    np.testing.assert_array_equal(table[:, 0], np.arange(n))
    np.testing.assert_array_equal(table[:, 1], pool.domains)
    np.testing.assert_array_equal(table[:, 2], pool.classes)
    x = torch.from_numpy(pool.images).unsqueeze(1).to(torch.float32)
    means = ckpt.model().encode(x, "y").mean.detach().numpy()
    np.testing.assert_allclose(table[:, 3:], means, atol=1e-6)


def test_export_embeddings_unlabeled_class_is_minus_one(ckpt):
    config = ckpt.config
    unl = class_coded_pool(3, config.num_classes, config.num_domains, labeled=False)
    table = export_embeddings(ckpt, unl, "d")
    assert np.all(table[:, 2] == -1)


def test_embeddings_csv_parses_back(ckpt, pool):
    table = export_embeddings(ckpt, pool, "x")
    text = embeddings_csv(table)
    lines = text.splitlines()
    assert lines[0].startswith("index,domain,class,dim0")
    parsed = np.loadtxt(lines[1:], delimiter=",")
    np.testing.assert_allclose(parsed, table, rtol=1e-12)


# ---------------------------------------------------------------------------
# Generation


def test_sample_prior_shape_range_determinism(ckpt):
    a = sample_prior(ckpt, d=1, y=2, noise_seed=5, count=4)
    b = sample_prior(ckpt, d=1, y=2, noise_seed=5, count=4)
    c = sample_prior(ckpt, d=1, y=2, noise_seed=6, count=4)
    s = ckpt.config.image_size
    assert a.shape == (4, 1, s, s)
    assert a.min() >= 0.0 and a.max() <= 1.0
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_swap_generate_changes_only_via_target(ckpt, pool):
    x = torch.from_numpy(pool.images[:3]).unsqueeze(1).to(torch.float32)
    out_a = swap_generate(ckpt, x, ("y", 0), noise_seed=1)
    out_b = swap_generate(ckpt, x, ("y", 1), noise_seed=1)
    assert out_a.shape == x.shape
    assert not np.array_equal(out_a, out_b)
    with pytest.raises(ValueError):
        swap_generate(ckpt, x, ("x", 0), noise_seed=1)


def test_partial_reconstruct_masks_matter(ckpt, pool):
    x = torch.from_numpy(pool.images[:3]).unsqueeze(1).to(torch.float32)
    full = partial_reconstruct(ckpt, x, keep=("d", "x", "y"))
    only_y = partial_reconstruct(ckpt, x, keep=("y",))
    assert full.shape == x.shape
    assert not np.array_equal(full, only_y)


def test_generation_does_not_mutate_checkpoint(ckpt, pool):
    before = param_fingerprint(ckpt)
    x = torch.from_numpy(pool.images[:2]).unsqueeze(1).to(torch.float32)
    sample_prior(ckpt, 0, 0, 0, 2)
    swap_generate(ckpt, x, ("d", 1), 0)
    partial_reconstruct(ckpt, x, keep=("x",))
    export_embeddings(ckpt, pool, "y")
    assert param_fingerprint(ckpt) == before


# ---------------------------------------------------------------------------
# Probe


def test_probe_learns_separable_embedding():
    # The mlp encoder is linear in the pixels, and the class is written
    # directly into the pixels, so the probe must do far better than chance.
    config = tiny_config(dim_zd=8, dim_zx=8, dim_zy=8)
    ckpt = init_params(config, seed=1)
    train_pool = class_coded_pool(30, config.num_classes, config.num_domains, seed=2)
    test_pool = class_coded_pool(10, config.num_classes, config.num_domains, seed=3)
    acc, majority = probe(ckpt, train_pool, test_pool, "y", epochs=300, seed=0)
    assert majority == pytest.approx(0.25, abs=1e-9)
    assert acc > 0.8


def test_probe_domain_target():
    config = tiny_config()
    ckpt = init_params(config, seed=1)
    train_pool = class_coded_pool(10, config.num_classes, config.num_domains, seed=2)
    test_pool = class_coded_pool(5, config.num_classes, config.num_domains, seed=3)
    acc, majority = probe(
        ckpt, train_pool, test_pool, "d", target="domain", epochs=5, seed=0
    )
    assert 0.0 <= acc <= 1.0
    counts = np.bincount(test_pool.domains)
    assert majority == pytest.approx(counts.max() / counts.sum(), abs=1e-9)


def test_probe_deterministic(ckpt, pool):
    test_pool = class_coded_pool(5, ckpt.config.num_classes, ckpt.config.num_domains, seed=9)
    a = probe(ckpt, pool, test_pool, "y", epochs=3, seed=4)
    b = probe(ckpt, pool, test_pool, "y", epochs=3, seed=4)
    assert a == b


# ---------------------------------------------------------------------------
# Benchmark report


def test_benchmark_report_statistics():
    accs = [0.93, 0.95, 0.91, 0.94, 0.92]
    report = BenchmarkReport(
        test_domain=0, scenario="none", seeds=list(range(5)),
        accuracies=accs, failures={}, config=tiny_config(),
    )
    assert report.mean_acc == pytest.approx(np.mean(accs), abs=1e-12)
    expected_stderr = np.std(accs, ddof=1) / np.sqrt(5)
    assert report.stderr == pytest.approx(expected_stderr, abs=1e-12)
    text = report.to_csv()
    lines = text.splitlines()
    assert lines[0] == "test_domain,scenario,n_seeds,mean_acc,stderr"
    assert lines[2] == "seed,accuracy"
    assert len(lines) == 3 + 5


def test_benchmark_runs_multiple_seeds(monkeypatch):
    # End-to-end on the synthetic pools with training stubbed to be cheap.
    from diva import evaluation

    config = tiny_config(max_epochs=1, patience=1)
    calls = []

    def fake_benchmark_seed(base_config, test_domain, scenario_mode, seed,
                            images, labels, labeled_domains):
        calls.append(seed)
        return 0.9 + 0.01 * seed, init_params(config, seed=seed)

    monkeypatch.setattr(evaluation, "_benchmark_seed", fake_benchmark_seed)
    images = np.zeros((10, 28, 28), dtype=np.float32)
    labels = np.zeros(10, dtype=np.int64)
    report = evaluation.run_benchmark(
        config, test_domain=0, scenario_mode="none", n_seeds=3,
        mnist=(images, labels),
    )
    assert calls == [0, 1, 2]
    assert report.n_seeds == 3
    assert report.accuracies == [0.9, 0.91, 0.92]


def test_benchmark_needs_two_seeds():
    from diva.evaluation import run_benchmark

    with pytest.raises(ValueError):
        run_benchmark(
            tiny_config(), 0, "none", 1,
            (np.zeros((1, 28, 28), dtype=np.float32), np.zeros(1, dtype=np.int64)),
        )


# ---------------------------------------------------------------------------
# PGM export


def read_pgm(path):
    blob = path.read_bytes()
    header, _, rest = blob.partition(b"255\n")
    fields = header.split()
    assert fields[0] == b"P5"
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def test_write_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 28 * 28, dtype=np.float64).reshape(28, 28)
    path = tmp_path / "img.pgm"
    write_pgm(img, path)
    data = read_pgm(path)
    np.testing.assert_array_equal(data, np.round(img * 255).astype(np.uint8))


def test_write_pgm_grid_layout(tmp_path):
    imgs = np.random.default_rng(0).random((6, 4, 4))
    path = tmp_path / "grid.pgm"
    write_pgm_grid(imgs, path, rows=2, cols=3)
    data = read_pgm(path)
    assert data.shape == (8, 12)
    np.testing.assert_array_equal(
        data[4:8, 8:12], np.round(imgs[5] * 255).astype(np.uint8)
    )
    layout = (tmp_path / "grid.pgm.layout.txt").read_text(encoding="utf-8")
    assert "rows = 2" in layout and "cols = 3" in layout


def test_write_pgm_grid_overflow(tmp_path):
    with pytest.raises(ValueError):
        write_pgm_grid(np.zeros((5, 4, 4)), tmp_path / "g.pgm", rows=2, cols=2)


def test_untrained_checkpoint_is_at_chance_on_balanced_data():
    # Chance oracle: a balanced test set pins accuracy near 1/K no matter
    # how biased an untrained classifier is.
    config = tiny_config(num_classes=10)
    untrained = init_params(config, seed=5)
    rng = np.random.default_rng(0)
    n = 1000
    images = rng.random((n, 4, 4)).astype(np.float32)
    balanced = Pool(
        images=images,
        domains=np.zeros(n, dtype=np.int64),
        classes=np.tile(np.arange(10), n // 10).astype(np.int64),
    )
    acc = accuracy(untrained, balanced)
    assert 0.03 <= acc <= 0.25
