"""Rotated-MNIST construction: IDX ingestion, domain building, scenario
assembly for the supervised / semi-supervised / extra-domain protocols,
and deterministic batch iteration.

The domain universe is six rotation angles {0, 15, 30, 45, 60, 75} degrees,
indexed by angle / 15. Domain i > 0 holds the *same* source digits as
domain 0, rotated counter-clockwise by 15 * i degrees.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DOMAIN_ANGLES = (0, 15, 30, 45, 60, 75)
NUM_CLASSES = 10
IMAGE_SIZE = 28


class IdxError(Exception):
    """Base class for IDX container problems."""


class IdxMagicError(IdxError):
    """Stream does not start with a known IDX magic number."""


class IdxTruncatedError(IdxError):
    """Payload shorter than the header declares."""


class IdxDimensionError(IdxError):
    """Declared dimensions are implausible or overflow."""


class ScenarioError(ValueError):
    """Invalid domain combination or insufficient source data."""


# ---------------------------------------------------------------------------
# IDX container


def parse_idx(data: bytes):
    """Decode an IDX byte stream.

    Images (magic 0x803) come back as float32 in [0, 1] with shape
    (N, rows, cols); labels (magic 0x801) as int64 of shape (N,).
    """
    if len(data) < 4:
        raise IdxTruncatedError("stream shorter than the magic number")
    (magic,) = struct.unpack(">i", data[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(data) < 16:
            raise IdxTruncatedError("image header truncated")
        n, rows, cols = struct.unpack(">3i", data[4:16])
        if min(n, rows, cols) < 0 or rows > 4096 or cols > 4096:
            raise IdxDimensionError(f"implausible image dimensions ({n}, {rows}, {cols})")
        expected = n * rows * cols
        payload = data[16:]
        if len(payload) < expected:
            raise IdxTruncatedError(
                f"truncated payload: expected {expected} bytes, got {len(payload)}"
            )
        pixels = np.frombuffer(payload[:expected], dtype=np.uint8)
        return pixels.reshape(n, rows, cols).astype(np.float32) / 255.0
    if magic == IDX_LABELS_MAGIC:
        if len(data) < 8:
            raise IdxTruncatedError("label header truncated")
        (n,) = struct.unpack(">i", data[4:8])
        if n < 0:
            raise IdxDimensionError(f"implausible label count {n}")
        payload = data[8:]
        if len(payload) < n:
            raise IdxTruncatedError(
                f"truncated payload: expected {n} bytes, got {len(payload)}"
            )
        return np.frombuffer(payload[:n], dtype=np.uint8).astype(np.int64)
    raise IdxMagicError(f"unknown IDX magic 0x{magic:08x}")


def write_idx_images(images: np.ndarray) -> bytes:
    """Encode images as IDX unsigned bytes. Float inputs in [0, 1] are
    quantized with round(x * 255)."""
    if images.ndim != 3:
        raise IdxDimensionError("images must have shape (N, rows, cols)")
    if images.dtype != np.uint8:
        images = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    n, rows, cols = images.shape
    return struct.pack(">4i", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise IdxDimensionError("labels must be one-dimensional")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise IdxDimensionError("labels must fit in unsigned bytes")
    return struct.pack(">2i", IDX_LABELS_MAGIC, len(labels)) + labels.astype(
        np.uint8
    ).tobytes()


def _read_maybe_gz(path: Path) -> bytes:
    gz = path.with_name(path.name + ".gz")
    if path.exists():
        return path.read_bytes()
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(f"missing {path} (or {gz.name})")


def load_mnist_train(mnist_dir) -> tuple[np.ndarray, np.ndarray]:
    """Read the standard MNIST training split from IDX (optionally .gz) files."""
    mnist_dir = Path(mnist_dir)
    images = parse_idx(_read_maybe_gz(mnist_dir / "train-images-idx3-ubyte"))
    labels = parse_idx(_read_maybe_gz(mnist_dir / "train-labels-idx1-ubyte"))
    if len(images) != len(labels):
        raise IdxDimensionError("image/label counts disagree")
    return images, labels


# ---------------------------------------------------------------------------
# Domains and scenarios


@dataclass(frozen=True)
class Pool:
    """A flat set of examples. ``domains`` are model-facing indices (the
    position of the example's universe domain in ``Scenario.train_domains``),
    except for the test pool where they are universe indices.

    ``classes`` is None for unlabeled pools; the true labels then sit in
    ``hidden_classes`` for diagnostics only and never reach an objective.
    """

    images: np.ndarray  # (N, 28, 28) float32 in [0, 1]
    domains: np.ndarray  # (N,) int64
    classes: np.ndarray | None
    hidden_classes: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class Scenario:
    labeled: Pool
    unlabeled: Pool | None
    test: Pool
    train_domains: tuple[int, ...]  # universe indices, sorted
    test_domain: int
    mode: str
    seed: int

    @property
    def num_train_domains(self) -> int:
        return len(self.train_domains)


def rotate_images(images: np.ndarray, angle_deg: float) -> np.ndarray:
    """Counter-clockwise rotation about the image center, bilinear, zero fill."""
    if angle_deg == 0:
        return images.copy()
    out = np.empty_like(images)
    for i, img in enumerate(images):
        out[i] = ndimage.rotate(
            img, angle_deg, reshape=False, order=1, mode="constant", cval=0.0,
            prefilter=False,
        )
    return np.clip(out, 0.0, 1.0)


def sample_per_class(
    labels: np.ndarray, per_class: int, rng: np.random.Generator,
    exclude: np.ndarray | None = None,
) -> np.ndarray:
    """Uniform without-replacement draw of per_class indices from each class."""
    banned = set() if exclude is None else set(int(i) for i in exclude)
    chosen = []
    for c in range(NUM_CLASSES):
        candidates = np.flatnonzero(labels == c)
        if banned:
            candidates = candidates[[int(i) not in banned for i in candidates]]
        if len(candidates) < per_class:
            raise ScenarioError(
                f"class {c}: need {per_class} images, only {len(candidates)} available"
            )
        chosen.append(rng.choice(candidates, size=per_class, replace=False))
    return np.sort(np.concatenate(chosen))


def build_rotated_mnist(
    images: np.ndarray, labels: np.ndarray, per_class: int, seed: int,
) -> tuple[list[Pool], np.ndarray]:
    """Sample per_class images per class, then build all six rotated domains
    from the same sample. Returns the domain pools (universe order) and the
    chosen source indices."""
    rng = np.random.default_rng(seed)
    idx = sample_per_class(labels, per_class, rng)
    base = images[idx].astype(np.float32)
    base_labels = labels[idx].astype(np.int64)
    pools = [
        Pool(
            images=rotate_images(base, angle),
            domains=np.full(len(base), d, dtype=np.int64),
            classes=base_labels.copy(),
        )
        for d, angle in enumerate(DOMAIN_ANGLES)
    ]
    return pools, idx


def build_scenario(
    images: np.ndarray,
    labels: np.ndarray,
    test_domain: int,
    mode: str = "none",
    seed: int = 0,
    per_class: int = 100,
    unlabeled_factor: int = 1,
    extra_domain: int | None = None,
    labeled_domains: tuple[int, ...] | None = None,
) -> Scenario:
    """Assemble one train/test split of the benchmark.

    mode "none":         labeled pools only.
    mode "factor":       adds unlabeled_factor * (10 * per_class) fresh source
                         images (disjoint from the labeled draw) to every
                         labeled training domain, rotated accordingly.
    mode "extra_domain": adds the full rotated set of one held-out domain as
                         unlabeled data.
    """
    if not 0 <= test_domain < len(DOMAIN_ANGLES):
        raise ScenarioError(f"test domain {test_domain} outside the universe")
    domain_pools, labeled_idx = build_rotated_mnist(images, labels, per_class, seed)

    if labeled_domains is None:
        labeled_domains = tuple(
            d for d in range(len(DOMAIN_ANGLES)) if d != test_domain
        )
    labeled_domains = tuple(sorted(labeled_domains))
    if test_domain in labeled_domains:
        raise ScenarioError("test domain must not appear in the labeled pool")

    unlabeled_sets: list[Pool] = []
    train_domains = labeled_domains
    if mode == "factor":
        if unlabeled_factor < 1:
            raise ScenarioError("unlabeled_factor must be >= 1")
        rng = np.random.default_rng(seed + 1)
        fresh_idx = sample_per_class(
            labels, unlabeled_factor * per_class, rng, exclude=labeled_idx
        )
        fresh = images[fresh_idx].astype(np.float32)
        fresh_labels = labels[fresh_idx].astype(np.int64)
        for d in labeled_domains:
            unlabeled_sets.append(
                Pool(
                    images=rotate_images(fresh, DOMAIN_ANGLES[d]),
                    domains=np.full(len(fresh), d, dtype=np.int64),
                    classes=None,
                    hidden_classes=fresh_labels.copy(),
                )
            )
    elif mode == "extra_domain":
        if extra_domain is None:
            raise ScenarioError("extra_domain mode needs the extra domain index")
        if extra_domain in labeled_domains or extra_domain == test_domain:
            raise ScenarioError(
                "the extra unlabeled domain must be neither labeled nor the test domain"
            )
        src = domain_pools[extra_domain]
        unlabeled_sets.append(
            Pool(
                images=src.images.copy(),
                domains=src.domains.copy(),
                classes=None,
                hidden_classes=src.classes.copy(),
            )
        )
        train_domains = tuple(sorted(labeled_domains + (extra_domain,)))
    elif mode != "none":
        raise ScenarioError(f"unknown scenario mode {mode!r}")

    remap = {d: i for i, d in enumerate(train_domains)}

    def flatten(pools: list[Pool], labeled: bool) -> Pool:
        imgs = np.concatenate([p.images for p in pools])
        doms = np.concatenate(
            [np.full(len(p), remap[int(p.domains[0])], dtype=np.int64) for p in pools]
        )
        if labeled:
            cls = np.concatenate([p.classes for p in pools])
            return Pool(images=imgs, domains=doms, classes=cls)
        hidden = np.concatenate([p.hidden_classes for p in pools])
        return Pool(images=imgs, domains=doms, classes=None, hidden_classes=hidden)

    labeled_pool = flatten([domain_pools[d] for d in labeled_domains], labeled=True)
    unlabeled_pool = flatten(unlabeled_sets, labeled=False) if unlabeled_sets else None
    test_src = domain_pools[test_domain]
    test_pool = Pool(
        images=test_src.images, domains=test_src.domains, classes=test_src.classes
    )
    return Scenario(
        labeled=labeled_pool,
        unlabeled=unlabeled_pool,
        test=test_pool,
        train_domains=train_domains,
        test_domain=test_domain,
        mode=mode,
        seed=seed,
    )


def batches(pool: Pool, batch_size: int, epoch_seed: int):
    """Seeded shuffle, then contiguous batches; the final short batch is kept.

    Yields (images, domains, classes) with classes None for unlabeled pools.
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    order = np.random.default_rng(epoch_seed).permutation(len(pool))
    for start in range(0, len(pool), batch_size):
        take = order[start : start + batch_size]
        cls = pool.classes[take] if pool.classes is not None else None
        yield pool.images[take], pool.domains[take], cls


# ---------------------------------------------------------------------------
# Scenario persistence (IDX files + manifest)


def save_scenario(scenario: Scenario, out_dir) -> None:
    """Write the scenario as IDX files plus a key=value manifest. Images are
    quantized to unsigned bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def dump(name: str, pool: Pool, with_classes: bool):
        (out / f"{name}-images.idx").write_bytes(write_idx_images(pool.images))
        (out / f"{name}-domains.idx").write_bytes(write_idx_labels(pool.domains))
        if with_classes:
            (out / f"{name}-classes.idx").write_bytes(write_idx_labels(pool.classes))

    dump("labeled", scenario.labeled, True)
    if scenario.unlabeled is not None:
        dump("unlabeled", scenario.unlabeled, False)
    dump("test", scenario.test, True)
    manifest = [
        f"mode = {scenario.mode}",
        f"seed = {scenario.seed}",
        f"test_domain = {scenario.test_domain}",
        f"train_domains = {','.join(str(d) for d in scenario.train_domains)}",
        f"labeled_count = {len(scenario.labeled)}",
        f"unlabeled_count = {0 if scenario.unlabeled is None else len(scenario.unlabeled)}",
        f"test_count = {len(scenario.test)}",
    ]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")


def load_scenario(scenario_dir) -> Scenario:
    src = Path(scenario_dir)
    manifest = {}
    for line in (src / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            manifest[key.strip()] = value.strip()

    def read(name: str, with_classes: bool) -> Pool:
        images = parse_idx((src / f"{name}-images.idx").read_bytes())
        domains = parse_idx((src / f"{name}-domains.idx").read_bytes())
        classes = (
            parse_idx((src / f"{name}-classes.idx").read_bytes())
            if with_classes
            else None
        )
        return Pool(images=images, domains=domains, classes=classes)

    labeled = read("labeled", True)
    unlabeled = (
        read("unlabeled", False) if int(manifest["unlabeled_count"]) else None
    )
    test = read("test", True)
    return Scenario(
        labeled=labeled,
        unlabeled=unlabeled,
        test=test,
        train_domains=tuple(int(d) for d in manifest["train_domains"].split(",")),
        test_domain=int(manifest["test_domain"]),
        mode=manifest["mode"],
        seed=int(manifest["seed"]),
    )
