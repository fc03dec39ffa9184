"""DIVA networks, the single-latent ablation VAE, and checkpoint persistence.

Three unshared convolutional encoders produce diagonal-Gaussian posteriors
over the subspaces (z_d, z_x, z_y). Two small conditional-prior networks map
one-hot labels to prior parameters, one decoder reconstructs pixels from the
concatenated subspaces, and two auxiliary classifiers predict the domain from
z_d and the class from z_y.

An alternative "mlp" architecture with the same interface backs the tiny
models used by the finite-difference gradient checks.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ExperimentConfig
from .distributions import SCALE_FLOOR, CategoricalParams, GaussianParams

CHECKPOINT_MAGIC = b"DIVA"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class UnknownFormatError(CheckpointError):
    """File does not start with the expected magic bytes."""


class UnknownVersionError(CheckpointError):
    """Magic matched but the version byte is unsupported."""


class TruncatedPayloadError(CheckpointError):
    """File ended before the declared payload was complete."""


@dataclass(frozen=True)
class LatentTriple:
    """Sampled or posterior-mean codes for the three subspaces, (B, dim) each."""

    zd: torch.Tensor
    zx: torch.Tensor
    zy: torch.Tensor


class GaussianHead(nn.Module):
    """Two linear heads emitting mean and softplus-mapped scale."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.mean = nn.Linear(in_features, out_features)
        self.scale = nn.Linear(in_features, out_features)

    def forward(self, h: torch.Tensor) -> GaussianParams:
        return GaussianParams(
            mean=self.mean(h),
            scale=F.softplus(self.scale(h)).clamp_min(SCALE_FLOOR),
        )


class ConvEncoder(nn.Module):
    """conv32 -> pool -> conv64 -> pool -> linear heads (28x28 inputs).

    ``width_scale`` multiplies the channel counts; 1.0 is the reference
    architecture.
    """

    def __init__(self, latent_dim: int, width_scale: float = 1.0):
        super().__init__()
        c1 = max(1, round(32 * width_scale))
        c2 = max(1, round(64 * width_scale))
        self.features = nn.Sequential(
            nn.Conv2d(1, c1, kernel_size=5),
            nn.BatchNorm2d(c1),
            nn.ReLU(),
            nn.MaxPool2d(2, 2),
            nn.Conv2d(c1, c2, kernel_size=5),
            nn.BatchNorm2d(c2),
            nn.ReLU(),
            nn.MaxPool2d(2, 2),
        )
        self.head = GaussianHead(c2 * 4 * 4, latent_dim)

    def forward(self, x: torch.Tensor) -> GaussianParams:
        h = self.features(x).flatten(start_dim=1)
        return self.head(h)


class MlpEncoder(nn.Module):
    """Linear heads straight off the flattened pixels (tiny models)."""

    def __init__(self, image_size: int, latent_dim: int):
        super().__init__()
        self.head = GaussianHead(image_size * image_size, latent_dim)

    def forward(self, x: torch.Tensor) -> GaussianParams:
        return self.head(x.flatten(start_dim=1))


class ConvDecoder(nn.Module):
    """linear 1024 -> upsample -> deconv 128 -> upsample -> deconv 256 -> conv.

    ``width_scale`` multiplies the deconvolution channel counts; 1.0 is the
    reference architecture.
    """

    def __init__(self, latent_total: int, width_scale: float = 1.0):
        super().__init__()
        c1 = max(1, round(128 * width_scale))
        c2 = max(1, round(256 * width_scale))
        self.fc = nn.Sequential(
            nn.Linear(latent_total, 1024),
            nn.BatchNorm1d(1024),
            nn.ReLU(),
        )
        self.net = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.ConvTranspose2d(64, c1, kernel_size=5),
            nn.BatchNorm2d(c1),
            nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.ConvTranspose2d(c1, c2, kernel_size=5),
            nn.BatchNorm2d(c2),
            nn.ReLU(),
            nn.Conv2d(c2, c2, kernel_size=1),
            nn.Conv2d(c2, 1, kernel_size=1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.fc(z).view(-1, 64, 4, 4)
        return self.net(h)


class MlpDecoder(nn.Module):
    def __init__(self, latent_total: int, image_size: int):
        super().__init__()
        self.image_size = image_size
        self.fc = nn.Linear(latent_total, image_size * image_size)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc(z).view(-1, 1, self.image_size, self.image_size)


class ConditionalPrior(nn.Module):
    """One-hot label -> Gaussian prior parameters for z_d or z_y."""

    def __init__(self, num_labels: int, latent_dim: int, hidden: int | None = 64):
        super().__init__()
        self.num_labels = num_labels
        if hidden is None:
            self.body = nn.Identity()
            self.head = GaussianHead(num_labels, latent_dim)
        else:
            self.body = nn.Sequential(
                nn.Linear(num_labels, hidden),
                nn.BatchNorm1d(hidden),
                nn.ReLU(),
            )
            self.head = GaussianHead(hidden, latent_dim)

    def forward(self, labels: torch.Tensor) -> GaussianParams:
        onehot = F.one_hot(labels, self.num_labels).to(self.head.mean.weight.dtype)
        return self.head(self.body(onehot))


class AuxClassifier(nn.Module):
    """ReLU -> linear; softmax applied by the caller where needed."""

    def __init__(self, latent_dim: int, num_labels: int):
        super().__init__()
        self.fc = nn.Linear(latent_dim, num_labels)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc(F.relu(z))


class DivaModel(nn.Module):
    """The full three-subspace model."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        zd, zx, zy = config.latent_dims
        if config.arch == "conv":
            if config.image_size != 28:
                raise ValueError("conv architecture expects 28x28 inputs")
            make_enc = lambda dim: ConvEncoder(dim, config.width_scale)
            self.decoder = ConvDecoder(zd + zx + zy, config.width_scale)
            prior_hidden = 64
        else:
            make_enc = lambda dim: MlpEncoder(config.image_size, dim)
            self.decoder = MlpDecoder(zd + zx + zy, config.image_size)
            prior_hidden = None
        self.encoder_d = make_enc(zd)
        self.encoder_x = make_enc(zx)
        self.encoder_y = make_enc(zy)
        self.prior_d = ConditionalPrior(config.num_domains, zd, prior_hidden)
        self.prior_y = ConditionalPrior(config.num_classes, zy, prior_hidden)
        self.classifier_d = AuxClassifier(zd, config.num_domains)
        self.classifier_y = AuxClassifier(zy, config.num_classes)

    def encode(self, x: torch.Tensor, which: str) -> GaussianParams:
        self._check_images(x)
        return {"d": self.encoder_d, "x": self.encoder_x, "y": self.encoder_y}[which](x)

    def prior(self, labels: torch.Tensor, which: str) -> GaussianParams:
        return {"d": self.prior_d, "y": self.prior_y}[which](labels)

    def decode(self, lt: LatentTriple) -> torch.Tensor:
        dims = (lt.zd.shape[-1], lt.zx.shape[-1], lt.zy.shape[-1])
        if dims != self.config.latent_dims:
            raise ValueError(
                f"latent dims {dims} do not match configured {self.config.latent_dims}"
            )
        return self.decoder(torch.cat([lt.zd, lt.zx, lt.zy], dim=-1))

    def classify_logits(self, z: torch.Tensor, which: str) -> torch.Tensor:
        clf = {"d": self.classifier_d, "y": self.classifier_y}[which]
        if z.shape[-1] != clf.fc.in_features:
            raise ValueError(
                f"latent dim {z.shape[-1]} does not match classifier "
                f"input {clf.fc.in_features}"
            )
        return clf(z)

    def _check_images(self, x: torch.Tensor):
        s = self.config.image_size
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2:] != (s, s):
            raise ValueError(
                f"expected images of shape (B, 1, {s}, {s}), got {tuple(x.shape)}"
            )


class SingleLatentVae(nn.Module):
    """Ablation model: one latent space, standard normal prior, two classifiers."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        total = sum(config.latent_dims)
        if config.arch == "conv":
            self.encoder = ConvEncoder(total, config.width_scale)
            self.decoder = ConvDecoder(total, config.width_scale)
        else:
            self.encoder = MlpEncoder(config.image_size, total)
            self.decoder = MlpDecoder(total, config.image_size)
        self.classifier_d = AuxClassifier(total, config.num_domains)
        self.classifier_y = AuxClassifier(total, config.num_classes)

    def encode(self, x: torch.Tensor, which: str = "y") -> GaussianParams:
        return self.encoder(x)

    def decode_single(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def classify_logits(self, z: torch.Tensor, which: str) -> torch.Tensor:
        return {"d": self.classifier_d, "y": self.classifier_y}[which](z)


def build_model(config: ExperimentConfig) -> nn.Module:
    if config.objective == "vae_ablation":
        return SingleLatentVae(config)
    return DivaModel(config)


def init_model(config: ExperimentConfig, seed: int) -> nn.Module:
    """Deterministic fan-in uniform initialization; biases zero."""
    model = build_model(config)
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            weight = module.weight
            if isinstance(module, nn.ConvTranspose2d):
                fan_in = weight.shape[0] * weight.shape[2] * weight.shape[3]
            else:
                fan_in = weight[0].numel()
            bound = 1.0 / float(np.sqrt(fan_in))
            with torch.no_grad():
                weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    """Immutable named-parameter collection plus the config that created it.

    Includes batch-norm running statistics so inference is deterministic.
    """

    config: ExperimentConfig
    params: dict[str, np.ndarray]
    _model_cache: list = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def from_model(cls, model: nn.Module, config: ExperimentConfig) -> "Checkpoint":
        params = {
            name: tensor.detach().cpu().numpy().astype(np.float32, copy=True)
            for name, tensor in model.state_dict().items()
        }
        return cls(config=config, params=params)

    def to_model(self) -> nn.Module:
        """Build a fresh eval-mode module holding these parameters."""
        model = build_model(self.config)
        state = {}
        for name, ref in model.state_dict().items():
            if name not in self.params:
                raise CheckpointError(f"missing parameter entry {name!r}")
            value = torch.from_numpy(self.params[name].copy()).to(ref.dtype)
            state[name] = value.view(ref.shape)
        model.load_state_dict(state)
        model.eval()
        return model

    def model(self) -> nn.Module:
        """Cached eval-mode module; treat as read-only."""
        if not self._model_cache:
            self._model_cache.append(self.to_model())
        return self._model_cache[0]


def init_params(config: ExperimentConfig, seed: int) -> Checkpoint:
    return Checkpoint.from_model(init_model(config, seed), config)


def encode(x: torch.Tensor, which: str, ckpt: Checkpoint) -> GaussianParams:
    if which not in ("d", "x", "y"):
        raise ValueError(f"subspace must be one of d/x/y, got {which!r}")
    with torch.no_grad():
        return ckpt.model().encode(x, which)


def conditional_prior(label, which: str, ckpt: Checkpoint) -> GaussianParams:
    if which not in ("d", "y"):
        raise ValueError(f"conditional priors exist for d and y only, got {which!r}")
    model = ckpt.model()
    cardinality = (
        ckpt.config.num_domains if which == "d" else ckpt.config.num_classes
    )
    labels = torch.as_tensor(label)
    if torch.any(labels < 0) or torch.any(labels >= cardinality):
        raise ValueError(f"label out of range for cardinality {cardinality}")
    squeeze = labels.dim() == 0
    with torch.no_grad():
        g = model.prior(labels.view(-1), which)
    if squeeze:
        g = GaussianParams(mean=g.mean[0], scale=g.scale[0])
    return g


def decode(lt: LatentTriple, ckpt: Checkpoint) -> torch.Tensor:
    with torch.no_grad():
        return ckpt.model().decode(lt)


def aux_classify(z: torch.Tensor, which: str, ckpt: Checkpoint) -> CategoricalParams:
    with torch.no_grad():
        logits = ckpt.model().classify_logits(z, which)
    return CategoricalParams(probs=torch.softmax(logits, dim=-1))


def predict_class(x: torch.Tensor, ckpt: Checkpoint) -> torch.Tensor:
    """argmax of the class classifier on the posterior mean of z_y.

    Touches only the z_y encoder and the class classifier.
    """
    model = ckpt.model()
    with torch.no_grad():
        zy = model.encode(x, "y").mean
        logits = model.classify_logits(zy, "y")
    return logits.argmax(dim=-1)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("B", CHECKPOINT_VERSION))
    config_bytes = ckpt.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(config_bytes)))
    buf.write(config_bytes)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, value in ckpt.params.items():
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", value.ndim))
        for dim in value.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedPayloadError(
                f"file ends at byte {len(view)}, needed {pos + n}"
            )
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise UnknownFormatError("unknown format: bad magic bytes")
    version = take(1)[0]
    if version != CHECKPOINT_VERSION:
        raise UnknownVersionError(f"unsupported checkpoint version {version}")
    config_len = struct.unpack("<I", take(4))[0]
    config = ExperimentConfig.from_text(bytes(take(config_len)).decode("utf-8"))
    count = struct.unpack("<I", take(4))[0]
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<I", take(4))[0]
        name = bytes(take(name_len)).decode("utf-8")
        rank = struct.unpack("<I", take(4))[0]
        shape = tuple(
            struct.unpack("<I", take(4))[0] for _ in range(rank)
        )
        n_items = int(np.prod(shape)) if shape else 1
        payload = take(4 * n_items)
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return Checkpoint(config=config, params=params)
