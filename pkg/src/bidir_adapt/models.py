"""Generator, discriminator and classifier networks.

All networks take NCHW float tensors. Generators read images in [-0.5, 0.5]
and emit images in [-127.5, 127.5]; discriminators and classifiers read the
[-127.5, 127.5] scale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import DISCRIMINATIVE_RANGE, GENERATOR_RANGE, ConfigurationError, ImageBatch, RangeError

CHECKPOINT_SCHEMA = 1

# Keras-style momentum 0.99 on the running statistics
BN_MOMENTUM = 0.01
INIT_STD = 0.02


@dataclass
class ArchConfig:
    """Layer widths for the three network families.

    Defaults follow the full-size digit architecture; :meth:`desk` is a reduced
    variant for CPU-scale experiments.
    """

    noise_dim: int = 5
    gen_features: int = 64
    gen_blocks: int = 4
    disc_features: tuple = (64, 128)
    clf_conv: tuple = (32, 48)
    clf_hidden: tuple = (100, 100)

    @classmethod
    def desk(cls):
        return cls(noise_dim=5, gen_features=16, gen_blocks=2, disc_features=(16, 32),
                   clf_conv=(16, 24), clf_hidden=(64,))

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("disc_features", "clf_conv", "clf_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _check_image_shape(image_shape):
    if len(image_shape) != 3:
        raise ConfigurationError(f"image_shape must be (H, W, C), got {image_shape}")
    h, w, c = image_shape
    if h < 1 or w < 1 or c not in (1, 3):
        raise ConfigurationError(f"invalid image shape {image_shape}")


def init_weights(module: nn.Module):
    """Truncated-normal(0, 0.02) weights, zero biases, unit BN scale."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _bn(c):
    return nn.BatchNorm2d(c, momentum=BN_MOMENTUM, eps=1e-3)


class ResidualBlock(nn.Module):
    def __init__(self, features):
        super().__init__()
        self.conv1 = nn.Conv2d(features, features, 3, padding=1)
        self.bn1 = _bn(features)
        self.conv2 = nn.Conv2d(features, features, 3, padding=1)
        self.bn2 = _bn(features)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        return x + self.bn2(self.conv2(h))


class Generator(nn.Module):
    """Residual image-to-image network with a noise channel.

    The noise vector goes through a linear layer to one extra channel at image
    resolution, concatenated to the input image.
    """

    kind = "generator"

    def __init__(self, image_shape, noise_dim=5, features=64, blocks=4, out_scale=DISCRIMINATIVE_RANGE[1]):
        super().__init__()
        _check_image_shape(image_shape)
        if noise_dim < 0 or features < 1 or blocks < 0:
            raise ConfigurationError("generator sizes must be non-negative")
        h, w, c = image_shape
        self.image_shape = tuple(image_shape)
        self.noise_dim = noise_dim
        self.out_scale = float(out_scale)
        self.noise_fc = nn.Linear(noise_dim, h * w) if noise_dim > 0 else None
        self.conv_in = nn.Conv2d(c + (1 if noise_dim > 0 else 0), features, 3, padding=1)
        self.bn_in = _bn(features)
        self.blocks = nn.ModuleList(ResidualBlock(features) for _ in range(blocks))
        self.conv_out = nn.Conv2d(features, c, 3, padding=1)
        self.arch = {"kind": self.kind, "image_shape": list(image_shape), "noise_dim": noise_dim,
                     "features": features, "blocks": blocks, "out_scale": self.out_scale}
        init_weights(self)

    def forward(self, x, z=None):
        if self.noise_fc is not None:
            if z is None:
                raise ValueError("generator expects a noise batch")
            h, w, _ = self.image_shape
            x = torch.cat([x, self.noise_fc(z).view(-1, 1, h, w)], dim=1)
        x = F.relu(self.bn_in(self.conv_in(x)))
        for block in self.blocks:
            x = block(x)
        return torch.tanh(self.conv_out(x)) * self.out_scale


def _pool_size(s):
    return min(2, s)


class Discriminator(nn.Module):
    """Two strided convolutions, average pooling, and a final convolution to one score."""

    kind = "discriminator"

    def __init__(self, image_shape, features=(64, 128), slope=0.2):
        super().__init__()
        _check_image_shape(image_shape)
        h, w, c = image_shape
        f1, f2 = features
        self.slope = slope
        self.conv1 = nn.Conv2d(c, f1, 3, stride=2, padding=1)
        self.bn1 = _bn(f1)
        self.conv2 = nn.Conv2d(f1, f2, 3, stride=2, padding=1)
        self.bn2 = _bn(f2)
        for _ in range(2):
            h, w = (h + 1) // 2, (w + 1) // 2
        self.pool = nn.AvgPool2d((_pool_size(h), _pool_size(w)))
        h, w = h // _pool_size(h), w // _pool_size(w)
        # final conv spans the pooled map: one scalar per image
        self.conv_out = nn.Conv2d(f2, 1, (h, w))
        self.arch = {"kind": self.kind, "image_shape": list(image_shape), "features": list(features),
                     "slope": slope}
        init_weights(self)

    def forward(self, x):
        x = F.leaky_relu(self.bn1(self.conv1(x)), self.slope)
        x = F.leaky_relu(self.bn2(self.conv2(x)), self.slope)
        return self.conv_out(self.pool(x)).flatten(1)


class Classifier(nn.Module):
    """Two conv + max-pool stages followed by fully connected layers; emits logits."""

    kind = "classifier"

    def __init__(self, image_shape, n_classes, conv=(32, 48), hidden=(100, 100)):
        super().__init__()
        _check_image_shape(image_shape)
        if n_classes < 2:
            raise ConfigurationError("a classifier needs at least 2 classes")
        h, w, c = image_shape
        self.n_classes = n_classes
        self.convs = nn.ModuleList()
        for f in conv:
            self.convs.append(nn.Conv2d(c, f, 5, padding=2))
            c = f
            h, w = max(h // 2, 1), max(w // 2, 1)
        self.fcs = nn.ModuleList()
        d = c * h * w
        for n in hidden:
            self.fcs.append(nn.Linear(d, n))
            d = n
        self.out = nn.Linear(d, n_classes)
        self.arch = {"kind": self.kind, "image_shape": list(image_shape), "n_classes": n_classes,
                     "conv": list(conv), "hidden": list(hidden)}
        init_weights(self)

    def forward(self, x):
        for conv in self.convs:
            x = F.relu(conv(x))
            if x.shape[-1] > 1 and x.shape[-2] > 1:
                x = F.max_pool2d(x, 2)
        x = x.flatten(1)
        for fc in self.fcs:
            x = F.relu(fc(x))
        return self.out(x)


def build_generator(image_shape, noise_dim=5, arch: ArchConfig | None = None) -> Generator:
    arch = arch or ArchConfig()
    return Generator(image_shape, noise_dim, arch.gen_features, arch.gen_blocks)


def build_discriminator(image_shape, arch: ArchConfig | None = None) -> Discriminator:
    arch = arch or ArchConfig()
    return Discriminator(image_shape, arch.disc_features)


def build_classifier(image_shape, n_classes, arch: ArchConfig | None = None) -> Classifier:
    arch = arch or ArchConfig()
    return Classifier(image_shape, n_classes, arch.clf_conv, arch.clf_hidden)


def build_from_arch(arch: dict) -> nn.Module:
    kind = arch["kind"]
    shape = tuple(arch["image_shape"])
    if kind == "generator":
        m = Generator(shape, arch["noise_dim"], arch["features"], arch["blocks"], arch["out_scale"])
    elif kind == "discriminator":
        m = Discriminator(shape, tuple(arch["features"]), arch["slope"])
    elif kind == "classifier":
        m = Classifier(shape, arch["n_classes"], tuple(arch["conv"]), tuple(arch["hidden"]))
    else:
        raise ConfigurationError(f"unknown network kind {kind!r}")
    return m


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# tensor <-> ImageBatch and forward helpers


def to_tensor(x: ImageBatch, device=None) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x.data, dtype=np.float32)).permute(0, 3, 1, 2).to(device or "cpu")


def to_images(t: torch.Tensor, value_range) -> ImageBatch:
    return ImageBatch(t.detach().permute(0, 2, 3, 1).cpu().numpy(), value_range)


def _check_range(t: torch.Tensor, value_range, what):
    lo, hi = value_range
    if t.numel() and (t.min() < lo - 1e-4 or t.max() > hi + 1e-4):
        raise RangeError(f"{what} values outside {value_range}")


def _check_shape(model, t: torch.Tensor):
    h, w, c = model.arch["image_shape"]
    if t.dim() != 4 or tuple(t.shape[1:]) != (c, h, w):
        raise ValueError(f"{model.kind} expects (B, {c}, {h}, {w}) input, got {tuple(t.shape)}")


def sample_noise(batch, noise_dim, generator: torch.Generator | None = None, dtype=torch.float32):
    return torch.randn(batch, noise_dim, generator=generator, dtype=dtype)


def generate(G: Generator, x: torch.Tensor, z: torch.Tensor | None) -> torch.Tensor:
    """Translate ``x`` (generator scale) to the other domain (discriminative scale)."""
    _check_shape(G, x)
    _check_range(x, GENERATOR_RANGE, "generator input")
    if G.noise_dim and (z is None or tuple(z.shape) != (x.shape[0], G.noise_dim)):
        raise ValueError(f"noise batch must have shape ({x.shape[0]}, {G.noise_dim})")
    return G(x, z)


def discriminate(D: Discriminator, x: torch.Tensor) -> torch.Tensor:
    """One unbounded realness score per image, shape ``(B,)``."""
    _check_shape(D, x)
    return D(x).view(-1)


def classify_logits(C: Classifier, x: torch.Tensor) -> torch.Tensor:
    _check_shape(C, x)
    return C(x)


def classify(C: Classifier, x: torch.Tensor) -> torch.Tensor:
    """Class probabilities ``(B, K)``."""
    return torch.softmax(classify_logits(C, x), dim=1)


def to_generator_scale(x: torch.Tensor) -> torch.Tensor:
    """Rescale a generated image (discriminative scale) to be fed to another generator."""
    return x / 255.0


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: nn.Module, path):
    """Write params and buffers as named arrays plus the arch descriptor."""
    arrays = {f"state/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__arch__"] = np.array(json.dumps(model.arch))
    arrays["__schema__"] = np.array(CHECKPOINT_SCHEMA)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> nn.Module:
    try:
        z = np.load(path, allow_pickle=False)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if int(z["__schema__"]) != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: checkpoint schema {int(z['__schema__'])} != {CHECKPOINT_SCHEMA}")
    model = build_from_arch(json.loads(str(z["__arch__"])))
    expected = model.state_dict()
    state = {}
    for key, ref in expected.items():
        name = f"state/{key}"
        if name not in z.files:
            raise ValueError(f"{path}: missing array {key}")
        arr = z[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ValueError(f"{path}: {key} has shape {arr.shape}, arch expects {tuple(ref.shape)}")
        state[key] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model


@dataclass
class Networks:
    """The six networks of the bidirectional model."""

    G_st: Generator
    G_ts: Generator
    D_s: Discriminator
    D_t: Discriminator
    C_s: Classifier
    C_t: Classifier
    names: tuple = field(default=("G_st", "G_ts", "D_s", "D_t", "C_s", "C_t"), repr=False)

    @classmethod
    def build(cls, image_shape, n_classes, arch: ArchConfig):
        return cls(
            G_st=build_generator(image_shape, arch.noise_dim, arch),
            G_ts=build_generator(image_shape, arch.noise_dim, arch),
            D_s=build_discriminator(image_shape, arch),
            D_t=build_discriminator(image_shape, arch),
            C_s=build_classifier(image_shape, n_classes, arch),
            C_t=build_classifier(image_shape, n_classes, arch),
        )

    def items(self):
        return [(n, getattr(self, n)) for n in self.names]

    def train(self):
        for _, m in self.items():
            m.train()
        return self

    def eval(self):
        for _, m in self.items():
            m.eval()
        return self
