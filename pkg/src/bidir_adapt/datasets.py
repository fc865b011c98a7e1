"""Domain-pair loading, synthesis and preprocessing.

Images are stored as ``uint8`` arrays of shape ``(N, H, W, C)`` inside a
:class:`DomainPair`; batches handed to the networks are float
:class:`ImageBatch` objects that carry the interval their values live in.
"""

from __future__ import annotations

import gzip
import io
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "BIDIR_ADAPT_DATA"

PIXEL_RANGE = (0.0, 255.0)
GENERATOR_RANGE = (-0.5, 0.5)
DISCRIMINATIVE_RANGE = (-127.5, 127.5)

SETTINGS = ("mnist->usps", "usps->mnist", "mnist->mnistm", "svhn->mnist", "mnist->svhn", "synthetic")

CACHE_MAGIC = b"BDAPAIR\x00"
CACHE_VERSION = 1


class DataError(RuntimeError):
    """Raised when raw dataset files are missing or malformed."""


class ConfigurationError(ValueError):
    """Raised for invalid settings or arguments."""


class RangeError(ValueError):
    """Raised when an image batch is not in the range an operation expects."""


@dataclass(frozen=True)
class ImageBatch:
    """Rank-4 image tensor ``(batch, height, width, channels)`` with a declared range."""

    data: np.ndarray
    range: tuple = PIXEL_RANGE

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ValueError(f"ImageBatch needs a rank-4 array, got shape {data.shape}")
        if data.shape[-1] not in (1, 3):
            raise ValueError(f"ImageBatch channels must be 1 or 3, got {data.shape[-1]}")
        lo, hi = self.range
        if lo > hi:
            raise ValueError(f"bad range {self.range}")
        if data.size and (data.min() < lo - 1e-4 or data.max() > hi + 1e-4):
            raise RangeError(
                f"values [{data.min():.4g}, {data.max():.4g}] outside declared range {self.range}"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "range", (float(lo), float(hi)))

    def __len__(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabelBatch:
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be a 1-d integer array")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class DomainPair:
    """Labeled source data, unlabeled target data and a labeled target validation subset.

    ``target_labels`` is kept only for evaluation; training code never reads it.
    ``target_val_idx`` indexes into the target arrays.
    """

    source_images: np.ndarray
    source_labels: np.ndarray
    target_images: np.ndarray
    target_labels: Optional[np.ndarray]
    target_val_idx: np.ndarray
    n_classes: int
    source_val_images: Optional[np.ndarray] = None
    source_val_labels: Optional[np.ndarray] = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source_images.shape[1:] != self.target_images.shape[1:]:
            raise ValueError(
                f"source geometry {self.source_images.shape[1:]} != target {self.target_images.shape[1:]}"
            )
        if len(self.source_images) != len(self.source_labels):
            raise ValueError("source images and labels differ in length")
        # read-only views, so the caller's own arrays stay writable
        for key in ("source_images", "source_labels", "target_images", "target_labels", "target_val_idx"):
            arr = getattr(self, key)
            if arr is not None:
                view = np.asarray(arr).view()
                view.flags.writeable = False
                setattr(self, key, view)

    @property
    def image_shape(self):
        return tuple(self.source_images.shape[1:])

    @property
    def target_val_images(self):
        return self.target_images[self.target_val_idx]

    @property
    def target_val_labels(self):
        if self.target_labels is None:
            raise DataError("target validation labels are unavailable")
        return self.target_labels[self.target_val_idx]


# ---------------------------------------------------------------------------
# preprocessing


def _require_range(x: ImageBatch, expected):
    if tuple(x.range) != tuple(float(v) for v in expected):
        raise RangeError(f"expected an ImageBatch in range {expected}, got {x.range}")


def preprocess_generator_input(x: ImageBatch) -> ImageBatch:
    """Map pixels in [0, 255] to [-0.5, 0.5]."""
    _require_range(x, PIXEL_RANGE)
    return ImageBatch(x.data.astype(np.float32) / 255.0 - 0.5, GENERATOR_RANGE)


def preprocess_discriminative_input(x: ImageBatch) -> ImageBatch:
    """Map pixels in [0, 255] to [-127.5, 127.5] (classifier/discriminator scale)."""
    _require_range(x, PIXEL_RANGE)
    return ImageBatch(x.data.astype(np.float32) - 127.5, DISCRIMINATIVE_RANGE)


def postprocess_generator_input(x: ImageBatch) -> ImageBatch:
    _require_range(x, GENERATOR_RANGE)
    return ImageBatch(np.clip((x.data + 0.5) * 255.0, 0.0, 255.0), PIXEL_RANGE)


def postprocess_discriminative_input(x: ImageBatch) -> ImageBatch:
    _require_range(x, DISCRIMINATIVE_RANGE)
    return ImageBatch(np.clip(x.data + 127.5, 0.0, 255.0), PIXEL_RANGE)


# ---------------------------------------------------------------------------
# batching


def batch_stream(images, labels=None, batch_size=32, seed=0, epoch=0) -> Iterator:
    """Yield one epoch of shuffled ``(ImageBatch, labels-or-None)`` pairs.

    The permutation depends only on ``(seed, epoch)`` (``seed`` may be an int or
    a sequence of ints), so an interrupted run can
    be resumed at an epoch boundary. The trailing partial batch is dropped.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(images)
    if n == 0:
        raise ValueError("cannot stream an empty dataset")
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), epoch])
    order = rng.permutation(n)
    for b in range(n // batch_size):
        idx = order[b * batch_size:(b + 1) * batch_size]
        x = ImageBatch(images[idx].astype(np.float32), PIXEL_RANGE)
        y = None if labels is None else np.asarray(labels[idx], dtype=np.int64)
        yield x, y


def n_batches(n_samples, batch_size):
    return n_samples // batch_size


# ---------------------------------------------------------------------------
# MNIST-M style blending and textures


def make_mnist_m(digits: ImageBatch, patches: ImageBatch, seed=0) -> ImageBatch:
    """Blend grayscale digits with random crops of colour patches.

    Each output is ``|digit - crop|`` per channel, so a black background shows the
    texture unchanged and the stroke shows its inverse. ``patches`` may be larger
    than the digits; a random crop of the digit size is taken from a randomly
    chosen patch for every image.
    """
    d = digits.data
    p = patches.data
    if d.shape[-1] != 1:
        raise ValueError("digits must be single-channel")
    if p.shape[-1] != 3:
        raise ValueError("texture patches must be RGB")
    _require_range(digits, PIXEL_RANGE)
    _require_range(patches, PIXEL_RANGE)
    n, h, w, _ = d.shape
    ph, pw = p.shape[1:3]
    if ph < h or pw < w:
        raise ValueError(f"texture patches {ph}x{pw} are smaller than digits {h}x{w}")
    rng = np.random.default_rng(seed)
    which = rng.integers(0, len(p), size=n)
    ys = rng.integers(0, ph - h + 1, size=n)
    xs = rng.integers(0, pw - w + 1, size=n)
    out = np.empty((n, h, w, 3), dtype=np.float32)
    for i in range(n):
        crop = p[which[i], ys[i]:ys[i] + h, xs[i]:xs[i] + w].astype(np.float32)
        out[i] = np.abs(d[i].astype(np.float32) - crop)
    return ImageBatch(out, PIXEL_RANGE)


def procedural_textures(n=32, size=64, seed=0) -> ImageBatch:
    """Smooth coloured noise textures; a stand-in for natural photo crops."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        tex = np.zeros((size, size, 3))
        for scale, amp in ((2.0, 1.0), (4.0, 0.5), (8.0, 0.25)):
            noise = rng.normal(size=(size, size, 3))
            tex += amp * ndimage.gaussian_filter(noise, sigma=(size / (2 * scale), size / (2 * scale), 0))
        tex -= tex.min(axis=(0, 1))
        tex /= tex.max(axis=(0, 1)) + 1e-8
        base = rng.uniform(0, 255, size=3)
        spread = rng.uniform(60, 200, size=3)
        out[i] = np.clip(base + (tex - 0.5) * spread, 0, 255)
    return ImageBatch(out, PIXEL_RANGE)


def load_texture_dir(path, size=64, max_images=200) -> ImageBatch:
    """Load colour photos from a directory and cut them into square patches."""
    from PIL import Image

    path = Path(path)
    files = sorted(f for f in path.iterdir() if f.suffix.lower() in (".jpg", ".jpeg", ".png", ".bmp"))
    if not files:
        raise DataError(f"no texture images found in {path}")
    patches = []
    for f in files[:max_images]:
        img = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32)
        for y in range(0, img.shape[0] - size + 1, size):
            for x in range(0, img.shape[1] - size + 1, size):
                patches.append(img[y:y + size, x:x + size])
    if not patches:
        raise DataError(f"texture images in {path} are smaller than {size}px")
    return ImageBatch(np.stack(patches), PIXEL_RANGE)


# ---------------------------------------------------------------------------
# synthetic glyph domains

# 5x7 bitmap digits, one string per row
_GLYPHS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
]
GLYPH_TEMPLATES = np.array([[[c == "1" for c in row] for row in g] for g in _GLYPHS], dtype=np.float32)


def render_glyphs(labels, size=16, seed=0) -> np.ndarray:
    """Render jittered digit glyphs as ``(N, size, size, 1)`` uint8 images.

    Every sample gets its own rotation, scale, shear, translation and stroke
    width, so classes have real intra-class variation.
    """
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    up = 4
    out = np.zeros((len(labels), size, size, 1), dtype=np.uint8)
    for i, k in enumerate(labels):
        tpl = np.kron(GLYPH_TEMPLATES[k], np.ones((up, up), dtype=np.float32))
        if rng.random() < 0.5:
            tpl = ndimage.grey_dilation(tpl, size=(up // 2 + 1, up // 2 + 1))
        tpl = ndimage.gaussian_filter(tpl, 1.0)
        th, tw = tpl.shape
        angle = np.deg2rad(rng.uniform(-15, 15))
        scale = rng.uniform(0.75, 0.95) * size / th
        shear = rng.uniform(-0.2, 0.2)
        c, s = np.cos(angle), np.sin(angle)
        fwd = scale * np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]])
        inv = np.linalg.inv(fwd)
        centre_out = np.array([size / 2, size / 2]) + rng.uniform(-1.5, 1.5, size=2)
        centre_in = np.array([th / 2, tw / 2])
        offset = centre_in - inv @ centre_out
        img = ndimage.affine_transform(tpl, inv, offset=offset, output_shape=(size, size), order=1)
        out[i, :, :, 0] = np.clip(img * 255.0 / max(img.max(), 1e-6), 0, 255).astype(np.uint8)
    return out


def synthetic_pair(n=2000, size=16, val_size=1000, n_source_val=500, seed=0, texture="fixed") -> DomainPair:
    """Procedural 10-class glyph pair.

    Source: white glyphs on black, replicated to RGB. Target: independently drawn
    glyphs blended (``|glyph - texture|``) with one fixed smooth colour texture,
    or with ``texture="random"`` a random crop of one of 64 textures per image.
    """
    if texture not in ("fixed", "random"):
        raise ConfigurationError("texture must be 'fixed' or 'random'")
    rng = np.random.default_rng(seed)
    k = 10
    ys = rng.integers(0, k, size=n)
    ysv = rng.integers(0, k, size=n_source_val)
    yt = rng.integers(0, k, size=n)
    seeds = rng.integers(0, 2**31, size=4)
    src = np.repeat(render_glyphs(ys, size, seeds[0]), 3, axis=-1)
    src_val = np.repeat(render_glyphs(ysv, size, seeds[1]), 3, axis=-1)
    tgt_digits = render_glyphs(yt, size, seeds[2])
    if texture == "fixed":
        textures = procedural_textures(n=1, size=size, seed=int(seeds[3]))
    else:
        textures = procedural_textures(n=64, size=4 * size, seed=int(seeds[3]))
    tgt = make_mnist_m(ImageBatch(tgt_digits.astype(np.float32)), textures, seed=int(seeds[3]) + 1)
    tgt = np.round(tgt.data).astype(np.uint8)
    val_idx = _val_subset(n, val_size, rng)
    return DomainPair(
        source_images=src, source_labels=ys.astype(np.int64),
        target_images=tgt, target_labels=yt.astype(np.int64),
        target_val_idx=val_idx, n_classes=k,
        source_val_images=src_val, source_val_labels=ysv.astype(np.int64),
        name="synthetic", meta={"n": n, "size": size, "seed": seed, "texture": texture},
    )


def _val_subset(n, val_size, rng):
    if val_size > n:
        raise ConfigurationError(f"validation size {val_size} exceeds target size {n}")
    return np.sort(rng.choice(n, size=val_size, replace=False))


# ---------------------------------------------------------------------------
# raw file readers


def _open_maybe_gz(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise DataError(f"missing data file: expected {path} (or {gz.name})")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (the MNIST container), optionally gzipped."""
    with _open_maybe_gz(Path(path)) as fh:
        raw = fh.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DataError(f"{path}: not an unsigned-byte IDX file")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DataError(f"{path}: payload size does not match header {dims}")
    return data.reshape(dims)


def write_idx(path, array: np.ndarray):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_mnist(root) -> tuple:
    """Return the 60k MNIST training images ``(N, 28, 28, 1)`` and labels."""
    d = Path(root) / "mnist"
    x = read_idx(d / "train-images-idx3-ubyte")
    y = read_idx(d / "train-labels-idx1-ubyte")
    return x[..., None], y.astype(np.int64)


def load_usps(root) -> tuple:
    """Return all USPS images as ``(N, 16, 16, 1)`` uint8 plus labels.

    Reads ``usps/usps.h5`` with ``train``/``test`` groups holding flattened
    ``data`` in [0, 1] and ``target``; the train group comes first.
    """
    import h5py

    path = Path(root) / "usps" / "usps.h5"
    if not path.exists():
        raise DataError(f"missing data file: expected {path}")
    xs, ys = [], []
    with h5py.File(path, "r") as fh:
        for split in ("train", "test"):
            xs.append(np.asarray(fh[split]["data"]))
            ys.append(np.asarray(fh[split]["target"]))
    x = np.concatenate(xs).reshape(-1, 16, 16, 1)
    x = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    n_train = len(xs[0])
    return x, np.concatenate(ys).astype(np.int64), n_train


def load_svhn(root) -> tuple:
    """Return SVHN train followed by test as ``(N, 32, 32, 3)`` plus labels (10 -> 0)."""
    from scipy.io import loadmat

    d = Path(root) / "svhn"
    xs, ys = [], []
    for name in ("train_32x32.mat", "test_32x32.mat"):
        path = d / name
        if not path.exists():
            raise DataError(f"missing data file: expected {path}")
        m = loadmat(path)
        xs.append(np.transpose(m["X"], (3, 0, 1, 2)).astype(np.uint8))
        y = m["y"].reshape(-1).astype(np.int64)
        y[y == 10] = 0
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys), len(xs[0])


def resize_images(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a uint8 ``(N, H, W, C)`` stack to ``size`` x ``size``."""
    import torch
    import torch.nn.functional as F

    out = []
    for start in range(0, len(images), 4096):
        t = torch.from_numpy(images[start:start + 4096].astype(np.float32)).permute(0, 3, 1, 2)
        r = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
        out.append(r.permute(0, 2, 3, 1).clamp(0, 255).round().to(torch.uint8).numpy())
    return np.concatenate(out) if out else images.reshape(0, size, size, images.shape[-1])


def to_rgb(images: np.ndarray) -> np.ndarray:
    return images if images.shape[-1] == 3 else np.repeat(images, 3, axis=-1)


def resolve_data_root(data_root=None) -> Path:
    root = data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DataError(f"no data root given; pass --data-root or set {DATA_ROOT_ENV}")
    return Path(root)


def load_domain_pair(setting: str, data_root=None, val_size=1000, seed=0,
                     synthetic_n=2000, synthetic_size=16, texture_dir=None) -> DomainPair:
    """Build the source/target pair for one adaptation setting.

    MNIST sources use the 50k/10k train/validation split. The target set is used
    whole for testing; ``val_size`` of its images keep their labels for choosing
    the ensemble weight.
    """
    if setting not in SETTINGS:
        raise ConfigurationError(f"unknown setting {setting!r}; choose from {SETTINGS}")
    if setting == "synthetic":
        return synthetic_pair(n=synthetic_n, size=synthetic_size, val_size=val_size, seed=seed)

    root = resolve_data_root(data_root)
    rng = np.random.default_rng(seed)

    def mnist_source(size=None, rgb=False):
        x, y = load_mnist(root)
        if size:
            x = resize_images(x, size)
        if rgb:
            x = to_rgb(x)
        return x[:50000], y[:50000], x[50000:], y[50000:]

    if setting == "mnist->usps":
        xs, ys, xsv, ysv = mnist_source()
        xt, yt, _ = load_usps(root)
        xt = resize_images(xt, 28)
    elif setting == "usps->mnist":
        xu, yu, n_train = load_usps(root)
        xu = resize_images(xu, 28)
        # USPS train group split 6562 / 729; the 2007 test images are not used
        n_fit = n_train - 729
        xs, ys, xsv, ysv = xu[:n_fit], yu[:n_fit], xu[n_fit:n_train], yu[n_fit:n_train]
        xt, yt = load_mnist(root)
    elif setting == "mnist->mnistm":
        xs, ys, xsv, ysv = mnist_source(rgb=True)
        digits, yt = load_mnist(root)
        textures = load_texture_dir(texture_dir) if texture_dir else procedural_textures(n=200, size=64, seed=seed)
        xt = np.round(make_mnist_m(ImageBatch(digits.astype(np.float32)), textures, seed=seed).data).astype(np.uint8)
    elif setting == "svhn->mnist":
        xv, yv, n_train = load_svhn(root)
        xs, ys, xsv, ysv = xv[:n_train], yv[:n_train], xv[n_train:], yv[n_train:]
        xt, yt = load_mnist(root)
        xt = to_rgb(resize_images(xt, 32))
    else:  # mnist->svhn
        xs, ys, xsv, ysv = mnist_source(size=32, rgb=True)
        xt, yt, _ = load_svhn(root)

    return DomainPair(
        source_images=xs, source_labels=ys, target_images=xt, target_labels=yt,
        target_val_idx=_val_subset(len(xt), val_size, rng), n_classes=10,
        source_val_images=xsv, source_val_labels=ysv, name=setting,
        meta={"seed": seed, "data_root": str(root)},
    )


# ---------------------------------------------------------------------------
# cache container
#
# layout: 8-byte magic, uint32 little-endian version, then an .npz payload


def save_domain_pair(pair: DomainPair, path):
    arrays = {
        "source_images": pair.source_images, "source_labels": pair.source_labels,
        "target_images": pair.target_images, "target_val_idx": pair.target_val_idx,
        "n_classes": np.array(pair.n_classes), "name": np.array(pair.name),
    }
    for key in ("target_labels", "source_val_images", "source_val_labels"):
        if getattr(pair, key) is not None:
            arrays[key] = getattr(pair, key)
    buf = io.BytesIO()
    np.savez_compressed(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<I", CACHE_VERSION) + buf.getvalue())


def load_cached_pair(path) -> DomainPair:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CACHE_MAGIC:
        raise DataError(f"{path}: not a domain-pair cache file")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != CACHE_VERSION:
        raise DataError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    z = np.load(io.BytesIO(raw[12:]), allow_pickle=False)
    get = lambda k: z[k] if k in z.files else None  # noqa: E731
    return DomainPair(
        source_images=z["source_images"], source_labels=z["source_labels"],
        target_images=z["target_images"], target_labels=get("target_labels"),
        target_val_idx=z["target_val_idx"], n_classes=int(z["n_classes"]),
        source_val_images=get("source_val_images"), source_val_labels=get("source_val_labels"),
        name=str(z["name"]),
    )


def stack_classes(images: np.ndarray, labels: np.ndarray, per_class: int, seed=0) -> tuple:
    """Pick up to ``per_class`` random samples of every class (for plots and SSIM)."""
    rng = np.random.default_rng(seed)
    keep = []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        keep.append(rng.choice(idx, size=min(per_class, len(idx)), replace=False))
    keep = np.sort(np.concatenate(keep))
    return images[keep], labels[keep]
