"""Accuracy, structural similarity and 2-D embeddings."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)


def accuracy(predictions, truth) -> float:
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {truth.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == truth))


@dataclass
class SsimConfig:
    """Window and constants for SSIM.

    The default is the classic 11x11 Gaussian window (sigma 1.5) with
    ``K1=0.01, K2=0.03`` over a dynamic range of 255; ``kind="uniform"`` gives
    a flat window of the same size.
    """

    window: int = 11
    kind: str = "gaussian"
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be positive")
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown window kind {self.kind!r}")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ValueError("SSIM constants and dynamic range must be positive")

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2

    def kernel(self) -> np.ndarray:
        if self.kind == "uniform":
            k = np.ones((self.window, self.window))
        else:
            g = np.exp(-((np.arange(self.window) - (self.window - 1) / 2) ** 2) / (2 * self.sigma ** 2))
            k = np.outer(g, g)
        return k / k.sum()

    def to_dict(self):
        return asdict(self)


def _as_nchw(x) -> torch.Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, :, :, None]
    elif x.ndim == 3:
        x = x[None]
    return torch.from_numpy(x).permute(0, 3, 1, 2)


def ssim_batch(a, b, cfg: SsimConfig | None = None) -> np.ndarray:
    """SSIM of aligned image pairs ``a[i], b[i]`` with shapes ``(N, H, W, C)``.

    Local statistics are taken over every full window position (no padding);
    the per-channel SSIM maps are averaged into one score per pair.
    """
    cfg = cfg or SsimConfig()
    A, B = _as_nchw(a), _as_nchw(b)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {tuple(A.shape)} vs {tuple(B.shape)}")
    n, c, h, w = A.shape
    if cfg.window > min(h, w):
        raise ValueError(f"SSIM window {cfg.window} does not fit in {h}x{w} images")
    k = torch.from_numpy(cfg.kernel())[None, None].repeat(c, 1, 1, 1)

    def filt(x):
        return F.conv2d(x, k, groups=c)

    mu_a, mu_b = filt(A), filt(B)
    var_a = filt(A * A) - mu_a ** 2
    var_b = filt(B * B) - mu_b ** 2
    cov = filt(A * B) - mu_a * mu_b
    c1, c2 = cfg.c1, cfg.c2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return s.mean(dim=(1, 2, 3)).numpy()


def ssim(a, b, cfg: SsimConfig | None = None) -> float:
    """SSIM of two images given as ``(H, W)`` or ``(H, W, C)`` arrays."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(ssim_batch(a, b, cfg)[0])


def mean_intra_class_ssim(images, labels, pairs_per_class=1000, seed=0, cfg: SsimConfig | None = None,
                          return_per_class=False):
    """Average SSIM of random same-class pairs, averaged again over classes.

    For every class, ``pairs_per_class`` pairs of distinct images are drawn
    with replacement. Classes with fewer than two images are skipped.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    per_class = {}
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        if len(idx) < 2:
            warnings.warn(f"class {k} has fewer than 2 images; skipped", RuntimeWarning, stacklevel=2)
            continue
        i = rng.integers(0, len(idx), size=pairs_per_class)
        j = rng.integers(0, len(idx) - 1, size=pairs_per_class)
        j = j + (j >= i)
        vals = []
        for start in range(0, pairs_per_class, 500):
            sl = slice(start, start + 500)
            vals.append(ssim_batch(images[idx[i[sl]]], images[idx[j[sl]]], cfg))
        per_class[int(k)] = float(np.mean(np.concatenate(vals)))
    if not per_class:
        raise ValueError("no class has at least two images")
    mean = float(np.mean(list(per_class.values())))
    return (mean, per_class) if return_per_class else mean


TSNE_PERPLEXITY = 30.0
TSNE_ITERATIONS = 1000


def embed_2d(images, n_pca=64, seed=0, pixel_range=(0.0, 255.0), return_meta=False):
    """Scale to [-1, 1], flatten, reduce with PCA, then t-SNE to two dimensions."""
    from sklearn.decomposition import PCA
    from sklearn.manifold import TSNE

    x = np.asarray(images, dtype=np.float64)
    n = len(x)
    if n < 3:
        raise ValueError("embedding needs at least 3 samples")
    lo, hi = pixel_range
    x = (x - lo) / (hi - lo) * 2.0 - 1.0
    x = x.reshape(n, -1)
    n_comp = min(n_pca, n, x.shape[1])
    if n_comp < n_pca:
        warnings.warn(f"reducing PCA components from {n_pca} to {n_comp}", RuntimeWarning, stacklevel=2)
    reduced = PCA(n_components=n_comp, random_state=seed).fit_transform(x)
    perplexity = min(TSNE_PERPLEXITY, (n - 1) / 3.0)
    emb = TSNE(n_components=2, perplexity=perplexity, max_iter=TSNE_ITERATIONS, init="pca",
               random_state=seed).fit_transform(reduced)
    if return_meta:
        return emb, {"pca_components": n_comp, "perplexity": perplexity, "iterations": TSNE_ITERATIONS,
                     "seed": seed}
    return emb
