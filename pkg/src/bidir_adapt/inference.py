"""Test-time ensemble of the two classifiers."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .losses import disc_scale
from .models import classify, generate

SIGMA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class EnsembleWeights:
    sigma: float

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")

    @property
    def tau(self):
        return 1.0 - self.sigma


def fixed_noise(n, noise_dim, seed=0):
    """One fixed noise vector per image, reproducible from ``seed``."""
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(n, noise_dim, generator=g)


@torch.no_grad()
def branch_probabilities(C_s, C_t, G_ts, x_t, z_t, chunk=512):
    """Softmax outputs of ``C_s(G_ts(x_t))`` and ``C_t(x_t)``.

    ``x_t`` is a float tensor ``(N, C, H, W)`` in the generator scale. Networks
    must already be in eval mode.
    """
    p_s, p_t = [], []
    for start in range(0, len(x_t), chunk):
        xb = x_t[start:start + chunk]
        zb = None if z_t is None else z_t[start:start + chunk]
        p_s.append(classify(C_s, generate(G_ts, xb, zb)))
        p_t.append(classify(C_t, disc_scale(xb)))
    return torch.cat(p_s).numpy().astype(np.float64), torch.cat(p_t).numpy().astype(np.float64)


def combine(p_s, p_t, sigma):
    return sigma * np.asarray(p_s) + (1.0 - sigma) * np.asarray(p_t)


def ensemble_predict(C_s, C_t, G_ts, x_t, z_t, weights: EnsembleWeights | float):
    """``sigma * C_s(G_ts(x_t, z_t)) + tau * C_t(x_t)`` as an ``(N, K)`` array."""
    sigma = weights.sigma if isinstance(weights, EnsembleWeights) else float(weights)
    EnsembleWeights(sigma)
    p_s, p_t = branch_probabilities(C_s, C_t, G_ts, x_t, z_t)
    if sigma == 0.0:
        return p_t
    if sigma == 1.0:
        return p_s
    return combine(p_s, p_t, sigma)


def sigma_accuracies(p_s, p_t, labels, grid=SIGMA_GRID):
    labels = np.asarray(labels)
    return [float(np.mean(combine(p_s, p_t, s).argmax(1) == labels)) for s in grid]


def select_sigma_from_probs(p_s, p_t, labels, grid=SIGMA_GRID) -> EnsembleWeights:
    """Grid value with the best validation accuracy; the smallest sigma wins ties."""
    if len(labels) == 0:
        raise ValueError("the validation set is empty")
    accs = sigma_accuracies(p_s, p_t, labels, grid)
    best = 0
    for i, a in enumerate(accs):
        if a > accs[best]:
            best = i
    return EnsembleWeights(grid[best])


def select_sigma(C_s, C_t, G_ts, val_images, val_labels, z_t=None) -> EnsembleWeights:
    """Pick sigma from the 11-point grid on a labeled target validation set."""
    if len(val_images) == 0:
        raise ValueError("the validation set is empty")
    p_s, p_t = branch_probabilities(C_s, C_t, G_ts, val_images, z_t)
    return select_sigma_from_probs(p_s, p_t, val_labels)


def export_predictions(probs, sigma, path, indices=None):
    """Write one record per sample: index, predicted class, class probabilities, sigma.

    ``.csv`` paths get a header row with ``p0..pK-1``; anything else is JSON lines.
    """
    probs = np.asarray(probs)
    indices = np.arange(len(probs)) if indices is None else np.asarray(indices)
    path = Path(path)
    pred = probs.argmax(1)
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "predicted", *[f"p{k}" for k in range(probs.shape[1])], "sigma"])
            for i, p, row in zip(indices, pred, probs):
                w.writerow([int(i), int(p), *[f"{v:.6g}" for v in row], sigma])
    else:
        with open(path, "w") as fh:
            for i, p, row in zip(indices, pred, probs):
                fh.write(json.dumps({"index": int(i), "predicted": int(p),
                                     "probs": [float(v) for v in row], "sigma": sigma}) + "\n")


@torch.no_grad()
def translate(G, images, seed=0, chunk=512) -> np.ndarray:
    """Run generator ``G`` on ``(N, H, W, C)`` pixel images; returns images in [0, 255].

    Noise is one fixed draw per image from ``seed``. ``G`` is put in eval mode
    for the call and restored afterwards.
    """
    images = np.asarray(images, dtype=np.float32)
    was_training = G.training
    G.eval()
    z_all = fixed_noise(len(images), G.noise_dim, seed) if G.noise_dim else None
    out = []
    for start in range(0, len(images), chunk):
        x = torch.from_numpy(images[start:start + chunk] / 255.0 - 0.5).permute(0, 3, 1, 2)
        z = None if z_all is None else z_all[start:start + chunk]
        out.append((generate(G, x, z) + 127.5).clamp(0, 255).permute(0, 2, 3, 1).numpy())
    if was_training:
        G.train()
    return np.concatenate(out) if out else images.copy()
