"""Loss terms of the bidirectional adaptation objective.

Every function takes images in the generator scale ([-0.5, 0.5]) unless the
argument is a generated image, which is already in the discriminative scale.
Real images are moved to the discriminative scale with :func:`disc_scale`
before reaching a classifier or discriminator.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .datasets import ConfigurationError
from .models import classify, discriminate, generate, to_generator_scale

PROB_FLOOR = 1e-7

# order of the terms in the weighted objective
TERMS = ("D_t", "C_t", "D_s", "C_s", "self", "cons")
TERM_WEIGHT = {"D_t": "alpha", "C_t": "beta", "D_s": "gamma", "C_s": "mu", "self": "eta", "cons": "nu"}


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 10.0
    gamma: float = 1.0
    mu: float = 10.0
    eta: float = 1.0
    nu: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"loss weight {f.name} must be a finite value >= 0, got {v!r}")
            setattr(self, f.name, float(v))

    def for_term(self, term):
        return getattr(self, TERM_WEIGHT[term])

    def as_tuple(self):
        return tuple(getattr(self, TERM_WEIGHT[t]) for t in TERMS)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LossReport:
    """Per-term values of one step and their weighted sum.

    ``terms`` holds the six objective terms that were active; ``extra`` holds
    diagnostics that do not enter the total (discriminator-phase losses).
    """

    terms: dict
    total: float
    weights: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_record(self, **context):
        rec = dict(context)
        rec.update({f"loss_{k}": v for k, v in self.terms.items()})
        rec.update(self.extra)
        rec["total"] = self.total
        return rec


def disc_scale(x: torch.Tensor) -> torch.Tensor:
    """Generator-scale image -> discriminative scale (v/255 - 0.5 -> v - 127.5)."""
    return x * 255.0


@contextmanager
def frozen(*modules):
    """Temporarily stop gradient accumulation into the given modules' parameters."""
    saved = [(p, p.requires_grad) for m in modules for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor, check=True) -> torch.Tensor:
    """Mean of ``-log p[label]`` with probabilities clipped to [1e-7, 1].

    Rows containing NaN or inf are not rejected here; they make the result
    non-finite so the caller can report which term diverged.
    """
    if probs.dim() != 2 or labels.shape != (probs.shape[0],):
        raise ValueError(f"probs {tuple(probs.shape)} and labels {tuple(labels.shape)} do not match")
    if check:
        with torch.no_grad():
            ok = torch.isfinite(probs).all(1)
            rows = probs[ok]
            if (rows < -1e-6).any() or not torch.allclose(
                    rows.sum(1), torch.ones(1, dtype=probs.dtype), atol=1e-4):
                raise ValueError("rows of probs are not probability distributions")
            if labels.numel() and (labels.min() < 0 or labels.max() >= probs.shape[1]):
                raise ValueError("label outside the class range")
    picked = probs.gather(1, labels.long().view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp(PROB_FLOOR, 1.0)).mean()


def loss_Ct(G_st, C_t, x_s, z_s, y_s):
    """Classification loss of C_t on source images translated to the target style."""
    return cross_entropy(classify(C_t, generate(G_st, x_s, z_s)), y_s)


def loss_Cs(C_s, x_s, y_s):
    """Classification loss of C_s on the original source images."""
    return cross_entropy(classify(C_s, disc_scale(x_s)), y_s)


def lsgan_discriminator_loss(D, real, fake):
    """``mean((D(real) - 1)^2) + mean(D(fake)^2)``; ``fake`` is detached here."""
    if real.shape[1:] != fake.shape[1:]:
        raise ValueError("real and fake batches have different image shapes")
    return ((discriminate(D, real) - 1.0) ** 2).mean() + (discriminate(D, fake.detach()) ** 2).mean()


def lsgan_generator_loss(D, fake):
    """``mean((D(fake) - 1)^2)``, minimised by the generator."""
    return ((discriminate(D, fake) - 1.0) ** 2).mean()


def pseudo_labels_from_probs(probs):
    """Row-wise argmax; ties go to the lowest class index."""
    if isinstance(probs, torch.Tensor):
        return probs.detach().argmax(dim=1)
    return np.argmax(np.asarray(probs), axis=1)


def assign_pseudo_labels(C_s, G_ts, x_t, z_t):
    """Labels C_s gives to target images translated to the source style (no gradient)."""
    with torch.no_grad():
        return pseudo_labels_from_probs(classify(C_s, generate(G_ts, x_t, z_t)))


def loss_self(G_ts, C_s, x_t, z_t, y_self=None):
    """Self-labeling loss; gradient reaches both C_s and G_ts.

    With ``y_self=None`` the pseudo-labels are taken from the same forward pass,
    which is what the trainer does to avoid a second pass through the networks.
    """
    probs = classify(C_s, generate(G_ts, x_t, z_t))
    if y_self is None:
        y_self = pseudo_labels_from_probs(probs)
    return cross_entropy(probs, y_self)


def loss_consistency(G_st, G_ts, C_s, x_s, z_s, z_t, y_s):
    """Class-consistency loss: C_s must recover ``y_s`` after source -> target -> source."""
    x_st = generate(G_st, x_s, z_s)
    x_sts = generate(G_ts, to_generator_scale(x_st), z_t)
    return cross_entropy(classify(C_s, x_sts), y_s)


def cycle_reconstruction_loss(G_st, G_ts, x_s, z_s, z_t):
    """Mean absolute pixel error of the source -> target -> source round trip (generator scale)."""
    x_sts = generate(G_ts, to_generator_scale(generate(G_st, x_s, z_s)), z_t)
    back = to_generator_scale(x_sts)
    if back.shape != x_s.shape:
        raise ValueError("round trip changed the image shape")
    return (back - x_s).abs().mean()


def weighted_sum(weights: LossWeights, terms: dict):
    """Differentiable ``sum(weight * term)`` over the terms present."""
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = 0.0
    for name, value in terms.items():
        w = weights.for_term(name)
        if w:
            total = total + w * value
    return total


def total_loss(weights: LossWeights, terms: dict) -> LossReport:
    """Weighted objective over the six terms; values may be floats or 0-d tensors."""
    if not isinstance(weights, LossWeights):
        weights = LossWeights(**weights)
    if set(terms) - set(TERMS):
        raise KeyError(f"unknown loss terms {sorted(set(terms) - set(TERMS))}")
    values = {k: float(v) for k, v in terms.items()}
    total = float(sum(weights.for_term(k) * v for k, v in values.items() if weights.for_term(k)))
    return LossReport(terms=values, total=total, weights=weights.to_dict())
