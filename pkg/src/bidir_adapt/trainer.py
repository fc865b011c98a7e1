"""Alternating optimisation of the six networks.

Each step first updates both discriminators on their least-squares losses
(generated images detached), then takes one joint Adam step for the two
generators and two classifiers on the weighted sum of the remaining terms.
Terms whose weight is zero are not computed at all.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import ExperimentConfig, dump_config, load_config
from .datasets import (DomainPair, ImageBatch, batch_stream, load_domain_pair, n_batches,
                       preprocess_generator_input)
from .inference import branch_probabilities, combine, fixed_noise, select_sigma_from_probs
from .losses import (LossReport, LossWeights, cross_entropy, cycle_reconstruction_loss, disc_scale, frozen,
                     loss_Cs, loss_consistency, lsgan_discriminator_loss, lsgan_generator_loss,
                     pseudo_labels_from_probs, weighted_sum)
from .models import Networks, classify, generate, load_model, sample_noise, save_model, to_tensor

logger = logging.getLogger(__name__)

GENERATORS = ("G_st", "G_ts")
DISCRIMINATORS = ("D_s", "D_t")
CLASSIFIERS = ("C_s", "C_t")

# offset so evaluation noise never coincides with a training noise stream
EVAL_NOISE_OFFSET = 7919


class NonFiniteLossError(FloatingPointError):
    pass


def source_only_weights(mu=10.0) -> LossWeights:
    return LossWeights(alpha=0.0, beta=0.0, gamma=0.0, mu=mu, eta=0.0, nu=0.0)


@dataclass
class TrainerState:
    nets: Networks
    optimizers: dict
    weights: LossWeights
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)


def _seed_int(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class Trainer:
    """Owns the networks, their optimisers, the schedule and the metrics log."""

    def __init__(self, config: ExperimentConfig, pair: DomainPair, output_dir=None):
        self.config = config
        self.pair = pair
        self.output_dir = Path(output_dir) if output_dir else (
            Path(config.output_dir) if config.output_dir else None)
        torch.manual_seed(config.seed)
        nets = Networks.build(pair.image_shape, pair.n_classes, config.arch)
        self.state = TrainerState(nets=nets, optimizers=self._make_optimizers(nets),
                                  weights=self.weights_for_epoch(0))
        self.noise = torch.Generator()
        self._log_fh = None

    # -- setup ---------------------------------------------------------------

    def _make_optimizers(self, nets: Networks) -> dict:
        s = self.config.schedule
        lr = {**{n: s.lr_generator for n in GENERATORS}, **{n: s.lr_discriminator for n in DISCRIMINATORS},
              **{n: s.lr_classifier for n in CLASSIFIERS}}
        return {name: torch.optim.Adam(m.parameters(), lr=lr[name], betas=(s.adam_beta1, s.adam_beta2))
                for name, m in nets.items()}

    def weights_for_epoch(self, epoch) -> LossWeights:
        """Configured weights with the self-labeling weight held at 0 before activation."""
        w = copy.copy(self.config.loss_weights)
        if epoch < self.config.schedule.eta_activation_epoch:
            w.eta = 0.0
        return w

    @property
    def nets(self) -> Networks:
        return self.state.nets

    def _noise(self, batch):
        nz = self.nets.G_st.noise_dim
        return sample_noise(batch, nz, self.noise) if nz else None

    # -- one step --------------------------------------------------------------

    def _step(self, names):
        for n in names:
            self.state.optimizers[n].step()

    def _zero(self, names):
        for n in names:
            self.state.optimizers[n].zero_grad(set_to_none=True)

    @staticmethod
    def _check(name, value):
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(f"non-finite value in loss term {name!r}: {float(value.detach())}")

    def discriminator_update(self, x_s, x_t, x_st, x_ts) -> dict:
        """One Adam step for D_t and D_s; generated batches are detached inside the loss."""
        w = self.state.weights
        nets = self.nets
        losses, total = {}, 0.0
        if w.alpha and x_st is not None:
            losses["disc_D_t"] = lsgan_discriminator_loss(nets.D_t, disc_scale(x_t), x_st)
            total = total + w.alpha * losses["disc_D_t"]
        if w.gamma and x_ts is not None:
            losses["disc_D_s"] = lsgan_discriminator_loss(nets.D_s, disc_scale(x_s), x_ts)
            total = total + w.gamma * losses["disc_D_s"]
        if not losses:
            return {}
        for k, v in losses.items():
            self._check(k, v)
        self._zero(DISCRIMINATORS)
        total.backward()
        self._step(DISCRIMINATORS)
        return {k: float(v.detach()) for k, v in losses.items()}

    def generator_update(self, x_s, y_s, x_t, x_st, x_ts) -> dict:
        """Joint step for G_st, G_ts, C_s, C_t with the discriminators frozen."""
        w = self.state.weights
        nets = self.nets
        terms = {}
        with frozen(nets.D_s, nets.D_t):
            if w.alpha:
                terms["D_t"] = lsgan_generator_loss(nets.D_t, x_st)
            if w.beta:
                terms["C_t"] = cross_entropy(classify(nets.C_t, x_st), y_s)
            if w.gamma:
                terms["D_s"] = lsgan_generator_loss(nets.D_s, x_ts)
            if w.mu:
                terms["C_s"] = loss_Cs(nets.C_s, x_s, y_s)
            if w.eta:
                probs = classify(nets.C_s, x_ts)
                terms["self"] = cross_entropy(probs, pseudo_labels_from_probs(probs))
            if w.nu:
                b = x_s.shape[0]
                if self.config.consistency == "class":
                    terms["cons"] = loss_consistency(nets.G_st, nets.G_ts, nets.C_s, x_s,
                                                     self._noise(b), self._noise(b), y_s)
                else:
                    terms["cons"] = cycle_reconstruction_loss(nets.G_st, nets.G_ts, x_s,
                                                              self._noise(b), self._noise(b))
        if not terms:
            return {}
        for k, v in terms.items():
            self._check(k, v)
        total = weighted_sum(w, terms)
        names = GENERATORS + CLASSIFIERS
        self._zero(names)
        total.backward()
        self._step(names)
        return {k: float(v.detach()) for k, v in terms.items()}

    def train_step(self, src_x: ImageBatch, src_y, tgt_x: ImageBatch) -> LossReport:
        w = self.state.weights
        nets = self.nets
        x_s = to_tensor(preprocess_generator_input(src_x))
        x_t = to_tensor(preprocess_generator_input(tgt_x))
        y_s = torch.as_tensor(np.asarray(src_y), dtype=torch.long)
        x_st = generate(nets.G_st, x_s, self._noise(len(x_s))) if (w.alpha or w.beta) else None
        x_ts = generate(nets.G_ts, x_t, self._noise(len(x_t))) if (w.gamma or w.eta) else None
        extra = self.discriminator_update(x_s, x_t, x_st, x_ts)
        terms = self.generator_update(x_s, y_s, x_t, x_st, x_ts)
        total = sum(w.for_term(k) * v for k, v in terms.items())
        self.state.step += 1
        extra["eta"] = w.eta
        return LossReport(terms=terms, total=float(total), weights=w.to_dict(), extra=extra)

    # -- epochs ------------------------------------------------------------------

    def steps_per_epoch(self):
        b = self.config.schedule.batch_size
        return min(n_batches(len(self.pair.source_images), b), n_batches(len(self.pair.target_images), b))

    def run_epoch(self, epoch: int) -> list:
        cfg = self.config
        self.state.weights = self.weights_for_epoch(epoch)
        self.noise.manual_seed(_seed_int(cfg.seed, epoch, 1))
        b = cfg.schedule.batch_size
        src = batch_stream(self.pair.source_images, self.pair.source_labels, b, seed=(cfg.seed, 0), epoch=epoch)
        tgt = batch_stream(self.pair.target_images, None, b, seed=(cfg.seed, 1), epoch=epoch)
        self.nets.train()
        reports = []
        for (xs, ys), (xt, _) in zip(src, tgt):
            report = self.train_step(xs, ys, xt)
            self._log(report.to_record(kind="step", step=self.state.step, epoch=epoch))
            reports.append(report)
        self.state.epoch = epoch + 1
        return reports

    def train(self, epochs: Optional[int] = None, on_epoch: Optional[Callable] = None) -> list:
        """Run epochs ``state.epoch .. epochs-1`` with evaluation and checkpoints."""
        sched = self.config.schedule
        end = sched.epochs if epochs is None else epochs
        all_reports = []
        start = self.state.epoch
        for epoch in range(start, end):
            t0 = time.time()
            reports = self.run_epoch(epoch)
            all_reports.extend(reports)
            done = epoch + 1
            if reports:
                logger.info("epoch %d/%d  total %.4f  (%.1fs)", done, end, reports[-1].total, time.time() - t0)
            if self.pair.target_labels is not None and (done % max(sched.eval_every, 1) == 0 or done == end):
                acc = self.evaluate()
                self.state.history.append({"epoch": done, **acc})
                self._log({"kind": "eval", "epoch": done, "step": self.state.step, **acc})
            if self.output_dir and (done % max(sched.checkpoint_every, 1) == 0):
                self.save_checkpoint(self.output_dir / "checkpoints" / f"epoch_{done:04d}")
            if on_epoch:
                on_epoch(self, epoch)
        if self.output_dir:
            self.save_checkpoint(self.output_dir / "checkpoints" / "final")
        return all_reports

    # -- evaluation --------------------------------------------------------------

    @torch.no_grad()
    def target_probabilities(self, images=None, chunk=512):
        """``(p_s, p_t, p_raw)`` on target images: C_s(G_ts(x)), C_t(x) and C_s(x)."""
        images = self.pair.target_images if images is None else images
        nets = self.nets
        was_training = nets.C_s.training
        nets.eval()
        z_all = fixed_noise(len(images), nets.G_ts.noise_dim, self.config.seed + EVAL_NOISE_OFFSET) \
            if nets.G_ts.noise_dim else None
        ps, pt, praw = [], [], []
        for start in range(0, len(images), chunk):
            xb = to_tensor(preprocess_generator_input(
                ImageBatch(images[start:start + chunk].astype(np.float32))))
            zb = None if z_all is None else z_all[start:start + chunk]
            a, b = branch_probabilities(nets.C_s, nets.C_t, nets.G_ts, xb, zb)
            ps.append(a)
            pt.append(b)
            praw.append(classify(nets.C_s, disc_scale(xb)).numpy().astype(np.float64))
        if was_training:
            nets.train()
        return np.concatenate(ps), np.concatenate(pt), np.concatenate(praw)

    def evaluate(self) -> dict:
        """Target accuracies of C_t, C_s after translation, their ensemble, and C_s on raw images.

        The ensemble weight is chosen on the labeled validation subset and the
        accuracies are measured on the whole target set.
        """
        labels = self.pair.target_labels
        p_s, p_t, p_raw = self.target_probabilities()
        idx = self.pair.target_val_idx
        w = select_sigma_from_probs(p_s[idx], p_t[idx], labels[idx])
        return {
            "acc_C_t": float(np.mean(p_t.argmax(1) == labels)),
            "acc_C_s": float(np.mean(p_s.argmax(1) == labels)),
            "acc_ensemble": float(np.mean(combine(p_s, p_t, w.sigma).argmax(1) == labels)),
            "acc_source_only": float(np.mean(p_raw.argmax(1) == labels)),
            "sigma": w.sigma,
        }

    # -- logging and checkpoints ----------------------------------------------------

    def _log(self, record: dict):
        if not self.output_dir:
            return
        if self._log_fh is None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.output_dir / "metrics.jsonl", "a")
        self._log_fh.write(json.dumps(record) + "\n")
        self._log_fh.flush()

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    def save_checkpoint(self, path):
        path = Path(path)
        try:
            path.mkdir(parents=True, exist_ok=True)
            for name, model in self.nets.items():
                save_model(model, path / f"{name}.npz")
            torch.save({n: o.state_dict() for n, o in self.state.optimizers.items()}, path / "optimizer.pt")
            (path / "state.json").write_text(json.dumps(
                {"epoch": self.state.epoch, "step": self.state.step, "config_hash": self.config.hash(),
                 "history": self.state.history}, indent=1))
            dump_config(self.config, path / "config.yaml")
        except OSError as exc:
            raise OSError(f"failed to write checkpoint {path}: {exc}") from exc
        return path

    @classmethod
    def from_checkpoint(cls, path, pair: Optional[DomainPair] = None, config: Optional[ExperimentConfig] = None,
                        output_dir=None) -> "Trainer":
        path = Path(path)
        if not (path / "state.json").exists():
            raise FileNotFoundError(f"no checkpoint at {path}")
        config = config or load_config(path / "config.yaml")
        pair = pair or load_pair(config)
        trainer = cls(config, pair, output_dir=output_dir)
        nets = Networks(**{n: load_model(path / f"{n}.npz") for n in Networks.__dataclass_fields__
                           if n != "names"})
        trainer.state.nets = nets
        trainer.state.optimizers = trainer._make_optimizers(nets)
        opt_state = torch.load(path / "optimizer.pt", weights_only=True)
        for n, o in trainer.state.optimizers.items():
            o.load_state_dict(opt_state[n])
        meta = json.loads((path / "state.json").read_text())
        trainer.state.epoch = meta["epoch"]
        trainer.state.step = meta["step"]
        trainer.state.history = meta.get("history", [])
        trainer.state.weights = trainer.weights_for_epoch(trainer.state.epoch)
        return trainer


def load_pair(config: ExperimentConfig) -> DomainPair:
    return load_domain_pair(config.setting, data_root=config.data_root, val_size=config.val_size,
                            seed=config.seed, synthetic_n=config.synthetic_n,
                            synthetic_size=config.synthetic_size, texture_dir=config.texture_dir)


def train(config: ExperimentConfig, pair: Optional[DomainPair] = None, output_dir=None):
    """Train from scratch; returns the trainer (final state inside) and the step reports."""
    pair = pair or load_pair(config)
    trainer = Trainer(config, pair, output_dir=output_dir)
    try:
        reports = trainer.train()
    finally:
        trainer.close()
    return trainer, reports


def finite(reports) -> bool:
    return all(math.isfinite(r.total) and all(math.isfinite(v) for v in r.terms.values()) for r in reports)
