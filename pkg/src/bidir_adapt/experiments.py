"""Multi-run harnesses: ablation rows, loss-weight sweep, seed repeats, source-only baseline."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .config import ExperimentConfig
from .losses import LossWeights
from .trainer import Trainer, finite, load_pair, source_only_weights

log = logging.getLogger(__name__)

# (name, terms switched on); rows go from the single source -> target GAN to the full model
ABLATION_ROWS = (
    ("S->T GAN", ("alpha", "beta")),
    ("T->S GAN", ("gamma", "mu")),
    ("both GANs", ("alpha", "beta", "gamma", "mu")),
    ("+ class consistency", ("alpha", "beta", "gamma", "mu", "nu")),
    ("+ self-labeling", ("alpha", "beta", "gamma", "mu", "nu", "eta")),
)
SWEEP_VALUES = (0.1, 1.0, 10.0)


def row_weights(base: LossWeights, active) -> LossWeights:
    """Copy of ``base`` with every weight outside ``active`` set to zero."""
    d = base.to_dict()
    return LossWeights(**{k: (v if k in active else 0.0) for k, v in d.items()})


def ablation_configs(config: ExperimentConfig) -> list:
    """The five ablation rows as ``(name, config)``, in table order."""
    return [(name, config.replace(loss_weights=row_weights(config.loss_weights, active)))
            for name, active in ABLATION_ROWS]


def sweep_configs(config: ExperimentConfig, values=SWEEP_VALUES) -> list:
    """Loss-weight robustness grid: beta = mu over ``values``, then nu over ``values``."""
    w = config.loss_weights
    out = []
    for v in values:
        out.append((f"beta=mu={v:g}", config.replace(loss_weights=LossWeights(**{**w.to_dict(), "beta": v, "mu": v}))))
    for v in values:
        out.append((f"nu={v:g}", config.replace(loss_weights=LossWeights(**{**w.to_dict(), "nu": v}))))
    return out


@dataclass
class RunResult:
    name: str
    seed: int
    config: dict
    metrics: dict
    finite: bool
    seconds: float = 0.0
    history: list = field(default_factory=list)

    def to_dict(self):
        return {"name": self.name, "seed": self.seed, "config": self.config, "metrics": self.metrics,
                "finite": self.finite, "seconds": self.seconds, "history": self.history}


def run_once(name: str, config: ExperimentConfig, output_dir=None, pair=None, cache_dir=None) -> RunResult:
    """Train one configuration and evaluate it.

    With ``cache_dir`` set, a finished run whose config hash is already on disk
    is read back instead of retrained.
    """
    cached = None
    if cache_dir is not None:
        cached = Path(cache_dir) / f"{config.hash()}.json"
        if cached.exists():
            d = json.loads(cached.read_text())
            return RunResult(**d)
    pair = pair or load_pair(config)
    trainer = Trainer(config, pair, output_dir=output_dir)
    t0 = time.time()
    ok = True
    try:
        reports = trainer.train()
        ok = finite(reports)
    finally:
        trainer.close()
    metrics = trainer.state.history[-1] if trainer.state.history else trainer.evaluate()
    result = RunResult(name=name, seed=config.seed, config=config.to_dict(), metrics=dict(metrics), finite=ok,
                       seconds=round(time.time() - t0, 1), history=list(trainer.state.history))
    log.info("%s seed=%d: %s", name, config.seed, {k: round(v, 4) for k, v in metrics.items()
                                                    if isinstance(v, float)})
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        cached.write_text(json.dumps(result.to_dict()))
    return result


def run_seeds(name, config: ExperimentConfig, seeds, output_dir=None, cache_dir=None) -> list:
    out = []
    for s in seeds:
        sub = None if output_dir is None else Path(output_dir) / f"{_slug(name)}-seed{s}"
        out.append(run_once(name, config.replace(seed=s), output_dir=sub, cache_dir=cache_dir))
    return out


def _slug(name):
    return "".join(c if c.isalnum() else "_" for c in name).strip("_").lower()


def median_metric(results, key="acc_ensemble"):
    return statistics.median(r.metrics[key] for r in results)


def source_only(config: ExperimentConfig, seeds=(0, 1, 2), output_dir=None, cache_dir=None) -> list:
    """Baseline: only ``C_s`` is trained (weights (0, 0, 0, mu, 0, 0)); read ``acc_source_only``."""
    cfg = config.replace(loss_weights=source_only_weights(config.loss_weights.mu))
    return run_seeds("source only", cfg, seeds, output_dir, cache_dir)


def ablation_matrix(config: ExperimentConfig, seeds=(0,), output_dir=None, cache_dir=None,
                    progress: Optional[Callable] = None) -> list:
    """Train every ablation row over ``seeds``; one table row per configuration."""
    rows = []
    for name, cfg in ablation_configs(config):
        results = run_seeds(name, cfg, seeds, output_dir, cache_dir)
        row = {"row": name, "weights": cfg.loss_weights.to_dict(), "seeds": list(seeds),
               "accuracy": [r.metrics["acc_ensemble"] for r in results],
               "median_accuracy": median_metric(results), "finite": all(r.finite for r in results)}
        rows.append(row)
        if progress:
            progress(row)
    return rows


def robustness_sweep(config: ExperimentConfig, values=SWEEP_VALUES, seeds=(0,), output_dir=None,
                     cache_dir=None, progress: Optional[Callable] = None) -> list:
    rows = []
    for name, cfg in sweep_configs(config, values):
        results = run_seeds(name, cfg, seeds, output_dir, cache_dir)
        row = {"run": name, "weights": cfg.loss_weights.to_dict(), "seeds": list(seeds),
               "accuracy": [r.metrics["acc_ensemble"] for r in results],
               "median_accuracy": median_metric(results),
               "finite": all(r.finite and all(math.isfinite(v) for v in r.metrics.values()
                                              if isinstance(v, float)) for r in results)}
        rows.append(row)
        if progress:
            progress(row)
    return rows


def format_table(rows, key="median_accuracy", label="row") -> str:
    """Plain-text table: one line per row with its weights and accuracy."""
    names = ("alpha", "beta", "gamma", "mu", "nu", "eta")
    header = f"{label:<22}" + "".join(f"{n:>7}" for n in names) + f"{'accuracy':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        w = r["weights"]
        acc = r[key] if key in r else r["accuracy"]
        if isinstance(acc, (list, tuple)):
            acc = statistics.median(acc)
        lines.append(f"{r[label]:<22}" + "".join(f"{w[n]:>7g}" for n in names) + f"{100 * acc:>10.2f}")
    return "\n".join(lines)
