"""Acceptance suite: criteria 1-9, each reported as one pass/fail line.

Criteria 5-8 train on the desk-scale synthetic pair (about an hour on one CPU
core). Runs shared between criteria are trained once per session. Setting
BIDIR_ADAPT_RUN_CACHE to a directory also keeps finished runs on disk between
sessions; that is for development only, the determinism rerun never uses it.
"""

import math
import os
import statistics
import time

import numpy as np
import pytest
import torch

from bidir_adapt.config import desk_preset
from bidir_adapt.experiments import ablation_configs, run_once, source_only, sweep_configs
from bidir_adapt.inference import (
    SIGMA_GRID, ensemble_predict, fixed_noise, select_sigma,
)
from bidir_adapt.losses import (
    LossWeights, assign_pseudo_labels, cross_entropy, disc_scale, loss_consistency, loss_Cs, loss_Ct, loss_self,
    lsgan_discriminator_loss, lsgan_generator_loss, total_loss, weighted_sum,
)
from bidir_adapt.metrics import SsimConfig, mean_intra_class_ssim, ssim
from bidir_adapt.models import classify, generate

from conftest import assert_grads_match

SEEDS = (0, 1, 2)
DESK = desk_preset()
_runs = {}


def desk_run(name, cfg):
    """Train ``cfg`` once per session (or read it from the optional disk cache)."""
    key = cfg.hash()
    if key not in _runs:
        _runs[key] = run_once(name, cfg, cache_dir=os.environ.get("BIDIR_ADAPT_RUN_CACHE"))
    return _runs[key]


def acc(run):
    return run.metrics["acc_ensemble"]


# ---- 1. gradient correctness


def test_criterion_1_gradients(criterion, mini_nets, mini_batch):
    with criterion(1, "finite-difference gradients") as c:
        t0 = time.time()
        n = mini_nets
        x_s, x_t, z_s, z_t, y_s = mini_batch
        with torch.no_grad():
            fake_t = generate(n.G_st, x_s, z_s)
        y_self = assign_pseudo_labels(n.C_s, n.G_ts, x_t, z_t)
        terms = {
            "D_t (LSGAN discriminator)": (lambda: lsgan_discriminator_loss(n.D_t, disc_scale(x_t), fake_t), [n.D_t]),
            "generator adversarial": (lambda: lsgan_generator_loss(n.D_s, generate(n.G_ts, x_t, z_t)), [n.G_ts]),
            "C_t": (lambda: loss_Ct(n.G_st, n.C_t, x_s, z_s, y_s), [n.G_st, n.C_t]),
            "C_s": (lambda: loss_Cs(n.C_s, x_s, y_s), [n.C_s]),
            "self": (lambda: loss_self(n.G_ts, n.C_s, x_t, z_t, y_self), [n.G_ts, n.C_s]),
            "cons": (lambda: loss_consistency(n.G_st, n.G_ts, n.C_s, x_s, z_s, z_t, y_s), [n.G_st, n.G_ts, n.C_s]),
        }
        n_params = 0
        for name, (fn, modules) in terms.items():
            grads = assert_grads_match(fn, modules, rtol=1e-3)
            n_params += sum(g.numel() for g in grads)
        elapsed = time.time() - t0
        assert elapsed < 60, f"took {elapsed:.1f}s"
        c.detail = f"6 terms, {n_params} parameter entries, rtol 1e-3, {elapsed:.1f}s"


# ---- 2. loss oracles


def test_criterion_2_loss_oracles(criterion):
    class ConstD(torch.nn.Module):
        def __init__(self, fn):
            super().__init__()
            self.fn = fn
            self.arch = {"image_shape": [4, 4, 1]}

        def forward(self, x):
            return self.fn(x).view(-1, 1)

    with criterion(2, "loss oracles") as c:
        ln2 = math.log(2)
        checks = [
            (cross_entropy(torch.tensor([[1.0, 0.0]]), torch.tensor([0])).item(), 0.0),
            (cross_entropy(torch.tensor([[0.5, 0.5]]), torch.tensor([0])).item(), ln2),
            (cross_entropy(torch.tensor([[1.0, 0.0], [0.5, 0.5]], dtype=torch.float64),
                           torch.tensor([0, 1])).item(), (0.0 + ln2) / 2),
        ]
        real = torch.zeros(2, 1, 4, 4)
        fake = torch.ones(2, 1, 4, 4)
        mean_d = ConstD(lambda x: x.mean(dim=(1, 2, 3)))
        half = ConstD(lambda x: torch.full((x.shape[0],), 0.5))
        # D scores 0 on real and 1 on fake: (0 - 1)^2 + 1^2 = 2
        checks.append((lsgan_discriminator_loss(mean_d, real, fake).item(), (0 - 1) ** 2 + 1 ** 2))
        checks.append((lsgan_discriminator_loss(half, real, fake).item(), (0.5 - 1) ** 2 + 0.5 ** 2))
        checks.append((lsgan_generator_loss(ConstD(lambda x: torch.ones(x.shape[0])), fake).item(), 0.0))
        checks.append((lsgan_generator_loss(ConstD(lambda x: torch.zeros(x.shape[0])), fake).item(), 1.0))
        checks.append((lsgan_generator_loss(half, fake).item(), (0.5 - 1) ** 2))
        w = LossWeights()
        ones = {t: 1.0 for t in ("D_t", "C_t", "D_s", "C_s", "self", "cons")}
        checks.append((total_loss(w, ones).total, 1 + 10 + 1 + 10 + 1 + 1))
        for got, want in checks:
            assert abs(got - want) <= 1e-6, (got, want)
        c.detail = f"{len(checks)} scalar oracles within 1e-6"


# ---- 3. structural invariants


def test_criterion_3_invariants(criterion, mini_nets, mini_batch):
    with criterion(3, "structural invariants") as c:
        n = mini_nets
        x_s, x_t, z_s, z_t, y_s = mini_batch
        loss_Cs(n.C_s, x_s, y_s).backward()
        for G in (n.G_st, n.G_ts):
            assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in G.parameters())

        for p in n.C_s.parameters():
            p.grad = None
        out = weighted_sum(LossWeights(eta=0.0), {"self": loss_self(n.G_ts, n.C_s, x_t, z_t)})
        if isinstance(out, torch.Tensor):
            out.backward()
        assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in n.C_s.parameters())

        n.eval()
        z = fixed_noise(len(x_t), 2, 0).double()
        with torch.no_grad():
            p_t = classify(n.C_t, disc_scale(x_t)).numpy()
            p_s = classify(n.C_s, generate(n.G_ts, x_t, z)).numpy()
        assert np.array_equal(ensemble_predict(n.C_s, n.C_t, n.G_ts, x_t, z, 0.0), p_t)
        assert np.array_equal(ensemble_predict(n.C_s, n.C_t, n.G_ts, x_t, z, 1.0), p_s)
        worst = 0.0
        for probs in (p_t, p_s, ensemble_predict(n.C_s, n.C_t, n.G_ts, x_t, z, 0.3)):
            worst = max(worst, float(np.abs(probs.sum(1) - 1).max()))
        rng = np.random.default_rng(0)
        wide = torch.from_numpy(rng.uniform(-127.5, 127.5, (64, 1, 4, 4)).astype(np.float32))
        for C in (n.C_s, n.C_t):
            with torch.no_grad():
                big = classify(C.float(), wide)
            worst = max(worst, float((big.sum(1) - 1).abs().max()))
        assert worst <= 1e-6, worst
        c.detail = (f"no generator gradient from C_s, eta=0 gradient zero, sigma 0/1 exact, "
                    f"max |row sum - 1| {worst:.1e}")


# ---- 4. SSIM


def test_criterion_4_ssim(criterion):
    from mlxtend.data import mnist_data

    with criterion(4, "SSIM") as c:
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 255, (16, 16))
        b = np.clip(a + rng.normal(0, 30, a.shape), 0, 255)
        assert abs(ssim(a, a) - 1) <= 1e-6
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
        cfg = SsimConfig()
        for u, v in ((10.0, 200.0), (0.0, 255.0)):
            closed = (2 * u * v + cfg.c1) / (u * u + v * v + cfg.c1)
            assert abs(ssim(np.full((16, 16), u), np.full((16, 16), v)) - closed) <= 1e-9

        X, y = mnist_data()
        images = X.reshape(-1, 28, 28, 1).astype(np.float64)
        value = mean_intra_class_ssim(images, y, pairs_per_class=1000, seed=0, cfg=cfg)
        assert abs(value - 0.206) <= 0.05, f"raw MNIST SSIM {value:.3f}, target 0.206 +- 0.05"
        c.detail = (f"reflexive, symmetric, closed form; raw MNIST ({len(y)} digits) {value:.3f} "
                    f"vs 0.206 +- 0.05 ({cfg.window}x{cfg.window} {cfg.kind})")


# ---- 5-8. desk-scale training


@pytest.fixture(scope="module")
def ablation():
    rows = []
    for name, cfg in ablation_configs(DESK):
        runs = [desk_run(name, cfg.replace(seed=s)) for s in SEEDS]
        rows.append((name, runs))
    return rows


def test_criterion_5_adaptation(criterion, ablation):
    with criterion(5, "desk-scale adaptation") as c:
        full = ablation[-1][1]
        base = source_only(DESK, seeds=SEEDS, cache_dir=os.environ.get("BIDIR_ADAPT_RUN_CACHE"))
        full_med = statistics.median(acc(r) for r in full)
        base_med = statistics.median(r.metrics["acc_source_only"] for r in base)
        seconds = sum(r.seconds for r in full) + sum(r.seconds for r in base)
        gap = 100 * (full_med - base_med)
        assert gap >= 10, f"full {full_med:.4f} vs source-only {base_med:.4f}"
        assert seconds <= 2 * 3600, f"{seconds:.0f}s"
        c.detail = (f"full-model median {100 * full_med:.2f}% vs source-only {100 * base_med:.2f}% "
                    f"(+{gap:.1f} pp), training time {seconds / 60:.1f} min")


def test_criterion_6_ablation_trend(criterion, ablation):
    with criterion(6, "ablation trend") as c:
        med = {name: statistics.median(acc(r) for r in runs) for name, runs in ablation}
        names = [name for name, _ in ablation]
        # the trend runs S->T only -> both GANs -> + consistency -> + self-labeling;
        # the T->S-only row is a side branch, reported but not ordered
        chain = [names[0], names[2], names[3], names[4]]
        values = [med[n] for n in chain]
        assert all(b >= a for a, b in zip(values, values[1:])), dict(zip(chain, values))
        every = [med[n] for n in names]
        in_order = all(b >= a for a, b in zip(every, every[1:]))
        c.detail = (" -> ".join(f"{100 * v:.2f}" for v in values) + f" (T->S only {100 * med[names[1]]:.2f}; "
                    f"all five rows in order: {'yes' if in_order else 'no'})")


def test_criterion_7_sweep(criterion):
    with criterion(7, "robustness sweep") as c:
        results = [(name, desk_run(name, cfg)) for name, cfg in sweep_configs(DESK)]
        bad = [name for name, r in results
               if not r.finite or not all(math.isfinite(v) for v in r.metrics.values() if isinstance(v, float))]
        assert not bad, f"non-finite: {bad}"
        c.detail = ", ".join(f"{name} {100 * acc(r):.1f}%" for name, r in results) + "; all losses finite"


def test_criterion_8_determinism(criterion, ablation):
    with criterion(8, "determinism") as c:
        first = ablation[-1][1][0]
        assert first.seed == 0
        cfg = dict(ablation_configs(DESK))["+ self-labeling"].replace(seed=0)
        torch.use_deterministic_algorithms(True)
        try:
            again = run_once("rerun", cfg)
        finally:
            torch.use_deterministic_algorithms(False)
        diffs = {k: abs(first.metrics[k] - again.metrics[k]) for k in ("acc_C_t", "acc_C_s", "acc_ensemble")}
        assert max(diffs.values()) < 0.005, diffs
        assert first.metrics == again.metrics, "accuracies differ under deterministic mode"
        c.detail = f"seed 0 twice: ensemble {100 * acc(first):.2f}% and {100 * acc(again):.2f}% (identical metrics)"


# ---- 9. sigma selection


def test_criterion_9_sigma_selection(criterion, mini_nets):
    with criterion(9, "sigma grid selection") as c:
        n = mini_nets.eval()
        rng = np.random.default_rng(4)
        x_t = torch.from_numpy(rng.uniform(-0.5, 0.5, (60, 1, 4, 4)))
        y = rng.integers(0, 3, 60)
        z = fixed_noise(60, 2, 0).double()
        chosen = select_sigma(n.C_s, n.C_t, n.G_ts, x_t, y, z).sigma
        # exhaustive re-evaluation through the full ensemble at every grid point
        accs = {s: float(np.mean(ensemble_predict(n.C_s, n.C_t, n.G_ts, x_t, z, s).argmax(1) == y))
                for s in SIGMA_GRID}
        best = max(accs.values())
        assert accs[chosen] == best, (chosen, accs)
        assert chosen == min(s for s, a in accs.items() if a == best)
        assert len(set(accs.values())) > 1, "every sigma ties; the check would be vacuous"
        c.detail = (f"sigma {chosen} with accuracy {best:.3f}; grid accuracies range "
                    f"{min(accs.values()):.3f}-{best:.3f}")
