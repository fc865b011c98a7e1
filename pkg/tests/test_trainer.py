import json
import math

import numpy as np
import pytest
import torch

from bidir_adapt.config import TrainingSchedule
from bidir_adapt.datasets import ConfigurationError, synthetic_pair
from bidir_adapt.losses import LossWeights
from bidir_adapt.trainer import NonFiniteLossError, Trainer, finite, source_only_weights, train
from helpers import tiny_config


@pytest.fixture(scope="module")
def pair():
    return synthetic_pair(n=48, size=8, val_size=16, seed=3)


def snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def first_batches(trainer):
    from bidir_adapt.datasets import batch_stream

    p = trainer.pair
    (xs, ys), = [next(iter(batch_stream(p.source_images, p.source_labels, 8, seed=0)))]
    (xt, _), = [next(iter(batch_stream(p.target_images, None, 8, seed=1)))]
    return xs, ys, xt


def test_null_update_keeps_parameters(pair):
    cfg = tiny_config(lr_generator=0.0, lr_discriminator=0.0, lr_classifier=0.0)
    tr = Trainer(cfg, pair)
    tr.state.weights = LossWeights()
    before = {n: snapshot(m) for n, m in tr.nets.items()}
    report = tr.train_step(*first_batches(tr))
    assert set(report.terms) == {"D_t", "C_t", "D_s", "C_s", "self", "cons"}
    for n, m in tr.nets.items():
        assert same(before[n], snapshot(m)), n


def test_eta_gate(pair):
    tr = Trainer(tiny_config(epochs=4, eta_activation_epoch=2), pair)
    assert [tr.weights_for_epoch(e).eta for e in range(4)] == [0.0, 0.0, 1.0, 1.0]
    reports = tr.run_epoch(0)
    assert all("self" not in r.terms and r.extra["eta"] == 0.0 for r in reports)
    tr.run_epoch(1)
    reports = tr.run_epoch(2)
    assert all("self" in r.terms and r.extra["eta"] == 1.0 for r in reports)


def test_eta_override_disables_self_everywhere(pair):
    cfg = tiny_config().replace(**{"loss_weights.eta": 0})
    tr = Trainer(cfg, pair)
    reports = tr.train()
    assert reports and all("self" not in r.terms for r in reports)


def test_substeps_touch_only_their_networks(pair):
    tr = Trainer(tiny_config(), pair)
    tr.state.weights = LossWeights()
    xs, ys, xt = first_batches(tr)
    from bidir_adapt.datasets import preprocess_generator_input
    from bidir_adapt.models import generate, to_tensor

    x_s = to_tensor(preprocess_generator_input(xs))
    x_t = to_tensor(preprocess_generator_input(xt))
    y_s = torch.as_tensor(ys)
    x_st = generate(tr.nets.G_st, x_s, tr._noise(8))
    x_ts = generate(tr.nets.G_ts, x_t, tr._noise(8))

    before = {n: snapshot(m) for n, m in tr.nets.items()}
    tr.discriminator_update(x_s, x_t, x_st, x_ts)
    for n in ("G_st", "G_ts", "C_s", "C_t"):
        assert same(before[n], snapshot(getattr(tr.nets, n))), n
    for n in ("D_s", "D_t"):
        assert not same(before[n], snapshot(getattr(tr.nets, n))), n

    before = {n: snapshot(m) for n, m in tr.nets.items()}
    tr.generator_update(x_s, y_s, x_t, x_st, x_ts)
    for n in ("D_s", "D_t"):
        assert same(before[n], snapshot(getattr(tr.nets, n))), n
    for n in ("G_st", "G_ts", "C_s", "C_t"):
        assert not same(before[n], snapshot(getattr(tr.nets, n))), n
    assert all(p.requires_grad for p in tr.nets.D_t.parameters())


def test_report_total_is_weighted_sum(pair):
    tr = Trainer(tiny_config(), pair)
    for r in tr.run_epoch(0):
        w = LossWeights(**r.weights)
        assert r.total == pytest.approx(sum(w.for_term(k) * v for k, v in r.terms.items()), abs=1e-6)


def test_zero_epochs(pair):
    tr = Trainer(tiny_config(epochs=0, eta_activation_epoch=0), pair)
    before = {n: snapshot(m) for n, m in tr.nets.items()}
    assert tr.train() == []
    assert tr.state.step == 0 and tr.state.epoch == 0
    for n, m in tr.nets.items():
        assert same(before[n], snapshot(m))


def test_deterministic_runs(pair):
    a = Trainer(tiny_config(), pair).train()
    b = Trainer(tiny_config(), pair).train()
    assert [r.terms for r in a] == [r.terms for r in b]


def test_resume_reproduces_reports(pair, tmp_path):
    cfg = tiny_config(epochs=3)
    full = Trainer(cfg, pair, output_dir=tmp_path / "full")
    reports = full.train()
    full.close()
    per_epoch = len(reports) // 3

    first = Trainer(cfg, pair, output_dir=tmp_path / "part")
    first.train(epochs=1)
    first.close()
    resumed = Trainer.from_checkpoint(tmp_path / "part" / "checkpoints" / "epoch_0001", pair)
    assert resumed.state.epoch == 1
    rest = resumed.train()
    assert [r.terms for r in rest] == [r.terms for r in reports[per_epoch:]]
    assert resumed.state.history[-1] == full.state.history[-1]


def test_checkpoint_layout_and_log(pair, tmp_path):
    tr, reports = train(tiny_config(), pair, output_dir=tmp_path)
    ck = tmp_path / "checkpoints"
    assert sorted(p.name for p in ck.iterdir()) == ["epoch_0001", "epoch_0002", "final"]
    names = sorted(p.name for p in (ck / "final").iterdir())
    assert names == ["C_s.npz", "C_t.npz", "D_s.npz", "D_t.npz", "G_st.npz", "G_ts.npz", "config.yaml",
                     "optimizer.pt", "state.json"]
    records = [json.loads(line) for line in open(tmp_path / "metrics.jsonl")]
    steps = [r for r in records if r["kind"] == "step"]
    evals = [r for r in records if r["kind"] == "eval"]
    assert len(steps) == len(reports) and [r["step"] for r in steps] == list(range(1, len(reports) + 1))
    assert "loss_C_t" in steps[0] and "total" in steps[0]
    assert [e["epoch"] for e in evals] == [1, 2]
    for e in evals:
        for k in ("acc_C_t", "acc_C_s", "acc_ensemble"):
            assert 0.0 <= e[k] <= 1.0


def test_single_final_evaluation(pair):
    tr = Trainer(tiny_config(epochs=2, eval_every=50), pair)
    tr.train()
    assert [h["epoch"] for h in tr.state.history] == [2]


def test_source_only_mode(pair):
    cfg = tiny_config().replace(loss_weights=source_only_weights(10.0))
    a = Trainer(cfg, pair)
    ra = a.train()
    assert all(set(r.terms) == {"C_s"} for r in ra)
    b = Trainer(cfg, pair)
    b.train()
    assert a.state.history == b.state.history


def test_nonfinite_loss_names_term(pair):
    tr = Trainer(tiny_config(), pair)
    with torch.no_grad():
        next(tr.nets.C_s.parameters()).fill_(float("nan"))
    with pytest.raises(NonFiniteLossError, match="C_s"):
        tr.train_step(*first_batches(tr))


def test_finite_helper(pair):
    reports = Trainer(tiny_config(epochs=1, eta_activation_epoch=0), pair).train()
    assert finite(reports)
    reports[0].terms["C_t"] = math.nan
    assert not finite(reports)


def test_cycle_consistency_variant(pair):
    cfg = tiny_config().replace(consistency="cycle")
    reports = Trainer(cfg, pair).train()
    assert all("cons" in r.terms and r.terms["cons"] >= 0 for r in reports)


def test_checkpoint_write_error(pair, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    tr = Trainer(tiny_config(), pair)
    with pytest.raises(OSError, match="file"):
        tr.save_checkpoint(blocker / "ck")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        Trainer.from_checkpoint(tmp_path)


def test_schedule_invariants():
    with pytest.raises(ConfigurationError):
        TrainingSchedule(epochs=10, eta_activation_epoch=11)
    with pytest.raises(ConfigurationError):
        TrainingSchedule(lr_generator=-1e-4)
    s = TrainingSchedule()
    assert (s.epochs, s.eta_activation_epoch, s.batch_size, s.lr_generator, s.lr_discriminator) == (
        500, 250, 32, 1e-4, 1e-4)


def test_optimizer_buffers_mirror_params(pair):
    tr = Trainer(tiny_config(), pair)
    tr.run_epoch(0)
    for name, m in tr.nets.items():
        st = tr.state.optimizers[name].state
        for p in m.parameters():
            if p in st:
                assert st[p]["exp_avg"].shape == p.shape


def test_history_accuracies_bounded(pair):
    tr = Trainer(tiny_config(), pair)
    tr.train()
    for h in tr.state.history:
        assert all(0.0 <= h[k] <= 1.0 for k in ("acc_C_t", "acc_C_s", "acc_ensemble", "acc_source_only"))
        assert h["sigma"] in [round(0.1 * i, 1) for i in range(11)]
    assert np.isfinite(tr.state.history[-1]["acc_ensemble"])
