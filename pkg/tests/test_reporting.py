import csv

import numpy as np
import pytest
from PIL import Image

from bidir_adapt.datasets import synthetic_pair
from bidir_adapt.metrics import SsimConfig, mean_intra_class_ssim
from bidir_adapt.reporting import (
    embedding_records, format_ssim_table, generation_grids, image_grid, save_png, ssim_table, write_report,
)
from bidir_adapt.trainer import Trainer
from helpers import tiny_config

CFG3 = SsimConfig(window=3)


@pytest.fixture(scope="module")
def trained():
    cfg = tiny_config(epochs=1, eta_activation_epoch=0)
    tr = Trainer(cfg, synthetic_pair(n=48, size=8, val_size=16, seed=3))
    tr.train()
    return tr.nets, tr.pair


def test_image_grid_layout():
    a = np.zeros((3, 4, 5, 1))
    b = np.full((3, 4, 5, 1), 300.0)
    g = image_grid(a, b, pad=1)
    assert g.shape == (2 * 4 + 3, 3 * 5 + 4, 1) and g.dtype == np.uint8
    assert (g[1:5, 1:6] == 0).all() and (g[6:10, 1:6] == 255).all()
    assert (g[0] == 255).all()
    with pytest.raises(ValueError):
        image_grid(a, b[:2])


def test_save_png(tmp_path):
    g = image_grid(np.zeros((2, 4, 4, 3)), np.zeros((2, 4, 4, 3)))
    save_png(g, tmp_path / "g.png", scale=2)
    assert Image.open(tmp_path / "g.png").size == (g.shape[1] * 2, g.shape[0] * 2)


def test_generation_grids(trained):
    nets, pair = trained
    grids = generation_grids(nets, pair)
    assert set(grids) == {"source_to_target", "target_to_source"}
    for g in grids.values():
        assert g.shape[1] == pair.n_classes * 8 + pair.n_classes + 1


def test_ssim_table_raw_columns_match_metric(trained):
    _, pair = trained
    t = ssim_table(pair, None, CFG3, pairs_per_class=10, seed=2)
    assert t["T->S"] is None and t["S->T"] is None
    assert t["S"] == mean_intra_class_ssim(pair.source_images, pair.source_labels, 10, 2, CFG3)
    text = format_ssim_table(t, "synthetic", CFG3)
    assert "window 3x3" in text and text.splitlines()[-1].count("-") == 2


def test_ssim_table_with_nets(trained):
    nets, pair = trained
    t = ssim_table(pair, nets, CFG3, pairs_per_class=10, per_class=3)
    assert all(-1 <= t[k] <= 1 for k in ("S", "T", "T->S", "S->T"))


def test_embedding_records(trained):
    nets, pair = trained
    recs, meta = embedding_records(nets, pair, n_per_domain=10, n_pca=8)
    assert len(recs) == 40 and meta["pca_components"] == 8
    assert [sum(r["domain"] == d for r in recs) for d in ("source", "target", "source_to_target",
                                                          "target_to_source")] == [10] * 4


def test_write_report(trained, tmp_path):
    nets, pair = trained
    with pytest.warns(RuntimeWarning):
        paths = write_report(nets, pair, tmp_path, CFG3, pairs_per_class=5, n_embed=10)
    assert all(p.exists() for p in paths.values())
    rows = list(csv.DictReader(open(paths["embedding_csv"])))
    assert len(rows) == 40 and set(rows[0]) == {"x", "y", "domain", "label"}
