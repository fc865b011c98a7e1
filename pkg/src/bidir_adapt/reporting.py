"""Report artifacts for a trained model: image grids, SSIM table, 2-D embedding."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .datasets import DomainPair, stack_classes
from .inference import translate
from .metrics import SsimConfig, embed_2d, mean_intra_class_ssim
from .trainer import EVAL_NOISE_OFFSET

SSIM_COLUMNS = ("S", "T->S", "S->T", "T")
DOMAIN_TAGS = ("source", "target", "source_to_target", "target_to_source")


def _one_per_class(images, labels, n_classes, seed=0):
    """Index of one random example per class, in class order (classes absent from ``labels`` skipped)."""
    rng = np.random.default_rng(seed)
    idx = []
    for k in range(n_classes):
        hits = np.flatnonzero(labels == k)
        if len(hits):
            idx.append(int(rng.choice(hits)))
    return np.array(idx, dtype=np.int64)


def image_grid(originals, generated, pad=1) -> np.ndarray:
    """Two-row uint8 mosaic: originals on top, their translations below."""
    originals = np.asarray(originals)
    generated = np.asarray(generated)
    if originals.shape != generated.shape:
        raise ValueError("originals and generated images must have the same shape")
    n, h, w, c = originals.shape
    grid = np.full((2 * h + 3 * pad, n * w + (n + 1) * pad, c), 255, dtype=np.uint8)
    for row, imgs in enumerate((originals, generated)):
        y = pad + row * (h + pad)
        for i in range(n):
            x = pad + i * (w + pad)
            grid[y:y + h, x:x + w] = np.clip(np.round(imgs[i]), 0, 255).astype(np.uint8)
    return grid


def save_png(array, path, scale=4):
    from PIL import Image

    a = np.asarray(array)
    if a.shape[-1] == 1:
        a = a[..., 0]
    img = Image.fromarray(a)
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)


def generation_grids(nets, pair: DomainPair, seed=0) -> dict:
    """``{"source_to_target": grid, "target_to_source": grid}``, one column per class."""
    noise_seed = seed + EVAL_NOISE_OFFSET
    s_idx = _one_per_class(pair.source_images, pair.source_labels, pair.n_classes, seed)
    xs = pair.source_images[s_idx]
    grids = {"source_to_target": image_grid(xs, translate(nets.G_st, xs, noise_seed))}
    if pair.target_labels is not None:
        t_idx = _one_per_class(pair.target_images, pair.target_labels, pair.n_classes, seed)
    else:
        t_idx = np.arange(min(pair.n_classes, len(pair.target_images)))
    xt = pair.target_images[t_idx]
    grids["target_to_source"] = image_grid(xt, translate(nets.G_ts, xt, noise_seed))
    return grids


def ssim_table(pair: DomainPair, nets=None, cfg: SsimConfig | None = None, pairs_per_class=1000,
               per_class=None, seed=0) -> dict:
    """Mean intra-class SSIM for source, target and both translations.

    Without ``nets`` the two translated columns are ``None``. ``per_class``
    caps the number of images of each class that enter the computation.
    """
    xs, ys = pair.source_images, pair.source_labels
    xt, yt = pair.target_images, pair.target_labels
    if yt is None:
        raise ValueError("target labels are needed to group target images by class")
    if per_class:
        xs, ys = stack_classes(xs, ys, per_class, seed)
        xt, yt = stack_classes(xt, yt, per_class, seed)
    noise_seed = seed + EVAL_NOISE_OFFSET

    def score(images, labels):
        return mean_intra_class_ssim(images, labels, pairs_per_class, seed, cfg)

    table = {"S": score(xs, ys), "T": score(xt, yt), "T->S": None, "S->T": None}
    if nets is not None:
        table["T->S"] = score(translate(nets.G_ts, xt, noise_seed), yt)
        table["S->T"] = score(translate(nets.G_st, xs, noise_seed), ys)
    return table


def format_ssim_table(table: dict, setting: str, cfg: SsimConfig | None = None) -> str:
    cfg = cfg or SsimConfig()
    head = f"{'setting':<16}" + "".join(f"{c:>8}" for c in SSIM_COLUMNS)
    cells = "".join(f"{table[c]:>8.3f}" if table[c] is not None else f"{'-':>8}" for c in SSIM_COLUMNS)
    note = f"# window {cfg.window}x{cfg.window} {cfg.kind}" + (f" sigma={cfg.sigma}" if cfg.kind == "gaussian" else "")
    note += f", K1={cfg.k1}, K2={cfg.k2}, L={cfg.dynamic_range:g}"
    return "\n".join([note, head, f"{setting:<16}" + cells])


def embedding_records(nets, pair: DomainPair, n_per_domain=250, seed=0, n_pca=64):
    """Embed source, target and both translations together; one record per image."""
    rng = np.random.default_rng(seed)
    noise_seed = seed + EVAL_NOISE_OFFSET
    s_idx = rng.choice(len(pair.source_images), size=min(n_per_domain, len(pair.source_images)), replace=False)
    t_idx = rng.choice(len(pair.target_images), size=min(n_per_domain, len(pair.target_images)), replace=False)
    xs, xt = pair.source_images[s_idx], pair.target_images[t_idx]
    ys = pair.source_labels[s_idx]
    yt = pair.target_labels[t_idx] if pair.target_labels is not None else np.full(len(t_idx), -1)
    blocks = [(xs, ys, "source"), (xt, yt, "target")]
    if nets is not None:
        blocks += [(translate(nets.G_st, xs, noise_seed), ys, "source_to_target"),
                   (translate(nets.G_ts, xt, noise_seed), yt, "target_to_source")]
    images = np.concatenate([b[0].astype(np.float32) for b in blocks])
    emb, meta = embed_2d(images, n_pca=n_pca, seed=seed, return_meta=True)
    records, start = [], 0
    for imgs, labels, tag in blocks:
        for i in range(len(imgs)):
            records.append({"x": float(emb[start + i, 0]), "y": float(emb[start + i, 1]), "domain": tag,
                            "label": int(labels[i])})
        start += len(imgs)
    return records, meta


def write_embedding_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["x", "y", "domain", "label"])
        w.writeheader()
        w.writerows(records)


def embedding_scatter(records, path, title=""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    markers = {"source": "o", "target": "s", "source_to_target": "^", "target_to_source": "v"}
    for tag in DOMAIN_TAGS:
        pts = [r for r in records if r["domain"] == tag]
        if pts:
            ax.scatter([r["x"] for r in pts], [r["y"] for r in pts], s=6, alpha=0.6, marker=markers[tag],
                       label=tag.replace("_", " "))
    ax.legend(loc="best", fontsize=8, markerscale=2)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(nets, pair: DomainPair, out_dir, cfg: SsimConfig | None = None, pairs_per_class=1000,
                 per_class=None, n_embed=250, seed=0) -> dict:
    """Grids, SSIM table and embedding files under ``out_dir``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, grid in generation_grids(nets, pair, seed).items():
        paths[f"grid_{name}"] = out / f"grid_{name}.png"
        save_png(grid, paths[f"grid_{name}"])
    table = ssim_table(pair, nets, cfg, pairs_per_class, per_class, seed)
    paths["ssim"] = out / "ssim.txt"
    paths["ssim"].write_text(format_ssim_table(table, pair.name or "pair", cfg) + "\n")
    records, _ = embedding_records(nets, pair, n_embed, seed)
    paths["embedding_csv"] = out / "embedding.csv"
    write_embedding_csv(records, paths["embedding_csv"])
    paths["embedding_png"] = out / "embedding.png"
    embedding_scatter(records, paths["embedding_png"], pair.name)
    return paths
