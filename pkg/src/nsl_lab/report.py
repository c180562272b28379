"""Ablation tables and qualitative figure grids from a study results document."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from nsl_lab.metrics import format_table, reports_to_json


def write_report(cfg, doc: dict, out, n_examples: int = 4) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    from nsl_lab.study import ablation_rows

    parts, tables = [], {}
    for split, title in (("val", "validation shard (training pattern kinds)"),
                         ("test", "held-out pattern kinds")):
        rows = ablation_rows(doc, split)
        if rows:
            parts.append(format_table(rows, f"{title}, {doc['config']['eval']['weighting']}"))
            tables[split] = json.loads(reports_to_json(rows))
    (out / "ablation.txt").write_text("\n\n".join(parts) + "\n")
    (out / "ablation.json").write_text(json.dumps(tables, indent=1, sort_keys=True) + "\n")
    figure_grid(cfg, out / "figures", n_examples)
    return out


def figure_grid(cfg, out, n_examples: int = 4, split: str = "val"):
    """One PNG per sample: scene IR, GT depth, each method's depth, and its error map."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from nsl_lab.dataset_io import load_manifest
    from nsl_lab.neural_matching import forward
    from nsl_lab.refinement import refine
    from nsl_lab.study import tm_baseline
    from nsl_lab.training import load_matcher, load_refiner

    root = cfg.cache_root()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    matchers, refiners = {}, {}
    for mode in cfg.modes:
        if (root / f"stage1-{mode}" / "final.ckpt").exists():
            matchers[mode] = load_matcher(root / f"stage1-{mode}" / "final.ckpt")[0]
        if (root / f"stage2-{mode}" / "final.ckpt").exists():
            refiners[mode] = load_refiner(root / f"stage2-{mode}" / "final.ckpt")[0]
    manifest = load_manifest(root / "data")
    written = []
    for k, s in enumerate(manifest.samples(split)):
        if k >= n_examples:
            break
        gt = s.depth_gt
        methods = []
        _, z = tm_baseline(s, cfg.tm)
        methods.append(("TM", np.where(z.mask, z.values, np.nan)))
        for mode, m in matchers.items():
            d_init = forward(s, m)["depth"]
            methods.append((f"{mode} s1", np.where(d_init.mask, d_init.values, np.nan)))
            if mode in refiners:
                methods.append((f"{mode} s2", refine(s.ir_left, d_init, refiners[mode]).values))
        lo, hi = np.percentile(gt.values[gt.mask], [1, 99])
        cols = 2 + len(methods)
        fig, ax = plt.subplots(2, cols, figsize=(2.2 * cols, 3.2), squeeze=False)
        ax[0, 0].imshow(s.ir_left, cmap="gray", vmin=0, vmax=1)
        ax[0, 0].set_title("IR left", fontsize=8)
        ax[1, 0].imshow(s.pattern_ref.intensities, cmap="gray", vmin=0, vmax=1)
        ax[1, 0].set_title(s.pattern_id, fontsize=8)
        ax[0, 1].imshow(np.where(gt.mask, gt.values, np.nan), cmap="turbo", vmin=lo, vmax=hi)
        ax[0, 1].set_title("GT depth", fontsize=8)
        ax[1, 1].axis("off")
        for c, (name, z) in enumerate(methods, start=2):
            ax[0, c].imshow(z, cmap="turbo", vmin=lo, vmax=hi)
            ax[0, c].set_title(name, fontsize=8)
            err = np.where(gt.mask, np.abs(z - gt.values), np.nan)
            ax[1, c].imshow(err, cmap="magma", vmin=0, vmax=0.3 * hi)
            ax[1, c].set_title(f"|err| {np.nanmean(err):.3f} m", fontsize=8)
        for a in ax.ravel():
            a.set_xticks([])
            a.set_yticks([])
        fig.tight_layout()
        path = out / f"{split}_{k:02d}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
