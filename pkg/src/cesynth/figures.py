"""Qualitative comparison grids: pre / real post / one column per model
variant, with the lesion area highlighted by a green bounding box.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Rectangle

from .data import DatasetManifest, load_pair
from .preprocess import read_png_unit


def _bbox(mask: np.ndarray):
    rows = np.any(mask > 0, axis=1).nonzero()[0]
    cols = np.any(mask > 0, axis=0).nonzero()[0]
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def _panel(ax, img: np.ndarray, title: str, mask=None):
    ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_title(title, fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    if mask is not None and np.any(mask):
        r0, r1, c0, c1 = _bbox(mask)
        ax.add_patch(
            Rectangle(
                (c0 - 0.5, r0 - 0.5), c1 - c0 + 1, r1 - r0 + 1,
                fill=False, edgecolor="lime", linewidth=1.2,
            )
        )


def qualitative_grid(
    manifest_dir: Path,
    variant_dirs: dict[str, Path],
    out_path: Path,
    split: str = "test",
    max_rows: int = 4,
    tumor_only: bool = True,
) -> Path:
    """Render a rows-of-cases grid: columns are [pre, real post] plus one
    generated column per variant directory."""
    manifest_dir = Path(manifest_dir)
    manifest = DatasetManifest.load(manifest_dir)
    records = manifest.split_records(split)
    if tumor_only:
        records = [r for r in records if r.tumor_label]
    records = records[:max_rows]
    if not records:
        raise ValueError("no records to render")

    n_cols = 2 + len(variant_dirs)
    fig, axes = plt.subplots(len(records), n_cols, figsize=(2.0 * n_cols, 2.0 * len(records)))
    axes = np.atleast_2d(axes)
    for row, rec in enumerate(records):
        pair = load_pair(manifest_dir, rec)
        mask = pair.mask
        _panel(axes[row, 0], pair.pre.pixels, "pre" if row == 0 else "", mask)
        _panel(axes[row, 1], pair.post.pixels, "real post" if row == 0 else "", mask)
        for col, (name, gen_dir) in enumerate(variant_dirs.items(), start=2):
            gen = read_png_unit(Path(gen_dir) / Path(rec.relative_path_post).name)
            _panel(axes[row, col], gen, name if row == 0 else "", mask)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
