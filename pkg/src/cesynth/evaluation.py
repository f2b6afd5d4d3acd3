"""Paired and distributional evaluation metrics (MAE, SSIM, PSNR,
perceptual distance, FID, FRD), full-image and tumor-region modes, and the
report structure with real-pre-vs-real-target baseline rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, load_pair
from .features import get_extractor, embed_images
from .losses import perceptual_distance
from .preprocess import read_png_unit
from .radiomics import radiomics_features

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
ROI_MARGIN = 4
ROI_RESIZE = 64  # region crops are resized to this before set-level features


# --- paired metrics ----------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_stats(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Weighted local means over valid positions (no padding)."""
    k = window.shape[0]
    views = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.tensordot(views, window, axes=([2, 3], [0, 1]))


def ssim(gen: np.ndarray, real: np.ndarray, data_range: float = 1.0) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, averaged over the valid (unpadded) region.

    Inputs smaller than the window (tiny tumor crops) fall back to the
    largest odd window that fits.
    """
    gen = np.asarray(gen, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if gen.shape != real.shape:
        raise ValueError(f"shape mismatch: {gen.shape} vs {real.shape}")
    min_side = min(gen.shape)
    size = SSIM_WINDOW if min_side >= SSIM_WINDOW else max(min_side - (min_side + 1) % 2, 1)
    w = gaussian_window(size=size)
    mu_g = _windowed_stats(gen, w)
    mu_r = _windowed_stats(real, w)
    sq_g = _windowed_stats(gen * gen, w) - mu_g**2
    sq_r = _windowed_stats(real * real, w) - mu_r**2
    cov = _windowed_stats(gen * real, w) - mu_g * mu_r
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_g * mu_r + c1) * (2 * cov + c2)
    den = (mu_g**2 + mu_r**2 + c1) * (sq_g + sq_r + c2)
    return float((num / den).mean())


def psnr(gen: np.ndarray, real: np.ndarray, data_range: float = 1.0) -> float:
    err = float(np.mean((np.asarray(gen, np.float64) - np.asarray(real, np.float64)) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def paired_metrics(gen: np.ndarray, real: np.ndarray, extractor=None) -> dict[str, float]:
    """MAE / SSIM / PSNR / perceptual distance for one aligned image pair."""
    gen = np.asarray(gen, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if gen.shape != real.shape:
        raise ValueError(f"shape mismatch: {gen.shape} vs {real.shape}")
    if extractor is None:
        extractor = get_extractor("fallback")
    with torch.no_grad():
        lpips = float(
            perceptual_distance(
                torch.as_tensor(gen, dtype=torch.float32),
                torch.as_tensor(real, dtype=torch.float32),
                extractor,
            )
        )
    return {
        "mae": float(np.abs(gen - real).mean()),
        "ssim": ssim(gen, real),
        "psnr": psnr(gen, real),
        "lpips": lpips,
    }


# --- Frechet distances -------------------------------------------------

def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """|mu1-mu2|^2 + Tr(C1 + C2 - 2 (C1 C2)^{1/2}), with the matrix square
    root taken by eigendecomposition of the symmetrized product (negative
    eigenvalues clamped to zero); result clamped to >= 0."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    for arr in (mu1, mu2, cov1, cov2):
        if not np.isfinite(arr).all():
            raise ValueError("non-finite moments")
    cov1 = (cov1 + cov1.T) / 2.0
    cov2 = (cov2 + cov2.T) / 2.0
    prod = cov1 @ cov2
    prod = (prod + prod.T) / 2.0
    eigvals = np.linalg.eigvalsh(prod)
    tr_sqrt = np.sqrt(np.clip(eigvals, 0.0, None)).sum()
    fd = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


def set_moments(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    mu = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    return mu, np.atleast_2d(cov)


def frechet_from_features(gen_feats: np.ndarray, real_feats: np.ndarray) -> Optional[float]:
    """Frechet distance between two feature sets; None below 2 samples."""
    gen_feats = np.asarray(gen_feats, dtype=np.float64)
    real_feats = np.asarray(real_feats, dtype=np.float64)
    if len(gen_feats) < 2 or len(real_feats) < 2:
        return None
    mu_g, cov_g = set_moments(gen_feats)
    mu_r, cov_r = set_moments(real_feats)
    return frechet_distance(mu_g, cov_g, mu_r, cov_r)


def fid_score(gen_images, real_images, extractor=None) -> Optional[float]:
    if extractor is None:
        extractor = get_extractor("fallback")
    if len(gen_images) < 2 or len(real_images) < 2:
        return None
    gen_f = embed_images(np.stack(gen_images), extractor).numpy()
    real_f = embed_images(np.stack(real_images), extractor).numpy()
    return frechet_from_features(gen_f, real_f)


def frd_score(gen_images, real_images, masks=None) -> Optional[float]:
    """Frechet distance over radiomics features, z-scored against the real
    (reference) set's statistics. Undersized regions are excluded."""
    gen_feats, real_feats = [], []
    for i, (g, r) in enumerate(zip(gen_images, real_images)):
        m = masks[i] if masks is not None else None
        fg = radiomics_features(g, m)
        fr = radiomics_features(r, m)
        if fg is not None and fr is not None:
            gen_feats.append(fg)
            real_feats.append(fr)
    if len(gen_feats) < 2 or len(real_feats) < 2:
        return None
    real_arr = np.asarray(real_feats)
    mu_ref = real_arr.mean(axis=0)
    sd_ref = np.maximum(real_arr.std(axis=0), 1e-8)
    gen_z = (np.asarray(gen_feats) - mu_ref) / sd_ref
    real_z = (real_arr - mu_ref) / sd_ref
    return frechet_from_features(gen_z, real_z)


# --- region-of-interest view -------------------------------------------

def roi_view(img: np.ndarray, mask: np.ndarray, margin: int = ROI_MARGIN) -> np.ndarray:
    """Tight mask bounding box dilated by margin, clipped to image bounds."""
    mask = np.asarray(mask)
    if not np.any(mask):
        raise ValueError("roi_view needs a nonzero mask")
    rows = np.any(mask > 0, axis=1).nonzero()[0]
    cols = np.any(mask > 0, axis=0).nonzero()[0]
    r0 = max(int(rows[0]) - margin, 0)
    r1 = min(int(rows[-1]) + margin, img.shape[0] - 1)
    c0 = max(int(cols[0]) - margin, 0)
    c1 = min(int(cols[-1]) + margin, img.shape[1] - 1)
    return np.asarray(img)[r0 : r1 + 1, c0 : c1 + 1]


def _resize_np(img: np.ndarray, size: int = ROI_RESIZE) -> np.ndarray:
    t = torch.as_tensor(np.asarray(img, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


# --- report structure ---------------------------------------------------

def _agg(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    with np.errstate(invalid="ignore"):  # +inf PSNR sentinels give std=nan
        return {"mean": float(arr.mean()), "std": float(arr.std())}


@dataclass
class MetricSet:
    per_image: dict[str, list[float]]  # metric name -> per-image values
    image_ids: list[str]
    fid: Optional[float]
    frd: Optional[float]

    def aggregates(self) -> dict[str, dict]:
        return {name: _agg(vals) for name, vals in self.per_image.items()}

    def to_json_obj(self) -> dict:
        return {
            "per_image": self.per_image,
            "image_ids": self.image_ids,
            "aggregates": self.aggregates(),
            "fid": self.fid,
            "frd": self.frd,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "MetricSet":
        return cls(
            per_image=obj["per_image"],
            image_ids=obj["image_ids"],
            fid=obj["fid"],
            frd=obj["frd"],
        )


@dataclass
class EvalRow:
    row_name: str
    mode: str  # "full_image" or "roi"
    metrics: MetricSet
    baseline_row: Optional[str] = None  # set on generated-model rows

    def to_json_obj(self) -> dict:
        return {
            "row_name": self.row_name,
            "mode": self.mode,
            "metrics": self.metrics.to_json_obj(),
            "baseline_row": self.baseline_row,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EvalRow":
        return cls(
            row_name=obj["row_name"],
            mode=obj["mode"],
            metrics=MetricSet.from_json_obj(obj["metrics"]),
            baseline_row=obj.get("baseline_row"),
        )


@dataclass
class EvalReport:
    rows: list[EvalRow]
    manifest_hash: str
    model_checkpoint_id: str

    def row(self, name: str, mode: str) -> EvalRow:
        for r in self.rows:
            if r.row_name == name and r.mode == mode:
                return r
        raise KeyError(f"no row {name!r} in mode {mode!r}")

    def check_baselines(self) -> None:
        names = {(r.row_name, r.mode) for r in self.rows}
        for r in self.rows:
            if r.baseline_row is not None and (r.baseline_row, r.mode) not in names:
                raise AssertionError(f"row {r.row_name} lacks baseline {r.baseline_row} in {r.mode}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "rows": [r.to_json_obj() for r in self.rows],
                "manifest_hash": self.manifest_hash,
                "model_checkpoint_id": self.model_checkpoint_id,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        return cls(
            rows=[EvalRow.from_json_obj(r) for r in obj["rows"]],
            manifest_hash=obj["manifest_hash"],
            model_checkpoint_id=obj["model_checkpoint_id"],
        )


PAIRED_NAMES = ("mae", "lpips", "ssim", "psnr")
BASELINE_PC = "Real Pre vs Real PC"
BASELINE_SUB = "Real Pre vs Real SUB"


def _minmax01(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _metric_set(pairs: list[tuple[str, np.ndarray, np.ndarray]], extractor,
                fid_pair=None, frd_pair=None) -> MetricSet:
    per_image = {name: [] for name in PAIRED_NAMES}
    ids = []
    for image_id, gen, real in pairs:
        vals = paired_metrics(gen, real, extractor)
        for name in PAIRED_NAMES:
            per_image[name].append(vals[name])
        ids.append(image_id)
    fid = fid_score(*fid_pair, extractor=extractor) if fid_pair else None
    frd = frd_score(*frd_pair) if frd_pair else None
    return MetricSet(per_image=per_image, image_ids=ids, fid=fid, frd=frd)


def evaluate_run(
    manifest_dir: Path,
    generated_dir: Path,
    modes: tuple[str, ...] = ("full_image", "roi"),
    model_row_name: str = "model",
    variant_target: str = "PC",
    checkpoint_id: str = "",
    extractor=None,
    roi_margin: int = ROI_MARGIN,
) -> EvalReport:
    """Score a directory of generated post-contrast images against the test
    split of a manifest, producing the model row plus both real-pre-vs-real
    baseline rows in every requested mode.
    """
    manifest_dir = Path(manifest_dir)
    generated_dir = Path(generated_dir)
    manifest = DatasetManifest.load(manifest_dir)
    records = manifest.split_records("test")
    if not records:
        raise ValueError("manifest has no test records")
    if extractor is None:
        extractor = get_extractor("fallback")

    missing = [
        Path(r.relative_path_post).name
        for r in records
        if not (generated_dir / Path(r.relative_path_post).name).exists()
    ]
    if missing:
        raise FileNotFoundError(f"generated images missing for {len(missing)} records: {missing[:5]}")

    items = []
    for rec in records:
        pair = load_pair(manifest_dir, rec)
        gen = read_png_unit(generated_dir / Path(rec.relative_path_post).name)
        rec_id = f"{rec.patient_id}_{rec.slice_index:03d}_{Path(rec.relative_path_post).stem}"
        items.append((rec_id, pair, gen))

    rows = []
    for mode in modes:
        if mode == "full_image":
            sel = [(i, p, g) for i, p, g in items]
            get = lambda img, pair: np.asarray(img, dtype=np.float64)  # noqa: E731
        elif mode == "roi":
            sel = [(i, p, g) for i, p, g in items if p.has_tumor_voxels()]
            get = lambda img, pair: roi_view(  # noqa: E731
                np.asarray(img, dtype=np.float64), pair.mask, margin=roi_margin
            )
        else:
            raise ValueError(f"unknown mode {mode!r}")
        if not sel:
            continue

        pre_set = [get(p.pre.pixels, p) for _, p, _ in sel]
        post_set = [get(p.post.pixels, p) for _, p, _ in sel]
        gen_set = [get(g, p) for _, p, g in sel]
        sub_set = [_minmax01(post - pre) for pre, post in zip(pre_set, post_set)]
        if mode == "roi":
            feat_pre = [_resize_np(x) for x in pre_set]
            feat_post = [_resize_np(x) for x in post_set]
            feat_gen = [_resize_np(x) for x in gen_set]
            feat_sub = [_resize_np(x) for x in sub_set]
        else:
            feat_pre, feat_post, feat_gen, feat_sub = pre_set, post_set, gen_set, sub_set
        ids = [i for i, _, _ in sel]

        rows.append(
            EvalRow(
                row_name=BASELINE_PC,
                mode=mode,
                metrics=_metric_set(
                    list(zip(ids, pre_set, post_set)),
                    extractor,
                    fid_pair=(feat_pre, feat_post),
                    frd_pair=(feat_pre, feat_post),
                ),
            )
        )
        rows.append(
            EvalRow(
                row_name=BASELINE_SUB,
                mode=mode,
                metrics=_metric_set(
                    list(zip(ids, pre_set, sub_set)),
                    extractor,
                    fid_pair=(feat_pre, feat_sub),
                    frd_pair=(feat_pre, feat_sub),
                ),
            )
        )
        rows.append(
            EvalRow(
                row_name=model_row_name,
                mode=mode,
                metrics=_metric_set(
                    list(zip(ids, gen_set, post_set)),
                    extractor,
                    fid_pair=(feat_gen, feat_post),
                    frd_pair=(feat_gen, feat_post),
                ),
                baseline_row=BASELINE_SUB if variant_target == "SUB" else BASELINE_PC,
            )
        )

    report = EvalReport(rows=rows, manifest_hash=manifest.content_hash(), model_checkpoint_id=checkpoint_id)
    report.check_baselines()
    return report


def render_text_table(report: EvalReport) -> str:
    """Plain-text table with one row per (row_name, mode), aggregate cells."""
    lines = []
    header = f"{'Row':34s} {'Mode':10s} {'FRD':>9s} {'FID':>9s} " + " ".join(
        f"{m.upper():>15s}" for m in PAIRED_NAMES
    )
    lines.append(header)
    lines.append("-" * len(header))
    for row in report.rows:
        agg = row.metrics.aggregates()
        cells = []
        for m in PAIRED_NAMES:
            a = agg[m]
            cells.append(f"{a['mean']:7.3f}±{a['std']:6.3f}")
        fid = f"{row.metrics.fid:9.3f}" if row.metrics.fid is not None else "     n/a"
        frd = f"{row.metrics.frd:9.3f}" if row.metrics.frd is not None else "     n/a"
        lines.append(f"{row.row_name:34s} {row.mode:10s} {frd:>9s} {fid:>9s} " + " ".join(cells))
    return "\n".join(lines)


def per_case_csv(report: EvalReport) -> str:
    """One CSV line per (row, mode, image) with each paired metric."""
    lines = ["row_name,mode,image_id," + ",".join(PAIRED_NAMES)]
    for row in report.rows:
        for k, image_id in enumerate(row.metrics.image_ids):
            vals = ",".join(f"{row.metrics.per_image[m][k]:.6g}" for m in PAIRED_NAMES)
            lines.append(f"{row.row_name},{row.mode},{image_id},{vals}")
    return "\n".join(lines) + "\n"
