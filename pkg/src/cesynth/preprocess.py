"""Volume-to-slice preprocessing: tumor slice selection, per-slice min-max
normalization, 8-bit PNG export, single-breast cropping, and dataset builds.

Input volumes arrive as ``VolumeCase`` objects (depth, height, width). A
minimal ``.npz`` case reader is built in; other formats (e.g. NIfTI) plug in
through ``register_case_reader``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from .data import DatasetManifest, ManifestRecord, SliceImage, SlicePair

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VolumeCase:
    """Paired pre/post volumes plus the binary tumor mask for one patient."""

    pre_volume: np.ndarray
    post_volume: np.ndarray
    mask_volume: np.ndarray
    patient_id: str
    laterality: str = "bilateral"

    def __post_init__(self):
        shapes = {self.pre_volume.shape, self.post_volume.shape, self.mask_volume.shape}
        if len(shapes) != 1 or self.pre_volume.ndim != 3:
            raise ValueError(
                f"case {self.patient_id}: volumes must share one 3D shape, got "
                f"{self.pre_volume.shape}/{self.post_volume.shape}/{self.mask_volume.shape}"
            )


@dataclass(frozen=True)
class SlicePolicy:
    """Controls which axial slices are extracted from each case."""

    adjacent_fraction: float = 0.20
    side_split: str = "none"  # or "midline"
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.adjacent_fraction <= 1.0:
            raise ValueError(f"adjacent_fraction must be in [0,1], got {self.adjacent_fraction}")
        if self.side_split not in ("none", "midline"):
            raise ValueError(f"unknown side_split {self.side_split!r}")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def select_slices(mask_volume: np.ndarray, policy: SlicePolicy) -> list[int]:
    """Pick every axial index with tumor voxels plus a balanced block of
    adjacent non-tumor indices.

    The adjacent count is round(adjacent_fraction * tumor_slice_count),
    split before/after the tumor block with the remainder going before;
    indices outside the volume are dropped.
    """
    if mask_volume.size == 0:
        raise ValueError("mask volume is empty")
    depth = mask_volume.shape[0]
    tumor = [i for i in range(depth) if np.any(mask_volume[i])]
    if not tumor:
        return []
    n_adjacent = _round_half_up(policy.adjacent_fraction * len(tumor))
    n_before = (n_adjacent + 1) // 2
    n_after = n_adjacent // 2
    before = [tumor[0] - k for k in range(1, n_before + 1) if tumor[0] - k >= 0]
    after = [tumor[-1] + k for k in range(1, n_after + 1) if tumor[-1] + k < depth]
    return sorted(set(tumor) | set(before) | set(after))


def normalize_slice(raw: np.ndarray) -> SliceImage:
    """Min-max normalize one slice to [0,1] based on its own intensity range.

    Constant slices map to all zeros so downstream losses stay finite.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise ValueError("slice contains non-finite values")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        out = np.zeros_like(raw, dtype=np.float32)
    else:
        out = ((raw - lo) / (hi - lo)).astype(np.float32)
    return SliceImage(out)


def export_slice(img: SliceImage, path: Path) -> None:
    """Write a slice as lossless 8-bit grayscale PNG (round-half-up)."""
    u8 = np.floor(img.pixels.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    path = Path(path)
    try:
        Image.fromarray(u8, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"failed writing slice PNG to {path}: {exc}") from exc


def read_png_unit(path: Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG back into a unit-interval float array."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except OSError as exc:
        raise OSError(f"failed reading PNG from {path}: {exc}") from exc
    return arr / 255.0


def crop_single_breast(pair: SlicePair, side: str) -> SlicePair:
    """Take the lateral half of all channels at the vertical midline.

    The left crop spans columns [0, W//2) and the right crop [W//2, W), so
    the two widths always sum to the original width.
    """
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    w = pair.pre.width
    if w < 2:
        raise ValueError("pair too narrow to crop")
    cols = slice(0, w // 2) if side == "left" else slice(w // 2, w)
    mask = pair.mask[:, cols] if pair.mask is not None else None
    has_tumor = mask is not None and bool(np.any(mask))
    return SlicePair(
        pre=SliceImage(pair.pre.pixels[:, cols], bit_source=pair.pre.bit_source),
        post=SliceImage(pair.post.pixels[:, cols], bit_source=pair.post.bit_source),
        mask=mask if has_tumor else None,
        patient_id=pair.patient_id,
        slice_index=pair.slice_index,
        tumor_label=has_tumor,
        laterality="unilateral",
    )


def _export_record(
    out_dir: Path,
    pair: SlicePair,
    split: str,
    stem: str,
) -> ManifestRecord:
    rel_pre = f"images/{stem}_pre.png"
    rel_post = f"images/{stem}_post.png"
    export_slice(pair.pre, out_dir / rel_pre)
    export_slice(pair.post, out_dir / rel_post)
    rel_mask = None
    if pair.has_tumor_voxels():
        rel_mask = f"masks/{stem}.png"
        export_slice(SliceImage(pair.mask.astype(np.float32)), out_dir / rel_mask)
    return ManifestRecord(
        relative_path_pre=rel_pre,
        relative_path_post=rel_post,
        relative_path_mask=rel_mask,
        patient_id=pair.patient_id,
        slice_index=pair.slice_index,
        tumor_label=pair.tumor_label,
        laterality=pair.laterality,
        split=split,
    )


def build_dataset(
    cases: list[VolumeCase],
    policy: SlicePolicy,
    split_map: dict[str, str],
    out_dir: Path,
) -> DatasetManifest:
    """Slice all cases into PNG pairs (+ masks) under out_dir and write the
    manifest. Deterministic: identical inputs give byte-identical outputs.
    """
    out_dir = Path(out_dir)
    missing = [c.patient_id for c in cases if c.patient_id not in split_map]
    if missing:
        raise KeyError(f"split_map missing patients: {missing}")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    records = []
    for case in cases:
        indices = select_slices(case.mask_volume, policy)
        if not indices:
            log.warning("case %s has no tumor voxels; skipped", case.patient_id)
            continue
        split = split_map[case.patient_id]
        for i in indices:
            mask_slice = case.mask_volume[i].astype(np.uint8)
            has_tumor = bool(np.any(mask_slice))
            pair = SlicePair(
                pre=normalize_slice(case.pre_volume[i]),
                post=normalize_slice(case.post_volume[i]),
                mask=mask_slice if has_tumor else None,
                patient_id=case.patient_id,
                slice_index=i,
                tumor_label=has_tumor,
                laterality=case.laterality,
            )
            if policy.side_split == "midline":
                for side in ("left", "right"):
                    cropped = crop_single_breast(pair, side)
                    records.append(_export_record(out_dir, cropped, split, f"{case.patient_id}_{i:03d}_{side}"))
            else:
                records.append(_export_record(out_dir, pair, split, f"{case.patient_id}_{i:03d}"))

    manifest = DatasetManifest(records=records, seed=policy.rng_seed)
    manifest.check_split_disjoint()
    manifest.save(out_dir)
    return manifest


# --- case file readers -------------------------------------------------

def _read_npz_case(path: Path) -> VolumeCase:
    with np.load(path, allow_pickle=False) as z:
        return VolumeCase(
            pre_volume=z["pre"].astype(np.float32),
            post_volume=z["post"].astype(np.float32),
            mask_volume=z["mask"].astype(np.uint8),
            patient_id=str(z["patient_id"]),
            laterality=str(z["laterality"]),
        )


def _read_nifti_case(path: Path) -> VolumeCase:
    # Adapter seam: paired NIfTI loading needs nibabel plus a sibling-file
    # convention; desk-scale corpora use the .npz format instead.
    raise NotImplementedError(
        f"NIfTI reading is not bundled (wanted for {path}); install nibabel and "
        "register a reader via register_case_reader('.nii', fn)"
    )


CASE_READERS: dict[str, Callable[[Path], VolumeCase]] = {
    ".npz": _read_npz_case,
    ".nii": _read_nifti_case,
    ".gz": _read_nifti_case,
}


def register_case_reader(suffix: str, reader: Callable[[Path], VolumeCase]) -> None:
    CASE_READERS[suffix] = reader


def save_case(case: VolumeCase, path: Path) -> None:
    np.savez_compressed(
        path,
        pre=case.pre_volume.astype(np.float32),
        post=case.post_volume.astype(np.float32),
        mask=case.mask_volume.astype(np.uint8),
        patient_id=np.str_(case.patient_id),
        laterality=np.str_(case.laterality),
    )


def load_case(path: Path) -> VolumeCase:
    path = Path(path)
    reader = CASE_READERS.get(path.suffix)
    if reader is None:
        raise ValueError(f"no case reader registered for suffix {path.suffix!r}")
    return reader(path)


def load_case_dir(case_dir: Path) -> tuple[list[VolumeCase], dict[str, str]]:
    """Read a corpus directory: cases/*.npz plus splits.json (patient->split)."""
    case_dir = Path(case_dir)
    paths = sorted((case_dir / "cases").glob("*.npz"))
    if not paths:
        raise FileNotFoundError(f"no case files under {case_dir / 'cases'}")
    cases = [load_case(p) for p in paths]
    split_map = json.loads((case_dir / "splits.json").read_text())
    return cases, split_map
