"""Shared domain types: slice images, paired samples, and dataset manifests.

Images are exchanged as unit-interval float arrays everywhere inside the
toolkit; the 8-bit form exists only at the PNG file boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

MANIFEST_SCHEMA_VERSION = 1
MIN_SIDE = 16

SUBTRACTION_SCALE = 0.5  # x_sub = (x_post - x_pre) / SUBTRACTION_SCALE


def _as_readonly(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SliceImage:
    """A 2D grayscale slice with unit-normalized intensities."""

    pixels: np.ndarray
    bit_source: str = "float_native"  # or "u8_rescaled"

    def __post_init__(self):
        object.__setattr__(self, "pixels", _as_readonly(self.pixels))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def violations(self) -> list[str]:
        v = []
        if self.pixels.ndim != 2:
            v.append("not_2d")
            return v
        if self.height < MIN_SIDE or self.width < MIN_SIDE:
            v.append("too_small")
        if not np.isfinite(self.pixels).all():
            v.append("non_finite")
        elif self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            v.append("pixel_range")
        if self.bit_source not in ("float_native", "u8_rescaled"):
            v.append("bad_bit_source")
        return v


@dataclass(frozen=True)
class SlicePair:
    """Aligned pre-/post-contrast slices with an optional binary tumor mask."""

    pre: SliceImage
    post: SliceImage
    mask: Optional[np.ndarray]
    patient_id: str
    slice_index: int
    tumor_label: bool
    laterality: str = "bilateral"  # or "unilateral"

    def __post_init__(self):
        if self.mask is not None:
            object.__setattr__(self, "mask", _as_readonly(self.mask, dtype=np.uint8))

    def has_tumor_voxels(self) -> bool:
        return self.mask is not None and bool(np.any(self.mask))


@dataclass(frozen=True)
class SubtractionImage:
    """Scaled residual (x_post - x_pre) / 0.5, bounded by +/-2."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _as_readonly(self.pixels))

    @classmethod
    def from_pair(cls, pair: SlicePair) -> "SubtractionImage":
        sub = (pair.post.pixels.astype(np.float64) - pair.pre.pixels.astype(np.float64)) / SUBTRACTION_SCALE
        return cls(sub.astype(np.float32))


def validate_pair(pair: SlicePair) -> list[str]:
    """Check every SlicePair invariant; returns one descriptor per violation.

    Violations are data, not errors: an empty list means the pair is valid.
    """
    v = []
    for name, img in (("pre", pair.pre), ("post", pair.post)):
        v.extend(f"{name}:{code}" for code in img.violations())
    if pair.post.pixels.shape != pair.pre.pixels.shape:
        v.append("shape_mismatch:post")
    if pair.mask is not None:
        if pair.mask.shape != pair.pre.pixels.shape:
            v.append("shape_mismatch:mask")
        if not np.isin(pair.mask, (0, 1)).all():
            v.append("mask_not_binary")
    if pair.tumor_label and not pair.has_tumor_voxels():
        v.append("tumor_label_without_mask_voxels")
    if not pair.tumor_label and pair.has_tumor_voxels():
        v.append("mask_voxels_without_tumor_label")
    if pair.laterality not in ("unilateral", "bilateral"):
        v.append("bad_laterality")
    return v


@dataclass(frozen=True)
class ManifestRecord:
    relative_path_pre: str
    relative_path_post: str
    relative_path_mask: Optional[str]
    patient_id: str
    slice_index: int
    tumor_label: bool
    laterality: str
    split: str  # "train" or "test"

    def to_json_obj(self) -> dict:
        return {
            "relative_path_pre": self.relative_path_pre,
            "relative_path_post": self.relative_path_post,
            "relative_path_mask": self.relative_path_mask,
            "patient_id": self.patient_id,
            "slice_index": self.slice_index,
            "tumor_label": self.tumor_label,
            "laterality": self.laterality,
            "split": self.split,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ManifestRecord":
        return cls(**obj)


@dataclass
class DatasetManifest:
    """Ordered slice records plus the header fields that anchor reproducibility.

    Stored as ``manifest.jsonl`` (one record per line) next to a small
    ``header.json`` declaring schema_version and seed.
    """

    records: list[ManifestRecord] = field(default_factory=list)
    schema_version: int = MANIFEST_SCHEMA_VERSION
    seed: int = 0

    MANIFEST_NAME = "manifest.jsonl"
    HEADER_NAME = "header.json"

    def split_records(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def check_split_disjoint(self) -> None:
        by_split: dict[str, set[str]] = {"train": set(), "test": set()}
        for r in self.records:
            by_split.setdefault(r.split, set()).add(r.patient_id)
        overlap = by_split["train"] & by_split["test"]
        if overlap:
            raise ValueError(f"patients present in both splits: {sorted(overlap)}")

    def save(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        header = {"schema_version": self.schema_version, "seed": self.seed}
        (out_dir / self.HEADER_NAME).write_text(json.dumps(header, indent=2) + "\n")
        with open(out_dir / self.MANIFEST_NAME, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_json_obj()) + "\n")

    @classmethod
    def load(cls, in_dir: Path, check_paths: bool = True) -> "DatasetManifest":
        in_dir = Path(in_dir)
        header = json.loads((in_dir / cls.HEADER_NAME).read_text())
        records = []
        with open(in_dir / cls.MANIFEST_NAME) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(ManifestRecord.from_json_obj(json.loads(line)))
        manifest = cls(records=records, schema_version=header["schema_version"], seed=header["seed"])
        manifest.check_split_disjoint()
        if check_paths:
            missing = [
                p
                for rec in records
                for p in (rec.relative_path_pre, rec.relative_path_post, rec.relative_path_mask)
                if p is not None and not (in_dir / p).exists()
            ]
            if missing:
                raise FileNotFoundError(f"manifest references missing files: {missing[:5]}")
        return manifest

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(json.dumps({"schema_version": self.schema_version, "seed": self.seed}).encode())
        for rec in self.records:
            h.update(json.dumps(rec.to_json_obj()).encode())
        return h.hexdigest()


def load_pair(manifest_dir: Path, rec: ManifestRecord) -> SlicePair:
    """Materialize a SlicePair from manifest-relative PNG paths."""
    from .preprocess import read_png_unit

    manifest_dir = Path(manifest_dir)
    pre = SliceImage(read_png_unit(manifest_dir / rec.relative_path_pre), bit_source="u8_rescaled")
    post = SliceImage(read_png_unit(manifest_dir / rec.relative_path_post), bit_source="u8_rescaled")
    mask = None
    if rec.relative_path_mask is not None:
        mask = (read_png_unit(manifest_dir / rec.relative_path_mask) > 0.5).astype(np.uint8)
    return SlicePair(
        pre=pre,
        post=post,
        mask=mask,
        patient_id=rec.patient_id,
        slice_index=rec.slice_index,
        tumor_label=rec.tumor_label,
        laterality=rec.laterality,
    )
