import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cesynth.data import (
    DatasetManifest,
    ManifestRecord,
    SliceImage,
    SlicePair,
    SubtractionImage,
    validate_pair,
)
from cesynth.training import get_variant, make_target, reconstruct_post


def _pair(h=64, w=64, mask=None, tumor=None, rng=None):
    rng = rng or np.random.default_rng(0)
    tumor = bool(mask is not None and np.any(mask)) if tumor is None else tumor
    return SlicePair(
        pre=SliceImage(rng.random((h, w), dtype=np.float32)),
        post=SliceImage(rng.random((h, w), dtype=np.float32)),
        mask=mask,
        patient_id="p0",
        slice_index=0,
        tumor_label=tumor,
    )


def test_wellformed_pair_has_no_violations():
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[10:20, 10:20] = 1
    assert validate_pair(_pair(mask=mask)) == []


def test_mask_shape_mismatch_detected():
    mask = np.zeros((64, 63), dtype=np.uint8)
    mask[5, 5] = 1
    assert "shape_mismatch:mask" in validate_pair(_pair(mask=mask, tumor=True))


def test_tumor_label_without_mask_voxels():
    mask = np.zeros((64, 64), dtype=np.uint8)
    violations = validate_pair(_pair(mask=mask, tumor=True))
    assert violations == ["tumor_label_without_mask_voxels"]


def test_mask_voxels_without_tumor_label():
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[1, 1] = 1
    assert "mask_voxels_without_tumor_label" in validate_pair(_pair(mask=mask, tumor=False))


def test_pixel_range_violation():
    img = SliceImage(np.full((32, 32), 1.5, dtype=np.float32))
    pair = SlicePair(img, img, None, "p", 0, False)
    assert any(v.endswith("pixel_range") for v in validate_pair(pair))


def test_too_small_image_detected():
    img = SliceImage(np.zeros((8, 8), dtype=np.float32))
    pair = SlicePair(img, img, None, "p", 0, False)
    assert "pre:too_small" in validate_pair(pair)


@settings(max_examples=30)
@given(st.integers(16, 40), st.integers(16, 40), st.integers(0, 2**31 - 1))
def test_random_valid_pairs_validate_clean(h, w, seed):
    rng = np.random.default_rng(seed)
    mask = (rng.random((h, w)) > 0.9).astype(np.uint8)
    pair = _pair(h, w, mask=mask if mask.any() else None, rng=rng)
    assert validate_pair(pair) == []


def test_subtraction_bounds_and_roundtrip():
    rng = np.random.default_rng(7)
    for _ in range(20):
        pair = _pair(rng=rng)
        sub = SubtractionImage.from_pair(pair)
        assert np.abs(sub.pixels).max() <= 2.0 + 1e-6
        rec = reconstruct_post(sub.pixels, pair.pre.pixels)
        assert np.abs(rec - pair.post.pixels).max() <= 1e-6


def test_sub_target_matches_subtraction_image():
    pair = _pair()
    variant = get_variant("SUB(Vanilla)")
    target = make_target(pair, variant)
    assert np.allclose(target.numpy(), SubtractionImage.from_pair(pair).pixels, atol=1e-6)


def _records(n=5):
    return [
        ManifestRecord(
            relative_path_pre=f"images/p{i}_pre.png",
            relative_path_post=f"images/p{i}_post.png",
            relative_path_mask=f"masks/p{i}.png" if i % 2 else None,
            patient_id=f"p{i % 3}",
            slice_index=i,
            tumor_label=bool(i % 2),
            laterality="bilateral",
            split="train" if i % 3 else "test",
        )
        for i in range(n)
    ]


def test_manifest_roundtrip_is_field_identical(tmp_path):
    manifest = DatasetManifest(records=_records(), seed=42)
    manifest.save(tmp_path)
    loaded = DatasetManifest.load(tmp_path, check_paths=False)
    assert loaded.seed == 42
    assert loaded.schema_version == manifest.schema_version
    assert loaded.records == manifest.records  # identical order and fields


def test_manifest_split_leak_rejected(tmp_path):
    recs = _records(2)
    leaked = [
        ManifestRecord(**{**recs[0].to_json_obj(), "split": "train"}),
        ManifestRecord(**{**recs[0].to_json_obj(), "split": "test"}),
    ]
    manifest = DatasetManifest(records=leaked)
    with pytest.raises(ValueError, match="both splits"):
        manifest.check_split_disjoint()


def test_manifest_missing_files_detected(tmp_path):
    DatasetManifest(records=_records(2)).save(tmp_path)
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path, check_paths=True)


def test_images_are_immutable():
    img = SliceImage(np.zeros((16, 16), dtype=np.float32))
    with pytest.raises(ValueError):
        img.pixels[0, 0] = 1.0
