"""Deterministic synthetic pre/post/mask volume generator.

Phantoms stand in for clinical data at desk scale: a smooth breast-shaped
anatomy field plus band-limited texture forms the pre-contrast volume, and
cosine-tapered enhancement blobs (the "lesions") plus a mild parenchymal
uplift form the post-contrast counterpart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .preprocess import VolumeCase, save_case

PARENCHYMA_UPLIFT = 0.03  # global post-contrast tissue uplift, kept <= 0.05
MASK_PROFILE_THRESHOLD = 0.3  # fraction of blob peak that counts as lesion support


@dataclass(frozen=True)
class PhantomParams:
    image_size: int = 64
    depth: int = 16
    n_lesions: int = 1
    lesion_radius_range: tuple[float, float] = (4.0, 9.0)
    enhancement_range: tuple[float, float] = (0.25, 0.45)
    background_texture_scale: float = 3.0
    parenchyma_gradient: float = 0.08
    noise_sigma: float = 0.01
    laterality: str = "bilateral"
    seed: int = 0

    def __post_init__(self):
        if self.n_lesions > 0 and self.enhancement_range[0] <= 0:
            raise ValueError("enhancement_range lower bound must be > 0 when lesions are requested")
        if not (0 < self.enhancement_range[1] <= 0.6):
            raise ValueError("enhancement_range upper bound must be in (0, 0.6]")


def _breast_field(params: PhantomParams) -> np.ndarray:
    """Soft ellipsoidal support in [0,1], two lobes for bilateral cases."""
    d, s = params.depth, params.image_size
    z, y, x = np.meshgrid(
        np.linspace(-1, 1, d), np.linspace(-1, 1, s), np.linspace(-1, 1, s), indexing="ij"
    )
    if params.laterality == "bilateral":
        centers = [(-0.45, 0.1), (0.45, 0.1)]
        rx, ry = 0.42, 0.62
    else:
        centers = [(0.0, 0.1)]
        rx, ry = 0.6, 0.62
    field = np.zeros((d, s, s))
    for cx, cy in centers:
        r2 = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + (z / 0.95) ** 2
        field = np.maximum(field, np.clip(1.0 - r2, 0.0, 1.0))
    return field


def _lesion_blob(shape, center, radius, depth_radius) -> np.ndarray:
    """Cosine-tapered radial profile, 1 at the center, 0 beyond the radius."""
    d, h, w = shape
    z = (np.arange(d) - center[0]) / depth_radius
    y = (np.arange(h) - center[1]) / radius
    x = (np.arange(w) - center[2]) / radius
    r = np.sqrt(z[:, None, None] ** 2 + y[None, :, None] ** 2 + x[None, None, :] ** 2)
    profile = np.where(r < 1.0, np.cos(np.pi / 2.0 * np.clip(r, 0, 1)) ** 2, 0.0)
    return profile


def generate_case(params: PhantomParams) -> VolumeCase:
    """Build one deterministic paired phantom volume from the params seed."""
    rng = np.random.default_rng(params.seed)
    d, s = params.depth, params.image_size
    support = _breast_field(params)

    texture = gaussian_filter(rng.standard_normal((d, s, s)), sigma=params.background_texture_scale)
    tex_peak = np.abs(texture).max()
    if tex_peak > 0:
        texture = texture / tex_peak * 0.06
    gradient = params.parenchyma_gradient * np.linspace(-0.5, 0.5, s)[None, :, None]

    anatomy = support * (0.35 + gradient + texture)
    pre = np.clip(anatomy + params.noise_sigma * rng.standard_normal((d, s, s)), 0.0, 1.0)

    lesion_field = np.zeros((d, s, s))
    mask = np.zeros((d, s, s), dtype=np.uint8)
    interior = support > 0.5
    interior_idx = np.argwhere(interior)
    for _ in range(params.n_lesions):
        radius = rng.uniform(*params.lesion_radius_range)
        peak = rng.uniform(*params.enhancement_range)
        center = interior_idx[rng.integers(len(interior_idx))]
        profile = _lesion_blob((d, s, s), center, radius, depth_radius=max(1.5, radius * 0.6))
        lesion_field = np.maximum(lesion_field, peak * profile)
        mask |= (profile >= MASK_PROFILE_THRESHOLD).astype(np.uint8)

    parenchyma = PARENCHYMA_UPLIFT * support
    enhancement = np.maximum(lesion_field, parenchyma)
    post = np.clip(pre + enhancement, 0.0, 1.0)

    return VolumeCase(
        pre_volume=pre.astype(np.float32),
        post_volume=post.astype(np.float32),
        mask_volume=mask,
        patient_id=f"phantom{params.seed:04d}",
        laterality=params.laterality,
    )


def make_corpus(
    out_dir: Path,
    n_cases: int = 32,
    train_fraction: float = 0.75,
    image_size: int = 64,
    depth: int = 16,
    seed: int = 0,
    laterality: str = "bilateral",
) -> dict[str, str]:
    """Write a corpus of phantom cases plus the patient split map.

    The first ceil(train_fraction * n) patients go to train, the rest to
    test; with the defaults (32 cases) that is the 24 train / 8 test corpus.
    """
    out_dir = Path(out_dir)
    (out_dir / "cases").mkdir(parents=True, exist_ok=True)
    n_train = int(np.ceil(train_fraction * n_cases))
    split_map = {}
    for k in range(n_cases):
        params = PhantomParams(
            image_size=image_size, depth=depth, seed=seed + k, laterality=laterality
        )
        case = generate_case(params)
        save_case(case, out_dir / "cases" / f"{case.patient_id}.npz")
        split_map[case.patient_id] = "train" if k < n_train else "test"
    (out_dir / "splits.json").write_text(json.dumps(split_map, indent=2) + "\n")
    return split_map
