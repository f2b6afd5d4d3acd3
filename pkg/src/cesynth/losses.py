"""Composite training losses: the global image-level objective, the
tumor-region composite, contrast-underestimation and mean-intensity terms,
and the final tumor-aware weighted sum.

All functions are differentiable w.r.t. the prediction and accept either
numpy arrays or torch tensors (single 2D images; training loops over batch
items so region crops stay per-image).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .features import get_extractor

GLOBAL_WEIGHTS = {"mae": 0.3, "perceptual": 0.6, "tv": 0.15, "mse": 0.05}
TUMOR_WEIGHTS = {"global": 0.3, "roi": 0.6, "contrast_mae": 0.05, "intensity": 0.05}
# The region composite reuses the global proportions, normalized to unit sum.
_GW_SUM = sum(GLOBAL_WEIGHTS.values())
ROI_WEIGHTS = {k: v / _GW_SUM for k, v in GLOBAL_WEIGHTS.items()}


class LossTerm(NamedTuple):
    raw_value: torch.Tensor
    weight: float


class MaskedLoss(NamedTuple):
    value: torch.Tensor
    roi_absent: bool
    terms: dict = {}


@dataclass
class LossBreakdown:
    """Weighted-sum loss with its named components; total stays a tensor so
    it can be backpropagated directly."""

    total: torch.Tensor
    components: dict[str, LossTerm]
    flags: tuple[str, ...] = ()

    def check(self, tol: float = 1e-6) -> None:
        recomputed = sum(t.weight * float(t.raw_value.detach()) for t in self.components.values())
        if abs(float(self.total.detach()) - recomputed) > tol:
            raise AssertionError(
                f"breakdown total {float(self.total.detach())} != weighted sum {recomputed}"
            )

    def detached(self) -> "LossBreakdown":
        return LossBreakdown(
            total=self.total.detach(),
            components={k: LossTerm(t.raw_value.detach(), t.weight) for k, t in self.components.items()},
            flags=self.flags,
        )

    def float_components(self) -> dict[str, float]:
        out = {"total": float(self.total.detach())}
        out.update({k: float(t.raw_value.detach()) for k, t in self.components.items()})
        return out


def _prep(img) -> torch.Tensor:
    t = img if torch.is_tensor(img) else torch.tensor(np.asarray(img), dtype=torch.float32)
    while t.ndim > 2 and t.shape[0] == 1:
        t = t.squeeze(0)
    if t.ndim != 2:
        raise ValueError(f"expected a single 2D image, got shape {tuple(img.shape)}")
    return t


def _check_same_shape(*imgs: torch.Tensor) -> None:
    shapes = {tuple(i.shape) for i in imgs}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _default_extractor(ref: torch.Tensor, extractor):
    if extractor is not None:
        return extractor
    dtype = ref.dtype if ref.dtype in (torch.float32, torch.float64) else torch.float32
    return get_extractor("fallback", dtype=dtype)


def mae(pred, target) -> torch.Tensor:
    pred, target = _prep(pred), _prep(target)
    _check_same_shape(pred, target)
    return (pred - target).abs().mean()


def mse(pred, target) -> torch.Tensor:
    pred, target = _prep(pred), _prep(target)
    _check_same_shape(pred, target)
    return ((pred - target) ** 2).mean()


def total_variation(img) -> torch.Tensor:
    """Anisotropic TV: mean of absolute horizontal plus vertical neighbor
    differences, normalized by the total number of neighbor pairs."""
    img = _prep(img)
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"TV needs at least 2x2, got {tuple(img.shape)}")
    dh = (img[:, 1:] - img[:, :-1]).abs()
    dv = (img[1:, :] - img[:-1, :]).abs()
    return (dh.sum() + dv.sum()) / (dh.numel() + dv.numel())


def masked_total_variation(img, mask) -> torch.Tensor:
    """TV restricted to neighbor pairs with both pixels inside the mask."""
    img, mask = _prep(img), _prep(mask)
    _check_same_shape(img, mask)
    m = (mask > 0).to(img.dtype)
    ph = m[:, 1:] * m[:, :-1]
    pv = m[1:, :] * m[:-1, :]
    n_pairs = ph.sum() + pv.sum()
    if float(n_pairs) == 0:
        return img.sum() * 0.0
    dh = (img[:, 1:] - img[:, :-1]).abs() * ph
    dv = (img[1:, :] - img[:-1, :]).abs() * pv
    return (dh.sum() + dv.sum()) / n_pairs


def perceptual_distance(a, b, extractor=None) -> torch.Tensor:
    """Mean squared distance between frozen multi-layer feature maps."""
    a, b = _prep(a), _prep(b)
    _check_same_shape(a, b)
    extractor = _default_extractor(a, extractor)
    fa = extractor.features(a)
    fb = extractor.features(b)
    dists = [((x - y) ** 2).mean() for x, y in zip(fa, fb)]
    return torch.stack(dists).mean()


def global_loss(pred, target, weights: Optional[dict] = None, extractor=None) -> LossBreakdown:
    """Full-image objective: 0.3 MAE + 0.6 perceptual + 0.15 TV + 0.05 MSE."""
    pred, target = _prep(pred), _prep(target)
    _check_same_shape(pred, target)
    w = dict(GLOBAL_WEIGHTS if weights is None else weights)
    terms = {
        "mae": LossTerm(mae(pred, target), w["mae"]),
        "perceptual": LossTerm(perceptual_distance(pred, target, extractor), w["perceptual"]),
        "tv": LossTerm(total_variation(pred), w["tv"]),
        "mse": LossTerm(mse(pred, target), w["mse"]),
    }
    total = sum(t.weight * t.raw_value for t in terms.values())
    return LossBreakdown(total=total, components=terms)


def _mask_bbox(mask: torch.Tensor) -> tuple[int, int, int, int]:
    rows = torch.any(mask > 0, dim=1).nonzero().flatten()
    cols = torch.any(mask > 0, dim=0).nonzero().flatten()
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def _bbox_crop_resized(img: torch.Tensor, bbox, size: int) -> torch.Tensor:
    r0, r1, c0, c1 = bbox
    crop = img[r0 : r1 + 1, c0 : c1 + 1]
    return F.interpolate(
        crop[None, None], size=(size, size), mode="bilinear", align_corners=False
    )[0, 0]


def roi_loss(pred, target, mask, weights: Optional[dict] = None, extractor=None) -> MaskedLoss:
    """Tumor-region composite: masked MAE and MSE, a perceptual term on the
    mask bounding box, and TV over the masked prediction region.

    An all-zero mask contributes nothing (slices without tumor carry no
    region signal) and is flagged via roi_absent.
    """
    pred, target, mask = _prep(pred), _prep(target), _prep(mask)
    _check_same_shape(pred, target, mask)
    m = (mask > 0).to(pred.dtype)
    count = m.sum()
    if float(count) == 0:
        return MaskedLoss(pred.sum() * 0.0, roi_absent=True)
    w = dict(ROI_WEIGHTS if weights is None else weights)
    extractor = _default_extractor(pred, extractor)

    mae_m = ((pred - target).abs() * m).sum() / count
    mse_m = (((pred - target) ** 2) * m).sum() / count
    bbox = _mask_bbox(m)
    size = getattr(extractor, "min_input_size", 32)
    perc = perceptual_distance(
        _bbox_crop_resized(pred, bbox, size), _bbox_crop_resized(target, bbox, size), extractor
    )
    tv_m = masked_total_variation(pred, m)
    total = w["mae"] * mae_m + w["mse"] * mse_m + w["perceptual"] * perc + w["tv"] * tv_m
    return MaskedLoss(
        total, roi_absent=False, terms={"mae": mae_m, "mse": mse_m, "perceptual": perc, "tv": tv_m}
    )


def contrast_mae(pred, target, pre, mask) -> MaskedLoss:
    """Penalizes underestimated enhancement only: MAE between the ReLU-masked
    residuals of prediction and target over the tumor region."""
    pred, target, pre, mask = _prep(pred), _prep(target), _prep(pre), _prep(mask)
    _check_same_shape(pred, target, pre, mask)
    m = (mask > 0).to(pred.dtype)
    count = m.sum()
    if float(count) == 0:
        return MaskedLoss(pred.sum() * 0.0, roi_absent=True)
    r_hat = torch.relu(pred * m - pre * m)
    r = torch.relu(target * m - pre * m)
    return MaskedLoss(((r_hat - r).abs() * m).sum() / count, roi_absent=False)


def intensity_loss(pred, target, mask) -> MaskedLoss:
    """Absolute difference of the masked mean intensities."""
    pred, target, mask = _prep(pred), _prep(target), _prep(mask)
    _check_same_shape(pred, target, mask)
    m = (mask > 0).to(pred.dtype)
    count = m.sum()
    if float(count) == 0:
        return MaskedLoss(pred.sum() * 0.0, roi_absent=True)
    mu_pred = (pred * m).sum() / count
    mu_target = (target * m).sum() / count
    return MaskedLoss((mu_pred - mu_target).abs(), roi_absent=False)


def tumor_total_loss(
    pred,
    target,
    pre,
    mask,
    weights: Optional[dict] = None,
    roi_weights: Optional[dict] = None,
    global_weights: Optional[dict] = None,
    extractor=None,
) -> LossBreakdown:
    """Tumor-aware objective: 0.3 global + 0.6 ROI + 0.05 contrast-MAE +
    0.05 intensity."""
    w = dict(TUMOR_WEIGHTS if weights is None else weights)
    g = global_loss(pred, target, weights=global_weights, extractor=extractor)
    roi = roi_loss(pred, target, mask, weights=roi_weights, extractor=extractor)
    cm = contrast_mae(pred, target, pre, mask)
    inten = intensity_loss(pred, target, mask)
    terms = {
        "global": LossTerm(g.total, w["global"]),
        "roi": LossTerm(roi.value, w["roi"]),
        "contrast_mae": LossTerm(cm.value, w["contrast_mae"]),
        "intensity": LossTerm(inten.value, w["intensity"]),
    }
    total = sum(t.weight * t.raw_value for t in terms.values())
    flags = ("roi_absent",) if roi.roi_absent else ()
    return LossBreakdown(total=total, components=terms, flags=flags)


def combine_breakdowns(breakdowns: list[LossBreakdown]) -> LossBreakdown:
    """Average per-item breakdowns into one batch breakdown."""
    if not breakdowns:
        raise ValueError("no breakdowns to combine")
    names = list(breakdowns[0].components)
    n = len(breakdowns)
    terms = {}
    for name in names:
        weight = breakdowns[0].components[name].weight
        raw = sum(b.components[name].raw_value for b in breakdowns) / n
        terms[name] = LossTerm(raw, weight)
    total = sum(b.total for b in breakdowns) / n
    flags = tuple(sorted({f for b in breakdowns for f in b.flags}))
    return LossBreakdown(total=total, components=terms, flags=flags)
