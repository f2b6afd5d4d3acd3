"""Frozen convolutional feature extractors for perceptual distance and
Frechet-style set metrics.

Two backends: "pretrained" wraps a standard classification network's early
and mid feature maps (needs downloadable weights), "fallback" is a small
fixed-seed random-weight pyramid that is deterministic, dependency-free,
and good enough for relative comparisons in tests and desk-scale runs.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

FALLBACK_SEED = 70709
EMBED_INPUT_SIZE = 64  # images are resized to this before set-level embedding


class ConvPyramid(nn.Module):
    """Three-stage frozen random-weight extractor; grayscale in, 3-channel inside."""

    min_input_size = 32

    def __init__(self, seed: int = FALLBACK_SEED, dtype: torch.dtype = torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = [(3, 16), (16, 32), (32, 64)]
        self.convs = nn.ModuleList()
        for cin, cout in widths:
            conv = nn.Conv2d(cin, cout, kernel_size=3, padding=1, bias=True)
            scale = (2.0 / (cin * 9)) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * scale)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.01)
            self.convs.append(conv)
        self.to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def feature_dim(self) -> int:
        return 16 + 32 + 64

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage feature maps for a [B,1,H,W] unit-range input."""
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        x = x.to(self.convs[0].weight.dtype).repeat(1, 3, 1, 1)
        feats = []
        for i, conv in enumerate(self.convs):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            feats.append(x)
        return feats


class PretrainedFeatures(nn.Module):
    """VGG-style slices of a torchvision classification network."""

    min_input_size = 32

    def __init__(self, dtype: torch.dtype = torch.float32):
        super().__init__()
        try:
            from torchvision.models import VGG16_Weights, vgg16

            backbone = vgg16(weights=VGG16_Weights.DEFAULT).features
        except Exception as exc:
            raise RuntimeError(
                "pretrained feature network unavailable; pass backend='fallback' "
                "to use the deterministic built-in extractor"
            ) from exc
        # slices up to relu1_2 / relu2_2 / relu3_3
        self.slices = nn.ModuleList(
            [backbone[:4], backbone[4:9], backbone[9:16]]
        )
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def feature_dim(self) -> int:
        return 64 + 128 + 256

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        x = x.to(self.mean.dtype).repeat(1, 3, 1, 1)
        x = (x - self.mean) / self.std
        feats = []
        for block in self.slices:
            x = block(x)
            feats.append(x)
        return feats


_CACHE: dict[tuple, nn.Module] = {}


def get_extractor(backend: str = "fallback", dtype: torch.dtype = torch.float32) -> nn.Module:
    key = (backend, dtype)
    if key not in _CACHE:
        if backend == "fallback":
            _CACHE[key] = ConvPyramid(dtype=dtype)
        elif backend == "pretrained":
            _CACHE[key] = PretrainedFeatures(dtype=dtype)
        else:
            raise ValueError(f"unknown feature backend {backend!r}")
    return _CACHE[key]


def embed_images(images, extractor: nn.Module) -> torch.Tensor:
    """Map a stack of images to fixed-length pooled feature vectors.

    Each image is resized to a common input size, pushed through the
    extractor, and every stage is global-average-pooled and concatenated.
    """
    if torch.is_tensor(images):
        x = images
    else:
        x = torch.as_tensor(images)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("empty image set")
    dtype = next(extractor.parameters()).dtype
    x = F.interpolate(
        x.to(dtype), size=(EMBED_INPUT_SIZE, EMBED_INPUT_SIZE), mode="bilinear", align_corners=False
    )
    with torch.no_grad():
        feats = extractor.features(x)
        pooled = [f.mean(dim=(2, 3)) for f in feats]
    return torch.cat(pooled, dim=1)
