"""Variant registry and the training loop for both pipelines: direct
post-contrast prediction (PC) and scaled-residual prediction (SUB), each in
vanilla / mask-conditioned / tumor-aware-loss flavors, with EMA weight
tracking and resumable checkpoints.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import SUBTRACTION_SCALE, SlicePair
from .diffusion import DiffusionSchedule, make_cosine_schedule, q_sample
from .losses import LossBreakdown, combine_breakdowns, global_loss, tumor_total_loss
from .unet import ConditionBundle, ModelConfig, UNet, stack_model_input

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
DEFAULT_EPOCHS = 50


@dataclass(frozen=True)
class VariantSpec:
    """One model variant; the name is uniquely determined by the fields."""

    target: str  # "PC" or "SUB"
    conditioning: str  # "pre_only" or "pre_plus_mask"
    loss: str  # "global" or "tumor_aware"
    epochs: int
    name: str

    @property
    def in_channels(self) -> int:
        return 3 if self.conditioning == "pre_plus_mask" else 2

    @property
    def clamp_range(self) -> tuple[float, float]:
        return (0.0, 1.0) if self.target == "PC" else (-2.0, 2.0)


def _variant(target, conditioning, loss, epochs, name) -> VariantSpec:
    return VariantSpec(target=target, conditioning=conditioning, loss=loss, epochs=epochs, name=name)


FULL_BREAST_VARIANTS = {
    v.name: v
    for v in [
        _variant("PC", "pre_only", "global", 50, "PC(Vanilla)"),
        _variant("PC", "pre_only", "global", 100, "PC(Vanilla100)"),
        _variant("PC", "pre_plus_mask", "global", 50, "PC-ROI(M)"),
        _variant("PC", "pre_plus_mask", "global", 100, "PC-ROI(M100)"),
        _variant("PC", "pre_only", "tumor_aware", 50, "PC-ROI(L)"),
        _variant("SUB", "pre_only", "global", 50, "SUB(Vanilla)"),
        _variant("SUB", "pre_only", "tumor_aware", 50, "SUB-ROI(L)"),
    ]
}

SINGLE_BREAST_VARIANTS = {
    name: FULL_BREAST_VARIANTS[name]
    for name in ["PC(Vanilla)", "PC-ROI(L)", "SUB(Vanilla)", "SUB-ROI(L)"]
}


def _canon(name: str) -> str:
    return "".join(ch for ch in name.upper() if ch.isalnum())


_CANON_LOOKUP = {_canon(name): spec for name, spec in FULL_BREAST_VARIANTS.items()}


def get_variant(name: str) -> VariantSpec:
    """Look up a variant by display name or CLI alias (e.g. "SUB-ROI_L")."""
    spec = _CANON_LOOKUP.get(_canon(name))
    if spec is None:
        raise KeyError(f"unknown variant {name!r}; known: {sorted(FULL_BREAST_VARIANTS)}")
    return spec


def make_model_input(pre, noisy_target, mask, variant: VariantSpec) -> torch.Tensor:
    """Stack conditioning channels in the fixed order the backbone expects."""
    wants_mask = variant.conditioning == "pre_plus_mask"
    if wants_mask and mask is None:
        raise ValueError(f"variant {variant.name} is mask-conditioned but no mask was given")
    if not wants_mask and mask is not None:
        raise ValueError(f"variant {variant.name} does not take a mask channel")
    return stack_model_input(pre, noisy_target, mask)


def make_target(pair_or_post, variant: VariantSpec, pre=None):
    """PC target is the post image; SUB target is the scaled residual."""
    if isinstance(pair_or_post, SlicePair):
        post = torch.tensor(pair_or_post.post.pixels)
        pre = torch.tensor(pair_or_post.pre.pixels)
    else:
        post = pair_or_post
        if variant.target == "SUB" and pre is None:
            raise ValueError("SUB target needs the pre image")
    if variant.target == "PC":
        return post
    return (post - pre) / SUBTRACTION_SCALE


def reconstruct_post(sub_pred, pre):
    """Invert the residual scaling and clamp to the unit image range."""
    out = SUBTRACTION_SCALE * sub_pred + pre
    if torch.is_tensor(out):
        return torch.clamp(out, 0.0, 1.0)
    return np.clip(out, 0.0, 1.0)


def ema_update(ema_params, params, lam: float) -> None:
    """In-place ema' = lam * ema + (1 - lam) * w over congruent tensor trees."""
    if not 0.0 < lam < 1.0:
        raise ValueError(f"ema lambda must be in (0,1), got {lam}")
    with torch.no_grad():
        for e, w in zip(ema_params, params):
            if e.shape != w.shape:
                raise ValueError(f"EMA shape mismatch: {tuple(e.shape)} vs {tuple(w.shape)}")
            e.mul_(lam).add_(w, alpha=1.0 - lam)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2


def batch_tensors(pairs: list[SlicePair]):
    """Stack a list of SlicePairs into [B,1,H,W] tensors (mask zeros when absent)."""
    pre = torch.stack([torch.tensor(p.pre.pixels) for p in pairs])[:, None]
    post = torch.stack([torch.tensor(p.post.pixels) for p in pairs])[:, None]
    masks = [
        torch.tensor(p.mask, dtype=torch.float32)
        if p.mask is not None
        else torch.zeros(p.pre.pixels.shape, dtype=torch.float32)
        for p in pairs
    ]
    mask = torch.stack(masks)[:, None]
    return pre, post, mask


class Trainer:
    """Owns the model, EMA copy, optimizer, RNG, and step counter."""

    def __init__(
        self,
        variant: VariantSpec,
        model_config: Optional[ModelConfig] = None,
        schedule: Optional[DiffusionSchedule] = None,
        optimizer_config: Optional[OptimizerConfig] = None,
        ema_lambda: float = 0.999,
        loss_options: Optional[dict] = None,
        seed: int = 0,
    ):
        self.variant = variant
        self.model_config = model_config or ModelConfig(in_channels=variant.in_channels)
        if self.model_config.in_channels != variant.in_channels:
            raise ValueError(
                f"variant {variant.name} needs in_channels={variant.in_channels}, "
                f"config has {self.model_config.in_channels}"
            )
        self.schedule = schedule or make_cosine_schedule(1000, 0.008)
        self.optimizer_config = optimizer_config or OptimizerConfig()
        self.generator = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)  # deterministic weight init
        self.model = UNet(self.model_config)
        self.ema_model = copy.deepcopy(self.model)
        for p in self.ema_model.parameters():
            p.requires_grad_(False)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=self.optimizer_config.lr,
            betas=self.optimizer_config.betas,
            weight_decay=self.optimizer_config.weight_decay,
        )
        self.ema_lambda = ema_lambda
        self.loss_options = loss_options or {}
        self.step = 0

    # --- single optimization step ------------------------------------

    def train_step(self, batch: list[SlicePair]) -> LossBreakdown:
        if not batch:
            raise ValueError("empty batch")
        if self.variant.conditioning == "pre_plus_mask":
            missing = [p.patient_id for p in batch if p.mask is None]
            if missing:
                raise ValueError(
                    f"variant {self.variant.name} is mask-conditioned but batch items "
                    f"lack masks: {missing}; supply explicit (possibly all-zero) masks"
                )
        pre, post, mask = batch_tensors(batch)
        b = pre.shape[0]
        t = torch.randint(1, self.schedule.T + 1, (b,), generator=self.generator)
        target = make_target(post, self.variant, pre=pre)
        eps = torch.randn(target.shape, generator=self.generator)
        noised = q_sample(target, t, eps, self.schedule)

        cond_mask = mask if self.variant.conditioning == "pre_plus_mask" else None
        model_in_check = make_model_input(pre, noised.x_t, cond_mask, self.variant)
        assert model_in_check.shape[1] == self.model_config.in_channels
        x0_hat = self.model(noised.x_t, ConditionBundle(pre=pre, mask=cond_mask), t)

        if self.variant.target == "SUB":
            pred_post = reconstruct_post(x0_hat, pre)
        else:
            pred_post = x0_hat

        extractor = self.loss_options.get("extractor")
        per_item = []
        for i in range(b):
            if self.variant.loss == "tumor_aware":
                bd = tumor_total_loss(
                    pred_post[i, 0], post[i, 0], pre[i, 0], mask[i, 0], extractor=extractor
                )
            else:
                bd = global_loss(pred_post[i, 0], post[i, 0], extractor=extractor)
            per_item.append(bd)
        breakdown = combine_breakdowns(per_item)

        if not torch.isfinite(breakdown.total):
            diag = {
                "step": self.step,
                "t": t.tolist(),
                "components": {k: float(v.raw_value) for k, v in breakdown.components.items()},
                "pred_stats": [float(pred_post.min()), float(pred_post.max())],
            }
            raise TrainingDiverged(f"non-finite loss at step {self.step}", diag)

        self.optimizer.zero_grad()
        breakdown.total.backward()
        self.optimizer.step()
        ema_update(self.ema_model.parameters(), self.model.parameters(), self.ema_lambda)
        self.step += 1
        return breakdown.detached()

    # --- loop, logging, checkpointing ---------------------------------

    def fit(
        self,
        pairs: list[SlicePair],
        steps: int,
        batch_size: int = 8,
        out_dir: Optional[Path] = None,
        checkpoint_every: int = 0,
        log_every: int = 50,
    ) -> list[float]:
        if not pairs:
            raise ValueError("no training pairs")
        out_dir = Path(out_dir) if out_dir is not None else None
        loss_log = []
        log_fh = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            log_fh = open(out_dir / "loss_log.jsonl", "a")
        try:
            for _ in range(steps):
                idx = torch.randint(0, len(pairs), (min(batch_size, len(pairs)),), generator=self.generator)
                batch = [pairs[int(i)] for i in idx]
                try:
                    bd = self.train_step(batch)
                except TrainingDiverged as exc:
                    if out_dir is not None:
                        (out_dir / "divergence.json").write_text(json.dumps(exc.diagnostics, indent=2))
                    raise
                loss_log.append(float(bd.total))
                if log_fh is not None and (self.step % log_every == 0 or self.step == 1):
                    log_fh.write(json.dumps({"step": self.step, **bd.float_components()}) + "\n")
                    log_fh.flush()
                if checkpoint_every and out_dir is not None and self.step % checkpoint_every == 0:
                    self.save_checkpoint(out_dir / f"ckpt_{self.step:07d}.pt")
            if out_dir is not None:
                self.save_checkpoint(out_dir / "ckpt_final.pt")
        finally:
            if log_fh is not None:
                log_fh.close()
        return loss_log

    def save_checkpoint(self, path: Path) -> None:
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "variant": asdict(self.variant),
            "model_config": asdict(self.model_config),
            "schedule": {"T": self.schedule.T, "s": self.schedule.offset_s},
            "model_state": self.model.state_dict(),
            "ema_state": self.ema_model.state_dict(),
            "optimizer_state": self.optimizer.state_dict(),
            "ema_lambda": self.ema_lambda,
            "step": self.step,
            "generator_state": self.generator.get_state(),
        }
        torch.save(payload, path)

    @classmethod
    def load_checkpoint(cls, path: Path) -> "Trainer":
        payload = torch.load(path, weights_only=False)
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
        variant = VariantSpec(**payload["variant"])
        trainer = cls(
            variant=variant,
            model_config=ModelConfig(**payload["model_config"]),
            schedule=make_cosine_schedule(payload["schedule"]["T"], payload["schedule"]["s"]),
            ema_lambda=payload["ema_lambda"],
        )
        trainer.model.load_state_dict(payload["model_state"])
        trainer.ema_model.load_state_dict(payload["ema_state"])
        trainer.optimizer.load_state_dict(payload["optimizer_state"])
        trainer.step = payload["step"]
        trainer.generator.set_state(payload["generator_state"])
        return trainer


def load_sampling_model(path: Path, use_ema: bool = True) -> tuple[UNet, VariantSpec, DiffusionSchedule]:
    """Load the inference model (EMA weights by default) from a checkpoint."""
    payload = torch.load(path, weights_only=False)
    variant = VariantSpec(**payload["variant"])
    model = UNet(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["ema_state" if use_ema else "model_state"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    sched = make_cosine_schedule(payload["schedule"]["T"], payload["schedule"]["s"])
    return model, variant, sched
