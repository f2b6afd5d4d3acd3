"""End-to-end run orchestration: train, sample the test split, evaluate,
and emit a provenance-linking run manifest plus qualitative figures.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ExperimentConfig
from .data import DatasetManifest, SliceImage, load_pair
from .diffusion import make_cosine_schedule, sample
from .evaluation import evaluate_run, per_case_csv, render_text_table
from .features import get_extractor
from .figures import qualitative_grid
from .preprocess import SlicePolicy, build_dataset, export_slice, load_case_dir
from .training import (
    OptimizerConfig,
    Trainer,
    get_variant,
    load_sampling_model,
    reconstruct_post,
)
from .unet import ConditionBundle, ModelConfig

log = logging.getLogger(__name__)


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage


def trainer_from_config(cfg: ExperimentConfig) -> Trainer:
    variant = get_variant(cfg.variant)
    model_config = ModelConfig(
        in_channels=variant.in_channels,
        base_width=cfg.model.base_width,
        depth=cfg.model.depth,
        attention_at_bottleneck=cfg.model.attention_at_bottleneck,
        time_embed_dim=cfg.model.time_embed_dim,
    )
    schedule = make_cosine_schedule(cfg.diffusion.T, cfg.diffusion.cosine_s)
    opt = OptimizerConfig(
        lr=cfg.optimizer.lr,
        betas=tuple(cfg.optimizer.betas),
        weight_decay=cfg.optimizer.weight_decay,
    )
    extractor = get_extractor(cfg.loss.perceptual_backend)
    return Trainer(
        variant=variant,
        model_config=model_config,
        schedule=schedule,
        optimizer_config=opt,
        ema_lambda=cfg.training.ema_lambda,
        loss_options={"extractor": extractor},
        seed=cfg.seed,
    )


def train_from_config(cfg: ExperimentConfig, out_dir: Path) -> Path:
    manifest_dir = Path(cfg.data.manifest)
    manifest = DatasetManifest.load(manifest_dir)
    pairs = [load_pair(manifest_dir, r) for r in manifest.split_records("train")]
    variant = get_variant(cfg.variant)
    if variant.conditioning == "pre_plus_mask":
        # non-tumor slices carry no mask file; give them explicit empty masks
        pairs = [
            p
            if p.mask is not None
            else dataclasses.replace(p, mask=np.zeros(p.pre.pixels.shape, dtype=np.uint8))
            for p in pairs
        ]
    # the 100-epoch table variants get a doubled step budget at desk scale
    steps = cfg.training.steps * variant.epochs // 50
    trainer = trainer_from_config(cfg)
    trainer.fit(
        pairs,
        steps=steps,
        batch_size=cfg.training.batch_size,
        out_dir=out_dir,
        checkpoint_every=cfg.training.checkpoint_every,
        log_every=cfg.training.log_every,
    )
    return out_dir / "ckpt_final.pt"


def sample_split(
    checkpoint: Path,
    manifest_dir: Path,
    out_dir: Path,
    steps: int = 50,
    seed: int = 0,
    split: str = "test",
    batch_size: int = 8,
    sigma_rule: str = "posterior",
    use_ema: bool = True,
) -> Path:
    """Generate one synthetic post-contrast PNG per record in the split.

    Output files share the real post image's basename so evaluation can pair
    them. Deterministic: each record's noise stream is seeded by
    seed + its global index, independent of batching.
    """
    manifest_dir = Path(manifest_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, variant, sched = load_sampling_model(checkpoint, use_ema=use_ema)
    manifest = DatasetManifest.load(manifest_dir)
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"no records in split {split!r}")

    def model_fn(x, cond, t):
        return model(x, cond, t)

    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            pairs = [load_pair(manifest_dir, r) for r in chunk]
            pre = torch.stack([torch.tensor(p.pre.pixels) for p in pairs])[:, None]
            mask = None
            if variant.conditioning == "pre_plus_mask":
                mask = torch.stack(
                    [
                        torch.tensor(p.mask, dtype=torch.float32)
                        if p.mask is not None
                        else torch.zeros(p.pre.pixels.shape)
                        for p in pairs
                    ]
                )[:, None]
            x0_hat = sample(
                model_fn,
                ConditionBundle(pre=pre, mask=mask),
                sched,
                seed=seed + start,
                sigma_rule=sigma_rule,
                steps=steps,
                clamp_range=variant.clamp_range,
            )
            post_pred = reconstruct_post(x0_hat, pre) if variant.target == "SUB" else x0_hat
            post_pred = torch.clamp(post_pred, 0.0, 1.0)
            for k, rec in enumerate(chunk):
                img = SliceImage(post_pred[k, 0].numpy())
                export_slice(img, out_dir / Path(rec.relative_path_post).name)
    return out_dir


def preprocess_cases(cases_dir: Path, out_dir: Path, adjacent_fraction: float = 0.2,
                     seed: int = 0, single_breast: bool = False) -> DatasetManifest:
    cases, split_map = load_case_dir(cases_dir)
    policy = SlicePolicy(
        adjacent_fraction=adjacent_fraction,
        side_split="midline" if single_breast else "none",
        rng_seed=seed,
    )
    return build_dataset(cases, policy, split_map, out_dir)


def run_pipeline(cfg: ExperimentConfig, cases_dir: Optional[Path] = None, force: bool = False) -> dict:
    """Execute (optional preprocess) -> train -> sample -> evaluate -> figures
    and write a run manifest tying the whole provenance chain together."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_manifest_path = out / "run_manifest.json"
    cfg_hash = cfg.content_hash()
    if run_manifest_path.exists() and not force:
        prior = json.loads(run_manifest_path.read_text())
        if prior.get("config_hash") == cfg_hash:
            raise RuntimeError(
                f"run with config hash {cfg_hash[:12]} already exists in {out}; use force to rerun"
            )

    stages: dict[str, float] = {}

    def _stage(name, fn):
        t0 = time.time()
        try:
            result = fn()
        except Exception as exc:
            raise PipelineStageError(name, exc) from exc
        stages[name] = round(time.time() - t0, 3)
        log.info("stage %s done in %.1fs", name, stages[name])
        return result

    if cases_dir is not None:
        manifest_dir = out / "dataset"
        _stage("preprocess", lambda: preprocess_cases(cases_dir, manifest_dir, seed=cfg.seed))
        cfg.data.manifest = str(manifest_dir)
    manifest_dir = Path(cfg.data.manifest)

    ckpt = _stage("train", lambda: train_from_config(cfg, out / "checkpoints"))
    samples_dir = _stage(
        "sample",
        lambda: sample_split(
            ckpt,
            manifest_dir,
            out / "samples",
            steps=cfg.sampling.steps,
            seed=cfg.sampling.seed,
            sigma_rule=cfg.diffusion.sigma_rule,
        ),
    )

    variant = get_variant(cfg.variant)

    def _evaluate():
        report = evaluate_run(
            manifest_dir,
            samples_dir,
            model_row_name=variant.name,
            variant_target=variant.target,
            checkpoint_id=str(ckpt),
            extractor=get_extractor(cfg.loss.perceptual_backend),
        )
        (out / "report.json").write_text(report.to_json())
        (out / "report.txt").write_text(render_text_table(report) + "\n")
        (out / "per_case.csv").write_text(per_case_csv(report))
        return report

    report = _stage("evaluate", _evaluate)
    figure_path = _stage(
        "figures",
        lambda: qualitative_grid(manifest_dir, {variant.name: samples_dir}, out / "figures" / "grid.png"),
    )

    run_manifest = {
        "config_hash": cfg_hash,
        "config": cfg.to_dict(),
        "data_manifest_hash": report.manifest_hash,
        "checkpoint": str(ckpt),
        "report": str(out / "report.json"),
        "figures": [str(figure_path)],
        "stages": stages,
    }
    run_manifest_path.write_text(json.dumps(run_manifest, indent=2))
    return run_manifest
