"""Acceptance gate: one test per criterion, each pinned to its stated
tolerance. The terminal summary prints a pass/fail line per criterion.

The desk-scale trend check trains three real models and is marked slow
(roughly an hour on one CPU core); everything else finishes in seconds.
"""

import math
from pathlib import Path

import numpy as np
import pytest
import torch

from cesynth.config import ExperimentConfig
from cesynth.data import DatasetManifest, SliceImage, SlicePair, load_pair
from cesynth.diffusion import make_cosine_schedule, posterior_mean, sample
from cesynth.evaluation import (
    evaluate_run,
    frechet_distance,
    frechet_from_features,
    fid_score,
    frd_score,
    paired_metrics,
    psnr,
    ssim,
)
from cesynth.features import get_extractor
from cesynth.losses import (
    contrast_mae,
    global_loss,
    intensity_loss,
    mae,
    mse,
    perceptual_distance,
    roi_loss,
    total_variation,
    tumor_total_loss,
)
from cesynth.phantom import PhantomParams, generate_case, make_corpus
from cesynth.preprocess import SlicePolicy, build_dataset, load_case_dir, select_slices
from cesynth.training import (
    FULL_BREAST_VARIANTS,
    SINGLE_BREAST_VARIANTS,
    Trainer,
    get_variant,
    make_target,
    reconstruct_post,
)
from cesynth.unet import ConditionBundle, ModelConfig


def test_loss_identity_suite():
    """pred == target on constant images -> exactly 0; totals match sums."""
    img = torch.full((16, 16), 0.4, dtype=torch.float64)
    pre = torch.full((16, 16), 0.2, dtype=torch.float64)
    m = torch.zeros(16, 16, dtype=torch.float64)
    m[4:12, 4:12] = 1.0

    assert float(mae(img, img.clone())) == 0.0
    assert float(mse(img, img.clone())) == 0.0
    assert float(total_variation(img)) == 0.0
    assert float(perceptual_distance(img, img.clone())) == 0.0
    assert float(roi_loss(img, img.clone(), m).value) == 0.0
    assert float(contrast_mae(img, img.clone(), pre, m).value) == 0.0
    assert float(intensity_loss(img, img.clone(), m).value) == 0.0

    for bd in (global_loss(img, img.clone()), tumor_total_loss(img, img.clone(), pre, m)):
        assert float(bd.total) == 0.0
        bd.check(tol=1e-6)

    # totals equal weighted component sums on non-trivial inputs too
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(16, 16, generator=g), torch.rand(16, 16, generator=g)
    global_loss(a, b).check(tol=1e-6)
    tumor_total_loss(a, b, pre.float(), m.float()).check(tol=1e-6)


def test_loss_weight_conformance():
    """Global weights {0.3,0.6,0.15,0.05}; tumor weights {0.3,0.6,0.05,0.05}."""
    g = torch.Generator().manual_seed(1)
    a, b, c = (torch.rand(16, 16, generator=g) for _ in range(3))
    m = torch.zeros(16, 16)
    m[2:9, 3:10] = 1.0
    bd = global_loss(a, b)
    assert {k: t.weight for k, t in bd.components.items()} == {
        "mae": 0.3, "perceptual": 0.6, "tv": 0.15, "mse": 0.05,
    }
    bd2 = tumor_total_loss(a, b, c, m)
    assert {k: t.weight for k, t in bd2.components.items()} == {
        "global": 0.3, "roi": 0.6, "contrast_mae": 0.05, "intensity": 0.05,
    }
    # weights hold on every breakdown, including zero-mask slices
    bd3 = tumor_total_loss(a, b, c, torch.zeros(16, 16))
    assert {k: t.weight for k, t in bd3.components.items()} == {
        "global": 0.3, "roi": 0.6, "contrast_mae": 0.05, "intensity": 0.05,
    }


def _numeric_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def _check_grad(fn_t, x, tol):
    t = torch.tensor(x, requires_grad=True)
    fn_t(t).backward()
    analytic = t.grad.numpy()
    numeric = _numeric_grad(lambda v: float(fn_t(torch.tensor(v))), x)
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
    assert rel <= tol, rel


def test_gradient_checks():
    """Analytic vs central finite differences on 8x8: <=1e-3 (1e-2 perceptual)."""
    rng = np.random.default_rng(77)
    pred = rng.uniform(0.05, 0.95, (8, 8))
    target = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)))
    pre = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)))
    m = torch.zeros(8, 8, dtype=torch.float64)
    m[2:6, 2:6] = 1.0
    ext = get_extractor("fallback", dtype=torch.float64)

    _check_grad(lambda x: mae(x, target), pred, 1e-3)
    _check_grad(lambda x: mse(x, target), pred, 1e-3)
    _check_grad(lambda x: total_variation(x), pred, 1e-3)
    _check_grad(lambda x: contrast_mae(x, target, pre, m).value, pred, 1e-3)
    _check_grad(lambda x: intensity_loss(x, target, m).value, pred, 1e-3)
    _check_grad(lambda x: perceptual_distance(x, target, ext), pred, 1e-2)
    _check_grad(lambda x: global_loss(x, target, extractor=ext).total, pred, 1e-2)
    _check_grad(lambda x: tumor_total_loss(x, target, pre, m, extractor=ext).total, pred, 1e-2)


def test_schedule_properties():
    """Cosine alpha_bar strictly decreasing, ab_0 = 1 +/- 1e-6; posterior mean
    matches a scalar oracle elementwise <= 1e-6 on 100 random cases."""
    sched = make_cosine_schedule(1000, 0.008)
    assert abs(sched.alpha_bar[0] - 1.0) <= 1e-6
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.alpha_bar[-1] > 0

    rng = np.random.default_rng(0)
    for _ in range(100):
        t = int(rng.integers(1, 1001))
        x_t = rng.normal(size=(4, 4))
        x0 = rng.normal(size=(4, 4))
        alpha, ab = sched.alpha_at(t), sched.alpha_bar_at(t)
        got = posterior_mean(torch.tensor(x_t), torch.tensor(x0), t, sched).numpy()
        for i in range(4):
            for j in range(4):
                want = (1.0 / math.sqrt(alpha)) * (
                    x_t[i, j] - ((1.0 - alpha) / math.sqrt(1.0 - ab)) * x0[i, j]
                )
                assert abs(got[i, j] - want) <= 1e-6


def test_subtraction_round_trip():
    """reconstruct(make_target(SUB)) == post, max error <= 1e-6, 1000 pairs."""
    variant = get_variant("SUB(Vanilla)")
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        pre = torch.tensor(rng.random((16, 16), dtype=np.float64).astype(np.float32))
        post = torch.tensor(rng.random((16, 16), dtype=np.float64).astype(np.float32))
        target = make_target(post, variant, pre=pre)
        back = reconstruct_post(target, pre)
        worst = max(worst, float((back - post).abs().max()))
    assert worst <= 1e-6


def test_cheating_oracle_sampler(dataset_dir, dataset_manifest):
    """A model returning the true clean image recovers the phantom post image
    with MAE <= 0.02 at 50 sampling steps."""
    recs = [r for r in dataset_manifest.records if r.tumor_label][:3]
    sched = make_cosine_schedule(1000, 0.008)
    for rec in recs:
        pair = load_pair(dataset_dir, rec)
        truth = torch.tensor(pair.post.pixels)[None, None]

        def oracle(x, cond, t):
            return truth.clone()

        out = sample(
            oracle,
            ConditionBundle(pre=torch.tensor(pair.pre.pixels)[None, None]),
            sched,
            seed=0,
            steps=50,
        )
        assert float((out - truth).abs().mean()) <= 0.02


def test_frechet_oracle():
    """Analytic 1-D/diagonal cases <= 1e-8; self-distance 0 +/- 1e-6;
    strictly increasing under mean shift."""
    assert frechet_distance([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-8)
    assert frechet_distance(
        [0.0, 0.0], np.diag([1.0, 4.0]), [0.0, 0.0], np.diag([4.0, 1.0])
    ) == pytest.approx(2.0, abs=1e-8)

    rng = np.random.default_rng(5)
    imgs = [rng.random((24, 24)) for _ in range(5)]
    assert fid_score(imgs, [i.copy() for i in imgs]) <= 1e-6
    assert frd_score(imgs, [i.copy() for i in imgs]) <= 1e-6

    feats = rng.standard_normal((30, 6))
    prev = -1.0
    for shift in (0.0, 0.3, 0.9, 2.0):
        d = frechet_from_features(feats + shift, feats)
        assert d > prev
        prev = d


def _ssim_bruteforce(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03):
    ax = np.arange(win) - (win - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = k1**2, k2**2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            wa, wb = a[i : i + win, j : j + win], b[i : i + win, j : j + win]
            mua, mub = (w * wa).sum(), (w * wb).sum()
            va = (w * (wa - mua) ** 2).sum()
            vb = (w * (wb - mub) ** 2).sum()
            cov = (w * (wa - mua) * (wb - mub)).sum()
            vals.append(((2 * mua * mub + c1) * (2 * cov + c2)) /
                        ((mua**2 + mub**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_metric_oracles():
    """SSIM/PSNR/MAE vs independent brute force <= 1e-5 on 32x32 images;
    PSNR = -10 log10(MSE) exactly."""
    rng = np.random.default_rng(11)
    for _ in range(3):
        a = rng.random((32, 32))
        b = np.clip(a + 0.15 * rng.standard_normal((32, 32)), 0, 1)
        out = paired_metrics(a, b)
        assert out["ssim"] == pytest.approx(_ssim_bruteforce(a, b), abs=1e-5)
        assert out["mae"] == pytest.approx(float(np.mean(np.abs(a - b))), abs=1e-5)
        mse_val = float(np.mean((a - b) ** 2))
        assert out["psnr"] == -10.0 * math.log10(mse_val)
        assert psnr(a, b) == 10.0 * math.log10(1.0 / mse_val)


def test_roi_mode_equivalence(tmp_path):
    """Full-coverage mask: ROI metrics equal full-image metrics <= 1e-6."""
    from cesynth.data import ManifestRecord
    from cesynth.preprocess import export_slice

    rng = np.random.default_rng(0)
    out, gen = tmp_path / "ds", tmp_path / "gen"
    (out / "images").mkdir(parents=True)
    (out / "masks").mkdir()
    gen.mkdir()
    records = []
    for i in range(3):
        export_slice(SliceImage(rng.random((24, 24), dtype=np.float32)), out / f"images/p{i}_pre.png")
        export_slice(SliceImage(rng.random((24, 24), dtype=np.float32)), out / f"images/p{i}_post.png")
        export_slice(SliceImage(np.ones((24, 24), dtype=np.float32)), out / f"masks/p{i}.png")
        export_slice(SliceImage(rng.random((24, 24), dtype=np.float32)), gen / f"p{i}_post.png")
        records.append(
            ManifestRecord(
                relative_path_pre=f"images/p{i}_pre.png",
                relative_path_post=f"images/p{i}_post.png",
                relative_path_mask=f"masks/p{i}.png",
                patient_id=f"p{i}",
                slice_index=0,
                tumor_label=True,
                laterality="bilateral",
                split="test",
            )
        )
    DatasetManifest(records=records).save(out)
    report = evaluate_run(out, gen, modes=("full_image", "roi"), roi_margin=0)
    full = report.row("model", "full_image").metrics
    roi = report.row("model", "roi").metrics
    for name in ("mae", "ssim", "psnr", "lpips"):
        for a, b in zip(full.per_image[name], roi.per_image[name]):
            assert a == pytest.approx(b, abs=1e-6)


def _dir_digest(root: Path) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_preprocess_determinism(tmp_path):
    """Byte-identical manifests and PNGs across runs; selection rule matches
    hand-enumerated cases."""
    cases = [generate_case(PhantomParams(seed=s)) for s in range(2)]
    split = {c.patient_id: "train" for c in cases}
    build_dataset(cases, SlicePolicy(), split, tmp_path / "a")
    build_dataset(cases, SlicePolicy(), split, tmp_path / "b")
    assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")

    vol = np.zeros((32, 16, 16), dtype=np.uint8)
    vol[10:20, 8, 8] = 1
    assert select_slices(vol, SlicePolicy()) == [9] + list(range(10, 20)) + [20]
    single = np.zeros((3, 16, 16), dtype=np.uint8)
    single[0, 8, 8] = 1
    assert select_slices(single, SlicePolicy()) == [0]
    assert select_slices(np.zeros((4, 16, 16), dtype=np.uint8), SlicePolicy()) == []


def test_variant_registry_completeness():
    """All Table-style variant names construct valid configs; mask-conditioned
    variants reject maskless batches."""
    full = {"PC(Vanilla)", "PC(Vanilla100)", "PC-ROI(M)", "PC-ROI(M100)",
            "PC-ROI(L)", "SUB(Vanilla)", "SUB-ROI(L)"}
    single = {"PC(Vanilla)", "PC-ROI(L)", "SUB(Vanilla)", "SUB-ROI(L)"}
    assert set(FULL_BREAST_VARIANTS) == full
    assert set(SINGLE_BREAST_VARIANTS) == single
    sched = make_cosine_schedule(50, 0.008)
    for name in full:
        spec = get_variant(name)
        trainer = Trainer(
            spec,
            model_config=ModelConfig(in_channels=spec.in_channels, base_width=8, depth=1, time_embed_dim=16),
            schedule=sched,
        )
        assert trainer.model_config.in_channels == spec.in_channels

    maskless = [
        SlicePair(
            pre=SliceImage(np.random.default_rng(i).random((16, 16), dtype=np.float32)),
            post=SliceImage(np.random.default_rng(i + 9).random((16, 16), dtype=np.float32)),
            mask=None,
            patient_id=f"p{i}",
            slice_index=0,
            tumor_label=False,
        )
        for i in range(2)
    ]
    spec = get_variant("PC-ROI(M)")
    trainer = Trainer(
        spec,
        model_config=ModelConfig(in_channels=3, base_width=8, depth=1, time_embed_dim=16),
        schedule=sched,
    )
    with pytest.raises(ValueError, match="mask"):
        trainer.train_step(maskless)


def test_reader_backend_conformance(tmp_path):
    """Task 1: exactly 15 items (10 synthetic / 5 real); no ground truth in
    payloads; export accuracy matches hand counts; CSV round-trip lossless."""
    import json as _json

    from cesynth.preprocess import export_slice
    from cesynth.reader_study import ImagePool, SessionStore, parse_export_csv

    rng = np.random.default_rng(0)
    for group in ("pre", "real", "synthetic"):
        (tmp_path / group).mkdir()
        for i in range(12):
            export_slice(
                SliceImage(rng.random((16, 16), dtype=np.float32)),
                tmp_path / group / f"case{i:02d}.png",
            )
    store = SessionStore(ImagePool.scan(tmp_path))
    session = store.create_session("reader1", "discrimination", seed=1)
    kinds = [i.truth["kind"] for i in session.items]
    assert len(session.items) == 15
    assert kinds.count("synthetic") == 10 and kinds.count("real") == 5

    payload = store.next_item(session.session_id)
    text = _json.dumps(payload).lower()
    for token in ("truth", "ground", "kind", "stem"):
        assert token not in text

    # scripted responses: answer "real" everywhere -> 5/15 correct
    for item in session.items:
        store.submit_response(session.session_id, {"item_id": item.item_id, "answer": "real"})
    csv_text = store.export_csv(session.session_id)
    rows = parse_export_csv(csv_text)
    assert sum(1 for r in rows if r["correct"] == "true") == 5
    assert any("5/15" in line for line in csv_text.splitlines())

    parsed = {(r["item_id"], r["answer"]) for r in rows}
    original = {(r.item_id, r.answer) for r in store.sessions[session.session_id].responses.values()}
    assert parsed == original


@pytest.mark.slow
def test_desk_scale_trend(tmp_path_factory):
    """SUB(Vanilla) beats PC(Vanilla) on full-image MAE and PSNR; SUB-ROI(L)
    beats SUB(Vanilla) on ROI-mode MAE. Direction only."""
    tmp = tmp_path_factory.mktemp("trend")
    make_corpus(tmp / "corpus", n_cases=32, seed=0)
    cases, split = load_case_dir(tmp / "corpus")
    build_dataset(cases, SlicePolicy(), split, tmp / "ds")

    from cesynth.pipeline import sample_split, train_from_config

    def run(variant):
        cfg = ExperimentConfig.from_dict(
            {
                "variant": variant,
                "output_dir": str(tmp / variant),
                "seed": 0,
                "data": {"manifest": str(tmp / "ds")},
                "diffusion": {"T": 1000},
                "sampling": {"steps": 50, "seed": 0},
                "model": {"base_width": 32, "depth": 3},
                "training": {"steps": 2000, "batch_size": 4},
            }
        )
        ckpt = train_from_config(cfg, tmp / variant / "ckpt")
        gen = sample_split(ckpt, tmp / "ds", tmp / variant / "gen", steps=50, seed=0)
        report = evaluate_run(
            tmp / "ds", gen, model_row_name=variant,
            variant_target="SUB" if variant.startswith("SUB") else "PC",
        )
        full = report.row(variant, "full_image").metrics.aggregates()
        roi = report.row(variant, "roi").metrics.aggregates()
        print(f"\n{variant}: full MAE {full['mae']['mean']:.4f} "
              f"PSNR {full['psnr']['mean']:.2f} | ROI MAE {roi['mae']['mean']:.4f}")
        return full, roi

    pc_full, _ = run("PC(Vanilla)")
    sub_full, sub_roi = run("SUB(Vanilla)")
    _, subroi_roi = run("SUB-ROI(L)")

    assert sub_full["mae"]["mean"] < pc_full["mae"]["mean"]
    assert sub_full["psnr"]["mean"] > pc_full["psnr"]["mean"]
    assert subroi_roi["mae"]["mean"] < sub_roi["mae"]["mean"]
