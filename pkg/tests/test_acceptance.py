"""Acceptance suite: one test per criterion, each printing a verdict line.

Run ``pytest tests/test_acceptance.py -v``; the verdicts are repeated in the
terminal summary under "acceptance criteria".
"""

import dataclasses
import math
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
import torch

import conftest
from conftest import TOY_SIZE, tiny_encoder, tiny_uflt, write_corpus
from gifl import training
from gifl.cli import param_count_table
from gifl.core_types import load_image, load_mask
from gifl.dataset import (
    DatasetConfig,
    DegradationSpec,
    blend_masking,
    build_dataset,
    degrade,
    make_toy_sources,
    mask_stats,
    motion_kernel,
    read_manifest,
)
from gifl.metrics import authenticity_metrics, evaluate, item_metrics
from gifl.model import Decoder, EncoderConfig, FrozenEncoder, GIFLModel, build_target_features, encode, predict, total_loss
from gifl.spectral import SpectralScope, patch_fft, patch_ifft, trace_calls
from gifl.training import TrainSpec, ablation_config, load_checkpoint, train_loop
from gifl.uflt import UFLT, UFLTConfig
from oracles import brute_auc, brute_localization, random_metric_case, rel_err


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


GRID_SCOPES = [SpectralScope("per_token"), SpectralScope("token_windows", 2), SpectralScope("full_grid")]


# 1 ------------------------------------------------------------------------------------


def test_c01_spectral_identities():
    t0 = time.perf_counter()
    worst_rt = worst_pv = 0.0
    for scope in GRID_SCOPES:
        for seed in range(100):
            x = torch.from_numpy(np.random.default_rng(seed).standard_normal((2, 16, 16)))
            xf = patch_fft(x, scope)
            worst_rt = max(worst_rt, float(torch.max(torch.abs(patch_ifft(xf, scope, 16) - x))))
            worst_pv = max(worst_pv, abs(float((x**2).sum() - (xf**2).sum())))
    dt = time.perf_counter() - t0
    ok = worst_rt < 1e-9 and worst_pv < 1e-9 and dt < 10
    report(1, ok, f"round-trip max err {worst_rt:.2e}, Parseval max err {worst_pv:.2e} (< 1e-9), {dt:.2f} s (< 10 s)")


# 2 ------------------------------------------------------------------------------------


def _gradcheck(variant: str, n_coords: int = 12, h: float = 1e-5):
    torch.manual_seed(0)
    enc = FrozenEncoder.from_config(EncoderConfig(layers=1, dim=16, heads=2, patch=4, pos_grid=4), torch.float64)
    cfg = UFLTConfig(layers=2, dim=16, heads=2, patch=4, variant=variant, seed=1)
    model = GIFLModel(UFLT(cfg), Decoder(16, 4, seed=2)).double()
    gen = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    rng = np.random.default_rng(4)
    img = rng.random((1, 16, 16, 3))
    mask = (rng.random((1, 16, 16)) < 0.3).astype(np.float64)
    f_in = encode(img, enc)
    f_t = build_target_features(img, mask, enc, "authentic")
    assert f_in.shape == (1, 16, 16)

    def loss():
        f_r, logits, _ = model(f_in)
        return total_loss(f_r, f_t, logits, mask)["total"]

    model.zero_grad()
    loss().backward()
    worst, zeros = {}, []
    for name, p in model.named_parameters():
        flat, grad = p.data.view(-1), p.grad.view(-1)
        idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                fp = loss().item()
                flat[i] = orig - h
                fm = loss().item()
                flat[i] = orig
            a, n = grad[i].item(), (fp - fm) / (2 * h)
            # below this the difference quotient only sees rounding of the loss
            resolution = 64 * np.finfo(np.float64).eps * max(abs(fp), abs(fm)) / (2 * h)
            if max(abs(a), abs(n)) < resolution:
                zeros.append(abs(a - n) <= resolution)
                continue
            group = "spectral maps" if ".cross." in name or name.startswith("uflt.io") else name.split(".")[0]
            worst[group] = max(worst.get(group, 0.0), rel_err(a, n))
    # one directional derivative along a random direction over every parameter
    dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in model.parameters()]
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(model.parameters(), dirs))
    with torch.no_grad():
        for p, d in zip(model.parameters(), dirs):
            p.add_(h * d)
        fp = loss().item()
        for p, d in zip(model.parameters(), dirs):
            p.sub_(2 * h * d)
        fm = loss().item()
        for p, d in zip(model.parameters(), dirs):
            p.add_(h * d)
    worst["direction"] = rel_err(analytic, (fp - fm) / (2 * h))
    return worst, zeros


def test_c02_gradients_match_finite_differences():
    t0 = time.perf_counter()
    results, zeros = {}, []
    for v in ("dual", "spatial_only", "spectral_only"):
        results[v], z = _gradcheck(v)
        zeros += z
    dt = time.perf_counter() - t0
    worst = max(e for r in results.values() for e in r.values())
    groups = sorted({g for r in results.values() for g in r})
    has_spectral = "spectral maps" in results["dual"] and "spectral maps" in results["spectral_only"]
    ok = worst < 1e-4 and dt < 120 and has_spectral and "decoder" in results["dual"] and all(zeros)
    report(
        2,
        ok,
        f"max rel err {worst:.2e} (< 1e-4) over {groups} for 3 variants; "
        f"{len(zeros)} structurally-zero coordinates agree within FD resolution; {dt:.1f} s (< 120 s)",
    )


# 3 ------------------------------------------------------------------------------------


def test_c03_metric_oracles():
    t0 = time.perf_counter()
    mismatches = 0
    kinds = Counter()
    for k in range(200):
        prob, gt = random_metric_case(np.random.default_rng(1000 + k), k)
        got = item_metrics(prob, gt)
        want = brute_localization(prob >= 0.5, gt)
        want["auc"] = brute_auc(prob, gt)
        kinds["ties" if len(np.unique(prob)) < prob.size else "distinct"] += 1
        kinds["degenerate" if gt.all() or not gt.any() else "mixed"] += 1
        for key in ("f1", "iou", "acc", "auc"):
            a, b = got[key], want[key]
            if not ((math.isnan(a) and math.isnan(b)) or a == b):
                mismatches += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 30 and kinds["ties"] and kinds["degenerate"]
    report(3, ok, f"{mismatches} mismatches over 200 instances ({dict(kinds)}), exact equality, {dt:.1f} s (< 30 s)")


# 4 ------------------------------------------------------------------------------------


def test_c04_structural_counts():
    enc = param_count_table("vit-l-encoder")
    uflt = param_count_table("uflt-l")
    ok = abs(enc["params_delta"]) <= 0.02 and abs(uflt["params_delta"]) <= 0.05
    itemized = sum(enc["breakdown"].values()) == enc["params"] and sum(uflt["breakdown"].values()) == uflt["params"]
    report(
        4,
        ok and itemized,
        f"ViT-L encoder {enc['params'] / 1e6:.1f} M vs 304.4 ({enc['params_delta'] * 100:+.2f}%, limit 2%); "
        f"UFLT-L + decoder {uflt['params'] / 1e6:.1f} M vs 718.0 ({uflt['params_delta'] * 100:+.2f}%, limit 5%); breakdowns sum exactly",
    )


# 5 ------------------------------------------------------------------------------------


@pytest.mark.slow
def test_c05_overfit(tmp_path):
    t0 = time.perf_counter()
    corpus = write_corpus(tmp_path / "corpus", n_sources=8, n_masks=16, seed=11)
    cfg = DatasetConfig(
        str(corpus / "src"), str(corpus / "masks"), str(tmp_path / "ds"), methods=["noise_fill"], neg_ratio="1:1", image_size=TOY_SIZE
    )
    recs = build_dataset(cfg)
    counts = Counter(r.label for r in recs)
    assert counts == {"forged": 8, "authentic": 8}
    spec = TrainSpec(lr=3e-3, batch=8, steps=500, image_size=TOY_SIZE, checkpoint_every=0, seed=0)
    final = train_loop(spec, tiny_uflt(), tiny_encoder(), tmp_path / "ds/manifest.tsv", tmp_path / "run")
    enc, model, _ = load_checkpoint(final)
    f1s, verdicts = [], []
    for r in recs:
        out = predict(load_image(r.image_path, TOY_SIZE), enc, model)
        if r.label == "forged":
            f1s.append(item_metrics(out["prob"], load_mask(r.mask_path, TOY_SIZE))["f1"])
        else:
            verdicts.append(authenticity_metrics(out["prob"], out["image_score"])["i_pred"] == "authentic")
    dt = time.perf_counter() - t0
    mean_f1, i_acc = float(np.mean(f1s)), sum(verdicts) / len(verdicts)
    ok = mean_f1 >= 0.95 and i_acc == 1.0 and dt < 300
    report(5, ok, f"train mean F1 {mean_f1:.4f} (>= 0.95), i-ACC {i_acc:.4f} (= 1), 500 steps in {dt:.1f} s (< 300 s)")


# 6 ------------------------------------------------------------------------------------

C6_SEEDS = (0, 1, 2)
C6_SEEN = ["noise_fill", "smooth_fill"]
C6_UNSEEN = "splice"


@pytest.mark.slow
def test_c06_forged_target_underperforms_on_unseen(tmp_path):
    corpus = write_corpus(tmp_path / "corpus", n_sources=24, n_masks=32, seed=7)
    cfg = DatasetConfig(
        str(corpus / "src"),
        str(corpus / "masks"),
        str(tmp_path / "ds"),
        methods=C6_SEEN + [C6_UNSEEN],
        image_size=TOY_SIZE,
        test_fraction=1 / 3,
        seed=0,
    )
    recs = build_dataset(cfg)
    held_out = [r for r in recs if r.split == "test" and r.method_tag == C6_UNSEEN]
    scores = {"baseline": [], "IV": []}
    for seed in C6_SEEDS:
        for option in scores:
            base = TrainSpec(lr=2e-3, batch=8, steps=300, image_size=TOY_SIZE, checkpoint_every=0, seed=seed, train_methods=C6_SEEN)
            spec, ucfg = ablation_config(option, base, tiny_uflt(seed=seed))
            final = train_loop(spec, ucfg, tiny_encoder(), tmp_path / "ds/manifest.tsv", tmp_path / f"{option}_{seed}")
            enc, model, _ = load_checkpoint(final)
            rep = evaluate(held_out, lambda img: predict(img, enc, model), image_size=TOY_SIZE)
            scores[option].append(rep.aggregates()["overall"]["f1"])
    base_f1, iv_f1 = float(np.mean(scores["baseline"])), float(np.mean(scores["IV"]))
    per_seed = ", ".join(f"s{s}: {b:.3f}/{v:.3f}" for s, b, v in zip(C6_SEEDS, scores["baseline"], scores["IV"]))
    report(
        6,
        iv_f1 < base_f1,
        f"held-out {C6_UNSEEN} F1 baseline {base_f1:.4f} vs option IV {iv_f1:.4f} (need IV < baseline; per seed baseline/IV {per_seed})",
    )


# 7 ------------------------------------------------------------------------------------


def test_c07_authentic_target_identity(toy_manifest):
    recs = [r for r in read_manifest(toy_manifest) if r.label == "authentic"]
    identical = 0
    for dtype in (torch.float32, torch.float64):
        enc = FrozenEncoder.from_config(tiny_encoder(), dtype)
        for r in recs:
            img = load_image(r.image_path, TOY_SIZE)
            gt = load_mask(r.mask_path, TOY_SIZE)
            identical += int(torch.equal(build_target_features(img, gt, enc, "authentic"), encode(img, enc)))
    total = 2 * len(recs)
    report(7, identical == total and total > 0, f"{identical}/{total} authentic samples bit-identical (float32 and float64)")


# 8 ------------------------------------------------------------------------------------


def _bilinear_up2(x):
    # half-pixel-centred bilinear x2, edge-clamped, evaluated pixel by pixel
    n = x.shape[0]
    out = np.zeros((2 * n, 2 * n, x.shape[2]))
    for i in range(2 * n):
        u = min(max((i + 0.5) / 2 - 0.5, 0), n - 1)
        i0, fu = int(np.floor(u)), u - np.floor(u)
        i1 = min(i0 + 1, n - 1)
        for j in range(2 * n):
            v = min(max((j + 0.5) / 2 - 0.5, 0), n - 1)
            j0, fv = int(np.floor(v)), v - np.floor(v)
            j1 = min(j0 + 1, n - 1)
            out[i, j] = (1 - fu) * ((1 - fv) * x[i0, j0] + fv * x[i0, j1]) + fu * ((1 - fv) * x[i1, j0] + fv * x[i1, j1])
    return out


def _degradation_checks():
    img = make_toy_sources(1, TOY_SIZE, seed=5)[0]
    checks = {}
    from PIL import Image
    import io

    buf = io.BytesIO()
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(buf, format="JPEG", quality=25)
    ref = np.asarray(Image.open(io.BytesIO(buf.getvalue())).convert("RGB")) / 255.0
    checks["jpeg q25"] = np.abs(degrade(img, DegradationSpec("jpeg")) - ref).max() <= 2 / 255
    halved = img.reshape(TOY_SIZE // 2, 2, TOY_SIZE // 2, 2, 3).mean(axis=(1, 3))
    checks["resize x2"] = np.allclose(degrade(img, DegradationSpec("resize_cycle")), _bilinear_up2(halved), atol=1e-12)
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    sharp = 5 * p[1:-1, 1:-1] - p[:-2, 1:-1] - p[2:, 1:-1] - p[1:-1, :-2] - p[1:-1, 2:]
    checks["sharpen"] = np.allclose(degrade(img, DegradationSpec("sharpen")), np.clip(sharp, 0, 1), atol=1e-12)
    box = degrade(img, DegradationSpec("mean_blur"))
    checks["mean blur k7"] = np.allclose(box[10:20, 10:20], [[img[i - 3 : i + 4, j - 3 : j + 4].mean((0, 1)) for j in range(10, 20)] for i in range(10, 20)], atol=1e-12)
    mb = degrade(img, DegradationSpec("motion_blur", seed=3))
    angle = np.random.default_rng(3).uniform(0, np.pi)
    from scipy import ndimage

    ref = np.stack([ndimage.convolve(img[..., c], motion_kernel(7, angle), mode="reflect") for c in range(3)], -1)
    checks["motion blur k7"] = np.allclose(mb, np.clip(ref, 0, 1), atol=1e-12) and np.array_equal(mb, degrade(img, DegradationSpec("motion_blur", seed=3)))
    checks["gamma 0.25->0.125"] = bool(np.all(degrade(np.full((4, 4, 3), 0.25), DegradationSpec("gamma")) == 0.125))
    from matplotlib.colors import rgb_to_hsv

    flat = np.tile([0.6, 0.3, 0.2], (64, 64, 1))
    iso = degrade(flat, DegradationSpec("iso_noise", seed=1))
    dh = rgb_to_hsv(iso)[..., 0] - rgb_to_hsv(flat)[..., 0]
    dh = (dh + 0.5) % 1.0 - 0.5
    checks["iso noise shift 0.05"] = abs(dh.std() - 0.05) < 0.005 and np.array_equal(iso, degrade(flat, DegradationSpec("iso_noise", seed=1)))
    return checks


def test_c08_dataset_machinery(tmp_path):
    corpus = write_corpus(tmp_path / "corpus", n_sources=6, n_masks=8, seed=3)
    failures = []

    def build(out, **kw):
        base = dict(sources=str(corpus / "src"), masks=str(corpus / "masks"), out=str(tmp_path / out), image_size=TOY_SIZE)
        base.update(kw)
        return build_dataset(DatasetConfig(**base))

    for ratio, n_auth in (("0", 0), ("1:2", 9), ("1:1", 18), ("2:1", 36)):
        recs = build(f"r{n_auth}", methods=["noise_fill", "smooth_fill", "copy_move"], neg_ratio=ratio)
        labels = Counter(r.label for r in recs)
        if labels["forged"] != 18 or labels["authentic"] != n_auth:
            failures.append(f"counts {ratio}: {dict(labels)}")

    rng = np.random.default_rng(0)
    f, o = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    m = (rng.random((16, 16)) < 0.3).astype(np.uint8)
    b = blend_masking(f, o, m)
    mb = m.astype(bool)
    algebra = np.array_equal(b[mb], f[mb]) and np.array_equal(b[~mb], o[~mb]) and np.array_equal(blend_masking(b, o, m), b)
    masked = build("masked", masking=True, full_generation=True)
    for r in masked:
        if r.label == "forged":
            src = load_image(corpus / "src" / f"{r.item_id.split('_')[0]}.png", TOY_SIZE)
            keep = load_mask(r.mask_path, TOY_SIZE) == 0
            algebra &= np.array_equal(load_image(r.image_path, TOY_SIZE)[keep], src[keep])
    if not algebra:
        failures.append("blend algebra")

    masks = [load_mask(p, TOY_SIZE) for p in sorted((corpus / "masks").iterdir())]
    ratios = [Fraction(int(sum(int(v) for v in mm.ravel())), mm.size) for mm in masks]
    mean = sum(ratios) / len(ratios)
    brute = {
        "Mean": float(mean),
        "Variance": float(sum((r - mean) ** 2 for r in ratios) / len(ratios)),
        "Max": float(max(ratios)),
        "Min": float(min(ratios)),
    }
    if mask_stats(masks) != brute:
        failures.append("mask_stats")

    a = build("det_a", seed=9, methods=["noise_fill", "splice"])
    bb = build("det_b", seed=9, methods=["noise_fill", "splice"])
    same = (tmp_path / "det_a/manifest.tsv").read_bytes() == (tmp_path / "det_b/manifest.tsv").read_bytes()
    same &= all(open(x.image_path, "rb").read() == open(y.image_path, "rb").read() for x, y in zip(a, bb))
    if not same:
        failures.append("seed determinism")

    deg = _degradation_checks()
    failures += [k for k, v in deg.items() if not v]
    report(8, not failures, f"counts x4 ratios, blend algebra, mask_stats exact, byte-determinism, degradations {sorted(deg)}; failures: {failures or 'none'}")


# 9 ------------------------------------------------------------------------------------

COMPONENT_OPTIONS = ("baseline", "I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX")


@pytest.mark.slow
def test_c09_ablation_matrix(toy_manifest, tmp_path, monkeypatch):
    problems = []
    expected_scope = {"VII": SpectralScope("full_grid"), "VIII": SpectralScope("token_windows", 2), "IX": SpectralScope("token_windows", 8)}
    real_targets = training.build_target_features
    for option in COMPONENT_OPTIONS:
        base = TrainSpec(lr=1e-3, batch=4, steps=10, image_size=TOY_SIZE, checkpoint_every=0)
        spec, cfg = ablation_config(option, base, tiny_uflt())
        calls = {"targets": 0}

        def counting(*a, **k):
            calls["targets"] += 1
            return real_targets(*a, **k)

        monkeypatch.setattr(training, "build_target_features", counting)
        try:
            with trace_calls() as rec:
                train_loop(spec, cfg, tiny_encoder(), toy_manifest, tmp_path / option)
        except Exception as exc:  # noqa: BLE001
            problems.append(f"{option}: {type(exc).__name__}: {exc}")
            continue
        if len((tmp_path / option / "loss.csv").read_text().splitlines()) != 11:
            problems.append(f"{option}: wrong step count")
        scopes = {s for _, s in rec}
        if option == "I":
            f = torch.randn(1, 4, 8)
            z, g = torch.randn(1, 8, 8), np.zeros((1, 8, 8))
            same = torch.equal(total_loss(f, None, z, g, spec.loss_weights)["total"], total_loss(f, torch.randn(1, 4, 8), z, g, spec.loss_weights)["total"])
            if calls["targets"] or not same:
                problems.append("I depends on F_t")
        elif calls["targets"] != 10:
            problems.append(f"{option}: {calls['targets']} target builds")
        if option == "V" and rec:
            problems.append(f"V made {len(rec)} spectral calls")
        if option in expected_scope and scopes != {expected_scope[option]}:
            problems.append(f"{option}: traced {scopes}")
        if option not in expected_scope and option != "V" and scopes != {SpectralScope("per_token")}:
            problems.append(f"{option}: traced {scopes}")
    report(9, not problems, f"{len(COMPONENT_OPTIONS)} options x 10 steps; problems: {problems or 'none'}")


# 10 -----------------------------------------------------------------------------------


@pytest.mark.slow
def test_c10_determinism(toy_manifest, tmp_path):
    spec = TrainSpec(lr=1e-3, batch=4, steps=20, image_size=TOY_SIZE, checkpoint_every=10, seed=3, deterministic=True)
    finals = [train_loop(spec, tiny_uflt(), tiny_encoder(), toy_manifest, tmp_path / f"run{k}") for k in range(2)]
    ckpts_same = all(
        (tmp_path / "run0" / n).read_bytes() == (tmp_path / "run1" / n).read_bytes()
        for n in ("ckpt_000010.npz", "ckpt_000020.npz", "final.npz", "loss.csv")
    )
    reports = []
    for k in range(2):
        enc, model, _ = load_checkpoint(finals[0])
        evaluate(read_manifest(toy_manifest), lambda img: predict(img, enc, model), tmp_path / f"report{k}.csv", TOY_SIZE)
        reports.append((tmp_path / f"report{k}.csv").read_bytes())
    ok = ckpts_same and reports[0] == reports[1]
    report(10, ok, f"checkpoints byte-identical: {ckpts_same}; eval reports byte-identical: {reports[0] == reports[1]}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
