"""Acceptance criteria 1-10, each at its stated tolerance.

The trained artifacts (toy backbone, both edge predictors, the held-out
sampling runs) are built once per module. A one-line verdict per criterion
is printed in the terminal summary.
"""
import filecmp
import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from sketchguide.backbone import BackboneConfig, IdentityCodec, ToyDenoiser, train_toy_backbone
from sketchguide.cli import main
from sketchguide.data import ShapeSpec, generate_triplets, random_shape_spec, render_sketch, save_binary
from sketchguide.evaluation import contour_bbox, erode, recall, recall_from_masks
from sketchguide.lep import build_lep, UNetLEP
from sketchguide.sampler import (GuidanceConfig, guidance_strength, guided_sample, sample_batch,
                                 similarity_gradient, sketch_similarity, unguided_sample)
from sketchguide.schedule import make_schedule
from sketchguide.seeding import numpy_rng
from sketchguide.training import TrainConfig, edge_loss, feature_layout_for, train_lep

VERDICTS = {}

T, S, BETA, CFG_W = 50, 25, 1.6, 8.0
CLIP = (0.0, 1.0)
N_HELDOUT, SEEDS = 20, (0, 1, 2)


def verdict(cid, passed, detail):
    VERDICTS[cid] = (bool(passed), detail)
    return passed


# oracles ------------------------------------------------------------------

def double_loop_sq(a, b):
    total = 0.0
    for idx in np.ndindex(*a.shape):
        d = float(a[idx]) - float(b[idx])
        total += d * d
    return total


def erode_oracle(m):
    H, W = m.shape
    out = np.zeros((H, W), dtype=np.uint8)
    for i in range(H):
        for j in range(W):
            out[i, j] = all(0 <= i + a < H and 0 <= j + b < W and m[i + a, j + b]
                            for a in (-1, 0, 1) for b in (-1, 0, 1))
    return out


def bbox_oracle(m):
    pts = [(i, j) for i in range(m.shape[0]) for j in range(m.shape[1]) if m[i, j]]
    return (min(p[0] for p in pts), min(p[1] for p in pts), max(p[0] for p in pts), max(p[1] for p in pts))


def recall_oracle(pred, sketch):
    r0, c0, r1, c1 = bbox_oracle(sketch)
    ref = erode_oracle(sketch)
    tp = fn = 0
    for i in range(r0, r1 + 1):
        for j in range(c0, c1 + 1):
            if ref[i, j]:
                tp += bool(pred[i, j])
                fn += not pred[i, j]
    return None if tp + fn == 0 else tp / (tp + fn)


# shared artifacts ---------------------------------------------------------

@pytest.fixture(scope="module")
def sched():
    return make_schedule(T)


@pytest.fixture(scope="module")
def backbone(sched):
    trip = generate_triplets(3000, (32, 32), seed=1)
    x = torch.from_numpy(np.stack([t.x for t in trip])).float()[:, None]
    model, info = train_toy_backbone(x, [t.y for t in trip], sched, 50, 0.1, lr=2e-3, batch_size=32, seed=0)
    assert info["heldout_final"] < info["heldout_initial"]
    return model


@pytest.fixture(scope="module")
def trained_leps(backbone, sched):
    """Both predictors trained on the same 300 triplets with default settings."""
    data = generate_triplets(300, (32, 32), seed=2)
    layout = feature_layout_for(backbone, backbone.default_taps(), 9)
    out = {}
    for arch in ("unet", "mlp"):
        torch.manual_seed(0)
        model = build_lep(arch, layout.channels, 1)
        t0 = time.perf_counter()
        model, hist = train_lep(model, backbone, IdentityCodec(1), data, sched, TrainConfig(epochs=10, seed=0))
        out[arch] = (model, hist, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def heldout_runs(backbone, trained_leps, sched):
    specs = [random_shape_spec(numpy_rng(i, "acceptance/heldout"), (32, 32)) for i in range(N_HELDOUT)]
    sketches = [render_sketch(s, (32, 32), stroke=3) for s in specs]
    targets = torch.stack([torch.from_numpy(sk.data).float()[None] for sk in sketches for _ in SEEDS])
    labels = [s.kind for s in specs for _ in SEEDS]
    seeds = [1000 * i + j for i in range(N_HELDOUT) for j in SEEDS]
    cfg = GuidanceConfig(T=T, S=S, beta_strength=BETA, cfg_scale=CFG_W, clip_denoised=CLIP)
    t0 = time.perf_counter()
    runs = {"unguided": sample_batch(backbone, IdentityCodec(1), None, None, labels, seeds, cfg, sched,
                                     guided=False)}
    for arch, (model, _, _) in trained_leps.items():
        runs[arch] = sample_batch(backbone, IdentityCodec(1), model, targets, labels, seeds, cfg, sched)
    elapsed = time.perf_counter() - t0
    recalls = {}
    for name, results in runs.items():
        vals = [recall(r.image.numpy()[0].clip(0, 1), sketches[k // len(SEEDS)]).recall
                for k, r in enumerate(results)]
        recalls[name] = [v for v in vals if v is not None]
    return {"runs": runs, "recalls": recalls, "elapsed": elapsed}


# criteria -----------------------------------------------------------------

def test_c01_zero_strength_matches_unguided(backbone, trained_leps, sched):
    model = trained_leps["unet"][0]
    sketch = torch.from_numpy(render_sketch(ShapeSpec("circle", (15.5, 15.5), 9.0)).data).float()[None]
    t0 = time.perf_counter()
    same = []
    for seed in range(10):
        cfg = GuidanceConfig(T=T, S=S, beta_strength=0.0, cfg_scale=CFG_W, seed=seed, clip_denoised=CLIP)
        with pytest.warns(UserWarning):
            g = guided_sample(backbone, IdentityCodec(1), model, sketch, "circle", cfg, sched)
        u = unguided_sample(backbone, IdentityCodec(1), "circle", cfg, sched)
        same.append(g.image.numpy().tobytes() == u.image.numpy().tobytes())
    elapsed = time.perf_counter() - t0
    ok = all(same) and elapsed < 120
    verdict(1, ok, f"{sum(same)}/10 seeds bit-identical, {elapsed:.0f}s (< 120s)")
    assert ok


def test_c02_strength_normalization():
    g = torch.Generator().manual_seed(2)
    worst = 0.0
    for beta in (0.0, 0.5, 1.6):
        for _ in range(1000):
            shape = (int(torch.randint(1, 5, (1,), generator=g)), 8, 8)
            z_t, z_prev, grad = (torch.randn(shape, generator=g, dtype=torch.float64) * 10 ** float(
                torch.empty(1).uniform_(-3, 3, generator=g)) for _ in range(3))
            alpha = guidance_strength(z_t, z_prev, grad, beta)
            lhs = np.linalg.norm(float(alpha) * grad.numpy().ravel())
            rhs = beta * np.linalg.norm((z_t - z_prev).numpy().ravel())
            rel = abs(lhs - rhs) / rhs if rhs > 0 else abs(lhs)
            worst = max(worst, rel)
    ok = worst <= 1e-6
    verdict(2, ok, f"worst relative deviation {worst:.2e} over 3000 draws (<= 1e-6)")
    assert ok


def test_c03_guidance_gradient_finite_differences():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    bb = ToyDenoiser(BackboneConfig(image_size=8, channels=4, widths=(4, 8), mid_blocks=1, emb_dim=16, groups=2))
    bb = bb.double().eval()
    for p in bb.parameters():
        p.requires_grad_(False)
    layout = feature_layout_for(bb, bb.default_taps(), 3)
    lep = UNetLEP(layout.channels, 4, widths=(8, 16), bottleneck=16).double().eval()
    lep.layout = layout
    cfg = GuidanceConfig(T=10, S=5, p_max=3)
    g = torch.Generator().manual_seed(3)
    z = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
    target = (torch.rand(1, 4, 8, 8, generator=g) < 0.3).double()
    taps = bb.default_taps()
    _, _, grad = similarity_gradient(bb, lep, z, 6, ["triangle"], target, taps, cfg, 10)

    def loss_at(zz):
        with torch.no_grad():
            return similarity_gradient(bb, lep, zz, 6, ["triangle"], target, taps, cfg, 10)[1].item()

    coords = set()
    while len(coords) < 120:
        coords.add(tuple(int(torch.randint(0, n, (1,), generator=g)) for n in (4, 8, 8)))
    h, worst = 1e-6, 0.0
    for c in sorted(coords):
        zp, zm = z.clone(), z.clone()
        zp[(0, *c)] += h
        zm[(0, *c)] -= h
        fd = (loss_at(zp) - loss_at(zm)) / (2 * h)
        an = grad[(0, *c)].item()
        worst = max(worst, abs(fd - an) / max(abs(an), abs(fd), 1e-12))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and elapsed < 300
    verdict(3, ok, f"worst relative error {worst:.2e} on {len(coords)} coordinates, {elapsed:.0f}s")
    assert ok


def test_c04_similarity_matches_brute_force():
    g = torch.Generator().manual_seed(4)
    worst = 0.0
    for _ in range(100):
        shape = tuple(int(v) for v in torch.randint(1, 6, (3,), generator=g))
        a = torch.randn(shape, generator=g, dtype=torch.float64)
        b = torch.randn(shape, generator=g, dtype=torch.float64)
        oracle = double_loop_sq(a.numpy(), b.numpy())
        worst = max(worst, abs(edge_loss(a, b).item() - oracle), abs(sketch_similarity(a, b).item() - oracle))
    ok = worst <= 1e-6
    verdict(4, ok, f"worst absolute deviation {worst:.2e} over 100 pairs (<= 1e-6)")
    assert ok


def test_c05_recall_protocol_oracles():
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(100):
        m = (rng.random((16, 16)) < rng.uniform(0.2, 0.9)).astype(np.uint8)
        m[rng.integers(16), rng.integers(16)] = 1
        pred = (rng.random((16, 16)) < 0.5).astype(np.uint8)
        mismatches += not np.array_equal(erode(m), erode_oracle(m))
        mismatches += contour_bbox(m) != bbox_oracle(m)
        rec = recall_from_masks(pred, m).recall
        mismatches += rec != recall_oracle(pred, m)
    fixture = erode(np.ones((5, 5), dtype=np.uint8))
    expect = np.zeros((5, 5), dtype=np.uint8)
    expect[1:4, 1:4] = 1
    ok = mismatches == 0 and np.array_equal(fixture, expect)
    verdict(5, ok, f"{mismatches} oracle mismatches over 300 checks; 5x5 fixture "
                   f"{'ok' if np.array_equal(fixture, expect) else 'wrong'}")
    assert ok


@pytest.mark.parametrize("arch", ["unet", "mlp"])
def test_c06_lep_training_convergence(trained_leps, arch):
    _, hist, elapsed = trained_leps[arch]
    first, last = hist["loss"][0], hist["loss"][-1]
    total = sum(v[2] for v in trained_leps.values())
    ok = last <= 0.5 * first and total < 30 * 60
    verdict(f"6-{arch}", ok, f"{arch}: epoch 1 {first:.2f} -> epoch 10 {last:.2f} "
                             f"(ratio {last / first:.3f}, needs <= 0.5), {elapsed:.0f}s")
    assert ok


def test_c07_guided_beats_unguided(heldout_runs):
    rec = {k: float(np.mean(v)) for k, v in heldout_runs["recalls"].items()}
    counts = {k: len(v) for k, v in heldout_runs["recalls"].items()}
    ok = rec["unet"] > rec["unguided"] and rec["unet"] >= rec["mlp"] and heldout_runs["elapsed"] < 2 * 3600
    verdict(7, ok, f"mean recall guided(unet) {rec['unet']:.3f} vs unguided {rec['unguided']:.3f}, "
                   f"mlp {rec['mlp']:.3f}; n={counts}; {heldout_runs['elapsed']:.0f}s")
    assert ok


def test_c08_similarity_descends(heldout_runs):
    fractions = {}
    for arch in ("unet", "mlp"):
        down = []
        for r in heldout_runs["runs"][arch]:
            guided = [d.loss for d in r.diagnostics if d.in_window]
            down.append(guided[-1] < guided[0])
        fractions[arch] = float(np.mean(down))
    ok = all(f >= 0.8 for f in fractions.values())
    verdict(8, ok, "fraction of runs with last < first guided-step similarity: "
                   + ", ".join(f"{k} {v:.2f}" for k, v in fractions.items()) + " (>= 0.80)")
    assert ok


def _snapshot_equal(a: Path, b: Path):
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "timing.jsonl")
    return all(filecmp.cmp(a / f, b / f, shallow=False) for f in files), len(files)


def test_c09_cli_determinism_and_provenance(tmp_path):
    def twice(argv, out):
        assert main(argv) == 0
        snap = tmp_path / "snap"
        shutil.copytree(out, snap) if Path(out).is_dir() else shutil.copy(out, snap)
        assert main(argv) == 0
        if Path(out).is_dir():
            same, n = _snapshot_equal(snap, Path(out))
            shutil.rmtree(snap)
        else:
            same, n = filecmp.cmp(snap, out, shallow=False), 1
            snap.unlink()
        return same, n

    data, bb, lep = tmp_path / "data", tmp_path / "bb", tmp_path / "lep"
    sketch = tmp_path / "sk" / "tri.png"
    sketch.parent.mkdir()
    save_binary(sketch, render_sketch(ShapeSpec("triangle", (16.0, 15.5), 10.0)).data)
    small_bb = ["--set", "backbone.epochs=2", "--set", "backbone.widths=[4,8,16]", "--set", "backbone.emb_dim=16"]
    checks = {
        "make-shapes": twice(["make-shapes", "--n", "12", "--seed", "7", "--out", str(data)], data),
        "train-backbone": twice(["train-backbone", "--data", str(data), "--out", str(bb), "--seed", "0",
                                 *small_bb], bb),
        "train-lep": twice(["train-lep", "--arch", "mlp", "--backbone", str(bb / "backbone.ckpt"), "--data",
                            str(data), "--out", str(lep), "--seed", "0", "--epochs", "2"], lep),
    }
    gen_args = ["--backbone", str(bb / "backbone.ckpt"), "--lep", str(lep / "lep.ckpt"), "--sketch", str(sketch),
                "--label", "triangle", "--T", "20"]
    gen = tmp_path / "gen"
    checks["generate"] = twice(["generate", *gen_args, "--out", str(gen), "--seed", "3", "--num-samples", "2"],
                               gen)
    checks["simplify"] = twice(["simplify", "--sketch", str(sketch), "--out", str(tmp_path / "s.png")],
                               tmp_path / "s.png")
    ev = tmp_path / "ev"
    checks["eval"] = twice(["eval", "--images", str(gen / "seed_3"), "--sketches", str(sketch.parent), "--out",
                            str(ev)], ev)
    # the echoed config alone (plus the same inputs) reproduces the run
    echo = tmp_path / "gen_echo"
    assert main(["generate", *gen_args, "--config", str(gen / "config.yaml"), "--out", str(echo),
                 "--num-samples", "2"]) == 0
    same_echo = all(filecmp.cmp(gen / f"seed_{s}" / n, echo / f"seed_{s}" / n, shallow=False)
                    for s in (3, 4) for n in ("tri.png", "diagnostics.jsonl", "diagnostics.png"))
    ok = all(c[0] for c in checks.values()) and same_echo
    verdict(9, ok, ", ".join(f"{k} {'identical' if c[0] else 'DIFFERS'} ({c[1]} files)" for k, c in checks.items())
            + f"; echoed config {'reproduces' if same_echo else 'does NOT reproduce'} generate")
    assert ok


def test_c10_guidance_window(heldout_runs):
    expected = [k for k in range(T, 0, -1) if T - k <= S]
    bad = 0
    for arch in ("unet", "mlp"):
        for r in heldout_runs["runs"][arch]:
            applied = [d.step for d in r.diagnostics if d.applied]
            nonzero = [d.step for d in r.diagnostics if d.alpha != 0]
            bad += applied != expected or nonzero != expected
    ok = bad == 0 and expected == list(range(50, 24, -1))
    verdict(10, ok, f"corrections at steps {expected[0]}..{expected[-1]} ({len(expected)} steps) in "
                    f"{2 * N_HELDOUT * len(SEEDS) - bad}/{2 * N_HELDOUT * len(SEEDS)} runs, none elsewhere")
    assert ok
