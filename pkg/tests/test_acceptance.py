"""End-to-end acceptance checks on a full seeded run.

The session fixture trains the detector and the patch, tunes (k, lambda) on
the tune corpus, and evaluates on a disjoint 20-clip corpus. Set
ADAV_LAB_CACHE to a directory to keep the trained artifacts and the tune
surface between sessions; timings recorded when they were built are reused.
"""
import copy
import os
import time

import numpy as np
import pytest

from adav import autodiff as ad
from adav import cli
from adav import defense as F
from adav import detector as det
from adav import evaluation as ev
from adav import io as aio
from adav import pipeline as pl
from adav import scenes, threat
from conftest import central_diff, record, three_layer_net
from test_autodiff import brute_conv
from test_defense import brute_box_scores
from test_detector import reference_nms
from test_evaluation import exhaustive_optimum

pytestmark = pytest.mark.slow


@pytest.fixture(scope="session")
def lab(tmp_path_factory):
    cache = os.environ.get("ADAV_LAB_CACHE") or tmp_path_factory.mktemp("lab")
    return pl.run_lab(pl.RunConfig(seed=0), cache_dir=cache)


def as64(w: det.DetectorWeights) -> det.DetectorWeights:
    w = copy.deepcopy(w)
    for layer in w.all_layers():
        layer.kernel = layer.kernel.astype(np.float64)
        layer.bias = layer.bias.astype(np.float64)
    return w


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-30)


def test_c1_gradient_matches_finite_differences(lab):
    t0 = time.perf_counter()
    w = as64(lab.weights)
    rng = np.random.default_rng(pl.derive_seed(0, "c1"))
    clip = lab.eval_clips[0][0]
    i = len(clip) // 2
    frame = clip.frames[i].astype(np.float64)
    target = det.raw_output(w, clip.frames[i - round(0.5 * clip.fps)].astype(np.float64))
    y0, x0 = 48, 40  # 32x32 crop

    def loss(crop):
        x = frame.copy()
        x[y0:y0 + 32, x0:x0 + 32] = crop
        return float(ad.mse(det.forward(w, x), target).data)

    tape = ad.Tape()
    x = tape.watch(frame)
    (g,) = tape.backward(ad.mse(det.forward(w, x), target), [x])
    crop = frame[y0:y0 + 32, x0:x0 + 32].copy()
    coords = [tuple(c) for c in np.stack([rng.integers(0, 32, 120), rng.integers(0, 32, 120),
                                          rng.integers(0, 3, 120)], 1)]
    errs = [rel_err(g[y0 + i, x0 + j, c], central_diff(loss, crop, (i, j, c), eps=1e-3)) for i, j, c in coords]
    elapsed = time.perf_counter() - t0
    worst = max(errs)
    ok = record("C1 gradient correctness", worst <= 1e-3 and elapsed < 60 and len(coords) >= 100,
                f"max relative error {worst:.2e} over {len(coords)} coordinates (<= 1e-3), {elapsed:.1f} s (< 60 s)")
    assert ok


def test_c2_guided_rule_on_three_layer_net():
    rng = np.random.default_rng(pl.derive_seed(0, "c2"))
    checked = mismatched = 0
    for trial in range(20):
        tape = ad.Tape()
        x = tape.watch(rng.normal(size=(7, 7, 2)))
        out = three_layer_net(rng, x)
        tape.backward(ad.mse(out, rng.normal(size=out.shape)), [x], mode=ad.GradMode.GUIDED, keep=True)
        relus = [r for r in tape.records if r.kind == "relu"]
        assert len(relus) == 3
        for r in relus:
            expect = np.maximum(r.grad_out, 0) * (r.inputs[0].data > 0)
            checked += expect.size
            mismatched += int(np.sum(r.grad_in[0] != expect))
    ok = record("C2 guided rule", mismatched == 0,
                f"{checked} rectifier units over 20 random nets, {mismatched} mismatches")
    assert ok


def test_c3_oracle_equivalence(lab):
    rng = np.random.default_rng(pl.derive_seed(0, "c3"))
    notes, ok = [], True

    x, k, b = rng.normal(size=(8, 8, 2)), rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)
    e = float(np.abs(ad.conv2d(x, k, b, 1, 0).data - brute_conv(x, k, b, 1, 0)).max())
    ok &= e <= 1e-6
    notes.append(f"conv {e:.1e}")

    clip = lab.eval_clips[1][0]
    i = clip.trajectory.present.index(True) + 3
    ref = det.raw_output(lab.weights, clip.frames[i - 15])
    sal = F.saliency(lab.weights, clip.frames[i], ref).astype(np.float64)
    e = float(np.abs(F.box_scores(sal, 20, 5) - brute_box_scores(sal, 20, 5)).max())
    ok &= e <= 1e-6
    notes.append(f"box filter {e:.1e}")

    nms_ok = True
    for _ in range(20):
        dets = [det.Detection(det.Box(*rng.uniform(20, 60, 2), *rng.uniform(10, 30, 2), int(rng.integers(2))),
                              float(rng.random()), j) for j in range(10)]
        nms_ok &= det.nms(dets, 0.5) == reference_nms(dets, 0.5)
    ok &= nms_ok
    notes.append(f"nms {'exact' if nms_ok else 'MISMATCH'}")

    best = exhaustive_optimum(lab.tune.grid)
    tune_ok = (lab.tune.k, lab.tune.lam) == (best.k, best.lam) and len(lab.tune.grid) == 100
    ok &= tune_ok
    notes.append(f"tune argmin {'exact' if tune_ok else 'MISMATCH'} on {len(lab.tune.grid)} points")

    regions = [r for rep in lab.eval.reports["adversarial"][0] for r in rep.masked_regions][:12]
    regions += [(int(a), int(c), int(a) + 20, int(c) + 20) for a, c in rng.integers(0, 108, (6, 2))]
    frame = np.full((128, 128, 3), 2.0, np.float32)
    union = np.zeros((128, 128), bool)
    for x0, y0, x1, y1 in regions:
        for yy in range(y0, y1):
            for xx in range(x0, x1):
                union[yy, xx] = True
    count = int((F.mask_regions(frame, regions)[..., 0] != 2.0).sum())
    ok &= count == int(union.sum())
    notes.append(f"mask {count} vs {int(union.sum())} px")

    assert record("C3 oracle equivalence", bool(ok), "; ".join(notes))


def test_c4_patch_efficacy(lab):
    drop = (lab.clean_recall - lab.adv_recall) / lab.clean_recall if lab.clean_recall else 0.0
    steps = lab.config.patch_steps
    t = lab.timings["train_patch"]
    obj = np.asarray(lab.patch_objective[:2000])
    first, last = obj[:200].mean(), obj[-200:].mean()
    ok = drop >= 0.5 and steps >= 2000 and t < 900 and len(obj) == 2000 and last > first
    assert record("C4 patch efficacy", ok,
                  f"recall {lab.clean_recall:.3f} -> {lab.adv_recall:.3f} ({drop:.0%} drop, >= 50%), "
                  f"{steps} steps in {t:.0f} s (< 900 s), objective first/last decile {first:.3f}/{last:.3f}")


def test_c5_temporal_separation(lab):
    s = lab.eval
    r = s.rates.above.recall
    n = len(lab.eval_clips[0]) + len(lab.eval_clips[1])
    ok = s.mse_auc >= 0.9 and r >= 0.85 and n == 20
    assert record("C5 temporal separation", ok,
                  f"MSE ROC AUC {s.mse_auc:.3f} (>= 0.9), detection recall at scale > 0.8 {r:.3f} (>= 0.85) "
                  f"with k={lab.tuned.k:.4g} lambda={lab.tuned.lam:g} on {n} clips")


def test_c6_defense_recovery(lab):
    s = lab.eval
    gain = s.defended_adv_map - s.undefended_adv_map
    loss = abs(s.defended_clean_map - s.undefended_clean_map)
    ok = gain >= 0.05 and loss <= 0.03
    assert record("C6 defense recovery", ok,
                  f"adversarial mAP {s.undefended_adv_map:.3f} -> {s.defended_adv_map:.3f} (gain {gain:+.3f}, >= 0.05); "
                  f"clean mAP {s.undefended_clean_map:.3f} -> {s.defended_clean_map:.3f} (|delta| {loss:.3f}, <= 0.03)")


def test_c7_pass_counts_and_throughput(lab):
    live = [r for kind in ("clean", "adversarial") for clip in lab.eval.reports[kind] for r in clip if not r.warmup]
    bad = [r for r in live if (r.forward_passes, r.backward_passes) != ((2, 1) if r.flagged else (1, 0))]
    clean, adv = lab.eval_clips
    b = ev.bench(lab.weights, clean[:3], adv[:3], lab.tuned)
    ratio = b.consistent_fps / b.flagged_fps
    ok = not bad and ratio >= 2.0 and any(r.flagged for r in live) and any(not r.flagged for r in live)
    assert record("C7 pass-count structure", ok,
                  f"{len(live)} frames, {len(bad)} with wrong pass counts; one-pass path {b.consistent_fps:.0f} FPS "
                  f"vs flagged path {b.flagged_fps:.0f} FPS (ratio {ratio:.2f}, >= 2); "
                  f"clean clips {b.clean_fps:.0f} FPS, adversarial clips {b.adversarial_fps:.0f} FPS")


def reduced_config() -> pl.RunConfig:
    return pl.RunConfig(seed=5, duration=2.0, fps=10.0, train_clips=4, frames_per_clip=2, epochs=2,
                        patch_clips=2, patch_steps=20, test_clips=2, test_frames_per_clip=2, tune_clips=1,
                        eval_clips=1, k_grid=[1e-3, 1e-2, 1e-1], lambda_grid=[1.0, 3.0])


def artifacts(run: pl.Lab) -> dict:
    tune_rows = [{"k": p.k, "lambda": p.lam, "adv_map": p.adv_map, "clean_map": p.clean_map,
                  "objective": run.tune.objective(p)} for p in run.tune.grid]
    return {
        "weights": aio.weights_bytes(run.weights),
        "patch": aio.patch_bytes(run.patch),
        "clips": b"".join(aio.clip_bytes(c) for group in run.eval_clips for c in group),
        "eval.csv": cli.csv_text(pl.EVAL_COLUMNS, run.eval.rows).encode(),
        "tune.csv": cli.csv_text(cli.TUNE_COLUMNS, tune_rows).encode(),
    }


def test_c8_queue_and_determinism(lab):
    rng = np.random.default_rng(pl.derive_seed(0, "c8"))
    cfg = lab.tuned
    fps = 30.0
    cap = round(0.5 * fps)
    frames0 = lab.eval_clips[0][0].frames
    state = F.init_state(cfg, fps, [det.raw_output(lab.weights, f) for f in frames0[:cap]], lab.weights)
    lengths = set()
    frame = rng.random((128, 128, 3), dtype=np.float32)
    flagged = 0
    for _ in range(10_000):
        if rng.random() < 0.5:
            frame = rng.random((128, 128, 3), dtype=np.float32)
        _, rep = F.process_frame(state, frame)
        flagged += rep.flagged
        lengths.add(len(state.queue))
    queue_ok = lengths == {cap}

    a, b = artifacts(pl.run_lab(reduced_config())), artifacts(pl.run_lab(reduced_config()))
    same = {k: a[k] == b[k] for k in a}
    ok = queue_ok and all(same.values())
    assert record("C8 queue and determinism", ok,
                  f"queue lengths {sorted(lengths)} over 10^4 frames ({flagged} flagged, capacity {cap}); "
                  f"byte-identical across two runs: " + ", ".join(f"{k}={v}" for k, v in same.items()))


def test_bright_object_detected(lab):
    rng = np.random.default_rng(pl.derive_seed(0, "bright"))
    confs = []
    for cls in range(det.NUM_CLASSES):
        bg = scenes._background(rng)
        (wl, _), (hl, _) = scenes.CLASS_SIZES[cls]
        m = scenes._Mover(cls, wl + 2, hl + 2, 50.0, 60.0, 0.0, 0.0, scenes.CLASS_COLORS[cls],
                          np.zeros((hl + 2, wl + 2, 3)))
        frame, _ = scenes.render_frame(bg, [m], 0.0, 1.0, [(0, 0)])
        dets = det.decode(det.raw_output(lab.weights, frame.astype(np.float32)), 0.0)
        confs.append(max(d.conf for d in dets))
    ok = min(confs) > 0.5
    assert record("example: one bright object", ok, "max confidence per class " + ", ".join(f"{c:.3f}" for c in confs))


def test_detector_recall_on_held_out_frames(lab):
    ok = lab.clean_recall >= 0.9
    assert record("example: detector recall", ok, f"held-out recall {lab.clean_recall:.3f} (>= 0.9, conf 0.5, IoU 0.5)")


def test_clean_clips_never_flagged(lab):
    n = lab.eval.clean_flagged
    assert record("example: defend on clean clips", n == 0, f"{n} flagged frames on the clean eval clips")


def test_masked_regions_overlap_patch(lab):
    hits = total = 0
    for clip, reps in zip(lab.eval_clips[1], lab.eval.reports["adversarial"]):
        for r in reps:
            t = clip.trajectory.transforms[r.index]
            if r.warmup or t is None or not r.flagged or not 0.8 < t.scale <= 1.25:
                continue
            y0, y1, x0, x1 = threat.patch_region(clip.frames.shape[1:], lab.patch, t)
            total += 1
            hits += any(a < x1 and x0 < c and b < y1 and y0 < d for a, b, c, d in r.masked_regions)
    frac = hits / total if total else float("nan")
    ok = total > 0 and frac >= 0.9
    assert record("example: localization overlap", ok,
                  f"{hits}/{total} flagged frames near scale 1 mask part of the patch ({frac:.1%}, >= 90%)")
