"""End-to-end experiment plumbing: seeds, run configuration, and artifact builders."""
from __future__ import annotations

import json
import logging
import zlib
from typing import Callable
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import detector as det
from . import evaluation as ev
from . import scenes, threat
from .defense import DefenseConfig
from .detector import DetectorWeights
from .scenes import VideoClip
from .threat import Patch

log = logging.getLogger(__name__)


def derive_seed(seed: int, consumer: str) -> int:
    """Independent 32-bit seed for a named consumer of a run seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(consumer.encode())])
    return int(ss.generate_state(1)[0])


def scene_seeds(seed: int, role: str, n: int) -> list[int]:
    return [derive_seed(seed, f"{role}/{i}") for i in range(n)]


class ConfigError(ValueError):
    """Ill-formed or inconsistent run configuration."""


@dataclass
class RunConfig:
    seed: int = 0
    duration: float = 6.0
    fps: float = 30.0
    # detector training
    train_clips: int = 80
    frames_per_clip: int = 10
    epochs: int = 30
    det_lr: float = 3e-3
    # patch training
    patch_clips: int = 40
    patch_steps: int = 3000
    patch_lr: float = 0.1
    patch_scale_range: tuple[float, float] = (0.75, 1.5)
    # held-out frames for the recall check
    test_clips: int = 20
    test_frames_per_clip: int = 5
    # clips per kind (clean and adversarial) for tuning and evaluation
    tune_clips: int = 10
    eval_clips: int = 10
    k_grid: list[float] | None = None  # None: span measured clean/attacked MSE
    lambda_grid: list[float] = field(default_factory=lambda: [float(v) for v in ev.DEFAULT_LAMBDAS])
    defense: DefenseConfig = field(default_factory=lambda: DefenseConfig(k=0.01, lam=3.0))
    paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.duration <= 1.0 or self.fps <= 0:
            raise ConfigError("need duration > 1 s and fps > 0")
        for name in ("train_clips", "frames_per_clip", "epochs", "patch_clips", "patch_steps",
                     "test_clips", "test_frames_per_clip", "tune_clips", "eval_clips"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.lambda_grid or (self.k_grid is not None and not self.k_grid):
            raise ConfigError("grids must be nonempty")
        self.patch_scale_range = tuple(self.patch_scale_range)

    def to_json(self) -> str:
        d = asdict(self)
        d["defense"] = json.loads(self.defense.to_json())
        return json.dumps(d, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        try:
            if "defense" in d:
                d["defense"] = DefenseConfig.from_json(json.dumps(d["defense"]))
            return cls(**d)
        except (TypeError, KeyError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls.from_dict(doc)
        cfg.paths = resolve_paths(cfg.paths, Path(path).parent)
        return cfg

    def with_defense(self, **kw) -> "RunConfig":
        return replace(self, defense=replace(self.defense, **kw))


def resolve_paths(paths: dict, base: Path) -> dict:
    """Anchor relative paths at ``base``; inputs must exist, outputs need an existing parent."""
    out = {}
    for name, val in paths.items():
        if not isinstance(val, str) or not val:
            raise ConfigError(f"paths.{name} must be a nonempty string")
        p = Path(val) if Path(val).is_absolute() else base / val
        if name == "out":
            if not (p.is_dir() or p.parent.is_dir()):
                raise ConfigError(f"paths.out: no directory {p.parent}")
        elif not p.exists():
            raise ConfigError(f"paths.{name}: {p} does not exist")
        out[name] = str(p)
    return out


# ---------------------------------------------------------------- builders

def train_frames(cfg: RunConfig):
    return scenes.sample_frames(scene_seeds(cfg.seed, "train", cfg.train_clips), cfg.frames_per_clip,
                                cfg.duration, cfg.fps)


def patch_frames(cfg: RunConfig):
    return scenes.sample_frames(scene_seeds(cfg.seed, "patch", cfg.patch_clips), cfg.frames_per_clip,
                                cfg.duration, cfg.fps)


def test_frames(cfg: RunConfig):
    return scenes.sample_frames(scene_seeds(cfg.seed, "test", cfg.test_clips), cfg.test_frames_per_clip,
                                cfg.duration, cfg.fps)


def build_detector(cfg: RunConfig, history: det.TrainLog | None = None) -> DetectorWeights:
    return det.train_detector(train_frames(cfg), cfg.epochs, cfg.det_lr, derive_seed(cfg.seed, "detector"),
                              history=history)


def build_patch(cfg: RunConfig, weights: DetectorWeights, history: list | None = None) -> Patch:
    return threat.train_patch(weights, patch_frames(cfg), cfg.patch_steps, cfg.patch_lr,
                              derive_seed(cfg.seed, "patch"), scale_range=cfg.patch_scale_range,
                              history=history)


def clean_clip(cfg: RunConfig, role: str, i: int) -> VideoClip:
    return scenes.gen_clean_clip(derive_seed(cfg.seed, f"{role}/clean/{i}"), cfg.duration, cfg.fps)


def adversarial_clip(cfg: RunConfig, role: str, i: int, patch: Patch) -> VideoClip:
    src = scenes.gen_clean_clip(derive_seed(cfg.seed, f"{role}/adv-src/{i}"), cfg.duration, cfg.fps)
    return threat.make_adversarial_clip(src, patch, derive_seed(cfg.seed, f"{role}/trajectory/{i}"))


def build_corpus(cfg: RunConfig, role: str, patch: Patch, n: int | None = None
                 ) -> tuple[list[VideoClip], list[VideoClip]]:
    """Clean and adversarial clips for ``role`` ("tune" or "eval"); roles never share scenes."""
    n = n if n is not None else (cfg.tune_clips if role == "tune" else cfg.eval_clips)
    return ([clean_clip(cfg, role, i) for i in range(n)],
            [adversarial_clip(cfg, role, i, patch) for i in range(n)])


# ---------------------------------------------------------------- MSE statistics

def pair_mse(outputs: np.ndarray, lag: int) -> np.ndarray:
    """MSE between every output and the one ``lag`` frames earlier."""
    d = outputs[lag:].astype(np.float64) - outputs[:-lag].astype(np.float64)
    return (d * d).reshape(len(d), -1).mean(axis=1)


def mse_statistics(clean_clips, adv_clips, clean_cache, adv_cache, config: DefenseConfig
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Undefended lagged-pair MSEs: clean pairs, and attacked pairs (patch now, none at the reference)."""
    clean, attacked = [], []
    for clip, outs in zip(clean_clips, clean_cache):
        clean.append(pair_mse(outs, config.capacity(clip.fps)))
    for clip, outs in zip(adv_clips, adv_cache):
        lag = config.capacity(clip.fps)
        m = pair_mse(outs, lag)
        present = np.array(clip.trajectory.present)
        sel = present[lag:] & ~present[:-lag]
        attacked.append(m[sel])
    return np.concatenate(clean), np.concatenate(attacked)


def k_grid_for(cfg: RunConfig, clean_clips, adv_clips, clean_cache, adv_cache) -> np.ndarray:
    if cfg.k_grid is not None:
        return np.asarray(cfg.k_grid, dtype=float)
    c, a = mse_statistics(clean_clips, adv_clips, clean_cache, adv_cache, cfg.defense)
    return ev.default_k_grid(float(c.mean()), float(a.mean()))


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalSummary:
    undefended_adv_map: float
    defended_adv_map: float
    undefended_clean_map: float
    defended_clean_map: float
    mse_auc: float
    rates: ev.DetectionRateResult
    clean_flagged: int
    rows: list[dict]
    reports: dict[str, list]

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("undefended_adv_map", "defended_adv_map", "undefended_clean_map",
                                              "defended_clean_map", "mse_auc", "clean_flagged")}
        out["rates"] = {name: asdict(getattr(self.rates, name)) for name in ("above", "below", "clean")}
        out["rates"]["scale_split"] = self.rates.split
        return out


EVAL_COLUMNS = ["clip", "kind", "frames", "patched_frames", "flagged", "masked_regions",
                "undefended_map", "defended_map"]


def evaluate(weights: DetectorWeights, clean_clips, adv_clips, config: DefenseConfig,
             clean_cache=None, adv_cache=None) -> EvalSummary:
    """Undefended vs defended mAP, attack-detection rates, and the MSE AUC on one corpus.

    Adversarial mAP is scored on frames where the patch is present; clean
    mAP on every frame of the clean clips. The AUC ranks the defended
    stream's MSE-to-reference of attacked frames (scale above the split)
    against that of patch-free frames.
    """
    clean_cache = clean_cache if clean_cache is not None else ev.first_outputs(weights, clean_clips)
    adv_cache = adv_cache if adv_cache is not None else ev.first_outputs(weights, adv_clips)
    und_c = ev.undefended_detections(weights, clean_clips, config, clean_cache)
    und_a = ev.undefended_detections(weights, adv_clips, config, adv_cache)
    run_c = ev.defend_corpus(weights, clean_clips, config, clean_cache)
    run_a = ev.defend_corpus(weights, adv_clips, config, adv_cache)
    rates = ev.detection_rates(run_a.reports + run_c.reports, list(adv_clips) + list(clean_clips))

    pos, neg = [], []
    for clip, reps in zip(list(adv_clips) + list(clean_clips), run_a.reports + run_c.reports):
        truth = ev.frame_truth(clip)
        for r in reps:
            if r.warmup:
                continue
            present, scale = truth[r.index]
            if not present:
                neg.append(r.mse_to_reference)
            elif scale > rates.split:
                pos.append(r.mse_to_reference)

    rows = []
    for kind, clips, und, run, only in (("clean", clean_clips, und_c, run_c, False),
                                        ("adversarial", adv_clips, und_a, run_a, True)):
        for i, clip in enumerate(clips):
            patched = sum(p for p, _ in ev.frame_truth(clip))
            rows.append({
                "clip": i, "kind": kind, "frames": len(clip), "patched_frames": patched,
                "flagged": sum(r.flagged for r in run.reports[i]),
                "masked_regions": sum(len(r.masked_regions) for r in run.reports[i]),
                "undefended_map": ev.corpus_map([clip], [und[i]], attacked_only=only),
                "defended_map": ev.corpus_map([clip], [run.detections[i]], attacked_only=only),
            })
    return EvalSummary(
        undefended_adv_map=ev.corpus_map(adv_clips, und_a, attacked_only=True),
        defended_adv_map=ev.corpus_map(adv_clips, run_a.detections, attacked_only=True),
        undefended_clean_map=ev.corpus_map(clean_clips, und_c),
        defended_clean_map=ev.corpus_map(clean_clips, run_c.detections),
        mse_auc=ev.roc_auc(pos, neg) if pos and neg else float("nan"),
        rates=rates,
        clean_flagged=sum(r.flagged for reps in run_c.reports for r in reps),
        rows=rows,
        reports={"clean": run_c.reports, "adversarial": run_a.reports},
    )


# ---------------------------------------------------------------- full lab run

@dataclass
class Lab:
    config: RunConfig
    weights: DetectorWeights
    patch: Patch
    patch_objective: list[float]  # per-step vanishing objective (negated loss, higher is stronger)
    timings: dict[str, float]
    clean_recall: float
    adv_recall: float
    tune: ev.TuneResult
    k_grid: list[float]
    tuned: DefenseConfig
    eval: EvalSummary
    eval_clips: tuple[list[VideoClip], list[VideoClip]]


def recall(weights: DetectorWeights, frames, patch: Patch | None = None, scale: float = 1.0, seed: int = 0,
           conf_threshold: float = 0.5, iou_threshold: float = 0.5) -> float:
    """Fraction of ground-truth boxes matched (same class, IoU >= threshold), optionally with a patch."""
    rng = np.random.default_rng(seed)
    hit = total = 0
    for frame, gt in frames:
        if patch is not None:
            frame = threat.apply_patch(frame, patch, threat.sample_transform(rng, scale_range=(scale, scale),
                                                                            base=patch.base_size))
        dets = det.detect(weights, frame, conf_threshold, iou_threshold)
        for g in gt:
            total += 1
            hit += any(d.box.cls == g.cls and det.iou(d.box, g) >= iou_threshold for d in dets)
    if total == 0:
        raise ValueError("no ground-truth boxes")
    return hit / total


def run_lab(cfg: RunConfig, cache_dir=None, progress: Callable[[str], None] | None = None) -> Lab:
    """Train, attack, tune, and evaluate from one seed.

    With ``cache_dir`` set, the expensive stages (weights, patch with its
    objective history, the tune surface) are loaded from there when present
    and saved there otherwise, together with the timings measured when they
    were produced. The evaluation always runs.
    """
    import time

    from . import io as aio

    say = progress or (lambda msg: log.info("%s", msg))
    cache = Path(cache_dir) if cache_dir else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        stamp = cache / "config.json"
        if stamp.exists() and stamp.read_text() != cfg.to_json():
            raise ConfigError(f"{cache} holds artifacts from a different configuration")
        aio.atomic_write(stamp, cfg.to_json())
    tpath = cache / "timings.json" if cache else None
    timings = json.loads(tpath.read_text()) if tpath is not None and tpath.exists() else {}

    def stage(name, files, build, save, load):
        if cache is not None and all((cache / f).exists() for f in files) and name in timings:
            say(f"{name}: cached ({timings[name]:.1f} s when built)")
            return load()
        t0 = time.perf_counter()
        out = build()
        timings[name] = time.perf_counter() - t0
        say(f"{name}: {timings[name]:.1f} s")
        if cache is not None:
            save(out)
            aio.atomic_write(tpath, json.dumps(timings, indent=2))
        return out

    weights = stage("train_detector", ["weights.bin"], lambda: build_detector(cfg),
                    lambda w: aio.save_weights(cache / "weights.bin", w),
                    lambda: aio.load_weights(cache / "weights.bin"))

    def make_patch():
        losses = []
        return build_patch(cfg, weights, losses), losses

    def save_patch(pl_):
        aio.save_patch(cache / "patch.bin", pl_[0])
        aio.atomic_write(cache / "patch_objective.json", json.dumps(pl_[1]))

    patch, losses = stage("train_patch", ["patch.bin", "patch_objective.json"], make_patch, save_patch,
                          lambda: (aio.load_patch(cache / "patch.bin"),
                                   json.loads((cache / "patch_objective.json").read_text())))

    test = test_frames(cfg)
    clean_rec = recall(weights, test)
    adv_rec = recall(weights, test, patch, 1.0, derive_seed(cfg.seed, "recall-placement"))
    del test
    say(f"recall clean {clean_rec:.3f} adversarial {adv_rec:.3f}")

    def make_tune():
        clean, adv = build_corpus(cfg, "tune", patch)
        cc, ca = ev.first_outputs(weights, clean), ev.first_outputs(weights, adv)
        k_grid = [float(k) for k in k_grid_for(cfg, clean, adv, cc, ca)]
        res = ev.tune(weights, clean, adv, k_grid, cfg.lambda_grid, cfg.defense, clean_cache=cc, adv_cache=ca,
                      progress=lambda p: say(f"k={p.k:.5g} lambda={p.lam:.3g} adv={p.adv_map:.4f} "
                                             f"clean={p.clean_map:.4f}"))
        return res, k_grid

    def save_tune(rk):
        doc = {"k_grid": rk[1], "grid": [asdict(p) for p in rk[0].grid]}
        aio.atomic_write(cache / "tune.json", json.dumps(doc))

    def load_tune():
        doc = json.loads((cache / "tune.json").read_text())
        return ev.select_optimum([ev.GridPoint(**p) for p in doc["grid"]]), doc["k_grid"]

    tuned, k_grid = stage("tune", ["tune.json"], make_tune, save_tune, load_tune)
    best = replace(cfg.defense, k=tuned.k, lam=tuned.lam)
    say(f"tuned k={best.k:.5g} lambda={best.lam:.3g}")

    t0 = time.perf_counter()
    eclean, eadv = build_corpus(cfg, "eval", patch)
    summary = evaluate(weights, eclean, eadv, best)
    timings = dict(timings, eval=time.perf_counter() - t0)
    return Lab(cfg, weights, patch, [-v for v in losses], timings, clean_rec, adv_rec, tuned,
               k_grid, best, summary, (eclean, eadv))
