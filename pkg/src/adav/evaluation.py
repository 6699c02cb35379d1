"""Detection-quality metrics, attack-detection rates, latency, and (k, lambda) tuning."""
from __future__ import annotations

import itertools
import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .defense import DefenseConfig, FrameReport, run_stream, run_undefended
from .defense import postprocess
from .detector import Box, Detection, DetectorWeights, iou, raw_output
from .scenes import VideoClip

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- mAP@0.5

@dataclass
class MapResult:
    ap: dict[int, float]
    curves: dict[int, tuple[np.ndarray, np.ndarray]]  # class -> (recall, precision)
    map: float


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under a PR curve (recall ascending)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[i] - mrec[i - 1]) * mpre[i]))


def map50(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Box]], iou_threshold: float = 0.5
          ) -> MapResult:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction frames vs {len(gts)} ground-truth frames")
    classes = sorted({b.cls for frame in gts for b in frame})
    ap, curves = {}, {}
    for c in classes:
        n_gt = sum(1 for frame in gts for b in frame if b.cls == c)
        scored = [(d.conf, fi, d) for fi, frame in enumerate(preds) for d in frame if d.cls == c]
        scored.sort(key=lambda s: -s[0])
        matched = [np.zeros(len(frame), dtype=bool) for frame in gts]
        tp = np.zeros(len(scored))
        for n, (_, fi, d) in enumerate(scored):
            best, best_j = 0.0, -1
            for j, g in enumerate(gts[fi]):
                if g.cls != c or matched[fi][j]:
                    continue
                o = iou(d.box, g)
                if o > best:
                    best, best_j = o, j
            if best_j >= 0 and best >= iou_threshold:
                matched[fi][best_j] = True
                tp[n] = 1.0
        ctp = np.cumsum(tp)
        cfp = np.cumsum(1.0 - tp)
        rec = ctp / n_gt
        prec = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
        ap[c] = average_precision(rec, prec)
        curves[c] = (rec, prec)
    m = float(np.mean(list(ap.values()))) if ap else 0.0
    return MapResult(ap, curves, m)


# ---------------------------------------------------------------- attack detection

@dataclass
class Rates:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    accuracy: float = 1.0
    precision: float = 1.0
    recall: float = 1.0
    degenerate: list[str] = field(default_factory=list)

    def finalize(self) -> "Rates":
        total = self.tp + self.fp + self.tn + self.fn
        self.degenerate = []
        if total:
            self.accuracy = (self.tp + self.tn) / total
        else:
            self.accuracy = 1.0
            self.degenerate.append("accuracy")
        if self.tp + self.fp:
            self.precision = self.tp / (self.tp + self.fp)
        else:
            self.precision = 1.0
            self.degenerate.append("precision")
        if self.tp + self.fn:
            self.recall = self.tp / (self.tp + self.fn)
        else:
            self.recall = 1.0
            self.degenerate.append("recall")
        return self


@dataclass
class DetectionRateResult:
    above: Rates  # attacked frames with scale > split, plus all clean frames as negatives
    below: Rates  # attacked frames with scale <= split, plus all clean frames as negatives
    clean: Rates  # clean frames only (no positives)
    split: float = 0.8


def frame_truth(clip: VideoClip) -> list[tuple[bool, float]]:
    """(patch present, patch scale) for every frame of a clip."""
    traj = clip.trajectory
    if traj is None:
        return [(False, 0.0)] * len(clip)
    return [(p, tr.scale if tr is not None else 0.0) for p, tr in zip(traj.present, traj.transforms)]


def detection_rates(reports: Sequence[Sequence[FrameReport]], clips: Sequence[VideoClip],
                    scale_split: float = 0.8) -> DetectionRateResult:
    """Frame-level flag vs patch-present classification, split by patch scale.

    Warm-up frames are skipped. Patch-free frames are negatives shared by
    both scale partitions.
    """
    above, below, clean = Rates(), Rates(), Rates()
    for clip_reports, clip in zip(reports, clips):
        truth = frame_truth(clip)
        for r in clip_reports:
            if r.warmup:
                continue
            present, scale = truth[r.index]
            if present:
                part = above if scale > scale_split else below
                if r.flagged:
                    part.tp += 1
                else:
                    part.fn += 1
            else:
                for part in (above, below, clean):
                    if r.flagged:
                        part.fp += 1
                    else:
                        part.tn += 1
    return DetectionRateResult(above.finalize(), below.finalize(), clean.finalize(), scale_split)


def roc_auc(positives: Sequence[float], negatives: Sequence[float]) -> float:
    """Probability a random positive outscores a random negative (ties count half)."""
    pos, neg = np.asarray(positives, float), np.asarray(negatives, float)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(np.concatenate([pos, neg]))
    return float((ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


# ---------------------------------------------------------------- defended evaluation

@dataclass
class CorpusRun:
    detections: list[list[list[Detection]]]
    reports: list[list[FrameReport]]


def first_outputs(weights: DetectorWeights, clips: Sequence[VideoClip]) -> list[np.ndarray]:
    """Undefended detector output of every frame, (T, 16, 16, 8) per clip."""
    return [np.stack([raw_output(weights, f) for f in clip.frames]) for clip in clips]


def defend_corpus(weights: DetectorWeights, clips: Sequence[VideoClip], config: DefenseConfig,
                  cache: Sequence[np.ndarray] | None = None) -> CorpusRun:
    dets, reps = [], []
    for n, clip in enumerate(clips):
        res = run_stream(weights, clip.frames, clip.fps, config, None if cache is None else cache[n])
        dets.append(res.detections)
        reps.append(res.reports)
    return CorpusRun(dets, reps)


def _scored_frames(clips, dets, attacked_only: bool, skip: int):
    preds, gts = [], []
    for clip, clip_dets in zip(clips, dets):
        truth = frame_truth(clip)
        for i in range(skip, len(clip)):
            if attacked_only and not truth[i][0]:
                continue
            preds.append(clip_dets[i])
            gts.append(clip.labels[i])
    return preds, gts


def corpus_map(clips: Sequence[VideoClip], dets, attacked_only: bool = False, skip: int = 0) -> float:
    """mAP over clip frames; ``attacked_only`` keeps frames where the patch is present."""
    preds, gts = _scored_frames(clips, dets, attacked_only, skip)
    return map50(preds, gts).map


def undefended_detections(weights, clips, config: DefenseConfig, cache=None):
    if cache is None:
        return [run_undefended(weights, c.frames, config) for c in clips]
    return [[postprocess(raw, config) for raw in outs] for outs in cache]


# ---------------------------------------------------------------- tuning

@dataclass
class GridPoint:
    k: float
    lam: float
    adv_map: float
    clean_map: float


@dataclass
class TuneResult:
    grid: list[GridPoint]
    a: float  # best adversarial mAP on the grid
    b: float  # best clean mAP on the grid
    k: float
    lam: float

    def objective(self, p: GridPoint) -> float:
        return (self.a - p.adv_map) + (self.b - p.clean_map)


def select_optimum(grid: Sequence[GridPoint]) -> TuneResult:
    """Pair minimising (a - adv) + (b - clean); ties go to smaller k, then smaller lambda."""
    if not grid:
        raise ValueError("empty grid")
    a = max(p.adv_map for p in grid)
    b = max(p.clean_map for p in grid)
    best = min(grid, key=lambda p: ((a - p.adv_map) + (b - p.clean_map), p.k, p.lam))
    return TuneResult(list(grid), a, b, best.k, best.lam)


_SHARED: dict = {}


def _grid_point(k: float, lam: float) -> GridPoint:
    d = _SHARED
    cfg = replace(d["base"], k=float(k), lam=float(lam))
    adv = defend_corpus(d["weights"], d["adv"], cfg, d["adv_cache"])
    cln = defend_corpus(d["weights"], d["clean"], cfg, d["clean_cache"])
    return GridPoint(float(k), float(lam), corpus_map(d["adv"], adv.detections, attacked_only=True),
                     corpus_map(d["clean"], cln.detections))


def tune(weights: DetectorWeights, clean_clips: Sequence[VideoClip], adv_clips: Sequence[VideoClip],
         k_grid: Sequence[float], lambda_grid: Sequence[float], base: DefenseConfig | None = None,
         progress: Callable[[GridPoint], None] | None = None,
         clean_cache=None, adv_cache=None, workers: int = 1) -> TuneResult:
    """Exhaustive grid search running the full defense at every (k, lambda).

    First-pass detector outputs do not depend on (k, lambda), so they are
    computed once per clip and reused at every grid point. Grid points are
    independent; ``workers`` > 1 evaluates them in forked processes.
    """
    if not len(k_grid) or not len(lambda_grid):
        raise ValueError("grids must be nonempty")
    base = base or DefenseConfig(k=1.0, lam=1.0)
    if adv_cache is None:
        adv_cache = first_outputs(weights, adv_clips)
    if clean_cache is None:
        clean_cache = first_outputs(weights, clean_clips)
    _SHARED.update(weights=weights, clean=clean_clips, adv=adv_clips, clean_cache=clean_cache,
                   adv_cache=adv_cache, base=base)
    pairs = list(itertools.product(k_grid, lambda_grid))
    grid = []
    try:
        if workers > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                results = pool.map(_grid_point, *zip(*pairs))
                for p in results:
                    grid.append(p)
                    if progress:
                        progress(p)
        else:
            for k, lam in pairs:
                p = _grid_point(k, lam)
                grid.append(p)
                if progress:
                    progress(p)
    finally:
        _SHARED.clear()
    return select_optimum(grid)


def default_k_grid(clean_mse_mean: float, attacked_mse_mean: float, n: int = 10) -> np.ndarray:
    lo, hi = clean_mse_mean, 4.0 * attacked_mse_mean
    if not 0 < lo < hi:
        raise ValueError(f"cannot span k grid from {lo} to {hi}")
    return np.geomspace(lo, hi, n)


DEFAULT_LAMBDAS = np.arange(1, 11) * 0.5


# ---------------------------------------------------------------- latency

@dataclass
class BenchResult:
    clean_fps: float
    adversarial_fps: float
    consistent_fps: float  # frames that took the one-pass path
    flagged_fps: float  # frames that took the two-pass path
    mean_forward: dict[str, float]
    mean_backward: dict[str, float]
    frames: dict[str, int]


def _fps(times) -> float:
    return float(len(times) / sum(times)) if len(times) and sum(times) > 0 else float("nan")


def bench(weights: DetectorWeights, clean_clips: Sequence[VideoClip], adv_clips: Sequence[VideoClip],
          config: DefenseConfig) -> BenchResult:
    """Wall-clock throughput per clip type and per defense path (warm-up excluded)."""
    groups = {"clean": defend_corpus(weights, clean_clips, config).reports,
              "adversarial": defend_corpus(weights, adv_clips, config).reports}
    times, fwd, bwd, frames = {}, {}, {}, {}
    by_path = {True: [], False: []}
    for name, reps in groups.items():
        rs = [r for clip in reps for r in clip if not r.warmup]
        times[name] = [r.wall_time for r in rs]
        fwd[name] = float(np.mean([r.forward_passes for r in rs])) if rs else float("nan")
        bwd[name] = float(np.mean([r.backward_passes for r in rs])) if rs else float("nan")
        frames[name] = len(rs)
        for r in rs:
            by_path[r.flagged].append(r.wall_time)
    return BenchResult(_fps(times["clean"]), _fps(times["adversarial"]), _fps(by_path[False]),
                       _fps(by_path[True]), fwd, bwd, frames)


def time_call(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0
