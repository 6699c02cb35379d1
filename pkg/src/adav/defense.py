"""Two-stage temporal-consistency defense.

Stage one compares the detector output for the current frame against the
output stored ``queue_seconds`` earlier. Only when the MSE exceeds ``k`` does
stage two run: a guided-backprop saliency map of that MSE, box-filter
suspicion scores, a median + lambda * IQR outlier cut, neutral masking, and
a second detector pass on the masked frame.
"""
from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import detector as det
from .detector import Detection, DetectorWeights

Region = tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)


class ContractError(RuntimeError):
    """Raised when the defense is driven outside its preconditions."""


@dataclass
class DefenseConfig:
    k: float
    lam: float
    region_size: int = 20
    stride: int = 5
    queue_seconds: float = 0.5
    neutral: tuple[float, float, float] = (0.5, 0.5, 0.5)
    conf_threshold: float = 0.5
    nms_iou: float = 0.5

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("k must be positive")
        if not (self.region_size >= self.stride >= 1):
            raise ValueError("need region_size >= stride >= 1")
        self.neutral = tuple(float(c) for c in self.neutral)

    def capacity(self, fps: float) -> int:
        cap = int(round(self.queue_seconds * fps))
        if cap < 1:
            raise ValueError(f"queue_seconds * fps must be >= 1 (got {self.queue_seconds} * {fps})")
        return cap

    def to_json(self) -> str:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["neutral"] = list(self.neutral)
        order = ["k", "lambda", "region_size", "stride", "queue_seconds", "neutral", "conf_threshold", "nms_iou"]
        return json.dumps({key: d[key] for key in order}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DefenseConfig":
        d = json.loads(text)
        expected = {"k", "lambda", "region_size", "stride", "queue_seconds", "neutral", "conf_threshold", "nms_iou"}
        unknown = set(d) - expected
        if unknown:
            raise ValueError(f"unknown DefenseConfig fields: {sorted(unknown)}")
        d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class SuspicionMap:
    scores: np.ndarray  # (rows, cols) box-filter sums of saliency
    median: float
    iqr: float
    threshold: float
    region_size: int
    stride: int

    def region(self, i: int, j: int) -> Region:
        y0, x0 = i * self.stride, j * self.stride
        return (x0, y0, x0 + self.region_size, y0 + self.region_size)


@dataclass
class FrameReport:
    index: int
    mse_to_reference: float | None
    flagged: bool
    masked_regions: list[Region] = field(default_factory=list)
    forward_passes: int = 1
    backward_passes: int = 0
    wall_time: float = 0.0
    warmup: bool = False

    def to_json(self) -> str:
        d = asdict(self)
        d["masked_regions"] = [list(r) for r in self.masked_regions]
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "FrameReport":
        d = json.loads(line)
        d["masked_regions"] = [tuple(r) for r in d["masked_regions"]]
        return cls(**d)


class DefenseState:
    """Cleaned-output FIFO plus everything needed to defend one stream."""

    def __init__(self, config: DefenseConfig, fps: float, weights: DetectorWeights | None = None):
        self.config = config
        self.fps = fps
        self.weights = weights
        self.capacity = config.capacity(fps)
        self.queue: deque[np.ndarray] = deque(maxlen=self.capacity)
        self.frames_seen = 0

    @property
    def warm(self) -> bool:
        return len(self.queue) == self.capacity

    def reference(self) -> np.ndarray:
        if not self.warm:
            raise ContractError(f"queue holds {len(self.queue)} of {self.capacity} outputs")
        return self.queue[0]

    def push(self, raw: np.ndarray) -> None:
        self.queue.append(raw)


def init_state(config: DefenseConfig, fps: float, warmup_outputs, weights: DetectorWeights | None = None
               ) -> DefenseState:
    state = DefenseState(config, fps, weights)
    if len(warmup_outputs) != state.capacity:
        raise ContractError(f"warm-up needs exactly {state.capacity} outputs, got {len(warmup_outputs)}")
    for raw in warmup_outputs:
        state.push(np.asarray(raw))
    state.frames_seen = state.capacity
    return state


def check_consistency(current: np.ndarray, state: DefenseState, k: float) -> tuple[bool, float]:
    """Temporal consistency is broken when the MSE to the oldest queued output exceeds k."""
    ref = state.reference()
    current = np.asarray(current)
    if current.shape != ref.shape:
        raise ad.ShapeError(f"output shape {current.shape} does not match reference {ref.shape}")
    diff = current.astype(np.float64).ravel() - ref.astype(np.float64).ravel()
    m = float(np.dot(diff, diff) / diff.size)
    return m > k, m


# ---------------------------------------------------------------- localization

def box_scores(saliency: np.ndarray, region_size: int, stride: int) -> np.ndarray:
    """Sum of saliency inside every region_size window placed at multiples of stride."""
    h, w = saliency.shape
    rows = (h - region_size) // stride + 1
    cols = (w - region_size) // stride + 1
    sat = np.zeros((h + 1, w + 1))
    sat[1:, 1:] = np.cumsum(np.cumsum(saliency.astype(np.float64), axis=0), axis=1)
    y0 = np.arange(rows) * stride
    x0 = np.arange(cols) * stride
    y1, x1 = y0 + region_size, x0 + region_size
    out = sat[np.ix_(y1, x1)] - sat[np.ix_(y0, x1)] - sat[np.ix_(y1, x0)] + sat[np.ix_(y0, x0)]
    return np.maximum(out, 0.0)  # cancellation can leave tiny negatives


def suspicion_map_from_scores(scores: np.ndarray, lam: float, region_size: int = 20, stride: int = 5
                              ) -> SuspicionMap:
    """Attach the median + lambda * IQR cut (linear-interpolated quartiles) to region scores."""
    q1, med, q3 = np.percentile(scores, [25, 50, 75])
    iqr = float(q3 - q1)
    # iqr == 0 with an infinite lambda would give nan; the cut is then just the median
    thr = float(med + lam * iqr) if iqr > 0 else float(med)
    return SuspicionMap(scores, float(med), iqr, thr, region_size, stride)


def suspicion_map(saliency: np.ndarray, lam: float, region_size: int = 20, stride: int = 5) -> SuspicionMap:
    return suspicion_map_from_scores(box_scores(saliency, region_size, stride), lam, region_size, stride)


def saliency(weights: DetectorWeights, frame: np.ndarray, reference: np.ndarray,
             tape: ad.Tape | None = None, x: ad.Tensor | None = None, raw: ad.Tensor | None = None
             ) -> np.ndarray:
    """Channel-summed |guided gradient| of MSE(output, reference) w.r.t. the pixels.

    Pass an existing ``tape``/``x``/``raw`` to reuse a recorded forward pass.
    """
    if tape is None:
        tape = ad.Tape()
        x = tape.watch(np.asarray(frame, dtype=np.float32))
        raw = det.forward(weights, x)
    loss = ad.mse(raw, np.asarray(reference))  # reference is a constant
    (g,) = tape.backward(loss, [x], mode=ad.GradMode.GUIDED)
    return np.abs(g).sum(axis=-1)


def localize(weights: DetectorWeights, frame: np.ndarray, reference: np.ndarray, config: DefenseConfig
             ) -> SuspicionMap:
    sal = saliency(weights, frame, reference)
    return suspicion_map(sal, config.lam, config.region_size, config.stride)


def select_regions(smap: SuspicionMap) -> list[Region]:
    """Regions whose suspicion score strictly exceeds median + lambda * IQR."""
    s = smap.scores
    if s.size == 0 or np.all(s == s.flat[0]):
        return []
    rows, cols = np.nonzero(s > smap.threshold)
    return [smap.region(int(i), int(j)) for i, j in zip(rows, cols)]


def mask_regions(frame: np.ndarray, regions, neutral=(0.5, 0.5, 0.5)) -> np.ndarray:
    out = np.array(frame, copy=True)
    if not regions:
        return out
    mask = np.zeros(out.shape[:2], dtype=bool)
    h, w = mask.shape
    for x0, y0, x1, y1 in regions:
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            raise ValueError(f"region {(x0, y0, x1, y1)} outside {w}x{h} frame")
        mask[y0:y1, x0:x1] = True
    out[mask] = np.asarray(neutral, dtype=out.dtype)
    return out


# ---------------------------------------------------------------- per-frame pipeline

def postprocess(raw: np.ndarray, config: DefenseConfig) -> list[Detection]:
    return det.nms(det.decode(raw, config.conf_threshold), config.nms_iou)


def process_frame(state: DefenseState, frame: np.ndarray, first_output: np.ndarray | None = None
                  ) -> tuple[list[Detection], FrameReport]:
    """Defend one frame and append its (possibly cleaned) output to the queue.

    ``first_output`` may carry a cached detector output for the unmodified
    frame (it does not depend on the defense config); pass counts in the
    report stay those of the algorithm.
    """
    if state.weights is None:
        raise ContractError("DefenseState has no detector weights")
    cfg = state.config
    t0 = time.perf_counter()
    ref = state.reference()
    tape = ad.Tape()
    if first_output is None:
        x = tape.watch(np.asarray(frame, dtype=np.float32))
        raw_t = det.forward(state.weights, x)
        raw = raw_t.data
    else:
        x = raw_t = None
        raw = np.asarray(first_output)
    broken, m = check_consistency(raw, state, cfg.k)
    report = FrameReport(state.frames_seen, m, broken)
    if broken:
        if raw_t is None:
            sal = saliency(state.weights, frame, ref)
        else:
            sal = saliency(state.weights, frame, ref, tape, x, raw_t)
        regions = select_regions(suspicion_map(sal, cfg.lam, cfg.region_size, cfg.stride))
        cleaned = mask_regions(frame, regions, cfg.neutral)
        raw = det.raw_output(state.weights, cleaned)
        report.masked_regions = regions
        report.forward_passes, report.backward_passes = 2, 1
    tape.clear()
    state.push(raw)
    dets = postprocess(raw, cfg)
    state.frames_seen += 1
    report.wall_time = time.perf_counter() - t0
    return dets, report


@dataclass
class StreamResult:
    detections: list[list[Detection]]
    reports: list[FrameReport]


def run_stream(weights: DetectorWeights, frames, fps: float, config: DefenseConfig,
               first_outputs=None) -> StreamResult:
    """Warm up on the first queue_seconds of frames (undefended), then defend the rest.

    ``first_outputs`` optionally caches the undefended output of every frame.
    """
    state = DefenseState(config, fps, weights)
    cap = state.capacity
    if len(frames) < cap + 1:
        raise ContractError(f"stream needs at least {cap + 1} frames for a {cap}-frame warm-up")
    dets_out, reports = [], []
    for i in range(cap):
        t0 = time.perf_counter()
        raw = det.raw_output(weights, frames[i]) if first_outputs is None else first_outputs[i]
        state.push(raw)
        dets_out.append(postprocess(raw, config))
        reports.append(FrameReport(i, None, False, [], 1, 0, time.perf_counter() - t0, warmup=True))
    state.frames_seen = cap
    for i in range(cap, len(frames)):
        d, r = process_frame(state, frames[i], None if first_outputs is None else first_outputs[i])
        dets_out.append(d)
        reports.append(r)
    return StreamResult(dets_out, reports)


def run_undefended(weights: DetectorWeights, frames, config: DefenseConfig) -> list[list[Detection]]:
    return [postprocess(det.raw_output(weights, f), config) for f in frames]
