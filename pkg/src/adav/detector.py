"""Toy one-stage grid detector: forward pass, decoding, NMS, losses, training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

IMG_SIZE = 128
GRID = 16
CELL = IMG_SIZE // GRID  # 8 px per cell
ANCHOR = 32.0
NUM_CLASSES = 3
CHANNELS = 5 + NUM_CLASSES
LOGIT_CLAMP = 15.0
# objectness can never leave (P_MIN, P_MAX) once logits are clamped
P_MIN = float(1.0 / (1.0 + np.exp(LOGIT_CLAMP)))
P_MAX = 1.0 - P_MIN

TX, TY, TW, TH, OBJ = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixels, center format, with a class id."""

    cx: float
    cy: float
    w: float
    h: float
    cls: int = 0

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h, "cls": self.cls}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]), int(d["cls"]))


@dataclass(frozen=True)
class Detection:
    box: Box
    conf: float
    cell: int = 0  # row-major grid cell index, used for deterministic tie-breaks

    @property
    def cls(self) -> int:
        return self.box.cls


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (kh, kw, cin, cout)
    bias: np.ndarray
    stride: int = 1
    pad: int = 0
    relu: bool = True


@dataclass
class DetectorWeights:
    """Conv backbone, optional SPPF block, 1x1 head, optional global-context head.

    SPPF (as in YOLOv5) concatenates the backbone features with three
    cascaded 5x5 max-pools of them and mixes the result with a 1x1 conv.
    The context head is a 1x1 conv on the spatial mean of the final
    features, broadcast-added to the head logits.
    """

    backbone: list[ConvLayer]
    head: ConvLayer
    sppf: ConvLayer | None = None
    context: ConvLayer | None = None

    def all_layers(self) -> list[ConvLayer]:
        extra = [l for l in (self.sppf, self.context) if l is not None]
        return self.backbone + [self.head] + extra

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.all_layers():
            out += [layer.kernel, layer.bias]
        return out

    def copy(self) -> "DetectorWeights":
        def cp(layer):
            if layer is None:
                return None
            return ConvLayer(layer.kernel.copy(), layer.bias.copy(), layer.stride, layer.pad, layer.relu)
        return DetectorWeights([cp(l) for l in self.backbone], cp(self.head), cp(self.sppf), cp(self.context))


def init_weights(seed: int, extra_layers: int = 2, sppf: bool = True, context: bool = True) -> DetectorWeights:
    """He-initialised weights for the 128x128 -> 16x16 architecture.

    ``extra_layers`` stride-1 3x3 convs at grid resolution widen the
    receptive field from 15 px to 15 + 16 * extra_layers px.
    """
    rng = np.random.default_rng(seed)
    shapes = [(3, 3, 3, 16, 2, 1), (3, 3, 16, 32, 2, 1), (3, 3, 32, 32, 2, 1)]
    shapes += [(3, 3, 32, 32, 1, 1)] * extra_layers

    def he(kh, kw, cin, cout, stride, pad):
        std = np.sqrt(2.0 / (kh * kw * cin))
        return ConvLayer(rng.normal(0, std, (kh, kw, cin, cout)), np.zeros(cout), stride, pad)

    backbone = [he(*s) for s in shapes]
    head_b = np.zeros(CHANNELS)
    head_b[OBJ] = -4.0
    head_b[5:] = -2.0
    head = ConvLayer(rng.normal(0, 0.01, (1, 1, 32, CHANNELS)), head_b, 1, 0, relu=False)
    pool = he(1, 1, 128, 32, 1, 0) if sppf else None
    ctx = None
    if context:
        ctx = ConvLayer(rng.normal(0, 0.01, (1, 1, 32, CHANNELS)), np.zeros(CHANNELS), 1, 0, relu=False)
    return _round32(DetectorWeights(backbone, head, pool, ctx))


def _round32(w: DetectorWeights) -> DetectorWeights:
    # weights are stored as float32 so the weight file round-trips exactly
    for layer in w.all_layers():
        layer.kernel = np.ascontiguousarray(layer.kernel, dtype=np.float32)
        layer.bias = np.ascontiguousarray(layer.bias, dtype=np.float32)
    return w


def _check_frame(frame) -> None:
    shape = frame.shape
    if shape[-3:] != (IMG_SIZE, IMG_SIZE, 3) or len(shape) not in (3, 4):
        raise ad.ShapeError(f"frame must be {IMG_SIZE}x{IMG_SIZE}x3, got {shape}")


def forward(weights: DetectorWeights, frame, params: Sequence[Tensor] | None = None) -> Tensor:
    """Activated pre-NMS output grid (16x16x8, or Nx16x16x8 for a batch).

    ``frame`` may be a tracked Tensor (gradients w.r.t. pixels) or an array.
    ``params`` optionally supplies tracked kernel/bias tensors in the order
    of ``weights.arrays()`` for training.
    """
    return activate(forward_logits(weights, frame, params))


def forward_logits(weights: DetectorWeights, frame, params: Sequence[Tensor] | None = None) -> Tensor:
    _check_frame(frame)
    x = ad.as_tensor(frame)
    it = iter(list(params) if params is not None else weights.arrays())
    for layer in weights.backbone:
        x = ad.relu(ad.conv2d(x, next(it), next(it), layer.stride, layer.pad))
    hk, hb = next(it), next(it)
    if weights.sppf is not None:
        p1 = ad.maxpool2d(x, 5)
        p2 = ad.maxpool2d(p1, 5)
        p3 = ad.maxpool2d(p2, 5)
        x = ad.relu(ad.conv2d(ad.concat([x, p1, p2, p3], axis=-1), next(it), next(it), 1, 0))
    logits = ad.conv2d(x, hk, hb, 1, 0)
    if weights.context is not None:
        axes = (1, 2) if len(x.shape) == 4 else (0, 1)
        g = ad.conv2d(ad.mean(x, axis=axes, keepdims=True), next(it), next(it), 1, 0)
        logits = ad.add(logits, g)
    return logits


def activate(logits: Tensor) -> Tensor:
    z = ad.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    return ad.concat([ad.sigmoid(z[..., 0:2]), ad.exp(z[..., 2:4]), ad.sigmoid(z[..., 4:])], axis=-1)


def raw_output(weights: DetectorWeights, frame) -> np.ndarray:
    return forward(weights, frame).data


# ---------------------------------------------------------------- decoding

def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def _clamp_box(cx, cy, w, h, cls) -> Box:
    x0 = np.clip(cx - w / 2, 0.0, IMG_SIZE)
    x1 = np.clip(cx + w / 2, 0.0, IMG_SIZE)
    y0 = np.clip(cy - h / 2, 0.0, IMG_SIZE)
    y1 = np.clip(cy + h / 2, 0.0, IMG_SIZE)
    return Box(float((x0 + x1) / 2), float((y0 + y1) / 2), float(x1 - x0), float(y1 - y0), int(cls))


def decode(raw: np.ndarray, conf_threshold: float = 0.5) -> list[Detection]:
    """Grid cells whose objectness times best class score reaches the threshold."""
    raw = np.asarray(raw)
    cls_scores = raw[..., 5:]
    best = cls_scores.argmax(axis=-1)
    conf = raw[..., OBJ] * cls_scores.max(axis=-1)
    rows, cols = np.nonzero(conf >= conf_threshold)
    dets = []
    for r, c in zip(rows, cols):
        tx, ty, tw, th = raw[r, c, :4]
        box = _clamp_box((c + tx) * CELL, (r + ty) * CELL, tw * ANCHOR, th * ANCHOR, best[r, c])
        if box.w > 0 and box.h > 0:
            dets.append(Detection(box, float(conf[r, c]), int(r * GRID + c)))
    return dets


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    order = sorted(dets, key=lambda d: (-d.conf, d.cell))
    keep: list[Detection] = []
    for d in order:
        if all(k.cls != d.cls or iou(k.box, d.box) <= iou_threshold for k in keep):
            keep.append(d)
    return keep


def detect(weights: DetectorWeights, frame, conf_threshold: float = 0.5, iou_threshold: float = 0.5):
    return nms(decode(raw_output(weights, frame), conf_threshold), iou_threshold)


# ---------------------------------------------------------------- targets and losses

@dataclass
class Targets:
    occ: np.ndarray  # (..., G, G) 1.0 where a GT center falls
    box: np.ndarray  # (..., G, G, 4) tx, ty, tw, th targets in activation space
    cls: np.ndarray  # (..., G, G, C) one-hot


def build_targets(gt: Sequence[Box]) -> Targets:
    occ = np.zeros((GRID, GRID))
    box = np.zeros((GRID, GRID, 4))
    cls = np.zeros((GRID, GRID, NUM_CLASSES))
    for b in gt:
        c = min(int(b.cx // CELL), GRID - 1)
        r = min(int(b.cy // CELL), GRID - 1)
        occ[r, c] = 1.0
        box[r, c] = (b.cx / CELL - c, b.cy / CELL - r, b.w / ANCHOR, b.h / ANCHOR)
        cls[r, c] = 0.0
        cls[r, c, b.cls] = 1.0
    return Targets(occ, box, cls)


def stack_targets(ts: Sequence[Targets]) -> Targets:
    return Targets(np.stack([t.occ for t in ts]), np.stack([t.box for t in ts]), np.stack([t.cls for t in ts]))


def _bce(p: Tensor, target: np.ndarray) -> Tensor:
    p = ad.clip(p, P_MIN, P_MAX)
    # -(t log p + (1-t) log(1-p))
    return -(ad.mul(ad.log(p), target) + ad.mul(ad.log(1.0 - p), 1.0 - target))


def confidence_loss(raw: Tensor, gt: Sequence[Box] | Targets, positive: float = 1.0) -> Tensor:
    """Mean binary cross-entropy between the objectness map and cell occupancy.

    ``positive`` is the target value at occupied cells (1.0 = hard labels).
    """
    t = gt if isinstance(gt, Targets) else build_targets(gt)
    return ad.mean(_bce(ad.as_tensor(raw)[..., OBJ], t.occ * positive))


def vanishing_loss(logits: Tensor, gt: Sequence[Box] | Targets, floor: float = -3.0) -> Tensor:
    """Mean objectness-logit excess over ``floor`` at cells that hold an object.

    Minimising this suppresses true objects. It works on logits because the
    probability-space cross-entropy has vanishing gradient at confident
    objects, and it ignores empty cells so spurious objects earn nothing.
    """
    t = gt if isinstance(gt, Targets) else build_targets(gt)
    n = max(float(t.occ.sum()), 1.0)
    excess = ad.relu(ad.sub(ad.as_tensor(logits)[..., OBJ], floor))
    return ad.mul(ad.total(ad.mul(excess, t.occ)), 1.0 / n)


def detection_loss(raw: Tensor, t: Targets, positive: float = 1.0) -> Tensor:
    """Training loss: confidence BCE + box squared error + class BCE at occupied cells."""
    n_occ = max(t.occ.sum(), 1.0)
    occ = t.occ[..., None]
    box_err = ad.sub(raw[..., 0:4], t.box)
    box_loss = ad.mul(ad.total(ad.mul(ad.mul(box_err, box_err), occ)), 1.0 / n_occ)
    cls_loss = ad.mul(ad.total(ad.mul(_bce(raw[..., 5:], t.cls), occ)), 1.0 / n_occ)
    return confidence_loss(raw, t, positive) + box_loss + cls_loss


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)


def train_detector(dataset: Sequence[tuple[np.ndarray, Sequence[Box]]], epochs: int, lr: float = 3e-3,
                   seed: int = 0, batch_size: int = 16, extra_layers: int = 2, sppf: bool = True,
                   context: bool = True, positive: float = 1.0, init: DetectorWeights | None = None,
                   history: TrainLog | None = None) -> DetectorWeights:
    """Fit the detector with Adam. Deterministic given ``seed``."""
    if len(dataset) == 0:
        raise ValueError("train_detector needs a nonempty dataset")
    weights = init.copy() if init is not None else init_weights(seed, extra_layers, sppf, context)
    frames = np.stack([np.asarray(f, dtype=np.float32) for f, _ in dataset])
    targets = [build_targets(g) for _, g in dataset]
    params = weights.arrays()
    opt = ad.Adam(params, lr=lr)
    rng = np.random.default_rng(seed + 1)
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = ad.Tape()
            tracked = [tape.watch(p) for p in params]
            raw = forward(weights, frames[idx], tracked)
            loss = detection_loss(raw, stack_targets([targets[i] for i in idx]), positive)
            grads = tape.backward(loss, tracked)
            if lr != 0:
                opt.step(grads)
            if history is not None:
                history.losses.append(loss.item())
        log.info("epoch %d loss %.4f", epoch, history.losses[-1] if history else loss.item())
    return _round32(weights)
