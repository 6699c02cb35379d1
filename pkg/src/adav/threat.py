"""Object-vanishing patch: placement, EOT training, and attacked-clip synthesis."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import detector as det
from .detector import IMG_SIZE, Box, DetectorWeights
from .scenes import VideoClip

log = logging.getLogger(__name__)

DEFAULT_BASE = 40  # 40^2 / 128^2 = 9.77% of the frame
SCALE_RANGE = (0.2, 2.0)
SPEED_RANGE = (50.0, 200.0)  # px/s along random-walk legs


@dataclass
class Patch:
    pixels: np.ndarray  # (base, base, 3) in [0, 1]

    @property
    def base_size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class PlacementTransform:
    cx: float
    cy: float
    scale: float


def patch_extent(t: PlacementTransform, base: int) -> tuple[int, int, int]:
    """Top-left corner and side length of the pasted patch (may extend past the frame)."""
    size = max(1, int(round(base * t.scale)))
    x0 = int(math.floor(t.cx - size / 2 + 0.5))
    y0 = int(math.floor(t.cy - size / 2 + 0.5))
    return x0, y0, size


def _placement(frame_shape, patch: Patch, t: PlacementTransform):
    h, w = frame_shape[:2]
    x0, y0, size = patch_extent(t, patch.base_size)
    fx0, fy0 = max(x0, 0), max(y0, 0)
    fx1, fy1 = min(x0 + size, w), min(y0 + size, h)
    if fx0 >= fx1 or fy0 >= fy1:
        raise ValueError(f"patch placement {t} does not overlap the frame")
    # nearest-neighbour source index for every destination row/col
    src_r = ((np.arange(fy0, fy1) - y0) * patch.base_size) // size
    src_c = ((np.arange(fx0, fx1) - x0) * patch.base_size) // size
    return (fy0, fy1, fx0, fx1), src_r, src_c


def apply_patch(frame: np.ndarray, patch: Patch, t: PlacementTransform) -> np.ndarray:
    """Paste the nearest-neighbour resized patch, clipped at the frame border."""
    (y0, y1, x0, x1), src_r, src_c = _placement(frame.shape, patch, t)
    out = frame.copy()
    out[y0:y1, x0:x1] = patch.pixels[np.ix_(src_r, src_c)]
    return out


def patch_region(frame_shape, patch: Patch, t: PlacementTransform) -> tuple[int, int, int, int]:
    """(y0, y1, x0, x1) of the in-frame part of the placed patch."""
    return _placement(frame_shape, patch, t)[0]


def patch_grad(frame_grad: np.ndarray, patch: Patch, t: PlacementTransform) -> np.ndarray:
    """Chain a gradient w.r.t. the patched frame back onto the patch pixels."""
    (y0, y1, x0, x1), src_r, src_c = _placement(frame_grad.shape, patch, t)
    g = np.zeros(patch.pixels.shape, dtype=np.float64)
    rr, cc = np.meshgrid(src_r, src_c, indexing="ij")
    np.add.at(g, (rr, cc), frame_grad[y0:y1, x0:x1])
    return g


def sample_transform(rng: np.random.Generator, frame_dims=(IMG_SIZE, IMG_SIZE), scale_range=(1.0, 1.0),
                     base: int = DEFAULT_BASE) -> PlacementTransform:
    """Uniform scale, then a uniform center among those keeping the patch fully in frame."""
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise ValueError(f"bad scale range {scale_range}")
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    size = max(1, int(round(base * scale)))
    h, w = frame_dims
    half = size / 2
    cx = float(rng.uniform(half, max(half, w - half)))
    cy = float(rng.uniform(half, max(half, h - half)))
    return PlacementTransform(cx, cy, scale)


def train_patch(weights: DetectorWeights, dataset: Sequence[tuple[np.ndarray, Sequence[Box]]], steps: int,
                lr: float = 0.1, seed: int = 0, base: int = DEFAULT_BASE, scale_range=(0.75, 1.5),
                history: list | None = None) -> Patch:
    """Expectation-over-transformation ascent on the vanishing objective.

    Each step draws one frame and one placement, pastes the patch, and takes
    an Adam ascent step on the patch pixels followed by projection to [0, 1].
    """
    if steps < 1:
        raise ValueError("train_patch needs at least one step")
    if not dataset:
        raise ValueError("train_patch needs a nonempty dataset")
    rng = np.random.default_rng(seed)
    patch = Patch(rng.uniform(0.0, 1.0, size=(base, base, 3)).astype(np.float32))
    targets = [det.build_targets(g) for _, g in dataset]
    master = patch.pixels.astype(np.float64)
    opt = ad.Adam([master], lr=lr)
    for _ in range(steps):
        i = int(rng.integers(len(dataset)))
        t = sample_transform(rng, scale_range=scale_range, base=base)
        frame = apply_patch(np.asarray(dataset[i][0], dtype=np.float32), patch, t)
        tape = ad.Tape()
        x = tape.watch(frame)
        loss = det.vanishing_loss(det.forward_logits(weights, x), targets[i])
        (gx,) = tape.backward(loss, [x])
        opt.step([patch_grad(gx, patch, t)])
        np.clip(master, 0.0, 1.0, out=master)
        patch.pixels = master.astype(np.float32)
        if history is not None:
            history.append(loss.item())
    return patch


# ---------------------------------------------------------------- attacked video

@dataclass
class Trajectory:
    insertion_time: float
    waypoints: list[tuple[float, float, float]]  # (x, y, arrival time)
    amplitude: float
    period: float
    phase: float
    offset: float
    present: list[bool] = field(default_factory=list)
    transforms: list[PlacementTransform | None] = field(default_factory=list)

    def scale_at(self, t: float) -> float:
        return self.offset + self.amplitude * math.sin(2 * math.pi * t / self.period + self.phase)

    def position_at(self, t: float) -> tuple[float, float]:
        wps = self.waypoints
        if t <= wps[0][2]:
            return wps[0][0], wps[0][1]
        for (xa, ya, ta), (xb, yb, tb) in zip(wps, wps[1:]):
            if t <= tb:
                f = (t - ta) / (tb - ta) if tb > ta else 1.0
                return xa + f * (xb - xa), ya + f * (yb - ya)
        return wps[-1][0], wps[-1][1]

    def to_dict(self) -> dict:
        return {
            "insertion_time": self.insertion_time,
            "waypoints": [{"x": x, "y": y, "t": t} for x, y, t in self.waypoints],
            "sinusoid": {"amplitude": self.amplitude, "period": self.period,
                         "phase": self.phase, "offset": self.offset},
            "frames": [
                {"present": p, "cx": tr.cx, "cy": tr.cy, "scale": tr.scale} if tr is not None
                else {"present": False}
                for p, tr in zip(self.present, self.transforms)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        s = d["sinusoid"]
        traj = cls(float(d["insertion_time"]), [(w["x"], w["y"], w["t"]) for w in d["waypoints"]],
                   s["amplitude"], s["period"], s["phase"], s["offset"])
        for f in d["frames"]:
            traj.present.append(bool(f["present"]))
            traj.transforms.append(PlacementTransform(f["cx"], f["cy"], f["scale"]) if "cx" in f else None)
        return traj


def sample_trajectory(rng: np.random.Generator, duration: float, fps: float, n_frames: int,
                      frame_dims=(IMG_SIZE, IMG_SIZE)) -> Trajectory:
    h, w = frame_dims
    hi_t = max(1.0, min(10.0, duration - 1.0))
    insertion = float(rng.uniform(1.0, hi_t))
    x, y = float(rng.uniform(0, w)), float(rng.uniform(0, h))
    waypoints = [(x, y, insertion)]
    t = insertion
    while t < duration:
        nx, ny = float(rng.uniform(0, w)), float(rng.uniform(0, h))
        speed = float(rng.uniform(*SPEED_RANGE))
        t += max(math.hypot(nx - x, ny - y) / speed, 1e-6)
        waypoints.append((nx, ny, t))
        x, y = nx, ny
    lo = float(rng.uniform(SCALE_RANGE[0], 0.9))
    hi = float(rng.uniform(1.0, SCALE_RANGE[1]))
    traj = Trajectory(insertion, waypoints, amplitude=(hi - lo) / 2, period=float(rng.uniform(2.0, 8.0)),
                      phase=float(rng.uniform(0, 2 * math.pi)), offset=(hi + lo) / 2)
    for i in range(n_frames):
        ti = i / fps
        if ti >= insertion:
            px, py = traj.position_at(ti)
            scale = min(max(traj.scale_at(ti), SCALE_RANGE[0]), SCALE_RANGE[1])
            traj.present.append(True)
            traj.transforms.append(PlacementTransform(px, py, scale))
        else:
            traj.present.append(False)
            traj.transforms.append(None)
    return traj


def make_adversarial_clip(clean: VideoClip, patch: Patch, seed: int) -> VideoClip:
    """Insert the patch at a random time and move it along a random walk with sinusoidal scale."""
    if clean.trajectory is not None:
        raise ValueError("source clip is already attacked")
    n = len(clean)
    duration = n / clean.fps
    if duration <= 1.0:
        raise ValueError("clip must be longer than 1 s to insert a patch after the first second")
    rng = np.random.default_rng(seed)
    traj = sample_trajectory(rng, duration, clean.fps, n, clean.frames.shape[1:3])
    frames = clean.frames.copy()
    for i, tr in enumerate(traj.transforms):
        if tr is not None:
            frames[i] = apply_patch(frames[i], patch, tr)
    return VideoClip(frames, clean.fps, [list(l) for l in clean.labels], traj)
