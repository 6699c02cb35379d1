"""Seeded synthetic driving-like clips with exact box labels."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .detector import IMG_SIZE, NUM_CLASSES, Box

CLASS_COLORS = np.array([
    [0.85, 0.15, 0.12],  # vehicle-like: red
    [0.15, 0.30, 0.90],  # sign-like: blue
    [0.20, 0.80, 0.20],  # pedestrian-like: green
])
# (w range, h range) per class
CLASS_SIZES = [((20, 30), (12, 18)), ((10, 15), (18, 26)), ((12, 18), (12, 18))]
MAX_SPEED = 6.0  # px/s
MIN_GAP = 3.0  # px between object boxes at all times


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    fps: float = 30.0
    labels: list[list[Box]] = field(default_factory=list)
    trajectory: Any = None  # threat.Trajectory for attacked clips

    def __post_init__(self):
        if len(self.labels) != len(self.frames):
            raise ValueError("label count must equal frame count")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self):
        return len(self.frames)


@dataclass
class _Mover:
    cls: int
    w: int
    h: int
    x0: float  # top-left at t=0
    y0: float
    vx: float
    vy: float
    color: np.ndarray
    texture: np.ndarray

    def topleft(self, t: float):
        return self.x0 + self.vx * t, self.y0 + self.vy * t


def _background(rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.30, 0.55, size=3)
    # smooth low-frequency blotches + fine grain
    coarse = rng.normal(0, 0.06, size=(9, 9, 3))
    ys = np.linspace(0, 8, IMG_SIZE)
    i0 = np.floor(ys).astype(int).clip(0, 7)
    f = (ys - i0)[:, None]
    rowsi = coarse[i0] * (1 - f[..., None]) + coarse[i0 + 1] * f[..., None]  # (H, 9, 3)
    smooth = rowsi[:, i0] * (1 - f[None, :, :]) + rowsi[:, i0 + 1] * f[None, :, :]
    horizon = np.linspace(0.08, -0.05, IMG_SIZE)[:, None, None]
    grain = rng.normal(0, 0.02, size=(IMG_SIZE, IMG_SIZE, 3))
    return np.clip(base + smooth + horizon + grain, 0.0, 1.0)


def _boxes_at(movers, t):
    out = []
    for m in movers:
        x, y = m.topleft(t)
        out.append((x, y, x + m.w, y + m.h))
    return out


def _valid(movers, duration) -> bool:
    for t in np.linspace(0.0, duration, 13):
        rects = _boxes_at(movers, t)
        for x0, y0, x1, y1 in rects:
            # 1 px margin for per-frame jitter
            if x0 < 1 or y0 < 1 or x1 > IMG_SIZE - 1 or y1 > IMG_SIZE - 1:
                return False
        for i in range(len(rects)):
            for j in range(i + 1, len(rects)):
                a, b = rects[i], rects[j]
                if (a[0] < b[2] + MIN_GAP and b[0] < a[2] + MIN_GAP
                        and a[1] < b[3] + MIN_GAP and b[1] < a[3] + MIN_GAP):
                    return False
    return True


def _sample_movers(rng, duration) -> list[_Mover]:
    n = int(rng.integers(2, 6))
    while True:
        movers = []
        for _ in range(n):
            cls = int(rng.integers(NUM_CLASSES))
            (wl, wh), (hl, hh) = CLASS_SIZES[cls]
            w, h = int(rng.integers(wl, wh + 1)), int(rng.integers(hl, hh + 1))
            speed = rng.uniform(0, MAX_SPEED)
            ang = rng.uniform(0, 2 * np.pi)
            color = np.clip(CLASS_COLORS[cls] + rng.uniform(-0.08, 0.08, 3), 0, 1)
            texture = rng.normal(0, 0.03, size=(h, w, 3))
            movers.append(_Mover(cls, w, h, rng.uniform(1, IMG_SIZE - 1 - w), rng.uniform(1, IMG_SIZE - 1 - h),
                                 speed * np.cos(ang), speed * np.sin(ang), color, texture))
        # rejection: every object stays in frame and apart for the whole clip
        for _ in range(50):
            if _valid(movers, duration):
                return movers
            for m in movers:
                m.x0 = rng.uniform(1, IMG_SIZE - 1 - m.w)
                m.y0 = rng.uniform(1, IMG_SIZE - 1 - m.h)
        n = max(2, n - 1)


def render_frame(bg: np.ndarray, movers, t: float, brightness: float, jitter) -> tuple[np.ndarray, list[Box]]:
    frame = bg * brightness
    labels = []
    for m, (jx, jy) in zip(movers, jitter):
        x, y = m.topleft(t)
        x0 = int(np.clip(round(x) + jx, 0, IMG_SIZE - m.w))
        y0 = int(np.clip(round(y) + jy, 0, IMG_SIZE - m.h))
        frame[y0:y0 + m.h, x0:x0 + m.w] = (m.color + m.texture) * brightness
        labels.append(Box(x0 + m.w / 2, y0 + m.h / 2, float(m.w), float(m.h), m.cls))
    return np.clip(frame, 0.0, 1.0), labels


def gen_clean_clip(seed: int, duration: float = 6.0, fps: float = 30.0) -> VideoClip:
    """Deterministic clip of 2-5 slowly moving colored boxes on a textured road-like background."""
    rng = np.random.default_rng(seed)
    n_frames = int(round(duration * fps))
    if n_frames < 2:
        raise ValueError("clip must contain at least two frames")
    bg = _background(rng)
    movers = _sample_movers(rng, duration)
    drift_amp = rng.uniform(0.0, 0.06)
    drift_period = rng.uniform(8.0, 20.0)
    drift_phase = rng.uniform(0, 2 * np.pi)
    frames = np.empty((n_frames, IMG_SIZE, IMG_SIZE, 3), dtype=np.float32)
    labels = []
    for i in range(n_frames):
        t = i / fps
        bright = 1.0 + drift_amp * np.sin(2 * np.pi * t / drift_period + drift_phase)
        jitter = rng.integers(-1, 2, size=(len(movers), 2))
        frame, lab = render_frame(bg, movers, t, bright, jitter)
        frames[i] = frame
        labels.append(lab)
    return VideoClip(frames, float(fps), labels)


def sample_frames(seeds, per_clip: int, duration: float = 6.0, fps: float = 30.0):
    """(frame, labels) pairs drawn evenly from clips generated with ``seeds``."""
    out = []
    for s in seeds:
        clip = gen_clean_clip(int(s), duration, fps)
        idx = np.linspace(0, len(clip) - 1, per_clip).round().astype(int)
        out += [(clip.frames[i].copy(), clip.labels[i]) for i in idx]
    return out
