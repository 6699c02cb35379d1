"""Binary artifact formats (weights, patch, clip) with JSON sidecars.

All integers are little-endian uint32, all arrays little-endian float32,
row-major. Every file starts with an 8-byte magic string.

Weights  ``ADAVWTS1``: flags (bit 0 SPPF, bit 1 context), backbone layer
         count, then per layer ``kh kw cin cout stride pad relu`` followed by
         the kernel and bias. Layer order: backbone, head, SPPF, context.
Patch    ``ADAVPCH1``: base_size, then base*base*3 floats (HWC).
Clip     ``ADAVVID1``: width, height, channels, frame_count, fps (float32),
         then the frames (HWC). Labels go to ``<clip>.labels.json`` and the
         patch trajectory (attacked clips only) to ``<clip>.traj.json``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .detector import Box, ConvLayer, DetectorWeights
from .scenes import VideoClip
from .threat import Patch, Trajectory

WEIGHTS_MAGIC = b"ADAVWTS1"
PATCH_MAGIC = b"ADAVPCH1"
CLIP_MAGIC = b"ADAVVID1"
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """An artifact file is truncated, mislabelled, or inconsistent."""


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals[0] if n == 1 else vals

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=_F32).astype(np.float32)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def _open(path, magic: bytes) -> _Reader:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise FileNotFoundError(f"cannot read {path}: {e.strerror}") from e
    if buf[:8] != magic:
        raise FormatError(f"{path}: bad magic {buf[:8]!r}, expected {magic!r}")
    r = _Reader(buf, path)
    r.pos = 8
    return r


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype=_F32).tobytes()


# ---------------------------------------------------------------- weights

def weights_bytes(w: DetectorWeights) -> bytes:
    flags = (1 if w.sppf is not None else 0) | (2 if w.context is not None else 0)
    parts = [WEIGHTS_MAGIC, struct.pack("<2I", flags, len(w.backbone))]
    for layer in w.all_layers():
        kh, kw, cin, cout = layer.kernel.shape
        parts.append(struct.pack("<7I", kh, kw, cin, cout, layer.stride, layer.pad, int(layer.relu)))
        parts += [_f32_bytes(layer.kernel), _f32_bytes(layer.bias)]
    return b"".join(parts)


def save_weights(path, w: DetectorWeights) -> None:
    atomic_write(path, weights_bytes(w))


def load_weights(path) -> DetectorWeights:
    r = _open(path, WEIGHTS_MAGIC)
    flags, n_backbone = r.u32(2)
    if flags > 3:
        raise FormatError(f"{path}: unknown flags {flags}")

    def layer():
        kh, kw, cin, cout, stride, pad, relu = r.u32(7)
        if min(kh, kw, cin, cout, stride) == 0 or relu > 1:
            raise FormatError(f"{path}: bad layer header {(kh, kw, cin, cout, stride, pad, relu)}")
        kernel = r.f32(kh * kw * cin * cout).reshape(kh, kw, cin, cout)
        return ConvLayer(kernel, r.f32(cout), stride, pad, bool(relu))

    backbone = [layer() for _ in range(n_backbone)]
    head = layer()
    sppf = layer() if flags & 1 else None
    context = layer() if flags & 2 else None
    r.done()
    return DetectorWeights(backbone, head, sppf, context)


# ---------------------------------------------------------------- patch

def patch_bytes(p: Patch) -> bytes:
    return PATCH_MAGIC + struct.pack("<I", p.base_size) + _f32_bytes(p.pixels)


def save_patch(path, p: Patch) -> None:
    atomic_write(path, patch_bytes(p))


def load_patch(path) -> Patch:
    r = _open(path, PATCH_MAGIC)
    base = r.u32()
    if base == 0:
        raise FormatError(f"{path}: zero patch size")
    px = r.f32(base * base * 3).reshape(base, base, 3)
    r.done()
    return Patch(px)


# ---------------------------------------------------------------- clips

def clip_bytes(c: VideoClip) -> bytes:
    t, h, w, ch = c.frames.shape
    return CLIP_MAGIC + struct.pack("<4If", w, h, ch, t, c.fps) + _f32_bytes(c.frames)


def labels_json(c: VideoClip) -> str:
    return json.dumps({"fps": c.fps, "frames": [[b.to_dict() for b in frame] for frame in c.labels]},
                      sort_keys=True)


def sidecars(path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_name(path.name + ".labels.json"), path.with_name(path.name + ".traj.json")


def save_clip(path, c: VideoClip) -> None:
    lab, traj = sidecars(path)
    atomic_write(path, clip_bytes(c))
    atomic_write(lab, labels_json(c))
    if c.trajectory is not None:
        atomic_write(traj, json.dumps(c.trajectory.to_dict(), sort_keys=True))
    elif traj.exists():
        traj.unlink()


def load_clip(path) -> VideoClip:
    r = _open(path, CLIP_MAGIC)
    w, h, ch, t = r.u32(4)
    (fps,) = struct.unpack("<f", r.take(4))
    frames = r.f32(t * h * w * ch).reshape(t, h, w, ch)
    r.done()
    lab, traj = sidecars(path)
    try:
        doc = json.loads(lab.read_text())
        labels = [[Box.from_dict(b) for b in frame] for frame in doc["frames"]]
        trajectory = Trajectory.from_dict(json.loads(traj.read_text())) if traj.exists() else None
    except FileNotFoundError as e:
        raise FileNotFoundError(f"missing sidecar for {path}: {e.filename}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad sidecar ({e})") from e
    try:
        return VideoClip(frames, float(fps), labels, trajectory)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
