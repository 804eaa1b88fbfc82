"""Video ingestion, emission, and deterministic synthetic content.

A video is a (T, H, W, 3) float32 array with values in [0, 1]. On disk the
native format is planar RGB, 8-bit, frame-major (<name>.rgb) with a text
sidecar <name>.dims holding "T H W"; a directory of numerically named PNG
frames is also accepted (Pillow, optional).
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np


class VideoIOError(OSError):
    """Base for video I/O failures."""


class MissingFrameError(VideoIOError):
    pass


class DimensionError(VideoIOError):
    pass


class SidecarError(VideoIOError):
    pass


def _check_video(v: np.ndarray) -> np.ndarray:
    if v.ndim != 4 or v.shape[3] != 3:
        raise DimensionError(f"expected (T, H, W, 3), got {v.shape}")
    return v


def sidecar_path(rgb_path: str) -> str:
    base, _ = os.path.splitext(rgb_path)
    return base + ".dims"


def save_video(video: np.ndarray, path: str) -> None:
    """Write 8-bit frames: raw planar RGB for *.rgb, else PNGs into a directory."""
    video = _check_video(np.asarray(video))
    data = np.round(np.clip(video, 0.0, 1.0) * 255.0).astype(np.uint8)
    if path.endswith(".rgb"):
        T, H, W, _ = data.shape
        planar = np.ascontiguousarray(data.transpose(0, 3, 1, 2))  # T,3,H,W
        with open(path, "wb") as fh:
            fh.write(planar.tobytes())
        with open(sidecar_path(path), "w") as fh:
            fh.write(f"{T} {H} {W}\n")
    else:
        from PIL import Image  # optional dependency, PNG path only
        os.makedirs(path, exist_ok=True)
        for t in range(data.shape[0]):
            Image.fromarray(data[t]).save(os.path.join(path, f"{t:05d}.png"))


def load_video(path: str) -> np.ndarray:
    """Read a *.rgb file (with sidecar) or a directory of numbered PNG frames."""
    if os.path.isdir(path):
        return _load_png_dir(path)
    if not path.endswith(".rgb"):
        raise VideoIOError(f"{path}: expected a .rgb file or a frame directory")
    side = sidecar_path(path)
    try:
        with open(side) as fh:
            text = fh.read()
    except OSError as exc:
        raise SidecarError(f"cannot read sidecar {side}: {exc}") from exc
    parts = text.split()
    if len(parts) != 3 or not all(p.isdigit() for p in parts):
        raise SidecarError(f"{side}: expected three integers 'T H W', got {text!r}")
    T, H, W = (int(p) for p in parts)
    if min(T, H, W) < 1:
        raise SidecarError(f"{side}: dimensions must be positive")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != T * 3 * H * W:
        raise DimensionError(
            f"{path}: file holds {raw.size} bytes but sidecar implies {T * 3 * H * W}")
    frames = raw.reshape(T, 3, H, W).transpose(0, 2, 3, 1)
    return frames.astype(np.float32) / 255.0


def _load_png_dir(path: str) -> np.ndarray:
    from PIL import Image
    by_index: dict[int, str] = {}
    for name in os.listdir(path):
        m = re.fullmatch(r"(\d+)\.png", name)
        if m:
            by_index[int(m.group(1))] = os.path.join(path, name)
    if not by_index:
        raise VideoIOError(f"{path}: no numbered .png frames found")
    count = max(by_index) + 1
    frames = []
    shape = None
    for t in range(count):
        if t not in by_index:
            raise MissingFrameError(f"{path}: frame {t} missing")
        arr = np.asarray(Image.open(by_index[t]).convert("RGB"))
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise DimensionError(
                f"{path}: frame {t} is {arr.shape[:2]}, expected {shape[:2]}")
        frames.append(arr)
    return np.stack(frames).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# synthetic content


SYNTH_KINDS = ("static_bg_moving_square", "text_grid", "smooth_gradient_pan")


@dataclass(frozen=True)
class SynthSpec:
    kind: str
    T: int
    H: int
    W: int
    seed: int = 0
    square_size: int = 12
    velocity: tuple[int, int] = (3, 2)
    cell: int = 8
    scene_interval: int = 4
    pan_speed: float = 1.5

    def validate(self) -> "SynthSpec":
        if self.kind not in SYNTH_KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if min(self.T, self.H, self.W) < 1:
            raise ValueError("T, H, W must be positive")
        return self


def synth_video(spec: SynthSpec) -> np.ndarray:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    maker = {
        "static_bg_moving_square": _synth_square,
        "text_grid": _synth_text_grid,
        "smooth_gradient_pan": _synth_pan,
    }[spec.kind]
    video = maker(spec, rng)
    return np.clip(video, 0.0, 1.0).astype(np.float32)


def _synth_square(spec: SynthSpec, rng) -> np.ndarray:
    # smoothed random texture, fixed over time
    noise = rng.random((spec.H, spec.W, 3))
    bg = noise.copy()
    for _ in range(3):
        bg = 0.25 * (np.roll(bg, 1, 0) + np.roll(bg, -1, 0)
                     + np.roll(bg, 1, 1) + np.roll(bg, -1, 1))
    bg = 0.25 + 0.5 * bg
    color = rng.random(3) * 0.8 + 0.1
    s = min(spec.square_size, spec.H, spec.W)
    x0, y0 = int(rng.integers(spec.W)), int(rng.integers(spec.H))
    vy, vx = spec.velocity
    video = np.repeat(bg[None], spec.T, axis=0)
    for t in range(spec.T):
        ys = (y0 + t * vy + np.arange(s)) % spec.H
        xs = (x0 + t * vx + np.arange(s)) % spec.W
        video[t][np.ix_(ys, xs)] = color
    return video


def _synth_text_grid(spec: SynthSpec, rng) -> np.ndarray:
    cell = max(2, min(spec.cell, spec.H, spec.W))
    glyph = max(1, cell // 2)  # coarse sub-pattern, upsampled to the cell
    rows = -(-spec.H // cell)
    cols = -(-spec.W // cell)
    video = np.zeros((spec.T, spec.H, spec.W, 3))
    frame = None
    for t in range(spec.T):
        if t % max(1, spec.scene_interval) == 0 or frame is None:
            bits = rng.integers(0, 2, size=(rows * glyph, cols * glyph)).astype(np.float64)
            up = bits.repeat(-(-cell // glyph), axis=0).repeat(-(-cell // glyph), axis=1)
            frame = up[:spec.H, :spec.W]
        video[t] = frame[:, :, None]
    return video


def _synth_pan(spec: SynthSpec, rng) -> np.ndarray:
    phase = rng.random(3) * 2 * np.pi
    ys = np.arange(spec.H)[:, None] / spec.H
    xs = np.arange(spec.W)[None, :] / spec.W
    video = np.zeros((spec.T, spec.H, spec.W, 3))
    for t in range(spec.T):
        shift = t * spec.pan_speed / spec.W
        for c in range(3):
            video[t, :, :, c] = 0.5 + 0.35 * np.sin(
                2 * np.pi * (xs + shift) + phase[c]) * np.cos(np.pi * ys + 0.5 * phase[c])
    return video
