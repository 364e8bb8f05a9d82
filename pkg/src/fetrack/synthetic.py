"""Synthetic RGB-event sequences: a uniform rectangle moving over static texture.

Frames are quantized to 8 bits so they survive a PNG round trip unchanged.
Events follow the usual log-intensity contrast model: every pixel keeps a
reference level and fires one event per threshold crossing of
``log(I + eps)`` relative to its frame-0 value.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fetrack.errors import ConfigError, InputError
from fetrack.events import (
    EVENT_DTYPE,
    list_frames,
    load_frame,
    read_boxes,
    read_events,
    save_frame,
    stack_events,
    write_boxes,
    write_events,
)

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class SyntheticScene:
    height: int = 160
    width: int = 160
    obj_w: float = 30.0
    obj_h: float = 22.0
    obj_color: tuple = (0.95, 0.85, 0.25)
    speed: float = 1.5
    wobble: float = 6.0
    threshold: float = 0.2
    log_eps: float = 1e-3
    frame_dt_us: int = 33_333
    static: bool = False
    flip_polarity: bool = False
    texture_scale: float = 12.0

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticScene":
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(data) - known)
        if bad:
            raise ConfigError(bad[0], "unknown scene option")
        scene = cls(**data)
        scene.validate()
        return scene

    def validate(self) -> None:
        if self.obj_w + 2 > self.width or self.obj_h + 2 > self.height:
            raise ConfigError("obj_w", "object does not fit inside the canvas")
        if not self.threshold > 0:
            raise ConfigError("threshold", f"must be positive, got {self.threshold}")
        if self.speed < 0:
            raise ConfigError("speed", f"must be non-negative, got {self.speed}")
        if self.frame_dt_us < 1:
            raise ConfigError("frame_dt_us", f"must be positive, got {self.frame_dt_us}")


@dataclass
class SyntheticSequence:
    frames: np.ndarray          # (n, 3, H, W) float32 in [0, 1]
    events: np.ndarray          # EVENT_DTYPE, sorted by t
    boxes: np.ndarray           # (n, 4) x, y, w, h
    times_us: np.ndarray        # (n,) frame timestamps
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    def event_frames(self, dtype=np.float32) -> np.ndarray:
        return np.stack([stack_events(self.events, w, self.height, self.width, dtype)
                         for w in frame_windows(self.times_us)])


def frame_windows(times_us) -> list[tuple[int, int]]:
    """Frame i integrates ``[t_{i-1}, t_i)``; frame 0 gets the preceding period (no events)."""
    t = [int(v) for v in times_us]
    period = t[1] - t[0] if len(t) > 1 else 1
    return [(t[0] - period, t[0])] + list(zip(t[:-1], t[1:]))


def _texture(rng: np.random.Generator, H: int, W: int, scale: float) -> np.ndarray:
    """Smooth per-channel texture in roughly [0.15, 0.55] from low-frequency cosines."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    tex = np.zeros((3, H, W))
    for c in range(3):
        for _ in range(4):
            fx, fy = rng.uniform(0.5, 2.0, 2) / scale
            ph = rng.uniform(0, 2 * math.pi)
            tex[c] += np.cos(fx * xx + fy * yy + ph)
    return 0.35 + 0.05 * tex


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def _to_float(levels: np.ndarray) -> np.ndarray:
    return np.asarray(levels, dtype=np.float32) / 255.0


def trajectory(scene: SyntheticScene, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Top-left corners, speed-limited and kept at least one pixel inside the canvas."""
    lo = np.array([1.0, 1.0])
    hi = np.array([scene.width - scene.obj_w - 1.0, scene.height - scene.obj_h - 1.0])
    start = lo + (hi - lo) * rng.uniform(0.3, 0.7, 2)
    if scene.static or scene.speed == 0 or n_frames == 1:
        return np.tile(start, (n_frames, 1))
    heading = rng.uniform(0, 2 * math.pi)
    turn = rng.uniform(-0.5, 0.5) * scene.wobble / max(n_frames, 1)
    pos = [start]
    for i in range(1, n_frames):
        heading += turn
        step = scene.speed * np.array([math.cos(heading), math.sin(heading)])
        nxt = pos[-1] + step
        for k in range(2):
            if not lo[k] <= nxt[k] <= hi[k]:
                step[k] = -step[k]
                heading = math.atan2(step[1], step[0])
        pos.append(np.clip(pos[-1] + step, lo, hi))
    return np.array(pos)


def _coverage(x0: float, y0: float, w: float, h: float, H: int, W: int) -> np.ndarray:
    cx = np.arange(W) + 0.5
    cy = np.arange(H) + 0.5
    return ((cy >= y0) & (cy < y0 + h))[:, None] & ((cx >= x0) & (cx < x0 + w))[None, :]


def _events_between(L_prev_level, L_new, L0, theta, t0, t1):
    """Integer level tracking per pixel; returns events and the new levels."""
    u = (L_new - L0) / theta
    k = L_prev_level
    up = u > k
    down = u < k
    new_level = k.copy()
    new_level[up] = np.floor(u[up]).astype(np.int64)
    new_level[down] = np.ceil(u[down]).astype(np.int64)
    n = new_level - k
    ys, xs = np.nonzero(n)
    chunks = []
    dt = t1 - t0
    for y, x in zip(ys, xs):
        cnt = int(abs(n[y, x]))
        pol = 1 if n[y, x] > 0 else -1
        ts = t0 + (dt * np.arange(1, cnt + 1)) // (cnt + 1)
        ev = np.empty(cnt, dtype=EVENT_DTYPE)
        ev["t"], ev["x"], ev["y"], ev["p"] = ts, x, y, pol
        chunks.append(ev)
    return chunks, new_level


def generate_synthetic(scene: SyntheticScene, n_frames: int, seed: int) -> SyntheticSequence:
    """Deterministic given ``seed``; ground truth is the rendered rectangle."""
    scene.validate()
    if n_frames < 1:
        raise ConfigError("n_frames", f"must be at least 1, got {n_frames}")
    rng = np.random.default_rng(seed)
    H, W = scene.height, scene.width
    bg = _quantize(_texture(rng, H, W, scene.texture_scale))
    obj = _quantize(np.asarray(scene.obj_color, dtype=np.float64))[:, None, None]
    corners = trajectory(scene, n_frames, rng)
    times = np.arange(n_frames, dtype=np.int64) * scene.frame_dt_us

    frames = np.empty((n_frames, 3, H, W), dtype=np.float32)
    boxes = np.empty((n_frames, 4))
    event_chunks = []
    L0 = level = None
    for i, (x0, y0) in enumerate(corners):
        cov = _coverage(x0, y0, scene.obj_w, scene.obj_h, H, W)
        if scene.flip_polarity:
            cov = ~cov
        img = np.where(cov[None], obj, bg)
        frames[i] = _to_float(img)
        boxes[i] = [x0, y0, scene.obj_w, scene.obj_h]
        L = np.log(np.tensordot(LUMA, img.astype(np.float64) / 255.0, axes=1) + scene.log_eps)
        if i == 0:
            L0, level = L, np.zeros((H, W), dtype=np.int64)
            continue
        chunks, level = _events_between(level, L, L0, scene.threshold, times[i - 1], times[i])
        event_chunks.extend(chunks)
    events = np.concatenate(event_chunks) if event_chunks else np.empty(0, dtype=EVENT_DTYPE)
    events = events[np.lexsort((events["x"], events["y"], events["t"]))]
    return SyntheticSequence(frames, events, boxes, times, {"seed": seed, "scene": asdict(scene)})


# --------------------------------------------------------------- dataset I/O

def write_sequence(root, seq: SyntheticSequence, force: bool = False) -> Path:
    """Layout: ``frames/NNNN.png``, ``events.csv``, ``groundtruth.txt``, ``meta.json``."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} is not empty; pass --force to overwrite")
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for old in list_frames(root / "frames"):
        old.unlink()
    for i, frame in enumerate(seq.frames):
        save_frame(root / "frames" / f"{i:04d}.png", frame)
    write_events(root / "events.csv", seq.events, seq.height, seq.width)
    write_boxes(root / "groundtruth.txt", seq.boxes)
    meta = dict(seq.meta, times_us=[int(t) for t in seq.times_us])
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return root


def read_sequence(root) -> SyntheticSequence:
    root = Path(root)
    for name in ("frames", "events.csv", "meta.json"):
        if not (root / name).exists():
            raise InputError(f"sequence file not found: {root / name}")
    paths = list_frames(root / "frames")
    if not paths:
        raise InputError(f"no frames in {root / 'frames'}")
    frames = np.stack([load_frame(p) for p in paths])
    events, _, _ = read_events(root / "events.csv")
    meta = json.loads((root / "meta.json").read_text())
    gt_path = root / "groundtruth.txt"
    boxes = read_boxes(gt_path) if gt_path.exists() else np.zeros((0, 4))
    times = np.asarray(meta.get("times_us", np.arange(len(paths)) * 33_333), dtype=np.int64)
    if len(times) != len(paths):
        raise InputError(f"{root}: {len(paths)} frames but {len(times)} timestamps")
    return SyntheticSequence(frames, events, boxes, times, meta)
