"""Event streams, event frames, crops, and the on-disk sequence formats.

Coordinates are continuous pixel coordinates: pixel ``(row, col)`` covers
``[col, col + 1) x [row, row + 1)`` so its center is ``(col + .5, row + .5)``.
Images and event frames are channel-first ``(3, H, W)`` float arrays.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fetrack.errors import InputError, ParameterError

EVENT_DTYPE = np.dtype([("t", np.int64), ("x", np.int32), ("y", np.int32), ("p", np.int8)])

TEMPLATE_CONTEXT = 2.0
SEARCH_CONTEXT = 4.0
TEMPLATE_SIZE = 128
SEARCH_SIZE = 256


def make_events(t, x, y, p) -> np.ndarray:
    """Pack parallel sequences into a structured event array."""
    t = np.asarray(t)
    ev = np.empty(t.shape[0], dtype=EVENT_DTYPE)
    ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
    return ev


def validate_events(stream: np.ndarray, H: int, W: int) -> None:
    if stream.dtype != EVENT_DTYPE:
        raise InputError(f"event stream must have dtype {EVENT_DTYPE}, got {stream.dtype}")
    if stream.size == 0:
        return
    t = stream["t"]
    bad = np.flatnonzero(np.diff(t) < 0)
    if bad.size:
        raise InputError(f"event stream not sorted by t at index {bad[0] + 1}")
    x, y, p = stream["x"], stream["y"], stream["p"]
    oob = np.flatnonzero((x < 0) | (x >= W) | (y < 0) | (y >= H))
    if oob.size:
        i = oob[0]
        raise InputError(f"event {i} at (x={x[i]}, y={y[i]}) outside {W}x{H} sensor")
    badp = np.flatnonzero((p != 1) & (p != -1))
    if badp.size:
        raise InputError(f"event {badp[0]} has polarity {p[badp[0]]}; expected +1 or -1")


def event_counts(stream: np.ndarray, window: tuple[int, int], H: int, W: int) -> np.ndarray:
    """Raw per-pixel counts ``(3, H, W)``: positive, negative, total.

    Only events with ``t0 <= t < t1`` are counted.
    """
    t0, t1 = window
    if not t0 < t1:
        raise InputError(f"empty or inverted window [{t0}, {t1})")
    validate_events(stream, H, W)
    lo, hi = np.searchsorted(stream["t"], [t0, t1], side="left")
    sel = stream[lo:hi]
    counts = np.zeros((3, H, W), dtype=np.int64)
    pos = sel["p"] > 0
    np.add.at(counts[0], (sel["y"][pos], sel["x"][pos]), 1)
    np.add.at(counts[1], (sel["y"][~pos], sel["x"][~pos]), 1)
    counts[2] = counts[0] + counts[1]
    return counts


def stack_events(stream: np.ndarray, window: tuple[int, int], H: int, W: int,
                 dtype=np.float32) -> np.ndarray:
    """Event frame: counts per polarity and total, each channel max-normalized to [0, 1]."""
    counts = event_counts(stream, window, H, W).astype(dtype)
    peak = counts.reshape(3, -1).max(axis=1)
    scale = np.where(peak > 0, peak, 1).astype(dtype)
    return counts / scale[:, None, None]


@dataclass(frozen=True)
class CropSpec:
    """Square crop of side ``context * sqrt(w * h)`` centered on a box, resized to ``out_size``."""

    cx: float
    cy: float
    w: float
    h: float
    context: float
    out_size: int

    def __post_init__(self):
        if not self.context > 0:
            raise ParameterError(f"context factor must be positive, got {self.context}")
        if self.out_size < 1:
            raise ParameterError(f"output side must be positive, got {self.out_size}")

    @classmethod
    def around(cls, box_xywh, context: float, out_size: int) -> "CropSpec":
        x, y, w, h = (float(v) for v in box_xywh)
        return cls(x + w / 2, y + h / 2, w, h, context, out_size)

    @property
    def side(self) -> float:
        return self.context * math.sqrt(self.w * self.h)


@dataclass(frozen=True)
class CropTransform:
    """Affine map patch coords -> image coords: ``image = origin + scale * patch``."""

    x0: float
    y0: float
    scale: float
    out_size: int

    def to_image(self, u, v):
        return self.x0 + self.scale * np.asarray(u), self.y0 + self.scale * np.asarray(v)

    def to_patch(self, x, y):
        return (np.asarray(x) - self.x0) / self.scale, (np.asarray(y) - self.y0) / self.scale

    def box_from_normalized(self, box_cxcywh) -> np.ndarray:
        """Search-normalized ``(cx, cy, w, h)`` in [0, 1] -> image ``(x, y, w, h)``."""
        cx, cy, w, h = (float(v) for v in box_cxcywh)
        S = self.out_size
        ix, iy = self.to_image(cx * S, cy * S)
        iw, ih = w * S * self.scale, h * S * self.scale
        return np.array([ix - iw / 2, iy - ih / 2, iw, ih])

    def box_to_normalized(self, box_xywh) -> np.ndarray:
        x, y, w, h = (float(v) for v in box_xywh)
        S = self.out_size
        u, v = self.to_patch(x + w / 2, y + h / 2)
        return np.array([u / S, v / S, w / (S * self.scale), h / (S * self.scale)])


def _interp_matrix(n_out: int, n_in: int, start: float, step: float) -> np.ndarray:
    """Rows of bilinear weights sampling ``n_in`` pixels at patch-pixel centers.

    Sample k sits at image coordinate ``start + (k + .5) * step``; samples
    outside the image fade against implicit zero padding.
    """
    pos = start + (np.arange(n_out) + 0.5) * step - 0.5
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for idx, wgt in ((i0, 1 - frac), (i0 + 1, frac)):
        ok = (idx >= 0) & (idx < n_in)
        M[rows[ok], idx[ok]] += wgt[ok]
    return M


def crop_region(image: np.ndarray, spec: CropSpec) -> tuple[np.ndarray, CropTransform]:
    """Zero-padded square crop resized bilinearly to ``(C, S, S)``."""
    if not (spec.w > 0 and spec.h > 0):
        raise InputError(f"crop box must have positive size, got w={spec.w} h={spec.h}")
    C, H, W = image.shape
    S = spec.out_size
    side = spec.side
    x0, y0 = spec.cx - side / 2, spec.cy - side / 2
    step = side / S
    Ry = _interp_matrix(S, H, y0, step)
    Rx = _interp_matrix(S, W, x0, step)
    patch = np.einsum("sh,chw,tw->cst", Ry, image.astype(np.float64, copy=False), Rx, optimize=True)
    return patch.astype(image.dtype, copy=False), CropTransform(x0, y0, step, S)


# ------------------------------------------------------------------ file I/O

_HEADER = re.compile(r"#\s*H=(\d+)\s+W=(\d+)")


def write_events(path, stream: np.ndarray, H: int, W: int) -> None:
    validate_events(stream, H, W)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#H={H} W={W}\n")
        for e in stream:
            fh.write(f"{e['t']},{e['x']},{e['y']},{e['p']}\n")


def read_events(path) -> tuple[np.ndarray, int, int]:
    """Parse a ``t_us,x,y,p`` CSV with a ``#H=.. W=..`` header line."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        m = _HEADER.match(header.strip())
        if not m:
            raise InputError(f"{path}: missing '#H=<int> W=<int>' header")
        H, W = int(m.group(1)), int(m.group(2))
        body = fh.read()
    if body.strip():
        data = np.loadtxt(body.splitlines(), delimiter=",", dtype=np.int64, ndmin=2)
        if data.shape[1] != 4:
            raise InputError(f"{path}: expected 4 columns, got {data.shape[1]}")
        stream = make_events(data[:, 0], data[:, 1], data[:, 2], data[:, 3])
    else:
        stream = np.empty(0, dtype=EVENT_DTYPE)
    validate_events(stream, H, W)
    return stream, H, W


def write_boxes(path, boxes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
            fh.write(",".join(repr(float(v)) for v in b) + "\n")


def read_boxes(path) -> np.ndarray:
    """One ``x,y,w,h`` line per frame."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.replace("\t", ",").split(",")
            if len(parts) < 4:
                raise InputError(f"{path}:{n}: expected x,y,w,h")
            rows.append([float(v) for v in parts[:4]])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def _numeric_key(p: Path):
    digits = re.findall(r"\d+", p.stem)
    return (int(digits[-1]) if digits else -1, p.name)


def list_frames(frame_dir) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    files = [p for p in Path(frame_dir).iterdir() if p.suffix.lower() in exts]
    return sorted(files, key=_numeric_key)


def load_frame(path, dtype=np.float32) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=dtype) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(dtype)


def save_frame(path, image: np.ndarray) -> None:
    """Write a ``(3, H, W)`` image in [0, 1] as 8-bit PNG."""
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(os.fspath(path))
