"""Online tracking loop with search enlargement and dynamic template refresh."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from fetrack.errors import ConfigError, InputError
from fetrack.events import SEARCH_CONTEXT, TEMPLATE_CONTEXT, CropSpec, crop_region
from fetrack.head import decode_box
from fetrack.model import TrackerNet


@dataclass
class TrackerConfig:
    k: int = 8
    low_score_threshold: float = 0.3
    scale_factor: float = 1.5
    update_interval: int = 25
    update_threshold: float = 0.5
    template_context: float = TEMPLATE_CONTEXT
    search_context: float = SEARCH_CONTEXT

    @classmethod
    def from_dict(cls, data: dict) -> "TrackerConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(data) - known)
        if bad:
            raise ConfigError(bad[0], "unknown tracker option")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k", f"must be >= 1, got {self.k}")
        for name in ("low_score_threshold", "update_threshold"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(name, f"must lie in [0, 1], got {v}")
        if self.update_interval < 1:
            raise ConfigError("update_interval", f"must be >= 1, got {self.update_interval}")
        for name in ("scale_factor", "template_context", "search_context"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)}")


@dataclass
class TrackerState:
    static_rgb: np.ndarray
    static_event: np.ndarray
    dynamic_rgb: np.ndarray
    dynamic_event: np.ndarray
    box: np.ndarray
    base_scale: float
    search_scale: float
    update_interval: int
    low_score_run: int = 0
    frames_since_update: int = 0
    n_updates: int = 0


def crop_pair(rgb, event_frame, box_xywh, context: float, size: int):
    """Crop both modalities with one geometry; returns ``(rgb, event, transform)``."""
    spec = CropSpec.around(box_xywh, context, size)
    rgb_patch, tf = crop_region(rgb, spec)
    ev_patch, _ = crop_region(event_frame, spec)
    return rgb_patch, ev_patch, tf


def update_search_scale(state: TrackerState, peak: float, cfg: TrackerConfig) -> TrackerState:
    """Count consecutive frames scoring below threshold; widen after ``k`` of them."""
    if peak < cfg.low_score_threshold:
        state.low_score_run += 1
    else:
        state.low_score_run = 0
    if state.low_score_run >= cfg.k:
        state.search_scale = state.base_scale * cfg.scale_factor
    elif state.low_score_run == 0:
        state.search_scale = state.base_scale
    return state


def _sigmoid(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def template_update_due(state: TrackerState, logit: float, cfg: TrackerConfig) -> bool:
    return state.frames_since_update >= state.update_interval and _sigmoid(logit) > cfg.update_threshold


def clamp_box(box, H: int, W: int) -> np.ndarray:
    """Keep the center inside the frame and the size between 1 px and the frame."""
    x, y, w, h = (float(v) for v in box)
    w, h = min(max(w, 1.0), W), min(max(h, 1.0), H)
    cx = min(max(x + w / 2, 0.0), W)
    cy = min(max(y + h / 2, 0.0), H)
    return np.array([cx - w / 2, cy - h / 2, w, h])


class Tracker:
    def __init__(self, net: TrackerNet, cfg: TrackerConfig | None = None):
        self.net = net
        self.cfg = cfg or TrackerConfig()
        self.cfg.validate()

    def _templates(self, rgb, event_frame, box):
        mc = self.net.cfg
        zr, ze, _ = crop_pair(rgb, event_frame, box, self.cfg.template_context, mc.template_size)
        return zr.astype(self.net.dtype), ze.astype(self.net.dtype)

    def init(self, rgb0, event0, box0) -> TrackerState:
        rgb0, event0 = np.asarray(rgb0), np.asarray(event0)
        if rgb0.shape != event0.shape or rgb0.ndim != 3:
            raise InputError(f"frame shapes differ: rgb {rgb0.shape}, event {event0.shape}")
        box0 = np.asarray(box0, dtype=np.float64)
        if not (box0[2] > 0 and box0[3] > 0):
            raise InputError(f"initial box must have positive size, got {box0.tolist()}")
        zr, ze = self._templates(rgb0, event0, box0)
        base = self.cfg.search_context
        return TrackerState(zr, ze, zr.copy(), ze.copy(), box0.copy(), base, base, self.cfg.update_interval)

    def predict(self, state: TrackerState, rgb, event_frame):
        """One forward pass at the current search scale; no state change."""
        mc = self.net.cfg
        xr, xe, tf = crop_pair(rgb, event_frame, state.box, state.search_scale, mc.search_size)
        cast = lambda a: a.astype(self.net.dtype)[None]
        rgb_t = [cast(state.static_rgb)] + ([cast(state.dynamic_rgb)] if mc.dynamic_template else [])
        ev_t = [cast(state.static_event)] + ([cast(state.dynamic_event)] if mc.dynamic_template else [])
        self.net.eval()
        out, f_rgb, f_ev = self.net(rgb_t, cast(xr), ev_t, cast(xe))
        norm_box, peak = decode_box(out)
        logit = float(self.net.score_logit(f_rgb, f_ev).data[0])
        return tf.box_from_normalized(norm_box), peak, logit

    def track_frame(self, state: TrackerState, rgb, event_frame):
        rgb, event_frame = np.asarray(rgb), np.asarray(event_frame)
        if rgb.shape != event_frame.shape:
            raise InputError(f"frame shapes differ: rgb {rgb.shape}, event {event_frame.shape}")
        box, peak, logit = self.predict(state, rgb, event_frame)
        H, W = rgb.shape[1:]
        state.box = clamp_box(box, H, W)
        update_search_scale(state, peak, self.cfg)
        self.advance_template(state, rgb, event_frame, state.box, logit)
        return state.box.copy(), peak, state

    def advance_template(self, state: TrackerState, rgb, event_frame, box, logit: float) -> bool:
        """Count one tracked frame, then refresh the dynamic template if due."""
        state.frames_since_update += 1
        return self.maybe_update_template(state, rgb, event_frame, box, logit)

    def maybe_update_template(self, state: TrackerState, rgb, event_frame, box, logit: float) -> bool:
        if not template_update_due(state, logit, self.cfg):
            return False
        state.dynamic_rgb, state.dynamic_event = self._templates(rgb, event_frame, box)
        state.frames_since_update = 0
        state.n_updates += 1
        return True

    def track_sequence(self, frames, event_frames, box0) -> np.ndarray:
        """Rows ``x, y, w, h, score``; frame 0 echoes the initial box with score 1."""
        if len(frames) != len(event_frames):
            raise InputError(f"{len(frames)} rgb frames vs {len(event_frames)} event frames")
        state = self.init(frames[0], event_frames[0], box0)
        rows = [np.append(np.asarray(box0, dtype=np.float64), 1.0)]
        for rgb, ev in zip(frames[1:], event_frames[1:]):
            box, peak, state = self.track_frame(state, rgb, ev)
            rows.append(np.append(box, peak))
        return np.array(rows)


def write_results(path, rows: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in np.asarray(rows).reshape(-1, 5):
            fh.write(",".join(f"{float(v):.6f}" for v in r) + "\n")


def read_results(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise InputError(f"{path}:{n}: expected x,y,w,h,score")
            rows.append([float(v) for v in parts])
    return np.array(rows).reshape(-1, 5)
