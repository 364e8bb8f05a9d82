"""Desk-scale training: box-loss phase, then a score-head-only phase."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from fetrack.errors import ConfigError, NumericError
from fetrack.head import bce_logits_loss, total_loss
from fetrack.model import TrackerNet
from fetrack.numerics import GradTape, Tensor
from fetrack.synthetic import SyntheticSequence
from fetrack.tracker import TrackerConfig, crop_pair

DIVERGENCE_LIMIT = 1e4


class TrainingDiverged(NumericError):
    pass


class AdamW:
    """Adam with decoupled weight decay applied directly to the parameters."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.lr == 0:
                continue
            g = g.astype(p.dtype, copy=False)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data *= 1 - self.lr * self.wd
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 2
    lr: float = 1e-4
    weight_decay: float = 1e-4
    score_steps: int = 50
    center_jitter: float = 0.1
    scale_jitter: float = 0.1
    static_dynamic_prob: float = 0.5
    seed: int = 0
    log_every: int = 25

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(data) - known)
        if bad:
            raise ConfigError(bad[0], "unknown training option")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("steps", "score_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr" if self.lr < 0 else "weight_decay", "must be non-negative")


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    parts: list[dict] = field(default_factory=list)
    score_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


class SampleFactory:
    """Draws (templates, search crop, normalized target) tuples from one sequence."""

    def __init__(self, seq: SyntheticSequence, model_cfg, train_cfg: TrainConfig,
                 tracker_cfg: TrackerConfig | None = None, dtype=np.float32):
        self.seq = seq
        self.events = seq.event_frames(dtype=np.float32)
        self.mc, self.tc = model_cfg, train_cfg
        self.trk = tracker_cfg or TrackerConfig()
        self.dtype = dtype
        self.static = crop_pair(seq.frames[0], self.events[0], seq.boxes[0],
                                self.trk.template_context, self.mc.template_size)[:2]

    def _template(self, j):
        return crop_pair(self.seq.frames[j], self.events[j], self.seq.boxes[j],
                         self.trk.template_context, self.mc.template_size)[:2]

    def sample(self, rng: np.random.Generator, positive: bool = True):
        n = len(self.seq.frames)
        i = int(rng.integers(n))
        x, y, w, h = self.seq.boxes[i]
        side = math.sqrt(w * h) * self.trk.search_context
        if positive:
            shift = rng.uniform(-1, 1, 2) * self.tc.center_jitter * side
        else:
            ang = rng.uniform(0, 2 * math.pi)
            shift = side * rng.uniform(0.75, 1.0) * np.array([math.cos(ang), math.sin(ang)])
        s = math.exp(rng.uniform(-1, 1) * self.tc.scale_jitter)
        cx, cy = x + w / 2 + shift[0], y + h / 2 + shift[1]
        crop_box = [cx - w * s / 2, cy - h * s / 2, w * s, h * s]
        xr, xe, tf = crop_pair(self.seq.frames[i], self.events[i], crop_box,
                               self.trk.search_context, self.mc.search_size)
        if rng.uniform() < self.tc.static_dynamic_prob:
            dyn = self.static
        else:
            dyn = self._template(int(rng.integers(n)))
        target = tf.box_to_normalized(self.seq.boxes[i])
        return self.static, dyn, (xr, xe), np.clip(target, 1e-4, 1 - 1e-4)

    def batch(self, rng: np.random.Generator, size: int, positive: bool = True):
        samples = [self.sample(rng, positive) for _ in range(size)]
        st = lambda get: np.stack([get(s) for s in samples]).astype(self.dtype)
        rgb_t = [st(lambda s: s[0][0]), st(lambda s: s[1][0])]
        ev_t = [st(lambda s: s[0][1]), st(lambda s: s[1][1])]
        if not self.mc.dynamic_template:
            rgb_t, ev_t = rgb_t[:1], ev_t[:1]
        return rgb_t, st(lambda s: s[2][0]), ev_t, st(lambda s: s[2][1]), np.stack([s[3] for s in samples])


def _check(loss: float, step: int, parts: dict) -> None:
    if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"training diverged at step {step}: loss={loss!r} parts={parts}")


def train_box_phase(net: TrackerNet, factory: SampleFactory, cfg: TrainConfig, rng,
                    result: TrainResult, log=None) -> None:
    params = net.base_parameters()
    opt = AdamW(params, cfg.lr, cfg.weight_decay)
    net.train()
    for step in range(cfg.steps):
        rgb_t, xr, ev_t, xe, target = factory.batch(rng, cfg.batch_size)
        with GradTape() as tape:
            out, _, _ = net(rgb_t, xr, ev_t, xe, seed=int(rng.integers(2 ** 31)))
            loss, parts = total_loss(out, target)
        _check(parts["total"], step, parts)
        grads = tape.gradient(loss, params)
        opt.step(grads)
        result.losses.append(parts["total"])
        result.parts.append(parts)
        if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(f"step={step} " + " ".join(f"{k}={v:.4f}" for k, v in parts.items()))


def train_score_phase(net: TrackerNet, factory: SampleFactory, cfg: TrainConfig, rng,
                      result: TrainResult, log=None) -> None:
    """Base model frozen; positives contain the target, negatives are displaced crops."""
    frozen = [(p, p.requires_grad) for p in net.base_parameters()]
    for p, _ in frozen:
        p.requires_grad = False
    params = net.score_head.parameters()
    opt = AdamW(params, cfg.lr, cfg.weight_decay)
    half = max(cfg.batch_size // 2, 1)
    try:
        for step in range(cfg.score_steps):
            feats, labels = [], []
            for positive in (True, False):
                rgb_t, xr, ev_t, xe, _ = factory.batch(rng, half, positive)
                f_rgb, f_ev = net.features(rgb_t, xr, ev_t, xe)
                feats.append((f_rgb.data, f_ev.data))
                labels += [1.0 if positive else 0.0] * half
            f_rgb = Tensor(np.concatenate([f[0] for f in feats]))
            f_ev = Tensor(np.concatenate([f[1] for f in feats]))
            with GradTape() as tape:
                loss = bce_logits_loss(net.score_logit(f_rgb, f_ev), labels)
            value = float(loss.data)
            _check(value, step, {"bce": value})
            opt.step(tape.gradient(loss, params))
            result.score_losses.append(value)
            if log and (step % cfg.log_every == 0 or step == cfg.score_steps - 1):
                log(f"score_step={step} bce={value:.4f}")
    finally:
        for p, flag in frozen:
            p.requires_grad = flag


def train_desk_scale(net: TrackerNet, seq: SyntheticSequence, cfg: TrainConfig,
                     tracker_cfg: TrackerConfig | None = None, log=None,
                     curve_path=None) -> TrainResult:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    factory = SampleFactory(seq, net.cfg, cfg, tracker_cfg, dtype=net.dtype)
    result = TrainResult()
    start = time.perf_counter()
    train_box_phase(net, factory, cfg, rng, result, log)
    train_score_phase(net, factory, cfg, rng, result, log)
    result.seconds = time.perf_counter() - start
    net.eval()
    if curve_path is not None:
        Path(curve_path).write_text(result.to_json())
    return result
