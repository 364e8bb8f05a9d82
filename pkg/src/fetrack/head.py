"""Center-based box head, box decoding, and the training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fetrack.errors import InputError, ShapeError
from fetrack.numerics import Module, Parameter, Tensor, as_tensor, ops, record

LOSS_WEIGHTS = (1.0, 14.0, 1.0)
PROB_CLAMP = 1e-7


@dataclass
class HeadOutput:
    """Channel-last maps: score (B, G, G), offset and size (B, G, G, 2)."""

    score: Tensor
    offset: Tensor
    size: Tensor

    @property
    def grid(self) -> int:
        return self.score.shape[1]


class ConvBNReLU(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float64):
        std = math.sqrt(2.0 / (9 * c_in))
        self.weight = Parameter(rng.normal(0, std, (c_out, c_in, 3, 3)), dtype=dtype)
        self.gamma = Parameter(np.ones(c_out), dtype=dtype)
        self.beta = Parameter(np.zeros(c_out), dtype=dtype)
        self.running_mean = np.zeros(c_out, dtype=dtype)
        self.running_var = np.ones(c_out, dtype=dtype)

    def __call__(self, x) -> Tensor:
        y = ops.conv2d(x, self.weight)
        y = ops.batch_norm(y, self.gamma, self.beta, self.running_mean, self.running_var, self.training)
        return ops.relu(y)


class SubHead(Module):
    """``n_stages`` Conv-BN-ReLU stages, then a 1x1 conv and a sigmoid."""

    def __init__(self, c_in: int, width: int, c_out: int, n_stages: int, rng: np.random.Generator,
                 dtype=np.float64):
        chans = [c_in] + [width] * n_stages
        self.stages = [ConvBNReLU(a, b, rng, dtype) for a, b in zip(chans[:-1], chans[1:])]
        bound = 1.0 / math.sqrt(chans[-1])
        self.out_weight = Parameter(rng.uniform(-bound, bound, (c_out, chans[-1], 1, 1)), dtype=dtype)
        self.out_bias = Parameter(np.zeros(c_out), dtype=dtype)

    def __call__(self, x) -> Tensor:
        for stage in self.stages:
            x = stage(x)
        return ops.sigmoid(ops.conv2d(x, self.out_weight, self.out_bias))


def search_feature_map(f_rgb, f_event) -> Tensor:
    """Channel-concatenate search tokens and fold them onto the (G, G) patch grid."""
    f_rgb, f_event = as_tensor(f_rgb), as_tensor(f_event)
    if f_rgb.shape != f_event.shape:
        raise ShapeError(f"head inputs differ: {f_rgb.shape} vs {f_event.shape}")
    B, N, C = f_rgb.shape
    G = math.isqrt(N)
    if G * G != N:
        raise ShapeError(f"head: {N} search tokens do not form a square grid")
    return ops.reshape(ops.concat([f_rgb, f_event], axis=2), (B, G, G, 2 * C))


class TrackingHead(Module):
    def __init__(self, dim: int, rng: np.random.Generator, width: int = 128, n_stages: int = 4,
                 dtype=np.float64):
        self.score_head = SubHead(2 * dim, width, 1, n_stages, rng, dtype)
        self.offset_head = SubHead(2 * dim, width, 2, n_stages, rng, dtype)
        self.size_head = SubHead(2 * dim, width, 2, n_stages, rng, dtype)

    def __call__(self, f_rgb_search, f_event_search) -> HeadOutput:
        fmap = search_feature_map(f_rgb_search, f_event_search)
        score = self.score_head(fmap)
        B, G = score.shape[0], score.shape[1]
        return HeadOutput(ops.reshape(score, (B, G, G)), self.offset_head(fmap), self.size_head(fmap))


def decode_boxes(out: HeadOutput) -> tuple[np.ndarray, np.ndarray]:
    """Peak-cell decode; ``np.argmax`` already breaks ties at the smallest flat index."""
    score = out.score.data
    B, G = score.shape[0], score.shape[1]
    flat = score.reshape(B, -1).argmax(axis=1)
    i, j = np.divmod(flat, G)
    b = np.arange(B)
    off, size = out.offset.data[b, i, j], out.size.data[b, i, j]
    boxes = np.stack([(j + off[:, 0]) / G, (i + off[:, 1]) / G, size[:, 0], size[:, 1]], axis=1)
    return boxes, score[b, i, j]


def decode_box(out: HeadOutput, index: int = 0) -> tuple[np.ndarray, float]:
    boxes, peaks = decode_boxes(out)
    return boxes[index], float(peaks[index])


def gt_cells(gt_boxes: np.ndarray, grid: int) -> np.ndarray:
    """Integer (row, col) of the cell containing each normalized gt center."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    col = np.clip(np.floor(gt[:, 0] * grid), 0, grid - 1).astype(np.int64)
    row = np.clip(np.floor(gt[:, 1] * grid), 0, grid - 1).astype(np.int64)
    return np.stack([row, col], axis=1)


def gaussian_target(cell, grid: int, sigma: float | None = None) -> np.ndarray:
    sigma = grid / 12.0 if sigma is None else sigma
    r = np.arange(grid)
    d2 = (r[:, None] - cell[0]) ** 2 + (r[None, :] - cell[1]) ** 2
    return np.exp(-d2 / (2 * sigma ** 2))


def focal_loss(score, cells, sigma: float | None = None, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Gaussian-penalized focal loss averaged over every cell of every map.

    ``score`` is (B, G, G) or (G, G); ``cells`` holds one (row, col) per map.
    """
    score = as_tensor(score)
    if score.ndim == 2:
        score = ops.reshape(score, (1,) + score.shape)
    cells = np.asarray(cells).reshape(-1, 2)
    B, G = score.shape[0], score.shape[1]
    if cells.shape[0] != B:
        raise ShapeError(f"focal_loss: {cells.shape[0]} gt cells for {B} score maps")
    target = np.stack([gaussian_target(c, G, sigma) for c in cells])
    pos = np.zeros_like(target)
    pos[np.arange(B), cells[:, 0], cells[:, 1]] = 1.0
    neg_w = (1.0 - pos) * (1.0 - target) ** beta
    dt = score.dtype
    p = ops.clip(score, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus = ops.add_scalar(ops.scale(p, -1.0), 1.0)
    pos_term = ops.mul(ops.mul(Tensor(pos.astype(dt)), _power(one_minus, alpha)), ops.log(p))
    neg_term = ops.mul(ops.mul(Tensor(neg_w.astype(dt)), _power(p, alpha)), ops.log(one_minus))
    return ops.scale(ops.mean(ops.add(pos_term, neg_term)), -1.0)


def _power(x: Tensor, k: float) -> Tensor:
    if k == 2.0:
        return ops.mul(x, x)
    return ops.exp(ops.scale(ops.log(x), k))


def _corners(box: Tensor):
    cx, cy, w, h = (ops.getitem(box, (Ellipsis, k)) for k in range(4))
    hw, hh = ops.scale(w, 0.5), ops.scale(h, 0.5)
    return ops.sub(cx, hw), ops.sub(cy, hh), ops.add(cx, hw), ops.add(cy, hh), w, h


def _check_gt(gt: np.ndarray) -> None:
    if np.any(gt[..., 2] * gt[..., 3] <= 0):
        raise InputError("ground-truth box has zero area")


def giou(pred, gt) -> Tensor:
    """Generalized IoU of (..., 4) cxcywh boxes, elementwise over leading axes."""
    pred, gt = as_tensor(pred), as_tensor(gt, dtype=as_tensor(pred).dtype)
    _check_gt(gt.data)
    ax1, ay1, ax2, ay2, aw, ah = _corners(pred)
    bx1, by1, bx2, by2, bw, bh = _corners(gt)
    iw = ops.relu(ops.sub(ops.minimum(ax2, bx2), ops.maximum(ax1, bx1)))
    ih = ops.relu(ops.sub(ops.minimum(ay2, by2), ops.maximum(ay1, by1)))
    inter = ops.mul(iw, ih)
    union = ops.sub(ops.add(ops.mul(aw, ah), ops.mul(bw, bh)), inter)
    hull = ops.mul(ops.sub(ops.maximum(ax2, bx2), ops.minimum(ax1, bx1)),
                   ops.sub(ops.maximum(ay2, by2), ops.minimum(ay1, by1)))
    iou = ops.div(inter, union)
    return ops.sub(iou, ops.div(ops.sub(hull, union), hull))


def giou_loss(pred, gt) -> Tensor:
    return ops.mean(ops.add_scalar(ops.scale(giou(pred, gt), -1.0), 1.0))


def l1_loss(pred, gt) -> Tensor:
    """Mean absolute error over every (cx, cy, w, h) coordinate."""
    pred = as_tensor(pred)
    return ops.mean(ops.abs(ops.sub(pred, as_tensor(gt, dtype=pred.dtype))))


def weighted_total(focal, l1, giou_term, weights=LOSS_WEIGHTS):
    w1, w2, w3 = weights
    if all(not isinstance(v, Tensor) for v in (focal, l1, giou_term)):
        return w1 * focal + w2 * l1 + w3 * giou_term
    return ops.add(ops.add(ops.scale(focal, w1), ops.scale(l1, w2)), ops.scale(giou_term, w3))


def boxes_at_cells(out: HeadOutput, cells: np.ndarray) -> Tensor:
    """Differentiable (B, 4) boxes read from the maps at the given cells."""
    B, G = out.score.shape[0], out.grid
    b, i, j = np.arange(B), cells[:, 0], cells[:, 1]
    off = ops.getitem(out.offset, (b, i, j))
    size = ops.getitem(out.size, (b, i, j))
    base = np.stack([j, i], axis=1).astype(off.dtype)
    centers = ops.scale(ops.add(off, Tensor(base)), 1.0 / G)
    return ops.concat([centers, size], axis=1)


def total_loss(out: HeadOutput, gt_boxes, weights=LOSS_WEIGHTS) -> tuple[Tensor, dict]:
    """Weighted focal + L1 + GIoU; boxes are read at each gt center cell."""
    gt = np.asarray(gt_boxes, dtype=out.score.dtype).reshape(-1, 4)
    cells = gt_cells(gt, out.grid)
    focal = focal_loss(out.score, cells)
    pred = boxes_at_cells(out, cells)
    l1 = l1_loss(pred, gt)
    g = giou_loss(pred, gt)
    total = weighted_total(focal, l1, g, weights)
    parts = {"focal": float(focal.data), "l1": float(l1.data), "giou": float(g.data),
             "total": float(total.data)}
    return total, parts


# ------------------------------------------------------------ score branch

class ScoreHead(Module):
    """Mean-pooled token MLP producing one reliability logit per sample."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        b1, b2 = 1 / math.sqrt(in_dim), 1 / math.sqrt(hidden)
        self.w1 = Parameter(rng.uniform(-b1, b1, (in_dim, hidden)), dtype=dtype)
        self.b1 = Parameter(np.zeros(hidden), dtype=dtype)
        self.w2 = Parameter(rng.uniform(-b2, b2, (hidden, 1)), dtype=dtype)
        self.b2 = Parameter(np.zeros(1), dtype=dtype)

    def __call__(self, tokens) -> Tensor:
        pooled = ops.mean(as_tensor(tokens), axis=1)
        hid = ops.relu(ops.linear(pooled, self.w1, self.b1))
        return ops.reshape(ops.linear(hid, self.w2, self.b2), (-1,))


def bce_logits_loss(logits, labels) -> Tensor:
    """Numerically stable binary cross-entropy on logits, averaged over the batch."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    if not np.all((y == 0) | (y == 1)):
        raise InputError(f"labels must be 0 or 1, got {np.unique(y)}")
    x = logits.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    sig = 0.5 * (1 + np.tanh(0.5 * x))
    return record("bce_logits", np.asarray(per.mean(), dtype=x.dtype), (logits,),
                  lambda g: (g * (sig - y) / n,))
