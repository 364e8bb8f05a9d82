"""Shared prompt pool with Gumbel-routed, per-token prompt selection."""

from __future__ import annotations

import math

import numpy as np

from fetrack.errors import ParameterError, ShapeError
from fetrack.numerics import Module, Parameter, Tensor, as_tensor, ops, record

HARD, SOFT = "hard", "soft"


def build_pool(w_rgb, w_event) -> Tensor:
    """Elementwise product of the two (T, d) basis matrices."""
    w_rgb, w_event = as_tensor(w_rgb), as_tensor(w_event)
    if w_rgb.shape != w_event.shape:
        raise ShapeError(f"prompt pool: basis shapes {w_rgb.shape} and {w_event.shape} differ")
    return ops.mul(w_rgb, w_event)


def _one_hot_argmax(scores: np.ndarray) -> np.ndarray:
    idx = scores.argmax(axis=-1)
    out = np.zeros_like(scores)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _rng(seed):
    if seed is None or isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gumbel_select(logp, temperature: float = 1.0, seed=None, mode: str = HARD) -> Tensor:
    """Gumbel-Softmax routing over the trailing axis.

    ``seed=None`` means inference: a deterministic argmax one-hot. Otherwise
    Gumbel noise is drawn from ``seed`` (int or Generator) and the relaxed row
    is ``softmax((logp + g) / temperature)``. ``hard`` mode emits its exact
    one-hot argmax while back-propagating the relaxed row's gradient.
    """
    if not temperature > 0:
        raise ParameterError(f"gumbel temperature must be positive, got {temperature}")
    if mode not in (HARD, SOFT):
        raise ParameterError(f"unknown gumbel mode {mode!r}")
    logp = as_tensor(logp)
    rng = _rng(seed)
    if rng is None:
        return Tensor(_one_hot_argmax(logp.data))
    noise = rng.gumbel(size=logp.shape).astype(logp.dtype)
    soft = ops.softmax(ops.scale(ops.add(logp, Tensor(noise)), 1.0 / temperature), axis=-1)
    if mode == SOFT:
        return soft
    return record("straight_through", _one_hot_argmax(soft.data), (soft,), lambda g: (g,))


class PromptPool(Module):
    def __init__(self, n_prompts: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        if n_prompts < 1:
            raise ParameterError(f"prompt pool needs at least one basis prompt, got {n_prompts}")
        self.w_rgb = Parameter(rng.normal(0, 1.0, (n_prompts, dim)), dtype=dtype)
        self.w_event = Parameter(rng.normal(0, 1.0, (n_prompts, dim)), dtype=dtype)

    def __call__(self) -> Tensor:
        return build_pool(self.w_rgb, self.w_event)


class RoutingNet(Module):
    """Two-layer perceptron (SiLU hidden) followed by LogSoftmax over prompts."""

    def __init__(self, dim: int, hidden: int, n_prompts: int, rng: np.random.Generator, dtype=np.float64):
        b1, b2 = 1 / math.sqrt(dim), 1 / math.sqrt(hidden)
        self.w1 = Parameter(rng.uniform(-b1, b1, (dim, hidden)), dtype=dtype)
        self.b1 = Parameter(np.zeros(hidden), dtype=dtype)
        self.w2 = Parameter(rng.uniform(-b2, b2, (hidden, n_prompts)), dtype=dtype)
        self.b2 = Parameter(np.zeros(n_prompts), dtype=dtype)

    def __call__(self, tokens) -> Tensor:
        hid = ops.silu(ops.linear(tokens, self.w1, self.b1))
        return ops.log_softmax(ops.linear(hid, self.w2, self.b2), axis=-1)


def route(tokens, net: RoutingNet) -> Tensor:
    return net(tokens)


def generate_prompts(h_rgb, h_event, pool: PromptPool, net: RoutingNet, temperature: float = 1.0,
                     seed=None, mode: str = HARD) -> tuple[Tensor, Tensor]:
    """Route both modalities through the shared net and pool.

    Both modalities draw Gumbel noise from generators seeded identically, so
    identical token streams yield identical prompts.
    """
    h_rgb, h_event = as_tensor(h_rgb), as_tensor(h_event)
    if h_rgb.shape[:2] != h_event.shape[:2]:
        raise ShapeError(f"prompt generation: rgb tokens {h_rgb.shape} vs event tokens {h_event.shape}")
    P = pool()
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2 ** 63))
    o_rgb = gumbel_select(net(h_rgb), temperature, seed, mode)
    o_event = gumbel_select(net(h_event), temperature, seed, mode)
    return ops.linear(o_rgb, P), ops.linear(o_event, P)


class PromptGenerator(Module):
    def __init__(self, dim: int, prompt_dim: int, n_prompts: int, rng: np.random.Generator,
                 hidden: int | None = None, temperature: float = 1.0, dtype=np.float64):
        self.pool = PromptPool(n_prompts, prompt_dim, rng, dtype)
        self.router = RoutingNet(dim, hidden or dim, n_prompts, rng, dtype)
        self.temperature = temperature

    def __call__(self, h_rgb, h_event, seed=None, mode: str = HARD):
        return generate_prompts(h_rgb, h_event, self.pool, self.router, self.temperature, seed, mode)
