"""Patch embedding, absolute position tables, and region concatenation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fetrack.errors import InputError, ParameterError, ShapeError
from fetrack.numerics import Module, Parameter, Tensor, ops

TEMPLATE = "template"
SEARCH = "search"


@dataclass(frozen=True)
class Segment:
    region: str
    length: int
    grid: tuple[int, int]


@dataclass
class TokenSequence:
    """``tokens`` is (B, N, C); ``segments`` tag contiguous token runs by region."""

    tokens: Tensor
    modality: str
    segments: list[Segment] = field(default_factory=list)

    def __len__(self) -> int:
        return self.tokens.shape[1]

    @property
    def region_of_token(self) -> list[str]:
        return [s.region for s in self.segments for _ in range(s.length)]

    def slice(self, start: int, stop: int) -> Tensor:
        return ops.getitem(self.tokens, (slice(None), slice(start, stop)))


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, 3, S, S) -> (B, (S/p)^2, 3*p*p), row-major over the patch grid.

    Within a patch values are ordered channel, row, column.
    """
    if images.ndim == 3:
        images = images[None]
    Bsz, Cc, S, S2 = images.shape
    if S != S2:
        raise ShapeError(f"patch_embed: image must be square, got {S}x{S2}")
    if patch_size < 1 or S % patch_size:
        raise ParameterError(f"patch_embed: side {S} not divisible by patch size {patch_size}")
    g = S // patch_size
    p = images.reshape(Bsz, Cc, g, patch_size, g, patch_size)
    return np.ascontiguousarray(p.transpose(0, 2, 4, 1, 3, 5).reshape(Bsz, g * g, Cc * patch_size ** 2))


def patch_embed(images, patch_size: int, weight, bias=None, modality: str = "rgb",
                region: str = TEMPLATE) -> TokenSequence:
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    patches = extract_patches(np.asarray(images), patch_size)
    g = int(math.isqrt(patches.shape[1]))
    tokens = ops.linear(Tensor(patches.astype(weight.dtype)), weight, bias)
    return TokenSequence(tokens, modality, [Segment(region, patches.shape[1], (g, g))])


def add_positions(seq: TokenSequence, table) -> TokenSequence:
    """Add a learnable (N, C) position table to every sequence in the batch."""
    table_shape = table.shape
    if table_shape != seq.tokens.shape[1:]:
        raise ShapeError(f"add_positions: table {table_shape} vs tokens {seq.tokens.shape[1:]}")
    return TokenSequence(ops.add(seq.tokens, table), seq.modality, list(seq.segments))


def concat_region_tokens(z: TokenSequence, x: TokenSequence) -> TokenSequence:
    """Template tokens first, then search tokens."""
    if z.modality != x.modality:
        raise InputError(f"cannot concatenate {z.modality} tokens with {x.modality} tokens")
    if z.tokens.shape[2] != x.tokens.shape[2] or z.tokens.shape[0] != x.tokens.shape[0]:
        raise ShapeError(f"concat: token shapes {z.tokens.shape} and {x.tokens.shape} disagree")
    if len(x) == 0:
        return TokenSequence(z.tokens, z.modality, list(z.segments))
    return TokenSequence(ops.concat([z.tokens, x.tokens], axis=1), z.modality,
                         list(z.segments) + list(x.segments))


class PatchEmbed(Module):
    def __init__(self, patch_size: int, dim: int, rng: np.random.Generator, dtype=np.float64,
                 in_channels: int = 3):
        fan_in = in_channels * patch_size ** 2
        bound = 1.0 / math.sqrt(fan_in)
        self.patch_size = patch_size
        self.weight = Parameter(rng.uniform(-bound, bound, (fan_in, dim)), dtype=dtype)
        self.bias = Parameter(np.zeros(dim), dtype=dtype)

    def __call__(self, images, modality: str, region: str) -> TokenSequence:
        return patch_embed(images, self.patch_size, self.weight, self.bias, modality, region)


class Tokenizer(Module):
    """Embeds template crops and the search crop of one modality pair.

    RGB and event crops use separate patch projections; the template and
    search position tables are shared by both modalities. The template table
    covers ``n_templates`` consecutive template crops.
    """

    def __init__(self, dim: int, patch_size: int, template_size: int, search_size: int,
                 n_templates: int, rng: np.random.Generator, dtype=np.float64):
        for side in (template_size, search_size):
            if side % patch_size:
                raise ParameterError(f"crop side {side} not divisible by patch size {patch_size}")
        self.patch_size = patch_size
        self.n_templates = n_templates
        self.n_z = (template_size // patch_size) ** 2
        self.n_x = (search_size // patch_size) ** 2
        self.rgb_embed = PatchEmbed(patch_size, dim, rng, dtype)
        self.event_embed = PatchEmbed(patch_size, dim, rng, dtype)
        self.pos_template = Parameter(rng.normal(0, 0.02, (n_templates * self.n_z, dim)), dtype=dtype)
        self.pos_search = Parameter(rng.normal(0, 0.02, (self.n_x, dim)), dtype=dtype)

    def embed(self, embedder: PatchEmbed, templates: list, search, modality: str) -> TokenSequence:
        if len(templates) != self.n_templates:
            raise ShapeError(f"expected {self.n_templates} template crops, got {len(templates)}")
        zs = [embedder(t, modality, TEMPLATE) for t in templates]
        z = zs[0]
        for extra in zs[1:]:
            z = TokenSequence(ops.concat([z.tokens, extra.tokens], axis=1), modality, z.segments + extra.segments)
        z = add_positions(z, self.pos_template)
        x = add_positions(embedder(search, modality, SEARCH), self.pos_search)
        return concat_region_tokens(z, x)

    def __call__(self, rgb_templates: list, rgb_search, event_templates: list, event_search):
        h_rgb = self.embed(self.rgb_embed, rgb_templates, rgb_search, "rgb")
        h_event = self.embed(self.event_embed, event_templates, event_search, "event")
        return h_rgb, h_event
