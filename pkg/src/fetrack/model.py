"""End-to-end tracker network: tokenizer, prompt generator, backbone, heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from fetrack.errors import ConfigError
from fetrack.femamba import Backbone, BackboneConfig
from fetrack.head import HeadOutput, ScoreHead, TrackingHead
from fetrack.numerics import Module, Tensor, ops, resolve_dtype
from fetrack.prompts import HARD, PromptGenerator
from fetrack.tokenizer import Tokenizer


@dataclass
class ModelConfig:
    depth: int = 4
    dim: int = 96
    d_state: int = 16
    prompt_dim: int = 16
    n_prompts: int = 8
    temperature: float = 1.0
    patch_size: int = 16
    template_size: int = 128
    search_size: int = 256
    dynamic_template: bool = True
    head_width: int = 128
    head_stages: int = 4
    score_hidden: int = 64
    chunk: int | None = None
    use_prompts: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown model option")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(depth=self.depth, dim=self.dim, d_state=self.d_state,
                              prompt_dim=self.prompt_dim, chunk=self.chunk)

    @property
    def n_templates(self) -> int:
        return 2 if self.dynamic_template else 1

    @property
    def grid(self) -> int:
        return self.search_size // self.patch_size

    def validate(self) -> None:
        if self.prompt_dim != self.d_state:
            raise ConfigError("prompt_dim", f"prompt dim {self.prompt_dim} must equal state size {self.d_state}")
        if self.n_prompts < 1:
            raise ConfigError("n_prompts", f"need at least one basis prompt, got {self.n_prompts}")
        if not self.temperature > 0:
            raise ConfigError("temperature", f"must be positive, got {self.temperature}")
        for name in ("template_size", "search_size"):
            side = getattr(self, name)
            if side < self.patch_size or side % self.patch_size:
                raise ConfigError(name, f"{side} is not a multiple of patch size {self.patch_size}")
        if self.chunk is not None and self.chunk < 1:
            raise ConfigError("chunk", f"must be positive, got {self.chunk}")
        self.backbone_config().validate()


class TrackerNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, precision="f32"):
        cfg.validate()
        dtype = resolve_dtype(precision)
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg.dim, cfg.patch_size, cfg.template_size, cfg.search_size,
                                   cfg.n_templates, rng, dtype)
        self.prompts = PromptGenerator(cfg.dim, cfg.prompt_dim, cfg.n_prompts, rng,
                                       temperature=cfg.temperature, dtype=dtype)
        self.backbone = Backbone(cfg.backbone_config(), rng, dtype)
        self.head = TrackingHead(cfg.dim, rng, cfg.head_width, cfg.head_stages, dtype)
        self.score_head = ScoreHead(2 * cfg.dim, cfg.score_hidden, rng, dtype)

    @property
    def dtype(self):
        return self.tokenizer.pos_search.dtype

    def base_modules(self) -> list[Module]:
        return [self.tokenizer, self.prompts, self.backbone, self.head]

    def base_parameters(self) -> list[Tensor]:
        return [p for m in self.base_modules() for p in m.parameters()]

    def features(self, rgb_templates, rgb_search, event_templates, event_search, seed=None,
                 mode: str = HARD) -> tuple[Tensor, Tensor]:
        """Backbone features for both branches, template tokens first."""
        cast = lambda imgs: [np.asarray(i, dtype=self.dtype) for i in imgs]
        h_rgb, h_ev = self.tokenizer(cast(rgb_templates), cast([rgb_search])[0],
                                     cast(event_templates), cast([event_search])[0])
        p_rgb = p_ev = None
        if self.cfg.use_prompts:
            p_rgb, p_ev = self.prompts(h_rgb.tokens, h_ev.tokens, seed=seed, mode=mode)
        return self.backbone(h_rgb.tokens, h_ev.tokens, p_rgb, p_ev)

    def search_tokens(self, f: Tensor) -> Tensor:
        n_x = self.tokenizer.n_x
        return ops.getitem(f, (slice(None), slice(f.shape[1] - n_x, None)))

    def __call__(self, rgb_templates, rgb_search, event_templates, event_search, seed=None,
                 mode: str = HARD) -> tuple[HeadOutput, Tensor, Tensor]:
        f_rgb, f_ev = self.features(rgb_templates, rgb_search, event_templates, event_search, seed, mode)
        out = self.head(self.search_tokens(f_rgb), self.search_tokens(f_ev))
        return out, f_rgb, f_ev

    def score_logit(self, f_rgb, f_ev) -> Tensor:
        return self.score_head(ops.concat([f_rgb, f_ev], axis=2))
