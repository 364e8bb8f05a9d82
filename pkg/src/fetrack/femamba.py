"""Prompt-fused bidirectional Mamba blocks and the dual-branch backbone."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fetrack.errors import ConfigError, InputError, ShapeError
from fetrack.numerics import Module, Parameter, Tensor, as_tensor, ops
from fetrack.ssm import SelectiveSSM


@dataclass
class BackboneConfig:
    depth: int = 4
    dim: int = 96
    d_state: int = 16
    expand: int = 2
    prompt_dim: int = 16
    conv_kernel: int = 4
    chunk: int | None = None

    def validate(self) -> None:
        if self.depth < 0:
            raise ConfigError("depth", f"must be non-negative, got {self.depth}")
        if self.dim < 1:
            raise ConfigError("dim", f"must be positive, got {self.dim}")
        if self.expand != 2:
            raise ConfigError("expand", f"expansion ratio is fixed at 2, got {self.expand}")
        if self.prompt_dim != self.d_state:
            raise ConfigError("prompt_dim", f"prompt dim {self.prompt_dim} must equal state size {self.d_state}")
        if self.conv_kernel < 1:
            raise ConfigError("conv_kernel", f"must be positive, got {self.conv_kernel}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.dim

    @property
    def dt_rank(self) -> int:
        return math.ceil(self.dim / 16)


VIM_S = BackboneConfig(depth=24, dim=384, d_state=16, prompt_dim=16)


class FEMambaBlock(Module):
    """Pre-norm bidirectional selective-scan block with an additive C-prompt.

    ``x' = SiLU(conv(Linear_x(norm(H))))`` feeds a forward scan and a scan of
    the reversed sequence; each direction adds the other modality's prompt to
    its output matrix. Both outputs are gated by ``SiLU(Linear_z(norm(H)))``,
    summed, projected back to C and added to the residual stream.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        C, E = cfg.dim, cfg.d_inner
        self.cfg = cfg
        self.norm_gamma = Parameter(np.ones(C), dtype=dtype)
        self.norm_beta = Parameter(np.zeros(C), dtype=dtype)
        bound = 1.0 / math.sqrt(C)
        self.w_z = Parameter(rng.uniform(-bound, bound, (C, E)), dtype=dtype)
        self.w_x = Parameter(rng.uniform(-bound, bound, (C, E)), dtype=dtype)
        kb = 1.0 / math.sqrt(cfg.conv_kernel)
        self.conv_kernel = Parameter(rng.uniform(-kb, kb, (E, cfg.conv_kernel)), dtype=dtype)
        self.conv_bias = Parameter(np.zeros(E), dtype=dtype)
        self.ssm_f = SelectiveSSM(E, cfg.d_state, cfg.dt_rank, rng, dtype)
        self.ssm_b = SelectiveSSM(E, cfg.d_state, cfg.dt_rank, rng, dtype)
        ob = 1.0 / math.sqrt(E)
        self.w_out = Parameter(rng.uniform(-ob, ob, (E, C)), dtype=dtype)

    def __call__(self, H, prompt=None) -> Tensor:
        H = as_tensor(H)
        if H.ndim != 3 or H.shape[2] != self.cfg.dim:
            raise ShapeError(f"block input {H.shape} does not end in dim {self.cfg.dim}")
        if prompt is not None:
            prompt = as_tensor(prompt)
            if prompt.shape[-1] != self.cfg.d_state:
                raise ConfigError("prompt_dim", f"prompt width {prompt.shape[-1]} != state size {self.cfg.d_state}")
            if prompt.shape[:2] != H.shape[:2]:
                raise ShapeError(f"prompt {prompt.shape} does not align with tokens {H.shape}")
        chunk = self.cfg.chunk
        normed = ops.layer_norm(H, self.norm_gamma, self.norm_beta)
        z = ops.linear(normed, self.w_z)
        xp = ops.silu(ops.depthwise_conv1d(ops.linear(normed, self.w_x), self.conv_kernel, self.conv_bias))
        y_f = self.ssm_f(xp, prompt, chunk)
        rev_prompt = None if prompt is None else ops.flip(prompt, 1)
        y_b = ops.flip(self.ssm_b(ops.flip(xp, 1), rev_prompt, chunk), 1)
        gate = ops.silu(z)
        y = ops.add(ops.mul(y_f, gate), ops.mul(y_b, gate))
        return ops.add(H, ops.linear(y, self.w_out))


class Backbone(Module):
    """Two parameter-independent block stacks; each consumes the other's prompt."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.rgb_blocks = [FEMambaBlock(cfg, rng, dtype) for _ in range(cfg.depth)]
        self.event_blocks = [FEMambaBlock(cfg, rng, dtype) for _ in range(cfg.depth)]

    def __call__(self, h_rgb, h_event, p_rgb=None, p_event=None):
        return backbone_forward(h_rgb, h_event, p_rgb, p_event, self.rgb_blocks, self.event_blocks)


def backbone_forward(h_rgb, h_event, p_rgb, p_event, rgb_blocks, event_blocks):
    """Run both stacks; the RGB stack sees ``p_event`` and the event stack sees ``p_rgb``."""
    if len(rgb_blocks) != len(event_blocks):
        raise ConfigError("depth", f"branch depths differ: {len(rgb_blocks)} vs {len(event_blocks)}")
    h_rgb, h_event = as_tensor(h_rgb), as_tensor(h_event)
    if h_rgb.shape[:2] != h_event.shape[:2]:
        raise ShapeError(f"branch token shapes differ: {h_rgb.shape} vs {h_event.shape}")
    for blk_r, blk_e in zip(rgb_blocks, event_blocks):
        h_rgb, h_event = blk_r(h_rgb, p_event), blk_e(h_event, p_rgb)
    return h_rgb, h_event


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, module: Module, meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` (names, shapes, offsets) and ``<path>.bin`` (<f4 blob)."""
    path = Path(path)
    state = module.state_dict()
    entries, offset = [], 0
    blob_path, manifest_path = path.with_suffix(".bin"), path.with_suffix(".json")
    with open(blob_path, "wb") as fh:
        for name, arr in state.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            fh.write(raw)
            offset += len(raw)
    manifest = {"format": "fetrack-f32-le", "tensors": entries, "meta": meta or {}}
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path, blob_path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest_path, blob_path = path.with_suffix(".json"), path.with_suffix(".bin")
    for p in (manifest_path, blob_path):
        if not p.exists():
            raise InputError(f"checkpoint file not found: {p}")
    manifest = json.loads(manifest_path.read_text())
    blob = blob_path.read_bytes()
    state = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"]
        if start + 4 * n > len(blob):
            raise InputError(f"checkpoint blob truncated at tensor {e['name']}")
        state[e["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(e["shape"])
    return state, manifest.get("meta", {})


def load_checkpoint(path, module: Module) -> dict:
    state, meta = read_checkpoint(path)
    module.load_state_dict(state)
    return meta

