"""Configurable Vision Transformer with optional teacher-native components.

The model keeps Q, K and V as separate projections so that attention copy can
address them individually, and every block returns its post-softmax attention
map so that transfer losses and diagnostics can consume it.

Token layout is ``[cls, registers..., patches...]``.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError

__all__ = [
    "ArchSpec",
    "TokenLayout",
    "AttentionTrace",
    "VisionTransformer",
    "Block",
    "build_model",
    "forward",
    "attention_block_forward",
    "apply_layer_scale",
    "build_relative_position_index",
    "full_relative_position_index",
    "parameter_shapes",
    "deterministic_mode",
    "set_deterministic",
]


@dataclass(frozen=True)
class ArchSpec:
    depth: int = 6
    embed_dim: int = 64
    num_heads: int = 4
    patch_size: int = 4
    image_size: int = 32
    num_classes: int = 10
    layer_scale: Optional[float] = None
    pre_layer_norm: bool = False
    relative_position_bias: bool = False
    num_registers: int = 0
    drop_path_rate: float = 0.0
    mlp_ratio: float = 4.0

    def validate(self) -> "ArchSpec":
        for name in ("depth", "embed_dim", "num_heads", "patch_size", "image_size", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim mod num_heads == 0 violated: {self.embed_dim} % {self.num_heads} != 0")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size mod patch_size == 0 violated: {self.image_size} % {self.patch_size} != 0")
        if self.layer_scale is not None and not self.layer_scale > 0:
            raise ConfigError(f"layer_scale must be positive when set, got {self.layer_scale!r}")
        if not isinstance(self.num_registers, int) or self.num_registers < 0:
            raise ConfigError(f"num_registers must be a non-negative integer, got {self.num_registers!r}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate!r}")
        if not self.mlp_ratio > 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio!r}")
        return self

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def num_prefix_tokens(self) -> int:
        return 1 + self.num_registers

    @property
    def num_tokens(self) -> int:
        return self.num_prefix_tokens + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def token_layout(self) -> "TokenLayout":
        return TokenLayout(self.num_registers, self.num_patches)

    def replace(self, **changes) -> "ArchSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ArchSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown ArchSpec fields: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass(frozen=True)
class TokenLayout:
    """Positions of the class token, registers and patches in a sequence."""

    num_registers: int
    num_patches: int

    cls_index = 0

    @property
    def register_range(self) -> Tuple[int, int]:
        return 1, 1 + self.num_registers

    @property
    def patch_range(self) -> Tuple[int, int]:
        start = 1 + self.num_registers
        return start, start + self.num_patches

    @property
    def num_tokens(self) -> int:
        return 1 + self.num_registers + self.num_patches


@dataclass
class AttentionTrace:
    """Per-layer attention maps captured during one forward pass.

    ``maps[l]`` is ``[batch, heads, T, T]`` with rows summing to one and
    ``log_maps[l]`` the matching log-softmax, kept so that cross-entropy style
    losses never take the log of an already rounded probability.
    """

    maps: List[torch.Tensor]
    layout: TokenLayout
    log_maps: List[torch.Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.maps)

    def detach(self) -> "AttentionTrace":
        return AttentionTrace([m.detach() for m in self.maps], self.layout,
                              [m.detach() for m in self.log_maps])


_DETERMINISTIC = os.environ.get("ATL_DETERMINISTIC", "0") == "1"


def deterministic_mode() -> bool:
    return _DETERMINISTIC


def set_deterministic(enabled: bool = True) -> None:
    """Toggle bitwise-reproducible execution (also set by ``ATL_DETERMINISTIC=1``)."""
    global _DETERMINISTIC
    _DETERMINISTIC = enabled
    torch.use_deterministic_algorithms(enabled, warn_only=False)


if _DETERMINISTIC:
    torch.use_deterministic_algorithms(True)


def apply_layer_scale(gamma: torch.Tensor, branch_output: torch.Tensor) -> torch.Tensor:
    """Per-channel scaling of a residual branch; the residual add stays with the caller."""
    if gamma.dim() != 1 or branch_output.shape[-1] != gamma.shape[0]:
        raise DimensionError(
            f"gamma of shape {tuple(gamma.shape)} does not conform to branch output "
            f"{tuple(branch_output.shape)}")
    return branch_output * gamma


def build_relative_position_index(grid_h: int, grid_w: int) -> torch.Tensor:
    """Table slot for every (query patch, key patch) pair of a row-major grid.

    The slot depends only on the 2-D offset between the two patches and lies in
    ``[0, (2*grid_h - 1) * (2*grid_w - 1))``.
    """
    if grid_h < 1 or grid_w < 1:
        raise ConfigError(f"grid dimensions must be >= 1, got {grid_h}x{grid_w}")
    ys, xs = torch.meshgrid(torch.arange(grid_h), torch.arange(grid_w), indexing="ij")
    coords = torch.stack([ys.flatten(), xs.flatten()])  # 2, P
    rel = coords[:, :, None] - coords[:, None, :]  # 2, P, P
    dy = rel[0] + grid_h - 1
    dx = rel[1] + grid_w - 1
    return dy * (2 * grid_w - 1) + dx


def full_relative_position_index(grid_h: int, grid_w: int, num_prefix: int) -> torch.Tensor:
    """Extend the patch index to the whole token sequence.

    Prefix tokens (class and registers) share three dedicated slots appended
    after the offset slots: prefix query -> any key, any query -> prefix key,
    and prefix -> prefix.
    """
    patch_index = build_relative_position_index(grid_h, grid_w)
    num_offsets = (2 * grid_h - 1) * (2 * grid_w - 1)
    n = num_prefix + grid_h * grid_w
    index = torch.empty(n, n, dtype=torch.long)
    index[num_prefix:, num_prefix:] = patch_index
    index[:num_prefix, :] = num_offsets
    index[:, :num_prefix] = num_offsets + 1
    index[:num_prefix, :num_prefix] = num_offsets + 2
    return index


class RelativePositionBias(nn.Module):

    def __init__(self, grid_size: int, num_heads: int, num_prefix: int):
        super().__init__()
        num_slots = (2 * grid_size - 1) ** 2 + 3
        self.table = nn.Parameter(torch.zeros(num_slots, num_heads))
        self.register_buffer(
            "index", full_relative_position_index(grid_size, grid_size, num_prefix), persistent=False)

    def forward(self) -> torch.Tensor:
        n = self.index.shape[0]
        bias = self.table[self.index.reshape(-1)].reshape(n, n, -1)
        return bias.permute(2, 0, 1)  # heads, T, T


class Attention(nn.Module):

    def __init__(self, dim: int, num_heads: int, rel_pos: Optional[RelativePositionBias] = None):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_pos = rel_pos

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, N, _ = x.shape
        return x.reshape(B, N, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        B, N, C = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        logits = (q * self.scale) @ k.transpose(-2, -1)
        if self.rel_pos is not None:
            logits = logits + self.rel_pos().unsqueeze(0)
        log_attn = logits.log_softmax(dim=-1)
        attn = log_attn.exp()
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(out), attn, log_attn


class LayerScale(nn.Module):

    def __init__(self, dim: int, init_values: float):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), float(init_values)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return apply_layer_scale(self.gamma, x)


class DropPath(nn.Module):
    """Per-sample stochastic depth on a residual branch."""

    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.dim() - 1)).bernoulli_(keep)
        return x * mask / keep


class Mlp(nn.Module):

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):

    def __init__(self, spec: ArchSpec, drop_path: float = 0.0):
        super().__init__()
        dim = spec.embed_dim
        rel_pos = None
        if spec.relative_position_bias:
            rel_pos = RelativePositionBias(spec.grid_size, spec.num_heads, spec.num_prefix_tokens)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, spec.num_heads, rel_pos)
        self.ls1 = LayerScale(dim, spec.layer_scale) if spec.layer_scale is not None else nn.Identity()
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, spec.mlp_hidden)
        self.ls2 = LayerScale(dim, spec.layer_scale) if spec.layer_scale is not None else nn.Identity()
        self.drop_path = DropPath(drop_path)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        y, attn, log_attn = self.attn(self.norm1(x))
        x = x + self.drop_path(self.ls1(y))
        x = x + self.drop_path(self.ls2(self.mlp(self.norm2(x))))
        return x, attn, log_attn


def attention_block_forward(block: Block, tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run one block, returning the new tokens and its ``[B, heads, T, T]`` attention map."""
    dim = block.attn.q.in_features
    if tokens.dim() != 3 or tokens.shape[-1] != dim:
        raise DimensionError(f"expected tokens [batch, T, {dim}], got {tuple(tokens.shape)}")
    rel_pos = block.attn.rel_pos
    if rel_pos is not None and rel_pos.index.shape[0] != tokens.shape[1]:
        raise DimensionError(
            f"block expects {rel_pos.index.shape[0]} tokens, got {tokens.shape[1]}")
    out, attn, _ = block(tokens)
    return out, attn


def _trunc_normal_(t: torch.Tensor, std: float = 0.02) -> None:
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


class VisionTransformer(nn.Module):
    """ViT classifier; ``frozen_names`` lists parameters excluded from updates."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        dim = spec.embed_dim
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=spec.patch_size, stride=spec.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + spec.num_patches, dim))
        self.register_tokens = (
            nn.Parameter(torch.zeros(1, spec.num_registers, dim)) if spec.num_registers else None)
        self.norm_pre = nn.LayerNorm(dim, eps=1e-6) if spec.pre_layer_norm else nn.Identity()
        rates = torch.linspace(0, spec.drop_path_rate, spec.depth).tolist()
        self.blocks = nn.ModuleList([Block(spec, rate) for rate in rates])
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.head = nn.Linear(dim, spec.num_classes)
        self.frozen_names: set = set()

    def init_weights(self) -> None:
        _trunc_normal_(self.pos_embed)
        _trunc_normal_(self.cls_token, std=1e-6)
        if self.register_tokens is not None:
            _trunc_normal_(self.register_tokens, std=1e-6)
        w = self.patch_embed.weight
        _trunc_normal_(w.view(w.shape[0], -1), std=math.sqrt(1.0 / w[0].numel()))
        nn.init.zeros_(self.patch_embed.bias)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                _trunc_normal_(module.weight)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    def freeze(self, names) -> None:
        params = dict(self.named_parameters())
        missing = set(names) - set(params)
        if missing:
            raise KeyError(f"unknown parameter names: {sorted(missing)}")
        for name in names:
            params[name].requires_grad_(False)
        self.frozen_names |= set(names)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        size = self.spec.image_size
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2] != size or images.shape[3] != size:
            raise DimensionError(f"expected images [batch, 3, {size}, {size}], got {tuple(images.shape)}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = x + self.pos_embed[:, 1:]
        cls = (self.cls_token + self.pos_embed[:, :1]).expand(x.shape[0], -1, -1)
        parts = [cls]
        if self.register_tokens is not None:
            parts.append(self.register_tokens.expand(x.shape[0], -1, -1))
        parts.append(x)
        return self.norm_pre(torch.cat(parts, dim=1))

    def forward(self, images: torch.Tensor, return_trace: bool = False):
        x = self.embed(images)
        maps, log_maps = [], []
        for block in self.blocks:
            x, attn, log_attn = block(x)
            if return_trace:
                maps.append(attn)
                log_maps.append(log_attn)
        logits = self.head(self.norm(x)[:, 0])
        if return_trace:
            return logits, AttentionTrace(maps, self.spec.token_layout, log_maps)
        return logits


def build_model(spec: ArchSpec, seed: int = 0) -> VisionTransformer:
    """Randomly initialised model; identical (spec, seed) give bitwise-identical weights."""
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = VisionTransformer(spec)
        model.init_weights()
    return model


def forward(model: VisionTransformer, images: torch.Tensor) -> Tuple[torch.Tensor, AttentionTrace]:
    return model(images, return_trace=True)


def parameter_shapes(spec: ArchSpec) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape table implied by ``spec``; the contract checkpoints are validated against."""
    spec.validate()
    D, H, P, M = spec.embed_dim, spec.num_heads, spec.patch_size, spec.mlp_hidden
    shapes: Dict[str, Tuple[int, ...]] = {
        "cls_token": (1, 1, D),
        "pos_embed": (1, 1 + spec.num_patches, D),
    }
    if spec.num_registers:
        shapes["register_tokens"] = (1, spec.num_registers, D)
    shapes["patch_embed.weight"] = (D, 3, P, P)
    shapes["patch_embed.bias"] = (D,)
    if spec.pre_layer_norm:
        shapes["norm_pre.weight"] = (D,)
        shapes["norm_pre.bias"] = (D,)
    for i in range(spec.depth):
        b = f"blocks.{i}."
        shapes[b + "norm1.weight"] = (D,)
        shapes[b + "norm1.bias"] = (D,)
        for proj in ("q", "k", "v", "proj"):
            shapes[b + f"attn.{proj}.weight"] = (D, D)
            shapes[b + f"attn.{proj}.bias"] = (D,)
        if spec.relative_position_bias:
            shapes[b + "attn.rel_pos.table"] = ((2 * spec.grid_size - 1) ** 2 + 3, H)
        if spec.layer_scale is not None:
            shapes[b + "ls1.gamma"] = (D,)
            shapes[b + "ls2.gamma"] = (D,)
        shapes[b + "norm2.weight"] = (D,)
        shapes[b + "norm2.bias"] = (D,)
        shapes[b + "mlp.fc1.weight"] = (M, D)
        shapes[b + "mlp.fc1.bias"] = (M,)
        shapes[b + "mlp.fc2.weight"] = (D, M)
        shapes[b + "mlp.fc2.bias"] = (D,)
    shapes["norm.weight"] = (D,)
    shapes["norm.bias"] = (D,)
    shapes["head.weight"] = (spec.num_classes, D)
    shapes["head.bias"] = (spec.num_classes,)
    return shapes
