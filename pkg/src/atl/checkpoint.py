"""Checkpoint container, patch-embedding resampling and selective initialisation.

File layout (``atl-ckpt/1``)::

    ATLCKPT\\n
    <header byte length>\\n
    <JSON header: format, arch, metadata, arrays[name, shape, offset]>
    <little-endian float32 payload, arrays back to back>

The header is plain text so two checkpoints can be diffed; the payload is
exact, so a save/load round trip is bitwise.
"""
from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, CorruptCheckpointError, IncompatibilityError, VersionError
from .transfer import check_compatible, teacher_state
from .vit import ArchSpec, VisionTransformer, parameter_shapes

__all__ = [
    "FORMAT_VERSION",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "checkpoint_from_model",
    "interpolate_patch_embedding",
    "resize_position_embedding",
    "part_parameter_names",
    "selective_init",
    "read_rename_manifest",
    "import_external",
]

FORMAT_VERSION = "atl-ckpt/1"
_MAGIC = b"ATLCKPT\n"
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    arch: ArchSpec
    parameters: Dict[str, np.ndarray]
    metadata: Dict[str, object] = field(default_factory=dict)

    def validate(self) -> "Checkpoint":
        expected = parameter_shapes(self.arch)
        for name in self.parameters:
            if name not in expected:
                raise CorruptCheckpointError(f"unexpected parameter {name!r} for the embedded arch")
        for name, shape in expected.items():
            if name not in self.parameters:
                raise CorruptCheckpointError(f"missing parameter {name!r}")
            got = tuple(self.parameters[name].shape)
            if got != shape:
                raise CorruptCheckpointError(f"parameter {name!r} has shape {got}, arch implies {shape}")
        return self


def checkpoint_from_model(model: VisionTransformer, metadata: Optional[Mapping] = None) -> Checkpoint:
    meta = {"format_version": FORMAT_VERSION, "seed": None, "steps": 0, "family": ""}
    meta.update(metadata or {})
    params = {k: v.detach().cpu().numpy().astype(_DTYPE, copy=True) for k, v in model.named_parameters()}
    return Checkpoint(model.spec, params, meta)


def save_checkpoint(model, path, metadata: Optional[Mapping] = None) -> None:
    """Write ``model`` (or a :class:`Checkpoint`) atomically to ``path``."""
    ckpt = model if isinstance(model, Checkpoint) else checkpoint_from_model(model, metadata)
    ckpt.validate()
    arrays, offset = [], 0
    for name in sorted(ckpt.parameters):
        arr = np.ascontiguousarray(ckpt.parameters[name], dtype=_DTYPE)
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    meta = dict(ckpt.metadata)
    meta["format_version"] = FORMAT_VERSION
    header = json.dumps({"format": FORMAT_VERSION, "arch": ckpt.arch.to_dict(), "metadata": meta,
                         "arrays": arrays}, indent=1, sort_keys=True).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(f"{len(header)}\n".encode("ascii"))
            fh.write(header)
            for name in sorted(ckpt.parameters):
                fh.write(np.ascontiguousarray(ckpt.parameters[name], dtype=_DTYPE).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CorruptCheckpointError(f"{path}: not an atl checkpoint")
        try:
            header_len = int(fh.readline().decode("ascii"))
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
        payload = fh.read()
    version = header.get("format")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint format {version!r} (expected {FORMAT_VERSION})")
    try:
        arch = ArchSpec.from_dict(header["arch"])
    except (ConfigError, TypeError, KeyError) as exc:
        raise CorruptCheckpointError(f"{path}: invalid embedded arch ({exc})") from None
    params = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start, stop = entry["offset"], entry["offset"] + count * _DTYPE.itemsize
        if stop > len(payload):
            raise CorruptCheckpointError(f"{path}: parameter {entry['name']!r} runs past end of file")
        params[entry["name"]] = np.frombuffer(payload[start:stop], dtype=_DTYPE).reshape(shape).copy()
    return Checkpoint(arch, params, header.get("metadata", {})).validate()


def model_from_checkpoint(ckpt: Checkpoint) -> VisionTransformer:
    model = VisionTransformer(ckpt.arch)
    state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.parameters.items()}
    model.load_state_dict(state, strict=False)
    return model


def interpolate_patch_embedding(kernel: torch.Tensor, dst: int) -> torch.Tensor:
    """Bicubically resample a ``[embed_dim, 3, src, src]`` patch kernel to ``dst x dst``."""
    kernel = torch.as_tensor(kernel)
    if kernel.dim() != 4 or kernel.shape[-1] != kernel.shape[-2]:
        raise ConfigError(f"expected a square [out, in, k, k] kernel, got {tuple(kernel.shape)}")
    src = kernel.shape[-1]
    if src < 1 or dst < 1:
        raise ConfigError(f"patch sizes must be positive, got {src} -> {dst}")
    if src == dst:
        return kernel
    out, cin = kernel.shape[:2]
    planes = kernel.reshape(out * cin, 1, src, src).to(torch.float64)
    resized = F.interpolate(planes, size=(dst, dst), mode="bicubic", align_corners=False)
    return resized.reshape(out, cin, dst, dst).to(kernel.dtype)


def resize_position_embedding(pos_embed: torch.Tensor, num_prefix: int, dst_grid: int) -> torch.Tensor:
    """Bicubically resize the patch-grid part of ``[1, prefix + g*g, D]``; prefix rows are kept."""
    pos_embed = torch.as_tensor(pos_embed)
    prefix, grid = pos_embed[:, :num_prefix], pos_embed[:, num_prefix:]
    src_grid = int(round(grid.shape[1] ** 0.5))
    if src_grid * src_grid != grid.shape[1]:
        raise ConfigError(f"position embedding grid of {grid.shape[1]} tokens is not square")
    if src_grid == dst_grid:
        return pos_embed
    dim = grid.shape[-1]
    grid = grid.reshape(1, src_grid, src_grid, dim).permute(0, 3, 1, 2).to(torch.float64)
    grid = F.interpolate(grid, size=(dst_grid, dst_grid), mode="bicubic", align_corners=False)
    grid = grid.permute(0, 2, 3, 1).reshape(1, dst_grid * dst_grid, dim).to(pos_embed.dtype)
    return torch.cat([prefix, grid], dim=1)


_PART_SUFFIXES = {
    "attention": ("norm1.weight", "norm1.bias", "attn.q.weight", "attn.q.bias", "attn.k.weight",
                  "attn.k.bias", "attn.v.weight", "attn.v.bias", "attn.proj.weight", "attn.proj.bias"),
    "mlp": ("norm2.weight", "norm2.bias", "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"),
}


def part_parameter_names(parts: Iterable[str], depth: int) -> list:
    parts = set(parts)
    unknown = parts - set(_PART_SUFFIXES)
    if not parts or unknown:
        raise ConfigError(f"parts must be a nonempty subset of {sorted(_PART_SUFFIXES)}, got {sorted(parts)}")
    return [f"blocks.{i}.{suffix}" for i in range(depth)
            for part in sorted(parts) for suffix in _PART_SUFFIXES[part]]


def selective_init(student: VisionTransformer, teacher, parts: Iterable[str]) -> VisionTransformer:
    """Copy the requested per-block sub-layers from ``teacher``; nothing is frozen."""
    arch, params = teacher_state(teacher)
    check_compatible(student.spec, arch, ("depth", "embed_dim", "num_heads", "mlp_ratio"))
    own = dict(student.named_parameters())
    with torch.no_grad():
        for name in part_parameter_names(parts, student.spec.depth):
            own[name].copy_(torch.as_tensor(params[name]))
    return student


_SLICE = re.compile(r"^(?P<name>[^\[]+)(\[(?P<start>\d*):(?P<stop>\d*)\])?$")


def read_rename_manifest(path) -> Dict[str, str]:
    """Parse ``external_name -> internal_name`` lines; ``#`` starts a comment.

    An external name may carry a leading-axis slice such as ``qkv.weight[0:64]``
    to split fused projections.
    """
    mapping = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" in line:
            src, dst = (s.strip() for s in line.split("->", 1))
        else:
            pieces = line.split()
            if len(pieces) != 2:
                raise ConfigError(f"{path}:{lineno}: expected 'external -> internal'")
            src, dst = pieces
        if dst in mapping:
            raise ConfigError(f"{path}:{lineno}: {dst!r} mapped twice")
        mapping[dst] = src
    return mapping


def _fetch(arrays: Mapping[str, np.ndarray], ref: str) -> np.ndarray:
    m = _SLICE.match(ref)
    if not m or m.group("name") not in arrays:
        raise IncompatibilityError(f"external array {ref!r} not found")
    arr = np.asarray(arrays[m.group("name")])
    if m.group(2):
        start = int(m.group("start")) if m.group("start") else None
        stop = int(m.group("stop")) if m.group("stop") else None
        arr = arr[start:stop]
    return arr


def import_external(arrays: Mapping[str, np.ndarray], manifest, arch: ArchSpec,
                    metadata: Optional[Mapping] = None) -> Checkpoint:
    """Build a checkpoint for ``arch`` from foreign arrays via a rename manifest.

    Patch kernels of a different size are resampled bicubically and the patch
    grid of the position embedding is resized to match; class-token rows are
    kept. Any parameter the manifest does not cover raises.
    """
    mapping = read_rename_manifest(manifest) if not isinstance(manifest, Mapping) else dict(manifest)
    expected = parameter_shapes(arch)
    params = {}
    for name, shape in expected.items():
        if name not in mapping:
            raise IncompatibilityError(f"rename manifest does not cover {name!r}")
        arr = _fetch(arrays, mapping[name]).astype(np.float32)
        if name == "patch_embed.weight" and arr.shape != shape:
            arr = interpolate_patch_embedding(torch.from_numpy(arr), arch.patch_size).numpy()
        elif name == "pos_embed" and arr.shape != shape:
            arr = resize_position_embedding(torch.from_numpy(arr.reshape(1, -1, arch.embed_dim)), 1,
                                            arch.grid_size).numpy()
        if tuple(arr.shape) != shape:
            raise IncompatibilityError(f"{name}: external shape {tuple(arr.shape)} != expected {shape}")
        params[name] = arr
    meta = {"format_version": FORMAT_VERSION, "seed": None, "steps": 0, "family": "imported"}
    meta.update(metadata or {})
    return Checkpoint(arch, params, meta).validate()
