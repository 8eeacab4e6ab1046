"""Attention copy, attention distillation and the attention-map loss zoo."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import torch

from .errors import ConfigError, ContractViolation, IncompatibilityError
from .vit import ArchSpec, AttentionTrace, TokenLayout, VisionTransformer

__all__ = [
    "METHODS",
    "SUBSETS",
    "LOSS_KINDS",
    "TransferPlan",
    "parse_layers",
    "subset_parameter_names",
    "apply_attention_copy",
    "align_attention_maps",
    "row_loss",
    "attention_map_loss",
    "distill_objective",
    "teacher_state",
    "check_compatible",
]

METHODS = ("none", "copy", "distill")
SUBSETS = ("Q", "K", "V", "full")
LOSS_KINDS = ("CE", "MSE", "JSD", "L1")

EPS = 1e-12
ROW_SUM_TOL = 1e-4

LayerSpec = Union[None, str, Sequence[int]]


def parse_layers(layers: LayerSpec, depth: int) -> List[int]:
    """Resolve ``None`` (all), ``"top:k"``, ``"bottom:k"``, ``"all"`` or an explicit list."""
    if layers is None or layers == "all":
        resolved = list(range(depth))
    elif isinstance(layers, str):
        where, _, k = layers.partition(":")
        try:
            k = int(k)
        except ValueError:
            raise ConfigError(f"bad layer selector {layers!r}; use 'top:k', 'bottom:k' or a list") from None
        if k < 1 or k > depth:
            raise ConfigError(f"layer selector {layers!r} needs 1 <= k <= depth={depth}")
        if where == "top":
            resolved = list(range(depth - k, depth))
        elif where == "bottom":
            resolved = list(range(k))
        else:
            raise ConfigError(f"bad layer selector {layers!r}; use 'top:k', 'bottom:k' or a list")
    else:
        resolved = sorted({int(i) for i in layers})
    if not resolved:
        raise ConfigError("layer list is empty")
    bad = [i for i in resolved if not 0 <= i < depth]
    if bad:
        raise ConfigError(f"layers {bad} out of range [0, {depth})")
    return resolved


@dataclass(frozen=True)
class TransferPlan:
    """One transfer experiment: what to transfer, where, and with which loss.

    ``layers`` is kept unresolved (``None`` means every block) so one plan can be
    applied to models of different depth; call :meth:`resolve_layers`.
    """

    method: str = "none"
    subset: str = "full"
    layers: LayerSpec = None
    loss_kind: str = "CE"
    lam: float = 3.0
    copy_output_projection: bool = True

    def __post_init__(self):
        if isinstance(self.layers, list):
            object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> "TransferPlan":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "none":
            return self
        if self.subset not in SUBSETS:
            raise ConfigError(f"subset must be one of {SUBSETS}, got {self.subset!r}")
        if self.method == "distill":
            if self.loss_kind not in LOSS_KINDS:
                raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
            if not self.lam >= 0:
                raise ConfigError(f"lambda must be non-negative, got {self.lam!r}")
        if isinstance(self.layers, tuple) and not self.layers:
            raise ConfigError("layer list is empty")
        return self

    @classmethod
    def top(cls, k: int, **kwargs) -> "TransferPlan":
        return cls(layers=f"top:{k}", **kwargs)

    @classmethod
    def bottom(cls, k: int, **kwargs) -> "TransferPlan":
        return cls(layers=f"bottom:{k}", **kwargs)

    def resolve_layers(self, depth: int) -> List[int]:
        return parse_layers(self.layers, depth)

    def to_dict(self) -> dict:
        layers = list(self.layers) if isinstance(self.layers, tuple) else self.layers
        return {
            "method": self.method,
            "subset": self.subset,
            "layers": layers,
            "loss_kind": self.loss_kind,
            "lambda": self.lam,
            "copy_output_projection": self.copy_output_projection,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TransferPlan":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        return cls(**data)


def teacher_state(teacher) -> Tuple[ArchSpec, Dict[str, torch.Tensor]]:
    """Architecture and named arrays of a teacher given as a model or a checkpoint."""
    if isinstance(teacher, VisionTransformer):
        return teacher.spec, {k: v.detach() for k, v in teacher.named_parameters()}
    return teacher.arch, {k: torch.as_tensor(v) for k, v in teacher.parameters.items()}


def check_compatible(student: ArchSpec, teacher: ArchSpec,
                     fields: Iterable[str] = ("depth", "embed_dim", "num_heads")) -> None:
    mismatched = [f"{f} (student {getattr(student, f)}, teacher {getattr(teacher, f)})"
                  for f in fields if getattr(student, f) != getattr(teacher, f)]
    if mismatched:
        raise IncompatibilityError("teacher/student mismatch: " + ", ".join(mismatched))


_SUBSET_PROJECTIONS = {"Q": ("q",), "K": ("k",), "V": ("v",), "full": ("q", "k", "v")}


def subset_parameter_names(plan: TransferPlan, depth: int) -> List[str]:
    projections = _SUBSET_PROJECTIONS[plan.subset]
    if plan.subset == "full" and plan.copy_output_projection:
        projections = projections + ("proj",)
    return [f"blocks.{i}.attn.{p}.{kind}"
            for i in plan.resolve_layers(depth) for p in projections for kind in ("weight", "bias")]


def copy_parameters(student: VisionTransformer, teacher, names: Sequence[str]) -> VisionTransformer:
    """Overwrite ``names`` with the teacher's arrays and add them to ``student.frozen_names``."""
    arch, params = teacher_state(teacher)
    check_compatible(student.spec, arch)
    own = dict(student.named_parameters())
    with torch.no_grad():
        for name in names:
            if name not in params or name not in own:
                raise IncompatibilityError(f"parameter {name!r} missing from teacher or student")
            if tuple(params[name].shape) != tuple(own[name].shape):
                raise IncompatibilityError(
                    f"{name}: teacher shape {tuple(params[name].shape)} != student {tuple(own[name].shape)}")
            own[name].copy_(params[name])
    student.freeze(names)
    return student


def output_projection_names(layers: Sequence[int]) -> List[str]:
    return [f"blocks.{i}.attn.proj.{kind}" for i in layers for kind in ("weight", "bias")]


def apply_attention_copy(student: VisionTransformer, teacher, plan: TransferPlan) -> VisionTransformer:
    """Overwrite the planned attention projections with the teacher's and freeze them in place."""
    if plan.method != "copy":
        raise ConfigError(f"apply_attention_copy needs method='copy', got {plan.method!r}")
    return copy_parameters(student, teacher, subset_parameter_names(plan, student.spec.depth))


def align_attention_maps(teacher_map: torch.Tensor, teacher_layout: TokenLayout,
                         student_layout: TokenLayout) -> torch.Tensor:
    """Drop teacher register rows/columns the student lacks and renormalise rows."""
    if teacher_layout == student_layout:
        return teacher_map
    if teacher_layout.num_patches != student_layout.num_patches or student_layout.num_registers != 0:
        raise IncompatibilityError(
            f"cannot align teacher tokens {teacher_layout} to student tokens {student_layout}")
    keep = [teacher_layout.cls_index] + list(range(*teacher_layout.patch_range))
    keep = torch.tensor(keep, device=teacher_map.device)
    out = teacher_map.index_select(-2, keep).index_select(-1, keep)
    return out / out.sum(dim=-1, keepdim=True)


def _check_rows(p: torch.Tensor, what: str) -> None:
    err = (p.sum(dim=-1) - 1).abs().max().item() if p.numel() else 0.0
    if err > ROW_SUM_TOL:
        raise ContractViolation(f"{what} rows are not normalised (max |sum - 1| = {err:.3g})")


def row_loss(student_log: torch.Tensor, teacher: torch.Tensor, kind: str,
             student: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-row transfer loss from student log-probabilities and teacher probabilities.

    Returns a tensor with the trailing (key) axis reduced. The teacher is the
    target. ``student`` optionally supplies the probabilities themselves so
    MSE and L1 avoid a log/exp round trip.
    """
    s = student_log.exp() if student is None else student
    if kind == "CE":
        return -(teacher * student_log).sum(dim=-1)
    if kind == "MSE":
        return (s - teacher).pow(2).mean(dim=-1)
    if kind == "L1":
        return (s - teacher).abs().mean(dim=-1)
    if kind == "JSD":
        teacher_log = teacher.clamp_min(EPS).log()
        log_m = torch.logaddexp(student_log, teacher_log) - math.log(2.0)
        kl_t = (torch.xlogy(teacher, teacher) - teacher * log_m).sum(dim=-1)
        kl_s = (s * (student_log - log_m)).sum(dim=-1)
        return 0.5 * (kl_t + kl_s)
    raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {kind!r}")


def _as_maps(maps) -> Tuple[List[torch.Tensor], Optional[List[torch.Tensor]]]:
    if isinstance(maps, AttentionTrace):
        return maps.maps, (maps.log_maps or None)
    return list(maps), None


def attention_map_loss(student_maps, teacher_maps, loss_kind: str = "CE",
                       layers: Optional[Sequence[int]] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Transfer loss per selected layer and its mean.

    Each layer's loss is averaged over batch, heads and query rows; the
    returned mean is then taken over layers. ``student_maps`` may be an
    :class:`AttentionTrace` (its log-softmax maps are used directly) or a list of
    probability maps.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    s_maps, s_logs = _as_maps(student_maps)
    t_maps, _ = _as_maps(teacher_maps)
    if len(s_maps) != len(t_maps):
        raise IncompatibilityError(f"student has {len(s_maps)} maps, teacher {len(t_maps)}")
    if layers is None:
        layers = range(len(s_maps))
    per_layer = []
    for i in layers:
        s, t = s_maps[i], t_maps[i]
        if s.shape != t.shape:
            raise IncompatibilityError(f"layer {i}: student map {tuple(s.shape)} != teacher {tuple(t.shape)}")
        _check_rows(t.detach(), f"teacher layer {i}")
        _check_rows(s.detach(), f"student layer {i}")
        s_log = s_logs[i] if s_logs is not None else s.clamp_min(EPS).log()
        per_layer.append(row_loss(s_log, t.detach(), loss_kind, s).mean())
    if not per_layer:
        raise ConfigError("no layers selected")
    per_layer = torch.stack(per_layer)
    return per_layer, per_layer.mean()


def distill_objective(task_loss, transfer_loss_mean, lam: float):
    """``task + lam * transfer``."""
    if not lam >= 0:
        raise ConfigError(f"lambda must be non-negative, got {lam!r}")
    return task_loss + lam * transfer_loss_mean
