"""Per-layer teacher-to-student attention divergence profiles."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import torch

from .errors import ConfigError, IncompatibilityError
from .transfer import align_attention_maps
from .vit import ArchSpec, VisionTransformer

__all__ = ["DivergenceProfile", "row_divergence", "divergence_profile"]

EPS = 1e-12
KINDS = ("KL", "JS")


def row_divergence(p: torch.Tensor, q: torch.Tensor, kind: str) -> torch.Tensor:
    """KL(p || q) or JS(p, q) per row in nats, with probabilities clamped below at 1e-12."""
    log_p = p.clamp_min(EPS).log()
    log_q = q.clamp_min(EPS).log()
    if kind == "KL":
        return (p * (log_p - log_q)).sum(dim=-1)
    if kind == "JS":
        log_m = torch.logaddexp(log_p, log_q) - math.log(2.0)
        return 0.5 * ((p * (log_p - log_m)).sum(dim=-1) + (q * (log_q - log_m)).sum(dim=-1))
    raise ConfigError(f"divergence kind must be one of {KINDS}, got {kind!r}")


@dataclass
class DivergenceProfile:
    kind: str
    per_layer: List[float]
    num_samples: int
    spec_pair: Tuple[ArchSpec, ArchSpec]
    # per-batch layer means, kept for standard-error estimates
    batch_means: List[List[float]] = field(default_factory=list, repr=False)

    @property
    def mean(self) -> float:
        return sum(self.per_layer) / len(self.per_layer)

    @property
    def argmax_layer(self) -> int:
        return max(range(len(self.per_layer)), key=self.per_layer.__getitem__)

    def standard_error(self) -> List[float]:
        """Per-layer standard error of the mean across batches (0 with fewer than two batches)."""
        n = len(self.batch_means)
        if n < 2:
            return [0.0] * len(self.per_layer)
        out = []
        for layer in range(len(self.per_layer)):
            vals = [b[layer] for b in self.batch_means]
            mu = sum(vals) / n
            var = sum((v - mu) ** 2 for v in vals) / (n - 1)
            out.append(math.sqrt(var / n))
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "per_layer": list(self.per_layer),
            "num_samples": self.num_samples,
            "teacher_arch": self.spec_pair[0].to_dict(),
            "student_arch": self.spec_pair[1].to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DivergenceProfile":
        return cls(data["kind"], list(data["per_layer"]), data["num_samples"],
                   (ArchSpec.from_dict(data["teacher_arch"]), ArchSpec.from_dict(data["student_arch"])))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "value"])
        for i, v in enumerate(self.per_layer):
            writer.writerow([i, repr(float(v))])
        return buf.getvalue()


def _images(batch):
    if isinstance(batch, (tuple, list)):
        return batch[0]
    return batch


@torch.no_grad()
def divergence_profile(teacher: VisionTransformer, student: VisionTransformer, batch_stream: Iterable,
                       kind: str = "KL", max_samples: int = 1024) -> DivergenceProfile:
    """Mean per-layer divergence D(teacher row, student row) over samples, heads and query rows.

    ``batch_stream`` yields image batches or ``(images, labels)`` pairs, or is an
    ``ImageDataset``. Both models run in evaluation mode.
    """
    if kind not in KINDS:
        raise ConfigError(f"divergence kind must be one of {KINDS}, got {kind!r}")
    if max_samples < 1:
        raise ConfigError("max_samples must be >= 1")
    if teacher.spec.depth != student.spec.depth or teacher.spec.num_heads != student.spec.num_heads:
        raise IncompatibilityError(
            f"depth/heads mismatch: teacher {teacher.spec.depth}/{teacher.spec.num_heads}, "
            f"student {student.spec.depth}/{student.spec.num_heads}")
    if hasattr(batch_stream, "batches"):
        batch_stream = batch_stream.batches(256)
    modes = teacher.training, student.training
    teacher.eval()
    student.eval()
    depth = student.spec.depth
    totals = torch.zeros(depth, dtype=torch.float64)
    batch_means: List[List[float]] = []
    seen = 0
    for batch in batch_stream:
        images = _images(batch)[: max_samples - seen]
        if len(images) == 0:
            break
        _, t_trace = teacher(images, return_trace=True)
        _, s_trace = student(images, return_trace=True)
        layer_sums = []
        for t_map, s_map in zip(t_trace.maps, s_trace.maps):
            t_map = align_attention_maps(t_map, t_trace.layout, s_trace.layout)
            d = row_divergence(t_map.double(), s_map.double(), kind)  # B, h, T
            layer_sums.append(d.mean(dim=(1, 2)).sum())
        layer_sums = torch.stack(layer_sums)
        totals += layer_sums
        batch_means.append((layer_sums / len(images)).tolist())
        seen += len(images)
        if seen >= max_samples:
            break
    teacher.train(modes[0])
    student.train(modes[1])
    if seen == 0:
        raise ConfigError("batch stream produced no samples")
    per_layer = (totals / seen).clamp_min(0.0).tolist()
    return DivergenceProfile(kind, per_layer, seen, (teacher.spec, student.spec), batch_means)
