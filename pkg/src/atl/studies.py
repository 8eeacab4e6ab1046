"""Desk-scale architecture-compatibility study.

A LayerScale teacher is trained in-repo, then distilled into a standard
student and into a student carrying the same native component. Per-layer
KL profiles of both students against the teacher are compared; a pair of
from-scratch runs controls for the capacity of the added component.
"""
from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .checkpoint import save_checkpoint
from .data import load_dataset
from .diagnostics import DivergenceProfile, divergence_profile
from .train import TrainRecipe, make_recipe, train
from .transfer import TransferPlan
from .vit import ArchSpec, VisionTransformer, build_model

logger = logging.getLogger(__name__)

STANDARD = ArchSpec()
LAYER_SCALE = ArchSpec(layer_scale=1e-5)

# Short runs: heavy augmentation and EMA only add lag at a few hundred steps.
_PLAIN = dict(mixup_alpha=0.0, cutmix_alpha=0.0, randaug=(0, 0.0), label_smoothing=0.0, ema_decay=None)

TEACHER_RECIPE = TrainRecipe(name="teacher-desk", base_lr=1e-3, weight_decay=0.05, warmup_epochs=1,
                             epochs=10, drop_path=0.0, **_PLAIN)
# Students share the teacher's peak lr: at the desk lr of 5e-4 the LayerScale gammas
# barely move in a few hundred steps and that student stays near chance.
STUDENT_RECIPE = make_recipe("distill", "desk").replace(name="distill-study", base_lr=1e-3, drop_path=0.0,
                                                       warmup_epochs=1, epochs=10, **_PLAIN)
SCRATCH_RECIPE = make_recipe("baseline", "desk").replace(name="scratch-study", base_lr=1e-3, drop_path=0.0,
                                                        warmup_epochs=1, epochs=10, **_PLAIN)
TEACHER_STEPS = 600
STUDENT_STEPS = 450


@dataclass
class MechanismReport:
    seeds: List[int]
    teacher_top1: float
    standard: List[DivergenceProfile]
    native: List[DivergenceProfile]
    standard_top1: List[float] = field(default_factory=list)
    native_top1: List[float] = field(default_factory=list)
    wall_time_s: float = 0.0

    def late_layers(self) -> range:
        depth = len(self.standard[0].per_layer)
        return range(depth - depth // 3, depth)

    def native_lower_every_seed(self) -> bool:
        return all(n.mean < s.mean for n, s in zip(self.native, self.standard))

    def late_spike_count(self) -> int:
        late = self.late_layers()
        return sum(p.argmax_layer in late for p in self.standard)

    def summary(self) -> dict:
        return {
            "seeds": self.seeds,
            "teacher_top1": self.teacher_top1,
            "standard_kl": [p.per_layer for p in self.standard],
            "native_kl": [p.per_layer for p in self.native],
            "standard_mean_kl": [p.mean for p in self.standard],
            "native_mean_kl": [p.mean for p in self.native],
            "standard_argmax_layer": [p.argmax_layer for p in self.standard],
            "standard_top1": self.standard_top1,
            "native_top1": self.native_top1,
            "native_lower_every_seed": self.native_lower_every_seed(),
            "late_spike_count": self.late_spike_count(),
            "wall_time_s": self.wall_time_s,
        }


def _data(train_size: int, eval_size: int, seed: int = 0):
    return load_dataset("synthetic-shapes", train_size=train_size, eval_size=eval_size, seed=seed)


def train_teacher(spec: ArchSpec = LAYER_SCALE, steps: Optional[int] = TEACHER_STEPS, seed: int = 1234,
                  data=None, recipe: TrainRecipe = TEACHER_RECIPE) -> VisionTransformer:
    data = data or _data(5000, 1000)
    teacher = build_model(spec, seed)
    result = train(teacher, None, TransferPlan(), recipe, data, seed=seed, max_steps=steps,
                   eval_each_epoch=False)
    logger.info("teacher top1 %.2f after %d steps", result.final_top1, result.steps)
    teacher.teacher_top1 = result.final_top1
    return teacher


def mechanism_study(seeds: Sequence[int] = (0, 1, 2), teacher_steps: Optional[int] = TEACHER_STEPS,
                    student_steps: Optional[int] = STUDENT_STEPS, workdir=None,
                    teacher: VisionTransformer = None,
                    data=None, kind: str = "KL", diagnostic_samples: int = 1024,
                    student_recipe: TrainRecipe = STUDENT_RECIPE) -> MechanismReport:
    """Distil one LayerScale teacher into standard and LayerScale students for each seed."""
    start = time.time()
    data = data or _data(5000, 1000)
    if teacher is None:
        teacher = train_teacher(LAYER_SCALE, teacher_steps, data=data)
    if workdir is not None:
        Path(workdir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(teacher, Path(workdir) / "teacher_layerscale.ckpt", {"family": "desk-layerscale"})
    plan = TransferPlan(method="distill", loss_kind="CE", lam=3.0)
    standard, native, standard_top1, native_top1 = [], [], [], []
    for seed in seeds:
        for spec, profiles, accs in ((STANDARD, standard, standard_top1), (LAYER_SCALE, native, native_top1)):
            student = build_model(spec, seed)
            result = train(student, teacher, plan, student_recipe, data, seed=seed, max_steps=student_steps,
                           eval_each_epoch=False)
            profile = divergence_profile(teacher, result.eval_model, data[1].batches(256), kind,
                                         diagnostic_samples)
            profiles.append(profile)
            accs.append(result.final_top1)
            logger.info("seed %d %s: top1 %.2f mean %s %.4f per-layer %s", seed,
                        "native" if spec.layer_scale else "standard", result.final_top1, kind, profile.mean,
                        [round(v, 4) for v in profile.per_layer])
    return MechanismReport(list(seeds), getattr(teacher, "teacher_top1", float("nan")), standard, native,
                           standard_top1, native_top1, time.time() - start)


def scratch_control(seeds: Sequence[int] = (0, 1, 2), steps: Optional[int] = STUDENT_STEPS, data=None,
                    recipe: TrainRecipe = SCRATCH_RECIPE) -> Dict[str, List[float]]:
    """From-scratch top-1 of the standard and the LayerScale student."""
    data = data or _data(5000, 1000)
    out: Dict[str, List[float]] = {"standard": [], "native": []}
    for seed in seeds:
        for key, spec in (("standard", STANDARD), ("native", LAYER_SCALE)):
            model = build_model(spec, seed)
            result = train(model, None, TransferPlan(), recipe, data, seed=seed, max_steps=steps,
                           eval_each_epoch=False)
            out[key].append(result.final_top1)
            logger.info("scratch seed %d %s: top1 %.2f", seed, key, result.final_top1)
    return out


def mean_std(values: Sequence[float]):
    return statistics.fmean(values), (statistics.stdev(values) if len(values) > 1 else 0.0)
