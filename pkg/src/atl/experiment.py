"""Config-driven experiment runner, append-only run store, seed aggregation and reports.

A config is a YAML (or JSON) document::

    name: distill-deit-micro
    student_arch: {preset: vit-micro, layer_scale: 1.0e-5}
    teacher_ref: teachers/ls.ckpt          # relative to the config file
    plan: {method: distill, layers: "top:3", loss_kind: CE, lambda: 3}
    recipe: distill-desk                   # preset name, or a mapping with optional `preset`
    dataset: {source: synthetic-shapes, train_size: 5000}
    seeds: [0, 1, 2]
    diagnostics: KL                        # none | KL | JS | both
    baseline: baseline.yaml                # optional, for deltas in reports
"""
from __future__ import annotations

import copy
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import statistics
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import yaml

from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .data import load_dataset
from .diagnostics import divergence_profile
from .errors import (AggregationError, ComparisonError, ConfigError, IncompatibilityError, NotFoundError,
                     SchemaError)
from .train import RunResult, TrainRecipe, make_recipe, train
from .transfer import SUBSETS, TransferPlan, apply_attention_copy, check_compatible, parse_layers
from .vit import ArchSpec, build_model

logger = logging.getLogger(__name__)

ARCH_PRESETS = {
    "vit-micro": ArchSpec(),
}

DIAGNOSTICS = ("none", "KL", "JS", "both")
SWEEP_AXES = ("lambda", "layers", "qkv", "loss_kind")


@dataclass
class ExperimentConfig:
    name: str
    student_arch: ArchSpec
    plan: TransferPlan
    recipe: TrainRecipe
    dataset: Dict[str, Any]
    seeds: List[int]
    teacher_ref: Optional[str] = None
    diagnostics: str = "none"
    baseline: Optional[str] = None
    max_steps: Optional[int] = None
    diagnostic_samples: int = 1024
    ema_eval: bool = True
    base_dir: Path = field(default_factory=Path, compare=False)

    def canonical(self) -> dict:
        """Content that identifies the experiment; seeds and file locations are excluded."""
        return {
            "name": self.name,
            "student_arch": self.student_arch.to_dict(),
            "teacher_ref": self.teacher_ref,
            "plan": self.plan.to_dict(),
            "recipe": self.recipe.to_dict(),
            "dataset": self.dataset,
            "diagnostics": self.diagnostics,
            "max_steps": self.max_steps,
            "ema_eval": self.ema_eval,
        }

    @property
    def fingerprint(self) -> str:
        return fingerprint_of(self.canonical())

    def teacher_path(self) -> Optional[Path]:
        if self.teacher_ref is None:
            return None
        path = Path(self.teacher_ref)
        return path if path.is_absolute() else self.base_dir / path

    def baseline_fingerprint(self) -> Optional[str]:
        if self.baseline is None:
            return None
        path = Path(self.baseline)
        path = path if path.is_absolute() else self.base_dir / path
        if path.exists():
            return load_config(path).fingerprint
        return self.baseline  # taken as a literal fingerprint

    def with_plan(self, **changes) -> "ExperimentConfig":
        plan = dict(self.plan.to_dict(), **changes)
        return dataclasses.replace(self, plan=TransferPlan.from_dict(plan))


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint_of(canonical: Mapping) -> str:
    return hashlib.sha256(canonical_json(canonical).encode("utf-8")).hexdigest()[:16]


def _section(raw: Mapping, key: str, kind=dict):
    value = raw.get(key)
    if not isinstance(value, kind):
        raise SchemaError(key, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def parse_config(raw: Mapping, base_dir: Path = Path(".")) -> ExperimentConfig:
    """Validate a parsed config document, raising :class:`SchemaError` with the field path."""
    if not isinstance(raw, Mapping):
        raise SchemaError("<root>", "config must be a mapping")
    known = {"name", "student_arch", "teacher_ref", "plan", "recipe", "dataset", "seeds", "diagnostics",
             "baseline", "max_steps", "diagnostic_samples", "ema_eval"}
    for key in raw:
        if key not in known:
            raise SchemaError(key, "unknown field")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise SchemaError("name", "must be a nonempty string")

    arch_raw = dict(raw.get("student_arch") or {"preset": "vit-micro"})
    preset = arch_raw.pop("preset", "vit-micro")
    if preset not in ARCH_PRESETS:
        raise SchemaError("student_arch.preset", f"unknown preset {preset!r}")
    try:
        arch = ARCH_PRESETS[preset].replace(**arch_raw).validate()
    except TypeError as exc:
        raise SchemaError("student_arch", str(exc)) from None
    except ConfigError as exc:
        raise SchemaError("student_arch", str(exc)) from None

    try:
        plan = TransferPlan.from_dict(raw.get("plan") or {})
    except TypeError as exc:
        raise SchemaError("plan", str(exc)) from None
    except ConfigError as exc:
        raise SchemaError("plan", str(exc)) from None
    if plan.method != "none":
        try:
            parse_layers(plan.layers, arch.depth)
        except ConfigError as exc:
            raise SchemaError("plan.layers", str(exc)) from None

    recipe_raw = raw.get("recipe", "baseline-desk")
    try:
        if isinstance(recipe_raw, str):
            recipe = _recipe_preset(recipe_raw)
        elif isinstance(recipe_raw, Mapping):
            recipe_raw = dict(recipe_raw)
            preset_name = recipe_raw.pop("preset", None)
            if preset_name is not None:
                base = _recipe_preset(preset_name).to_dict()
                base.update(recipe_raw)
                base.setdefault("name", preset_name)
                recipe = TrainRecipe.from_dict(base)
            else:
                recipe = TrainRecipe.from_dict(recipe_raw)
        else:
            raise SchemaError("recipe", "must be a preset name or a mapping")
    except (TypeError, ConfigError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError("recipe", str(exc)) from None

    dataset = raw.get("dataset", {"source": "synthetic-shapes"})
    if isinstance(dataset, str):
        dataset = {"source": dataset}
    if not isinstance(dataset, Mapping) or not isinstance(dataset.get("source"), str):
        raise SchemaError("dataset.source", "must name a dataset source")
    dataset = dict(dataset)

    seeds = raw.get("seeds", [0])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)):
        raise SchemaError("seeds", "must be a nonempty list of integers")
    if len(set(seeds)) != len(seeds):
        raise SchemaError("seeds", "seeds must be distinct")

    teacher_ref = raw.get("teacher_ref")
    if plan.method != "none" and not teacher_ref:
        raise SchemaError("teacher_ref", f"required when plan.method is {plan.method!r}")
    if teacher_ref is not None and not isinstance(teacher_ref, str):
        raise SchemaError("teacher_ref", "must be a path string")

    diagnostics = raw.get("diagnostics", "none")
    if diagnostics not in DIAGNOSTICS:
        raise SchemaError("diagnostics", f"must be one of {DIAGNOSTICS}")
    if diagnostics != "none" and not teacher_ref:
        raise SchemaError("teacher_ref", "required when diagnostics are requested")

    max_steps = raw.get("max_steps")
    if max_steps is not None and (not isinstance(max_steps, int) or max_steps < 1):
        raise SchemaError("max_steps", "must be a positive integer")
    samples = raw.get("diagnostic_samples", 1024)
    if not isinstance(samples, int) or samples < 1:
        raise SchemaError("diagnostic_samples", "must be a positive integer")

    ema_eval = raw.get("ema_eval", True)
    if not isinstance(ema_eval, bool):
        raise SchemaError("ema_eval", "must be true or false")

    return ExperimentConfig(name=name, student_arch=arch, plan=plan, recipe=recipe, dataset=dataset,
                            seeds=list(seeds), teacher_ref=teacher_ref, diagnostics=diagnostics,
                            baseline=raw.get("baseline"), max_steps=max_steps, diagnostic_samples=samples,
                            ema_eval=ema_eval, base_dir=Path(base_dir))


def _recipe_preset(name: str) -> TrainRecipe:
    method, _, scale = name.rpartition("-")
    if not method:
        raise SchemaError("recipe", f"preset names look like 'distill-desk', got {name!r}")
    try:
        return make_recipe(method, scale)
    except ConfigError as exc:
        raise SchemaError("recipe", str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise SchemaError("<root>", f"unparseable config: {exc}") from None
    return parse_config(raw, path.parent)


# --------------------------------------------------------------------------- store

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunRecord:
    config_fingerprint: str
    name: str
    seed: int
    final_top1: float
    per_epoch_top1: List[float]
    plan: Dict[str, Any]
    recipe_name: str
    wall_time_s: float
    dataset: Dict[str, Any]
    config: Dict[str, Any]
    steps: int = 0
    divergence: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    baseline_ref: Optional[str] = None
    axis: Optional[Dict[str, Any]] = None
    started_at: str = ""
    finished_at: str = ""
    record_id: str = ""

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("record_id")
        return d

    @classmethod
    def from_dict(cls, data: Mapping, record_id: str = "") -> "RunRecord":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in fields}, record_id=record_id)


class RunStore:
    """Append-only directory of JSON run records, addressed by content hash.

    ``index.json`` is a convenience cache rewritten after every append; reads
    always rescan the record files.
    """

    def __init__(self, root):
        self.root = Path(root)

    @property
    def records_dir(self) -> Path:
        return self.root / "records"

    def append(self, record: RunRecord) -> RunRecord:
        for other in self.records(fingerprint=record.config_fingerprint):
            if canonical_json(other.config) != canonical_json(record.config):
                raise ConfigError(
                    f"fingerprint collision: {record.config_fingerprint} already names a different config")
        text = json.dumps(record.to_dict(), sort_keys=True, indent=1)
        record_id = hashlib.sha256(text.encode("utf-8")).hexdigest()
        path = self.records_dir / record_id[:2] / f"{record_id}.json"
        if path.exists():
            raise ConfigError(f"record {record_id} already stored")
        _atomic_write(path, text)
        record.record_id = record_id
        self._write_index()
        return record

    def records(self, **filters) -> List[RunRecord]:
        out = []
        if self.records_dir.exists():
            for path in sorted(self.records_dir.glob("*/*.json")):
                rec = RunRecord.from_dict(json.loads(path.read_text()), path.stem)
                if all(_matches(rec, k, v) for k, v in filters.items()):
                    out.append(rec)
        return sorted(out, key=_record_order)

    def _write_index(self) -> None:
        index = [{"id": r.record_id, "fingerprint": r.config_fingerprint, "name": r.name, "seed": r.seed,
                  "axis": r.axis} for r in self.records()]
        _atomic_write(self.root / "index.json", json.dumps(index, sort_keys=True, indent=1))


def _axis_sort_value(rec: RunRecord):
    if not rec.axis:
        return (0, 0.0, "")
    value = rec.axis.get("value")
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return (1, float(value), "")
    return (2, 0.0, json.dumps(value, sort_keys=True))


def _record_order(rec: RunRecord):
    return (rec.name, _axis_sort_value(rec), rec.seed, rec.started_at, rec.record_id)


def _matches(rec: RunRecord, key: str, value) -> bool:
    if key == "fingerprint":
        return rec.config_fingerprint == value
    if key == "name":
        return rec.name == value
    if key == "method":
        return rec.plan.get("method") == value
    if key == "axis":
        return bool(rec.axis) and rec.axis.get("name") == value
    if key == "loss_kind":
        return rec.plan.get("loss_kind") == value
    if key == "divergence":
        return value in rec.divergence
    raise ConfigError(f"unknown query key {key!r}")


# --------------------------------------------------------------------------- running

def _load_teacher(cfg: ExperimentConfig):
    path = cfg.teacher_path()
    if path is None:
        return None
    if not path.exists():
        raise ConfigError(f"teacher checkpoint not found: {path}")
    return load_checkpoint(path)


def run_config(cfg: ExperimentConfig, store: Optional[RunStore] = None, axis: Optional[dict] = None,
               save_checkpoint_to: Optional[Path] = None) -> List[RunRecord]:
    """Train/evaluate/diagnose once per seed and append one record per seed."""
    teacher_ckpt = _load_teacher(cfg)
    if teacher_ckpt is not None and (cfg.plan.method != "none" or cfg.diagnostics != "none"):
        check_compatible(cfg.student_arch, teacher_ckpt.arch)
    options = {k: v for k, v in cfg.dataset.items() if k != "source"}
    options.setdefault("image_size", cfg.student_arch.image_size)
    train_set, eval_set = load_dataset(cfg.dataset["source"], **options)
    canonical = cfg.canonical()
    fingerprint = fingerprint_of(canonical)
    baseline_ref = cfg.baseline_fingerprint()
    records = []
    for seed in cfg.seeds:
        started = _now()
        teacher = model_from_checkpoint(teacher_ckpt) if teacher_ckpt is not None else None
        student = build_model(cfg.student_arch, seed)
        if cfg.plan.method == "copy":
            apply_attention_copy(student, teacher_ckpt, cfg.plan)
        result = train(student, teacher, cfg.plan, cfg.recipe, (train_set, eval_set), seed=seed,
                       max_steps=cfg.max_steps, use_ema_eval=cfg.ema_eval)
        divergence = {}
        if cfg.diagnostics != "none" and teacher is not None:
            kinds = ("KL", "JS") if cfg.diagnostics == "both" else (cfg.diagnostics,)
            for kind in kinds:
                profile = divergence_profile(teacher, result.eval_model, eval_set.batches(256), kind,
                                             cfg.diagnostic_samples)
                divergence[kind] = profile.to_dict()
        if save_checkpoint_to is not None:
            target = Path(str(save_checkpoint_to).format(seed=seed))
            save_checkpoint(result.eval_model, target,
                            {"seed": seed, "steps": result.steps, "family": cfg.name})
        record = RunRecord(
            config_fingerprint=fingerprint, name=cfg.name, seed=seed, final_top1=result.final_top1,
            per_epoch_top1=result.per_epoch_top1, plan=cfg.plan.to_dict(), recipe_name=result.recipe_name,
            wall_time_s=result.wall_time_s, dataset=cfg.dataset, config=canonical, steps=result.steps,
            divergence=divergence, baseline_ref=baseline_ref, axis=axis, started_at=started,
            finished_at=_now())
        if store is not None:
            store.append(record)
        records.append(record)
        logger.info("%s seed %d: top1 %.2f", cfg.name, seed, result.final_top1)
    return records


def run_experiment(config_path, store_path=None, **overrides) -> List[RunRecord]:
    cfg = load_config(config_path)
    store = RunStore(store_path) if store_path is not None else None
    return run_config(cfg, store, **overrides)


def sweep_configs(cfg: ExperimentConfig, axis: Mapping[str, Sequence]) -> List[Tuple[dict, ExperimentConfig]]:
    """Expand a single-axis sweep into (axis tag, config) points."""
    if len(axis) != 1:
        raise ConfigError(f"sweeps take exactly one axis, got {sorted(axis)}")
    (name, values), = axis.items()
    if name not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {name!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep axis has no values")
    points = []
    for value in values:
        if name == "lambda":
            point = cfg.with_plan(**{"lambda": float(value)})
        elif name == "loss_kind":
            point = cfg.with_plan(loss_kind=value)
        elif name == "qkv":
            if value not in SUBSETS:
                raise ConfigError(f"qkv sweep values must be in {SUBSETS}, got {value!r}")
            point = cfg.with_plan(subset=value)
        else:
            parse_layers(value, cfg.student_arch.depth)
            point = cfg.with_plan(layers=value)
        points.append(({"name": name, "value": value}, point))
    return points


def sweep(config_path, axis: Mapping[str, Sequence], store_path=None) -> List[RunRecord]:
    cfg = load_config(config_path)
    store = RunStore(store_path) if store_path is not None else None
    records = []
    for tag, point in sweep_configs(cfg, axis):
        records.extend(run_config(point, store, axis=tag))
    return records


# --------------------------------------------------------------------------- aggregation

def aggregate_seeds(records: Sequence[RunRecord]) -> Tuple[float, float, int]:
    """Mean and sample standard deviation (n - 1) of ``final_top1``; std is 0 for one record."""
    if not records:
        raise AggregationError("no records to aggregate")
    prints = {r.config_fingerprint for r in records}
    if len(prints) > 1:
        raise AggregationError(f"records span several fingerprints: {sorted(prints)}")
    values = [float(r.final_top1) for r in records]
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std, len(values)


def compute_delta(record_group: Sequence[RunRecord], baseline_group: Sequence[RunRecord]) -> float:
    """``mean(group) - mean(baseline)``; positive means the transfer helped."""
    datasets = {canonical_json(r.dataset) for r in list(record_group) + list(baseline_group)}
    if len(datasets) > 1:
        raise ComparisonError("groups were evaluated on different datasets")
    return aggregate_seeds(record_group)[0] - aggregate_seeds(baseline_group)[0]


def group_by_fingerprint(records: Iterable[RunRecord]) -> Dict[str, List[RunRecord]]:
    groups: Dict[str, List[RunRecord]] = {}
    for rec in records:
        groups.setdefault(rec.config_fingerprint, []).append(rec)
    return groups


# --------------------------------------------------------------------------- reports

def parse_query(query) -> Dict[str, str]:
    if query is None or query == "" or query == "*":
        return {}
    if isinstance(query, Mapping):
        return dict(query)
    out = {}
    for part in str(query).split(","):
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"bad query term {part!r}; use key=value")
        out[key.strip()] = value.strip()
    return out


def _fmt_signed(x: float) -> str:
    return f"{x:+.1f}"


def emit_report(store_path, query=None, format: str = "table") -> str:
    """Render records matching ``query`` as a text table, CSV, or JSON plot data.

    Ordering is by name, then axis value, then seed, so identical stores give
    byte-identical output.
    """
    store = store_path if isinstance(store_path, RunStore) else RunStore(store_path)
    filters = parse_query(query)
    kind = filters.get("divergence")
    records = store.records(**filters)
    if not records:
        raise NotFoundError(f"no records match query {query!r}")
    all_groups = group_by_fingerprint(store.records())
    groups = group_by_fingerprint(records)
    ordered = sorted(groups.values(), key=lambda g: _record_order(g[0]))
    if format == "table":
        return _table(ordered, all_groups)
    if format == "csv":
        return _csv(ordered, kind)
    if format == "plotdata":
        return _plotdata(ordered, kind)
    raise ConfigError(f"unknown report format {format!r}")


def _group_label(group: List[RunRecord]) -> str:
    rec = group[0]
    if rec.axis:
        return f"{rec.name}[{rec.axis['name']}={rec.axis['value']}]"
    return rec.name


def _table(groups: List[List[RunRecord]], all_groups: Dict[str, List[RunRecord]]) -> str:
    header = ("name", "n", "top1 mean±std", "Δ vs NoT", "status")
    rows = []
    for group in groups:
        mean, std, n = aggregate_seeds(group)
        ref = group[0].baseline_ref
        delta, status = "", ""
        if ref and ref in all_groups and ref != group[0].config_fingerprint:
            d = compute_delta(group, all_groups[ref])
            delta = _fmt_signed(d)
            status = "FAIL" if d < 0 else "ok"
        rows.append((_group_label(group), str(n), f"{mean:.1f} ± {std:.2f}", delta, status))
    widths = [max(len(str(r[i])) for r in rows + [header]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def _mean_profile(group: List[RunRecord], kind: str) -> List[float]:
    profiles = [r.divergence[kind]["per_layer"] for r in group if kind in r.divergence]
    if not profiles:
        return []
    return [statistics.fmean(vals) for vals in zip(*profiles)]


def _csv(groups: List[List[RunRecord]], kind: Optional[str]) -> str:
    if kind is not None:
        if len(groups) == 1:
            lines = ["layer,value"]
            lines += [f"{i},{v!r}" for i, v in enumerate(_mean_profile(groups[0], kind))]
        else:
            lines = ["group,layer,value"]
            for group in groups:
                label = _group_label(group)
                lines += [f"{label},{i},{v!r}" for i, v in enumerate(_mean_profile(group, kind))]
        return "\n".join(lines) + "\n"
    lines = ["name,axis,axis_value,seed,final_top1"]
    for group in groups:
        for rec in group:
            axis_name = rec.axis["name"] if rec.axis else ""
            axis_value = json.dumps(rec.axis["value"]) if rec.axis else ""
            lines.append(f"{rec.name},{axis_name},{axis_value},{rec.seed},{rec.final_top1!r}")
    return "\n".join(lines) + "\n"


def _plotdata(groups: List[List[RunRecord]], kind: Optional[str]) -> str:
    series: Dict[str, dict] = {}
    for group in groups:
        rec = group[0]
        if not rec.axis:
            continue
        label = rec.plan.get("loss_kind") if rec.axis["name"] == "lambda" else rec.name
        mean, std, _ = aggregate_seeds(group)
        s = series.setdefault(label, {"group": label, "axis": rec.axis["name"], "points": []})
        s["points"].append((rec.axis["value"], mean, std))
    out_series = []
    for label in sorted(series):
        pts = sorted(series[label]["points"], key=lambda p: _axis_key(p[0]))
        out_series.append({"group": label, "axis": series[label]["axis"], "x": [p[0] for p in pts],
                           "mean": [p[1] for p in pts], "std": [p[2] for p in pts]})
    profiles = []
    for k in ([kind] if kind else ["KL", "JS"]):
        for group in groups:
            values = _mean_profile(group, k)
            if values:
                profiles.append({"group": _group_label(group), "kind": k,
                                 "layer": list(range(len(values))), "value": values})
    return json.dumps({"series": out_series, "profiles": profiles}, sort_keys=True, indent=1) + "\n"


def _axis_key(value):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return (0, float(value), "")
    return (1, 0.0, json.dumps(value))
