"""Attention transfer laboratory for small Vision Transformers."""
from .errors import (AtlError, ConfigError, SchemaError, DimensionError, IncompatibilityError, CheckpointError,
                     CorruptCheckpointError, VersionError, ContractViolation, TrainingDiverged, AggregationError,
                     ComparisonError, NotFoundError)
from .vit import (ArchSpec, AttentionTrace, TokenLayout, VisionTransformer, attention_block_forward, build_model,
                  forward, parameter_shapes, set_deterministic)
from .checkpoint import (Checkpoint, interpolate_patch_embedding, load_checkpoint, model_from_checkpoint,
                         save_checkpoint, selective_init)
from .transfer import (TransferPlan, align_attention_maps, apply_attention_copy, attention_map_loss,
                       distill_objective)
from .diagnostics import DivergenceProfile, divergence_profile, row_divergence
from .train import RunResult, TrainRecipe, evaluate, make_recipe, train
from .experiment import (ExperimentConfig, RunRecord, RunStore, aggregate_seeds, compute_delta, emit_report,
                         load_config, run_experiment, sweep)

__version__ = "0.1.0"
