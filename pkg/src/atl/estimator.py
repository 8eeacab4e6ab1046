"""scikit-learn style wrapper around the training harness.

``AttentionTransferClassifier`` takes image arrays ``[N, 3, H, W]`` (or
``[N, H, W, 3]``) and integer labels, so a transfer run can sit inside
sklearn tooling such as ``cross_val_score``.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import ImageDataset
from .errors import ConfigError
from .train import evaluate, make_recipe, train
from .transfer import TransferPlan
from .vit import ArchSpec, VisionTransformer, build_model


def check_images(X, image_size=None) -> torch.Tensor:
    """Return ``X`` as a float32 ``[N, 3, H, W]`` tensor or raise ConfigError."""
    arr = np.asarray(X)
    if arr.ndim != 4:
        raise ConfigError(f"expected a 4-d image array, got shape {arr.shape}")
    if arr.shape[1] != 3 and arr.shape[-1] == 3:
        arr = arr.transpose(0, 3, 1, 2)
    if arr.shape[1] != 3:
        raise ConfigError(f"expected 3 colour channels, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ConfigError("empty image array")
    if image_size is not None and arr.shape[2:] != (image_size, image_size):
        raise ConfigError(f"expected {image_size}x{image_size} images, got {arr.shape[2:]}")
    if not np.isfinite(arr).all():
        raise ConfigError("images contain NaN or inf")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=torch.float32)


def check_labels(y, n: int, num_classes: int) -> torch.Tensor:
    labels = np.asarray(y)
    if labels.ndim != 1 or labels.shape[0] != n:
        raise ConfigError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.mod(labels, 1) == 0):
            raise ConfigError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigError(f"labels must lie in [0, {num_classes}), got [{labels.min()}, {labels.max()}]")
    return torch.as_tensor(labels, dtype=torch.long)


class AttentionTransferClassifier(ClassifierMixin, BaseEstimator):
    """Train a ViT student, optionally guided by a teacher's attention.

    ``teacher`` is a model or checkpoint object; it is required when
    ``method`` is ``"copy"`` or ``"distill"``. ``max_steps`` caps the run,
    which is handy for quick fits on small arrays.
    """

    def __init__(self, arch=None, method="none", teacher=None, subset="full", layers=None, loss_kind="CE",
                 lam=3.0, recipe=None, max_steps=None, seed=0, use_ema=False):
        self.arch = arch
        self.method = method
        self.teacher = teacher
        self.subset = subset
        self.layers = layers
        self.loss_kind = loss_kind
        self.lam = lam
        self.recipe = recipe
        self.max_steps = max_steps
        self.seed = seed
        self.use_ema = use_ema

    def _arch(self) -> ArchSpec:
        if self.arch is None:
            return ArchSpec()
        return self.arch if isinstance(self.arch, ArchSpec) else ArchSpec.from_dict(self.arch)

    def fit(self, X, y):
        arch = self._arch().validate()
        images = check_images(X, arch.image_size)
        labels = check_labels(y, images.shape[0], arch.num_classes)
        plan = TransferPlan(method=self.method, subset=self.subset, layers=self.layers,
                            loss_kind=self.loss_kind, lam=self.lam).validate()
        if plan.method != "none" and self.teacher is None:
            raise ConfigError(f"method={plan.method!r} needs a teacher")
        recipe = self.recipe if self.recipe is not None else make_recipe(
            "baseline" if plan.method == "none" else plan.method, "desk")
        teacher = self.teacher
        if teacher is not None and not isinstance(teacher, VisionTransformer):
            from .checkpoint import model_from_checkpoint
            teacher = model_from_checkpoint(teacher)
        model = build_model(arch, self.seed)
        data = ImageDataset(images, labels)
        result = train(model, teacher, plan, recipe, (data, data), seed=self.seed, max_steps=self.max_steps,
                       eval_each_epoch=False, use_ema_eval=self.use_ema)
        self.model_ = result.eval_model
        self.classes_ = np.arange(arch.num_classes)
        self.n_steps_ = result.steps
        self.train_loss_ = result.final_train_loss
        return self

    @torch.no_grad()
    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, self.model_.spec.image_size)
        self.model_.eval()
        return torch.cat([self.model_(chunk) for chunk in images.split(256)]).numpy()

    def predict_proba(self, X) -> np.ndarray:
        logits = torch.as_tensor(self.decision_function(X))
        return logits.softmax(-1).numpy()

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum, so ties go to the lowest class index
        return self.decision_function(X).argmax(1)

    def score(self, X, y, sample_weight=None) -> float:
        if sample_weight is not None:
            return super().score(X, y, sample_weight)
        check_is_fitted(self, "model_")
        images = check_images(X, self.model_.spec.image_size)
        labels = check_labels(y, images.shape[0], self.model_.spec.num_classes)
        return evaluate(self.model_, ImageDataset(images, labels)) / 100.0
