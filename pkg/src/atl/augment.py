"""Batch augmentation used by the trainer: RandAugment, mixup/cutmix and smoothed targets.

All randomness is drawn from an explicit ``torch.Generator`` so that a run is a
pure function of its seed.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF

_MAX_MAGNITUDE = 10.0


def _level(magnitude: float, high: float, gen: torch.Generator, signed: bool = True) -> float:
    value = magnitude / _MAX_MAGNITUDE * high
    if signed and torch.rand((), generator=gen).item() < 0.5:
        value = -value
    return value


def _to_uint8(img):
    return (img * 255).round().to(torch.uint8)


def _apply_op(name: str, img: torch.Tensor, magnitude: float, gen: torch.Generator) -> torch.Tensor:
    size = img.shape[-1]
    if name == "identity":
        return img
    if name == "rotate":
        return TF.rotate(img, _level(magnitude, 30.0, gen))
    if name == "shear_x":
        return TF.affine(img, angle=0.0, translate=[0, 0], scale=1.0,
                         shear=[math.degrees(math.atan(_level(magnitude, 0.3, gen))), 0.0])
    if name == "shear_y":
        return TF.affine(img, angle=0.0, translate=[0, 0], scale=1.0,
                         shear=[0.0, math.degrees(math.atan(_level(magnitude, 0.3, gen)))])
    if name == "translate_x":
        return TF.affine(img, angle=0.0, translate=[int(_level(magnitude, 0.45 * size, gen)), 0],
                         scale=1.0, shear=[0.0, 0.0])
    if name == "translate_y":
        return TF.affine(img, angle=0.0, translate=[0, int(_level(magnitude, 0.45 * size, gen))],
                         scale=1.0, shear=[0.0, 0.0])
    if name == "brightness":
        return TF.adjust_brightness(img, 1.0 + _level(magnitude, 0.9, gen))
    if name == "contrast":
        return TF.adjust_contrast(img, 1.0 + _level(magnitude, 0.9, gen))
    if name == "color":
        return TF.adjust_saturation(img, 1.0 + _level(magnitude, 0.9, gen))
    if name == "sharpness":
        return TF.adjust_sharpness(img, 1.0 + _level(magnitude, 0.9, gen))
    if name == "solarize":
        return TF.solarize(img, 1.0 - _level(magnitude, 1.0, gen, signed=False))
    if name == "posterize":
        bits = max(1, 8 - int(_level(magnitude, 4.0, gen, signed=False)))
        return TF.posterize(_to_uint8(img), bits).float() / 255
    if name == "autocontrast":
        return TF.autocontrast(img)
    if name == "equalize":
        return TF.equalize(_to_uint8(img)).float() / 255
    raise ValueError(name)


RANDAUG_OPS = (
    "identity", "autocontrast", "equalize", "rotate", "solarize", "color", "posterize",
    "contrast", "brightness", "sharpness", "shear_x", "shear_y", "translate_x", "translate_y",
)


def rand_augment(images: torch.Tensor, magnitude: int, prob: float, gen: torch.Generator,
                 num_ops: int = 2) -> torch.Tensor:
    """Per-sample RandAugment: ``num_ops`` random ops, each applied with probability ``prob``."""
    if magnitude <= 0 or prob <= 0:
        return images
    out = images.clone()
    choices = torch.randint(len(RANDAUG_OPS), (len(images), num_ops), generator=gen)
    apply = torch.rand(len(images), num_ops, generator=gen) < prob
    for i in range(len(images)):
        img = out[i]
        for j in range(num_ops):
            if apply[i, j]:
                img = _apply_op(RANDAUG_OPS[choices[i, j]], img, float(magnitude), gen)
        out[i] = img.clamp(0.0, 1.0)
    return out


def smooth_one_hot(labels: torch.Tensor, num_classes: int, smoothing: float) -> torch.Tensor:
    off = smoothing / num_classes
    target = torch.full((len(labels), num_classes), off, dtype=torch.float32)
    target.scatter_(1, labels.view(-1, 1), 1.0 - smoothing + off)
    return target


def _cutmix_box(size: int, lam: float, gen: torch.Generator):
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(size * cut), int(size * cut)
    cy = int(torch.randint(size, (), generator=gen))
    cx = int(torch.randint(size, (), generator=gen))
    y0, y1 = max(cy - ch // 2, 0), min(cy + ch // 2, size)
    x0, x1 = max(cx - cw // 2, 0), min(cx + cw // 2, size)
    return y0, y1, x0, x1


def mix_batch(images: torch.Tensor, targets: torch.Tensor, mixup_alpha: float, cutmix_alpha: float,
              gen: torch.Generator):
    """Apply exactly one of mixup or cutmix to the batch, pairing each sample with its mirror.

    When both are enabled each is chosen with probability 0.5.
    """
    use_mixup, use_cutmix = mixup_alpha > 0, cutmix_alpha > 0
    if not (use_mixup or use_cutmix):
        return images, targets
    if use_mixup and use_cutmix:
        use_cutmix = bool(torch.rand((), generator=gen) < 0.5)
        use_mixup = not use_cutmix
    alpha = cutmix_alpha if use_cutmix else mixup_alpha
    lam = _beta(alpha, gen)
    flipped = images.flip(0)
    if use_cutmix:
        y0, y1, x0, x1 = _cutmix_box(images.shape[-1], lam, gen)
        images = images.clone()
        images[:, :, y0:y1, x0:x1] = flipped[:, :, y0:y1, x0:x1]
        lam = 1.0 - (y1 - y0) * (x1 - x0) / float(images.shape[-1] * images.shape[-2])
    else:
        images = images * lam + flipped * (1.0 - lam)
    return images, targets * lam + targets.flip(0) * (1.0 - lam)


def _beta(alpha: float, gen: torch.Generator) -> float:
    # Beta(a, a) from two Gamma draws, kept on the explicit generator
    a = torch._standard_gamma(torch.tensor([alpha, alpha], dtype=torch.float64), generator=gen)
    return float(a[0] / a.sum())


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return torch.sum(-targets * F.log_softmax(logits, dim=-1), dim=-1).mean()
