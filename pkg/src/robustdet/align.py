"""Decoupled fore/back-ground feature alignment.

Three branches measure distances between pyramid features: adversarial
student vs. frozen teacher, adversarial student vs. stop-gradded clean
student, and clean student vs. frozen teacher (the last weighted by
``lambda_``). Every branch uses the same per-level loss: squared (or
absolute) feature differences, summed over channels, split by a binary
foreground mask and normalized separately inside and outside it.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch

from .boxes import BoxSet
from .detector import FeaturePyramid
from .errors import ConfigurationError, NumericError, ShapeMismatchError


class FeatureNorm(enum.Enum):
    L1 = "l1"
    L2 = "l2"


@dataclass
class AlignConfig:
    lambda_: float = 1.0
    gamma_fg: float = 1.0
    gamma_bg: float = 6.0
    p_norm: FeatureNorm = FeatureNorm.L2

    def __post_init__(self):
        if self.gamma_fg < 0 or self.gamma_bg < 0:
            raise ConfigurationError("gamma_fg and gamma_bg must be non-negative")
        if self.gamma_fg == 0 and self.gamma_bg == 0:
            raise ConfigurationError("gamma_fg and gamma_bg cannot both be zero")


@dataclass
class ForegroundMaskSet:
    """Per-level binary masks [N, h_l, w_l] marking box-covered cells."""

    masks: list[torch.Tensor]

    def matches(self, pyramid: FeaturePyramid) -> bool:
        return len(self.masks) == len(pyramid.levels) and all(
            m.shape[0] == lvl.shape[0] and m.shape[1:] == lvl.shape[2:]
            for m, lvl in zip(self.masks, pyramid.levels)
        )


def make_masks(targets: list[BoxSet], pyramid_shapes: list[tuple[int, int]],
               strides, image_size: tuple[int, int] | None = None,
               dtype: torch.dtype = torch.float32) -> ForegroundMaskSet:
    """Project boxes onto feature grids: a cell is foreground iff its center
    (at (i + 0.5) * stride in pixels) lies inside at least one box."""
    if image_size is None:
        h0, w0 = pyramid_shapes[0]
        image_size = (h0 * strides[0], w0 * strides[0])
    img_h, img_w = image_size
    for t in targets:
        if len(t) and (t.boxes.min() < 0 or t.boxes[:, 0::2].max() > img_w
                       or t.boxes[:, 1::2].max() > img_h):
            raise ConfigurationError("box outside image bounds")
    n = len(targets)
    masks = []
    for (h, w), s in zip(pyramid_shapes, strides):
        mask = torch.zeros((n, h, w), dtype=dtype)
        for i, t in enumerate(targets):
            for x0, y0, x1, y1 in t.boxes:
                j0 = max(0, math.ceil(float(x0) / s - 0.5))
                j1 = min(w - 1, math.floor(float(x1) / s - 0.5))
                i0 = max(0, math.ceil(float(y0) / s - 0.5))
                i1 = min(h - 1, math.floor(float(y1) / s - 0.5))
                if j0 <= j1 and i0 <= i1:
                    mask[i, i0:i1 + 1, j0:j1 + 1] = 1.0
        masks.append(mask)
    return ForegroundMaskSet(masks=masks)


def decoupled_level_loss(s_level: torch.Tensor, t_level: torch.Tensor,
                         mask: torch.Tensor, cfg: AlignConfig) -> torch.Tensor:
    """Foreground/background-normalized feature distance at one level.

    Per image: gamma_fg/N_fg * sum(M * d) + gamma_bg/N_bg * sum((1-M) * d)
    with d the channel-summed squared (L2) or absolute (L1) difference;
    a region with zero cells contributes 0. Averaged over the batch.
    """
    if s_level.shape != t_level.shape:
        raise ShapeMismatchError(f"feature shapes differ: {tuple(s_level.shape)} vs {tuple(t_level.shape)}")
    if mask.shape[0] != s_level.shape[0] or mask.shape[1:] != s_level.shape[2:]:
        raise ShapeMismatchError(f"mask shape {tuple(mask.shape)} does not match features")
    if torch.isnan(s_level).any() or torch.isnan(t_level).any():
        raise NumericError("NaN in alignment features")
    diff = s_level - t_level
    if cfg.p_norm is FeatureNorm.L2:
        cell = (diff * diff).sum(dim=1)
    else:
        cell = diff.abs().sum(dim=1)
    mask = mask.to(cell.dtype)
    fg_count = mask.sum(dim=(1, 2))
    bg_count = (1.0 - mask).sum(dim=(1, 2))
    fg_sum = (cell * mask).sum(dim=(1, 2))
    bg_sum = (cell * (1.0 - mask)).sum(dim=(1, 2))
    fg_term = torch.where(fg_count > 0, cfg.gamma_fg * fg_sum / fg_count.clamp(min=1.0),
                          torch.zeros_like(fg_sum))
    bg_term = torch.where(bg_count > 0, cfg.gamma_bg * bg_sum / bg_count.clamp(min=1.0),
                          torch.zeros_like(bg_sum))
    return (fg_term + bg_term).mean()


@dataclass
class AlignmentBreakdown:
    fea1: torch.Tensor  # student(adv) vs teacher(clean)
    fea2: torch.Tensor  # student(adv) vs stop-grad student(clean)
    fea3: torch.Tensor  # student(clean) vs teacher(clean)

    def as_floats(self) -> dict[str, float]:
        return {"fea1": float(self.fea1), "fea2": float(self.fea2), "fea3": float(self.fea3)}


def _branch(a: FeaturePyramid, b_levels: list[torch.Tensor],
            masks: ForegroundMaskSet, cfg: AlignConfig) -> torch.Tensor:
    total = None
    for s_l, t_l, m_l in zip(a.levels, b_levels, masks.masks):
        term = decoupled_level_loss(s_l, t_l, m_l, cfg)
        total = term if total is None else total + term
    return total


def alignment_loss(s_adv: FeaturePyramid, s_clean: FeaturePyramid,
                   t_clean: FeaturePyramid, masks: ForegroundMaskSet,
                   cfg: AlignConfig) -> tuple[torch.Tensor, AlignmentBreakdown]:
    """Compose the three branches: lambda * fea3 + fea1 + fea2.

    Teacher features are detached here regardless of how they were produced,
    and the clean student features are detached inside the fea2 branch only
    (stop-grad), so fea2 gradients flow solely through the adversarial path.
    """
    if not (len(s_adv.levels) == len(s_clean.levels) == len(t_clean.levels)):
        raise ConfigurationError("pyramids must have the same number of levels")
    if not masks.matches(s_adv):
        raise ShapeMismatchError("mask shapes do not match the pyramids")
    teacher = [t.detach() for t in t_clean.levels]
    fea1 = _branch(s_adv, teacher, masks, cfg)
    fea2 = _branch(s_adv, [t.detach() for t in s_clean.levels], masks, cfg)
    fea3 = _branch(s_clean, teacher, masks, cfg)
    total = cfg.lambda_ * fea3 + fea1 + fea2
    return total, AlignmentBreakdown(fea1=fea1, fea2=fea2, fea3=fea3)
