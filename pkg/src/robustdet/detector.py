"""Miniature anchor-free single-stage detector.

A small convolutional backbone feeds a two-level feature pyramid (strides 4
and 8); a shared head predicts per-cell class logits and box offsets. The
pyramid features are the substrate for feature alignment, so the head runs
separately from ``forward`` (losses and decoding both start from a pyramid).

Normalization layers keep two complete sets of statistics and affine
parameters (main / auxiliary) selected per forward pass; everything else is
shared. The head uses GroupNorm and is therefore mode-free.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import BoxSet, DetectionSet
from .errors import ConfigurationError, NumericError, ShapeMismatchError


class NormMode(enum.Enum):
    MAIN = "main"
    AUXILIARY = "auxiliary"


@dataclass
class FeaturePyramid:
    """Ordered multi-level feature maps with strictly increasing strides."""

    levels: list[torch.Tensor]  # each [N, D, h_l, w_l]
    strides: tuple[int, ...]

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ShapeMismatchError("one stride per pyramid level required")
        if list(self.strides) != sorted(set(self.strides)):
            raise ConfigurationError("strides must be strictly increasing")

    @property
    def batch_size(self) -> int:
        return self.levels[0].shape[0]

    def spatial_shapes(self) -> list[tuple[int, int]]:
        return [(lvl.shape[2], lvl.shape[3]) for lvl in self.levels]

    def check_finite(self) -> None:
        for i, lvl in enumerate(self.levels):
            if not torch.isfinite(lvl).all():
                raise NumericError(f"non-finite values in pyramid level {i}")


@dataclass
class ArchConfig:
    """Detector architecture; hashed into checkpoints."""

    num_classes: int = 6
    stem_channels: int = 16
    stage_channels: tuple[int, int, int] = (24, 32, 48)
    fpn_channels: int = 32
    strides: tuple[int, int] = (4, 8)
    dual_norm: bool = False

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


class DualBatchNorm2d(nn.Module):
    """Batch norm with optional auxiliary statistics + affine parameters.

    Routing is set externally per forward pass (see ``TinyDetector.forward``):
    which parameter set to use, whether to normalize with batch or running
    statistics, and whether running statistics may be updated.
    """

    def __init__(self, num_features: int, dual: bool = False, eps: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.dual = dual
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))
        if dual:
            self.aux_weight = nn.Parameter(torch.ones(num_features))
            self.aux_bias = nn.Parameter(torch.zeros(num_features))
            self.register_buffer("aux_running_mean", torch.zeros(num_features))
            self.register_buffer("aux_running_var", torch.ones(num_features))
        self._mode = NormMode.MAIN
        self._use_batch_stats: bool | None = None
        self._update_stats: bool | None = None

    def set_route(self, mode: NormMode, use_batch_stats: bool | None,
                  update_stats: bool | None) -> None:
        if mode is NormMode.AUXILIARY and not self.dual:
            raise ConfigurationError("auxiliary normalization requested on a single-norm layer")
        self._mode = mode
        self._use_batch_stats = use_batch_stats
        self._update_stats = update_stats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self._mode is NormMode.AUXILIARY:
            weight, bias = self.aux_weight, self.aux_bias
            rmean, rvar = self.aux_running_mean, self.aux_running_var
        else:
            weight, bias = self.weight, self.bias
            rmean, rvar = self.running_mean, self.running_var
        use_batch = self.training if self._use_batch_stats is None else self._use_batch_stats
        update = self.training if self._update_stats is None else self._update_stats
        if use_batch:
            if update:
                return F.batch_norm(x, rmean, rvar, weight, bias, training=True,
                                    momentum=self.momentum, eps=self.eps)
            # identical kernel with throwaway buffers: batch statistics are
            # used bit-for-bit as in the updating path, updates are discarded
            return F.batch_norm(x, rmean.clone(), rvar.clone(), weight, bias,
                                training=True, momentum=self.momentum, eps=self.eps)
        return F.batch_norm(x, rmean, rvar, weight, bias, training=False, eps=self.eps)


def conv_block(in_ch: int, out_ch: int, stride: int = 1, dual: bool = False) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        DualBatchNorm2d(out_ch, dual=dual),
        nn.SiLU(),
    )


class Backbone(nn.Module):
    """Four downsampling stages; exposes the stride-4 and stride-8 maps."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w0 = arch.stem_channels
        w1, w2, w3 = arch.stage_channels
        dual = arch.dual_norm
        self.stem = conv_block(3, w0, dual=dual)
        self.stage1 = nn.Sequential(conv_block(w0, w1, stride=2, dual=dual))
        self.stage2 = nn.Sequential(
            conv_block(w1, w2, stride=2, dual=dual), conv_block(w2, w2, dual=dual)
        )
        self.stage3 = nn.Sequential(
            conv_block(w2, w3, stride=2, dual=dual), conv_block(w3, w3, dual=dual)
        )

    def forward(self, x):
        x = self.stem(x)
        x = self.stage1(x)
        c4 = self.stage2(x)
        c8 = self.stage3(c4)
        return c4, c8


class PyramidNeck(nn.Module):
    """Top-down fusion of the two backbone maps into equal-width levels."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        _, w2, w3 = arch.stage_channels
        f = arch.fpn_channels
        dual = arch.dual_norm
        self.lateral4 = nn.Conv2d(w2, f, 1)
        self.lateral8 = nn.Conv2d(w3, f, 1)
        self.smooth4 = conv_block(f, f, dual=dual)
        self.smooth8 = conv_block(f, f, dual=dual)

    def forward(self, c4, c8):
        p8 = self.smooth8(self.lateral8(c8))
        up = F.interpolate(p8, scale_factor=2, mode="nearest")
        p4 = self.smooth4(self.lateral4(c4) + up)
        return [p4, p8]


class Head(nn.Module):
    """Shared per-level head: class logits and (l, t, r, b) box offsets."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        f = arch.fpn_channels
        self.tower = nn.Sequential(
            nn.Conv2d(f, f, 3, padding=1), nn.GroupNorm(8, f), nn.SiLU(),
            nn.Conv2d(f, f, 3, padding=1), nn.GroupNorm(8, f), nn.SiLU(),
        )
        self.cls_out = nn.Conv2d(f, arch.num_classes, 3, padding=1)
        self.reg_out = nn.Conv2d(f, 4, 3, padding=1)

    def forward(self, level: torch.Tensor):
        t = self.tower(level)
        return self.cls_out(t), self.reg_out(t)


class TinyDetector(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.backbone = Backbone(arch)
        self.neck = PyramidNeck(arch)
        self.head = Head(arch)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(self.arch.strides)

    @property
    def coarsest_stride(self) -> int:
        return max(self.arch.strides)

    def _route_norm(self, mode, use_batch_stats, update_stats):
        for m in self.modules():
            if isinstance(m, DualBatchNorm2d):
                m.set_route(mode, use_batch_stats, update_stats)

    def forward(self, pixels: torch.Tensor, mode: NormMode = NormMode.MAIN, *,
                use_batch_stats: bool | None = None,
                update_stats: bool | None = None) -> FeaturePyramid:
        """Extract the feature pyramid under the selected normalization set.

        ``use_batch_stats`` / ``update_stats`` default to ``self.training``;
        passing ``update_stats=False`` normalizes as usual but leaves every
        running buffer untouched (used by attack generation and the frozen
        teacher).
        """
        if pixels.dim() != 4 or pixels.shape[1] != 3:
            raise ShapeMismatchError(f"expected pixels [N, 3, H, W], got {tuple(pixels.shape)}")
        h, w = pixels.shape[2], pixels.shape[3]
        s = self.coarsest_stride
        if h % s or w % s:
            raise ShapeMismatchError(f"image size {h}x{w} not divisible by coarsest stride {s}")
        if mode is NormMode.AUXILIARY and not self.arch.dual_norm:
            raise ConfigurationError("detector was built without dual normalization")
        self._route_norm(mode, use_batch_stats, update_stats)
        try:
            c4, c8 = self.backbone(pixels)
            levels = self.neck(c4, c8)
        finally:
            self._route_norm(NormMode.MAIN, None, None)
        return FeaturePyramid(levels=levels, strides=self.strides)

    def head_outputs(self, pyramid: FeaturePyramid):
        return [self.head(lvl) for lvl in pyramid.levels]

    def detection_losses(self, pyramid: FeaturePyramid,
                         targets: list[BoxSet]) -> tuple[torch.Tensor, torch.Tensor]:
        """Focal classification loss and GIoU localization loss."""
        if pyramid.batch_size < 1:
            raise ConfigurationError("empty batch")
        if len(targets) != pyramid.batch_size:
            raise ConfigurationError(
                f"{len(targets)} target sets for batch of {pyramid.batch_size}"
            )
        pyramid.check_finite()
        outputs = self.head_outputs(pyramid)
        image_size = self._image_size_from(pyramid)
        return losses_from_head_outputs(outputs, targets, self.strides, image_size,
                                        self.arch.num_classes)

    def decode(self, pyramid: FeaturePyramid, score_threshold: float = 0.05,
               nms_iou: float = 0.5, max_detections: int = 100) -> list[DetectionSet]:
        outputs = self.head_outputs(pyramid)
        image_size = self._image_size_from(pyramid)
        return decode_from_head_outputs(outputs, self.strides, image_size,
                                        score_threshold, nms_iou, max_detections)

    def _image_size_from(self, pyramid: FeaturePyramid) -> tuple[int, int]:
        h0, w0 = pyramid.levels[0].shape[2:]
        s0 = pyramid.strides[0]
        return h0 * s0, w0 * s0


def build_detector(arch: ArchConfig, seed: int = 0,
                   dtype: torch.dtype = torch.float32) -> TinyDetector:
    """Construct and deterministically initialize a detector."""
    model = TinyDetector(arch)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        # rare-positive prior so early classification scores start low
        model.head.cls_out.bias.fill_(-math.log((1 - 0.01) / 0.01))
    return model.to(dtype)


# ---------------------------------------------------------------------------
# target assignment and losses


def assign_targets(targets: list[BoxSet], level_shapes: list[tuple[int, int]],
                   strides, device, dtype):
    """Per level: class map [N, h, w] (-1 background) and ltrb offsets / stride.

    A cell is positive for a box when its center lies inside the box's
    central 50% region (half width / half height around the box center);
    among competing boxes the smallest-area one wins.
    """
    n = len(targets)
    out = []
    for (h, w), s in zip(level_shapes, strides):
        cls_map = torch.full((n, h, w), -1, dtype=torch.long, device=device)
        box_map = torch.zeros((n, h, w, 4), dtype=dtype, device=device)
        ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) * s
        xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) * s
        for i, t in enumerate(targets):
            if len(t) == 0:
                continue
            areas = (t.boxes[:, 2] - t.boxes[:, 0]) * (t.boxes[:, 3] - t.boxes[:, 1])
            order = np.argsort(-areas, kind="stable")  # smaller boxes overwrite
            for k in order:
                x0, y0, x1, y1 = (float(v) for v in t.boxes[k])
                cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
                qw, qh = (x1 - x0) / 4, (y1 - y0) / 4
                j0 = max(0, math.ceil((cx - qw) / s - 0.5))
                j1 = min(w - 1, math.floor((cx + qw) / s - 0.5))
                i0 = max(0, math.ceil((cy - qh) / s - 0.5))
                i1 = min(h - 1, math.floor((cy + qh) / s - 0.5))
                if j0 > j1 or i0 > i1:
                    continue
                cls_map[i, i0:i1 + 1, j0:j1 + 1] = int(t.labels[k])
                sub_y = ys[i0:i1 + 1].unsqueeze(1)
                sub_x = xs[j0:j1 + 1].unsqueeze(0)
                box_map[i, i0:i1 + 1, j0:j1 + 1, 0] = (sub_x - x0) / s
                box_map[i, i0:i1 + 1, j0:j1 + 1, 1] = (sub_y - y0) / s
                box_map[i, i0:i1 + 1, j0:j1 + 1, 2] = (x1 - sub_x) / s
                box_map[i, i0:i1 + 1, j0:j1 + 1, 3] = (y1 - sub_y) / s
        out.append((cls_map, box_map))
    return out


def focal_loss(logits: torch.Tensor, cls_map: torch.Tensor,
               gamma: float = 2.0) -> torch.Tensor:
    """Summed focal loss, -(1 - p_t)^gamma * log(p_t), over all cells/classes."""
    onehot = torch.zeros_like(logits)
    pos = cls_map >= 0
    if pos.any():
        idx = pos.nonzero(as_tuple=True)
        onehot[idx[0], cls_map[pos], idx[1], idx[2]] = 1.0
    ce = F.binary_cross_entropy_with_logits(logits, onehot, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * onehot + (1 - p) * (1 - onehot)
    return (ce * (1 - p_t) ** gamma).sum()


def giou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Generalized IoU for corner-format box tensors [M, 4]."""
    tiny = torch.finfo(pred.dtype).tiny
    inter_w = (torch.min(pred[:, 2], target[:, 2]) - torch.max(pred[:, 0], target[:, 0])).clamp(min=0)
    inter_h = (torch.min(pred[:, 3], target[:, 3]) - torch.max(pred[:, 1], target[:, 1])).clamp(min=0)
    inter = inter_w * inter_h
    area_p = (pred[:, 2] - pred[:, 0]).clamp(min=0) * (pred[:, 3] - pred[:, 1]).clamp(min=0)
    area_t = (target[:, 2] - target[:, 0]).clamp(min=0) * (target[:, 3] - target[:, 1]).clamp(min=0)
    union = area_p + area_t - inter
    iou = inter / union.clamp(min=tiny)
    hull_w = torch.max(pred[:, 2], target[:, 2]) - torch.min(pred[:, 0], target[:, 0])
    hull_h = torch.max(pred[:, 3], target[:, 3]) - torch.min(pred[:, 1], target[:, 1])
    hull = hull_w * hull_h
    return iou - (hull - union) / hull.clamp(min=tiny)


def _decode_cell_boxes(reg: torch.Tensor, stride: int, image_size) -> torch.Tensor:
    """Box corners [N, h, w, 4] from raw offsets [N, 4, h, w] at one level."""
    n, _, h, w = reg.shape
    dist = F.softplus(reg) * stride
    ys = (torch.arange(h, dtype=reg.dtype, device=reg.device) + 0.5) * stride
    xs = (torch.arange(w, dtype=reg.dtype, device=reg.device) + 0.5) * stride
    cy = ys.view(1, h, 1)
    cx = xs.view(1, 1, w)
    img_h, img_w = image_size
    x0 = (cx - dist[:, 0]).clamp(0, img_w)
    y0 = (cy - dist[:, 1]).clamp(0, img_h)
    x1 = (cx + dist[:, 2]).clamp(0, img_w)
    y1 = (cy + dist[:, 3]).clamp(0, img_h)
    return torch.stack([x0, y0, x1, y1], dim=-1)


def losses_from_head_outputs(outputs, targets: list[BoxSet], strides, image_size,
                             num_classes: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(L_cls, L_loc): focal sum / max(1, positives) and mean GIoU loss.

    L_loc is 0 when no cell is assigned (empty-object images are legal).
    """
    device = outputs[0][0].device
    dtype = outputs[0][0].dtype
    shapes = [(cls.shape[2], cls.shape[3]) for cls, _ in outputs]
    assigned = assign_targets(targets, shapes, strides, device, dtype)

    total_focal = torch.zeros((), dtype=dtype, device=device)
    giou_terms = []
    num_pos = 0
    for (cls_logits, reg), (cls_map, box_map), stride in zip(outputs, assigned, strides):
        total_focal = total_focal + focal_loss(cls_logits, cls_map)
        pos = cls_map >= 0
        num_pos += int(pos.sum())
        if pos.any():
            pred_boxes = _decode_cell_boxes(reg, stride, image_size)[pos]
            ys = (torch.arange(cls_map.shape[1], dtype=dtype, device=device) + 0.5) * stride
            xs = (torch.arange(cls_map.shape[2], dtype=dtype, device=device) + 0.5) * stride
            cy = ys.view(1, -1, 1).expand_as(cls_map.to(dtype))[pos]
            cx = xs.view(1, 1, -1).expand_as(cls_map.to(dtype))[pos]
            d = box_map[pos] * stride
            gt_boxes = torch.stack(
                [cx - d[:, 0], cy - d[:, 1], cx + d[:, 2], cy + d[:, 3]], dim=1
            )
            giou_terms.append(1.0 - giou(pred_boxes, gt_boxes))
    l_cls = total_focal / max(1, num_pos)
    if giou_terms:
        l_loc = torch.cat(giou_terms).mean()
    else:
        l_loc = torch.zeros((), dtype=dtype, device=device)
    return l_cls, l_loc


def _nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS; keeps indices in descending score order."""
    from .boxes import pairwise_iou

    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        rest = order[1:]
        ious = pairwise_iou(boxes[i:i + 1], boxes[rest])[0]
        order = rest[ious <= iou_threshold]
    return keep


def decode_from_head_outputs(outputs, strides, image_size, score_threshold: float,
                             nms_iou: float, max_detections: int = 100,
                             pre_nms_limit: int = 600) -> list[DetectionSet]:
    """Threshold, per-class NMS, cap, and sort detections per image."""
    n = outputs[0][0].shape[0]
    results = []
    with torch.no_grad():
        per_level = []
        for (cls_logits, reg), stride in zip(outputs, strides):
            scores = torch.sigmoid(cls_logits)  # [N, C, h, w]
            boxes = _decode_cell_boxes(reg, stride, image_size)  # [N, h, w, 4]
            per_level.append((scores, boxes))
        for i in range(n):
            cand_boxes, cand_scores, cand_labels = [], [], []
            for scores, boxes in per_level:
                s_i = scores[i]  # [C, h, w]
                sel = (s_i >= score_threshold).nonzero(as_tuple=False)
                if sel.numel() == 0:
                    continue
                c, yy, xx = sel[:, 0], sel[:, 1], sel[:, 2]
                cand_boxes.append(boxes[i, yy, xx].cpu().numpy())
                cand_scores.append(s_i[c, yy, xx].cpu().numpy())
                cand_labels.append(c.cpu().numpy())
            if not cand_boxes:
                results.append(DetectionSet())
                continue
            b = np.concatenate(cand_boxes).astype(np.float32)
            s = np.concatenate(cand_scores).astype(np.float32)
            l = np.concatenate(cand_labels).astype(np.int64)
            if len(s) > pre_nms_limit:
                top = np.argsort(-s, kind="stable")[:pre_nms_limit]
                b, s, l = b[top], s[top], l[top]
            keep_all = []
            for cls in np.unique(l):
                idx = np.nonzero(l == cls)[0]
                kept = _nms(b[idx], s[idx], nms_iou)
                keep_all.extend(idx[k] for k in kept)
            keep_all = np.asarray(keep_all, dtype=np.int64)
            order = np.argsort(-s[keep_all], kind="stable")[:max_detections]
            sel = keep_all[order]
            results.append(DetectionSet(boxes=b[sel], scores=s[sel], labels=l[sel]))
    return results
