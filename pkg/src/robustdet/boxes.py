"""Axis-aligned box containers and geometry helpers.

Boxes are (x_min, y_min, x_max, y_max) in pixel units. Numpy routines here
serve the data pipeline and the evaluation harness; the detector keeps its
own differentiable torch versions of the overlap formulas.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass
class BoxSet:
    """Ground-truth boxes and class labels for one image."""

    boxes: np.ndarray  # [K, 4] float32, (x_min, y_min, x_max, y_max)
    labels: np.ndarray  # [K] int64

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.boxes.shape[0] != self.labels.shape[0]:
            raise ConfigurationError(
                f"boxes/labels length mismatch: {self.boxes.shape[0]} vs {self.labels.shape[0]}"
            )

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def validate(self, image_size: tuple[int, int], num_classes: int) -> None:
        """Check box/label invariants against an (H, W) image."""
        h, w = image_size
        b = self.boxes
        if len(self) == 0:
            return
        if not (b[:, 0] < b[:, 2]).all() or not (b[:, 1] < b[:, 3]).all():
            raise ConfigurationError("degenerate box: require x_min < x_max and y_min < y_max")
        if b.min() < 0 or b[:, 0::2].max() > w or b[:, 1::2].max() > h:
            raise ConfigurationError(f"box coordinates outside image bounds {w}x{h}")
        if self.labels.min() < 0 or self.labels.max() >= num_classes:
            raise ConfigurationError(f"labels must lie in [0, {num_classes})")


@dataclass
class DetectionSet:
    """Decoded detections for one image, sorted by descending score."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.float32))
    scores: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.float32))
    labels: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.int64))

    def __len__(self) -> int:
        return self.boxes.shape[0]


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(
        boxes[..., 3] - boxes[..., 1], 0, None
    )


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix [len(a), len(b)] for corner-format boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
