"""Synthetic shape datasets and the in-memory batch containers.

Six geometric classes (rectangle, disc, triangle, ring, cross, bar), each
with a distinctive color family and fill texture, drawn over cluttered
backgrounds. Generation is deterministic: every image derives its own RNG
from (dataset seed, image index), so datasets are reproducible byte for
byte and parallelizable per image.

On disk a dataset is a directory of lossless PNGs plus a line-delimited
annotation file (``<image_id> <class> <x_min> <y_min> <x_max> <y_max>``)
and a JSON manifest carrying counts, the class histogram and the spec hash.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .boxes import BoxSet, pairwise_iou
from .errors import ConfigurationError, DatasetIOError

SHAPE_CLASSES = ("rectangle", "disc", "triangle", "ring", "cross", "bar")

_CLASS_COLORS = np.array([
    [0.85, 0.25, 0.20],  # rectangle: red, checkerboard
    [0.20, 0.80, 0.30],  # disc: green, radial shading
    [0.25, 0.40, 0.90],  # triangle: blue, horizontal stripes
    [0.90, 0.85, 0.20],  # ring: yellow, solid annulus
    [0.85, 0.30, 0.85],  # cross: magenta, speckled
    [0.92, 0.92, 0.92],  # bar: white, lengthwise stripes
])


@dataclass
class ImageBatch:
    """Dense pixel batch in [0, 1] with per-image ground-truth boxes."""

    pixels: torch.Tensor  # [N, 3, H, W]
    annotations: list[BoxSet]

    def __post_init__(self):
        if self.pixels.dim() != 4 or self.pixels.shape[1] != 3:
            raise ConfigurationError(f"expected [N, 3, H, W] pixels, got {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] < 1:
            raise ConfigurationError("batch must contain at least one image")
        if len(self.annotations) != self.pixels.shape[0]:
            raise ConfigurationError("one BoxSet per image required")

    @property
    def image_size(self) -> tuple[int, int]:
        return int(self.pixels.shape[2]), int(self.pixels.shape[3])

    def validate(self, num_classes: int, coarsest_stride: int = 1) -> None:
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ConfigurationError(f"pixel values outside [0, 1]: min={lo}, max={hi}")
        h, w = self.image_size
        if h % coarsest_stride or w % coarsest_stride:
            raise ConfigurationError(f"{h}x{w} not divisible by stride {coarsest_stride}")
        for ann in self.annotations:
            ann.validate((h, w), num_classes)


@dataclass
class SyntheticDatasetSpec:
    seed: int = 0
    num_images: int = 100
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 6
    objects_per_image: tuple[int, int] = (1, 3)
    clutter_level: float = 0.3
    index_offset: int = 0  # shifts per-image seeds; lets train/test share one stream

    def __post_init__(self):
        if not (1 <= self.num_classes <= len(SHAPE_CLASSES)):
            raise ConfigurationError(f"num_classes must be in [1, {len(SHAPE_CLASSES)}]")
        if self.num_images < 1:
            raise ConfigurationError("num_images must be positive")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ConfigurationError("objects_per_image must be a (lo, hi) range with 0 <= lo <= hi")
        h, w = self.image_size
        if h < 32 or w < 32 or h % 8 or w % 8:
            raise ConfigurationError("image_size must be >= 32 and divisible by 8")

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# drawing


def _draw_background(h, w, clutter, rng):
    base = rng.uniform(0.15, 0.45)
    img = np.full((h, w, 3), base, dtype=np.float64)
    grad = np.linspace(-0.08, 0.08, w)[None, :, None]
    if rng.random() < 0.5:
        grad = np.linspace(-0.08, 0.08, h)[:, None, None]
    img += grad * rng.uniform(0.3, 1.0)
    for _ in range(int(round(clutter * 12))):
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        r = int(rng.integers(1, 3))
        col = rng.uniform(0.1, 0.7, size=3)
        img[max(0, cy - r):cy + r, max(0, cx - r):cx + r] = col
    for _ in range(int(round(clutter * 4))):
        y, x = int(rng.integers(0, h)), int(rng.integers(0, w - 10))
        img[y, x:x + int(rng.integers(6, 12))] = rng.uniform(0.1, 0.7)
    img += rng.normal(0.0, 0.015, size=img.shape)
    return img


def _shape_mask(label: int, bh: int, bw: int, rng) -> np.ndarray:
    """Binary footprint of a shape inside its bh x bw box."""
    yy, xx = np.mgrid[0:bh, 0:bw]
    name = SHAPE_CLASSES[label]
    if name == "rectangle":
        return np.ones((bh, bw), dtype=bool)
    if name == "disc":
        cy, cx, r = (bh - 1) / 2, (bw - 1) / 2, min(bh, bw) / 2
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (r - 0.2) ** 2
    if name == "triangle":
        half = (yy + 1) / bh * (bw / 2)
        return np.abs(xx - (bw - 1) / 2) <= half
    if name == "ring":
        cy, cx, r = (bh - 1) / 2, (bw - 1) / 2, min(bh, bw) / 2
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= (r - 0.2) ** 2) & (d2 >= (0.55 * r) ** 2)
    if name == "cross":
        t = max(2, bw // 3)
        horiz = np.abs(yy - (bh - 1) / 2) <= t / 2
        vert = np.abs(xx - (bw - 1) / 2) <= t / 2
        return horiz | vert
    if name == "bar":
        return np.ones((bh, bw), dtype=bool)
    raise ConfigurationError(f"unknown shape class {label}")


def _texture(label: int, bh: int, bw: int, color: np.ndarray, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:bh, 0:bw]
    fill = np.broadcast_to(color, (bh, bw, 3)).copy()
    name = SHAPE_CLASSES[label]
    if name == "rectangle":
        checker = ((yy // 3 + xx // 3) % 2).astype(np.float64)
        fill = fill * (0.65 + 0.35 * checker[..., None])
    elif name == "disc":
        cy, cx = (bh - 1) / 2, (bw - 1) / 2
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / (min(bh, bw) / 2)
        fill = fill * (1.0 - 0.35 * np.clip(d, 0, 1))[..., None]
    elif name == "triangle":
        stripes = ((yy // 3) % 2).astype(np.float64)
        fill = fill * (0.6 + 0.4 * stripes[..., None])
    elif name == "cross":
        fill = fill * (0.85 + 0.15 * rng.random((bh, bw, 1)))
    elif name == "bar":
        stripes = ((xx // 2 if bw >= bh else yy // 2) % 2).astype(np.float64)
        fill = fill * (0.55 + 0.45 * stripes[..., None])
    return fill


def _sample_box_shape(label: int, h: int, w: int, rng):
    base = int(rng.integers(12, min(29, min(h, w) // 2 + 1)))
    name = SHAPE_CLASSES[label]
    if name == "rectangle":
        bw, bh = base, max(10, int(round(base * rng.uniform(0.6, 1.0))))
    elif name == "bar":
        if rng.random() < 0.5:
            bw, bh = max(16, base), max(4, base // 4)
        else:
            bw, bh = max(4, base // 4), max(16, base)
    else:
        bw = bh = base
    return bh, bw


def render_image(spec: SyntheticDatasetSpec, index: int) -> tuple[np.ndarray, BoxSet]:
    """Render one image (uint8 HxWx3) and its ground truth, deterministically."""
    h, w = spec.image_size
    rng = np.random.default_rng([spec.seed, spec.index_offset + index])
    img = _draw_background(h, w, spec.clutter_level, rng)
    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    boxes, labels = [], []
    for _ in range(count):
        label = int(rng.integers(0, spec.num_classes))
        bh, bw = _sample_box_shape(label, h, w, rng)
        for _attempt in range(10):
            y0 = int(rng.integers(1, h - bh))
            x0 = int(rng.integers(1, w - bw))
            cand = np.array([[x0, y0, x0 + bw, y0 + bh]], dtype=np.float64)
            if not boxes or pairwise_iou(cand, np.array(boxes)).max() < 0.3:
                break
        mask = _shape_mask(label, bh, bw, rng)
        color = np.clip(_CLASS_COLORS[label] + rng.uniform(-0.08, 0.08, size=3), 0.05, 1.0)
        fill = _texture(label, bh, bw, color, rng)
        region = img[y0:y0 + bh, x0:x0 + bw]
        region[mask] = fill[mask]
        rows, cols = np.nonzero(mask)
        boxes.append([x0 + cols.min(), y0 + rows.min(), x0 + cols.max() + 1, y0 + rows.max() + 1])
        labels.append(label)
    pixels = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    ann = BoxSet(boxes=np.array(boxes, dtype=np.float32).reshape(-1, 4),
                 labels=np.array(labels, dtype=np.int64))
    ann.validate((h, w), spec.num_classes)
    return pixels, ann


# ---------------------------------------------------------------------------
# serialization


def serialize_annotations(annotations: list[BoxSet]) -> str:
    lines = []
    for i, ann in enumerate(annotations):
        for box, label in zip(ann.boxes, ann.labels):
            coords = " ".join(format(float(v), "g") for v in box)
            lines.append(f"{i:05d} {int(label)} {coords}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_annotations(text: str, num_images: int) -> list[BoxSet]:
    per_image: list[list] = [[] for _ in range(num_images)]
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise DatasetIOError(f"malformed annotation line: {line!r}")
        idx, label = int(parts[0]), int(parts[1])
        per_image[idx].append((label, [float(v) for v in parts[2:]]))
    out = []
    for recs in per_image:
        boxes = np.array([r[1] for r in recs], dtype=np.float32).reshape(-1, 4)
        labels = np.array([r[0] for r in recs], dtype=np.int64)
        out.append(BoxSet(boxes=boxes, labels=labels))
    return out


@dataclass
class Dataset:
    """A fully loaded dataset; pixels stay uint8 until batched."""

    pixels: np.ndarray  # [N, H, W, 3] uint8
    annotations: list[BoxSet]
    num_classes: int
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return int(self.pixels.shape[1]), int(self.pixels.shape[2])

    def hash(self) -> str:
        return self.manifest.get("spec_hash", "unhashed")

    def batch(self, indices, dtype: torch.dtype = torch.float32) -> ImageBatch:
        sel = np.asarray(indices, dtype=np.int64)
        arr = self.pixels[sel].astype(np.float32) / 255.0
        pixels = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)
        return ImageBatch(pixels=pixels, annotations=[self.annotations[i] for i in sel])


def generate_dataset(spec: SyntheticDatasetSpec, out_dir) -> Path:
    """Write images, annotations and manifest; returns the manifest path."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create dataset dir {out}: {e}") from e
    annotations = []
    histogram = {name: 0 for name in SHAPE_CLASSES[: spec.num_classes]}
    for i in range(spec.num_images):
        pixels, ann = render_image(spec, i)
        Image.fromarray(pixels).save(out / "images" / f"img_{i:05d}.png")
        annotations.append(ann)
        for label in ann.labels:
            histogram[SHAPE_CLASSES[int(label)]] += 1
    ann_text = serialize_annotations(annotations)
    (out / "annotations.txt").write_text(ann_text)
    manifest = {
        "num_images": spec.num_images,
        "image_size": list(spec.image_size),
        "num_classes": spec.num_classes,
        "num_objects": sum(len(a) for a in annotations),
        "class_histogram": histogram,
        "spec": asdict(spec),
        "spec_hash": spec.hash(),
        "annotations_sha256": hashlib.sha256(ann_text.encode()).hexdigest(),
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest_path


def load_dataset(path) -> Dataset:
    root = Path(path)
    if root.name == "manifest.json":
        root = root.parent
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        n = manifest["num_images"]
        annotations = parse_annotations((root / "annotations.txt").read_text(), n)
        frames = []
        for i in range(n):
            with Image.open(root / "images" / f"img_{i:05d}.png") as im:
                frames.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except (OSError, KeyError, ValueError) as e:
        raise DatasetIOError(f"cannot load dataset at {root}: {e}") from e
    return Dataset(pixels=np.stack(frames), annotations=annotations,
                   num_classes=manifest["num_classes"], manifest=manifest)


def dataset_from_spec(spec: SyntheticDatasetSpec) -> Dataset:
    """In-memory dataset, byte-identical to generate + load."""
    frames, annotations = [], []
    for i in range(spec.num_images):
        pixels, ann = render_image(spec, i)
        frames.append(pixels)
        annotations.append(ann)
    manifest = {"num_images": spec.num_images, "num_classes": spec.num_classes,
                "image_size": list(spec.image_size), "spec": asdict(spec),
                "spec_hash": spec.hash()}
    return Dataset(pixels=np.stack(frames), annotations=annotations,
                   num_classes=spec.num_classes, manifest=manifest)
