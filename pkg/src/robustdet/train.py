"""Fine-tuning loop: standard, adversarial, and feature-aligned modes.

One iteration draws a single batch; the adversarial examples, detection
losses and alignment branches all derive from it. The total objective is

    alpha * (L_cls + L_loc)(clean) + (1 - alpha) * (L_cls + L_loc)(adv)
        + beta * (lambda * fea3 + fea1 + fea2)

In the dual-normalization mode every adversarial pass (attack generation,
adversarial features and losses) runs under the auxiliary statistics while
every clean pass runs under the main statistics; inference always uses the
main set.
"""
from __future__ import annotations

import enum
import hashlib
import json
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .align import AlignConfig, alignment_loss, make_masks
from .attack import AttackConfig, generate_adversarial
from .corruption import CORRUPTION_KINDS, CorruptionSpec, corrupt
from .data import Dataset, ImageBatch
from .detector import ArchConfig, NormMode, TinyDetector, build_detector
from .errors import ConfigurationError, NumericError


class TrainMode(enum.Enum):
    STD = "STD"
    VANILLA_AT = "VANILLA_AT"
    VANILLA_FA = "VANILLA_FA"
    UDFA = "UDFA"
    UDFA_ADVPROP = "UDFA_ADVPROP"


_FA_MODES = (TrainMode.VANILLA_FA, TrainMode.UDFA, TrainMode.UDFA_ADVPROP)


@dataclass
class TrainConfig:
    mode: TrainMode = TrainMode.UDFA
    alpha: float = 0.5
    beta: float = 1.0
    align: AlignConfig = field(default_factory=AlignConfig)
    attack: AttackConfig = field(default_factory=AttackConfig.training_default)
    epochs: int = 12
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_epochs: tuple[int, ...] = (9, 12)
    decay_factor: float = 0.1
    seed: int = 0
    repeat_factor: int = 3
    corrupt_augment: bool = False
    batch_size: int = 8

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = TrainMode(self.mode)
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if self.epochs < 1 or self.repeat_factor < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs, repeat_factor and batch_size must be >= 1")
        if self.mode in (TrainMode.STD, TrainMode.VANILLA_AT):
            self.beta = 0.0
        if self.mode is TrainMode.VANILLA_FA:
            self.align = replace(self.align, lambda_=0.0)
        if self.mode is not TrainMode.STD and self.attack.epsilon <= 0:
            raise ConfigurationError("training attack requires epsilon > 0")

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.lr * self.decay_factor ** decays

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class TrainLogRecord:
    epoch: int
    iteration: int
    lr: float
    total: float
    clean_cls: float
    clean_loc: float
    adv_cls: float | None = None
    adv_loc: float | None = None
    fea1: float | None = None
    fea2: float | None = None
    fea3: float | None = None
    wall_time: float = 0.0

    def to_json(self) -> str:
        rec = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(rec, sort_keys=True)


def total_loss(clean_losses, adv_losses, l_fea, cfg: TrainConfig):
    """Weighted objective; without adversarial terms it is the plain
    clean detection loss (standard-training contract)."""
    clean = clean_losses[0] + clean_losses[1]
    if adv_losses is None:
        return clean
    adv = adv_losses[0] + adv_losses[1]
    total = cfg.alpha * clean + (1.0 - cfg.alpha) * adv
    if l_fea is not None:
        total = total + cfg.beta * l_fea
    return total


def teacher_features(teacher: TinyDetector, pixels: torch.Tensor):
    """Frozen-teacher pyramid: batch-statistics normalization (matching the
    student's training-phase pass) with no buffer updates and no gradients."""
    with torch.no_grad():
        return teacher.forward(pixels, NormMode.MAIN, use_batch_stats=True,
                               update_stats=False)


def train_step(batch: ImageBatch, student: TinyDetector, teacher: TinyDetector | None,
               cfg: TrainConfig, optimizer, *, epoch: int = 1,
               iteration: int = 0) -> TrainLogRecord:
    """One gradient update of the student; adversarial inputs are constants
    to the outer objective (no differentiation through the attack)."""
    t0 = time.perf_counter()
    student.train()
    mode = cfg.mode
    adv_norm = NormMode.AUXILIARY if mode is TrainMode.UDFA_ADVPROP else NormMode.MAIN

    adv_batch = None
    if mode is not TrainMode.STD:
        adv_batch = generate_adversarial(batch, student,
                                         replace(cfg.attack, norm_mode=adv_norm))

    clean_pyr = student.forward(batch.pixels, NormMode.MAIN)
    c_cls, c_loc = student.detection_losses(clean_pyr, batch.annotations)

    a_cls = a_loc = l_fea = parts = None
    if mode is not TrainMode.STD:
        adv_pyr = student.forward(adv_batch.pixels, adv_norm)
        a_cls, a_loc = student.detection_losses(adv_pyr, adv_batch.annotations)
        if mode in _FA_MODES:
            if teacher is None:
                raise ConfigurationError(f"{mode.value} training requires a teacher")
            t_pyr = teacher_features(teacher, batch.pixels)
            masks = make_masks(batch.annotations, clean_pyr.spatial_shapes(),
                               clean_pyr.strides, image_size=batch.image_size,
                               dtype=batch.pixels.dtype)
            l_fea, parts = alignment_loss(adv_pyr, clean_pyr, t_pyr, masks, cfg.align)

    adv_losses = None if a_cls is None else (a_cls, a_loc)
    total = total_loss((c_cls, c_loc), adv_losses, l_fea, cfg)
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite total loss at epoch {epoch} iteration {iteration}: "
            f"clean=({float(c_cls)}, {float(c_loc)}) "
            f"adv={(float(a_cls), float(a_loc)) if a_cls is not None else None}"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    return TrainLogRecord(
        epoch=epoch, iteration=iteration, lr=optimizer.param_groups[0]["lr"],
        total=float(total), clean_cls=float(c_cls), clean_loc=float(c_loc),
        adv_cls=None if a_cls is None else float(a_cls),
        adv_loc=None if a_loc is None else float(a_loc),
        fea1=None if parts is None else float(parts.fea1),
        fea2=None if parts is None else float(parts.fea2),
        fea3=None if parts is None else float(parts.fea3),
        wall_time=time.perf_counter() - t0,
    )


def epoch_indices(num_images: int, cfg: TrainConfig, epoch: int) -> np.ndarray:
    """Deterministic shuffled order of the repeat-sampled image indices."""
    rng = np.random.default_rng([cfg.seed, epoch])
    return rng.permutation(np.tile(np.arange(num_images), cfg.repeat_factor))


def _augment_batch(batch: ImageBatch, cfg: TrainConfig, epoch: int,
                   iteration: int) -> ImageBatch:
    """One randomly chosen corruption at severity 1, before attack generation."""
    rng = np.random.default_rng([cfg.seed, epoch, iteration, 7])
    spec = CorruptionSpec(kind=CORRUPTION_KINDS[int(rng.integers(len(CORRUPTION_KINDS)))],
                          severity=1)
    arr = batch.pixels.numpy().copy()
    for j in range(arr.shape[0]):
        arr[j] = corrupt(arr[j], spec, seed=(cfg.seed, epoch, iteration, j))
    return ImageBatch(pixels=torch.from_numpy(arr).to(batch.pixels.dtype),
                      annotations=batch.annotations)


@dataclass
class FitResult:
    checkpoint_path: Path
    log_path: Path
    records: list[TrainLogRecord]


def _optimizer_arrays(student, optimizer) -> dict[str, np.ndarray]:
    out = {}
    for name, p in student.named_parameters():
        buf = optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            out[name] = buf.detach().cpu().numpy()
    return out


def fit(dataset: Dataset, cfg: TrainConfig, out_dir, *,
        teacher_checkpoint=None, arch: ArchConfig | None = None,
        resume_from=None, keep_records: bool = False) -> FitResult:
    """Train per the configured schedule; writes per-iteration log records
    and checkpoints at each decay epoch and at the end."""
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if arch is None:
        arch = ArchConfig(num_classes=dataset.num_classes,
                          dual_norm=cfg.mode is TrainMode.UDFA_ADVPROP)
    torch.manual_seed(cfg.seed)
    student = build_detector(arch, seed=cfg.seed)

    teacher = None
    if teacher_checkpoint is not None:
        t_ckpt = ckpt_io.load(teacher_checkpoint)
        t_arch = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in t_ckpt.manifest["arch"].items()})
        teacher = build_detector(t_arch, seed=cfg.seed)
        ckpt_io.load_into_model(teacher, t_ckpt)
        teacher.requires_grad_(False)
        teacher.eval()
        ckpt_io.load_into_model(student, t_ckpt)  # aux norm state copies main
    elif cfg.mode is not TrainMode.STD:
        raise ConfigurationError(f"{cfg.mode.value} training requires a teacher checkpoint")

    optimizer = torch.optim.SGD(student.parameters(), lr=cfg.lr,
                                momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    start_epoch = 1
    if resume_from is not None:
        r = ckpt_io.load(resume_from)
        ckpt_io.load_into_model(student, r)
        by_name = dict(student.named_parameters())
        for key, arr in r.arrays.items():
            if key.startswith("optim/"):
                p = by_name[key[len("optim/"):]]
                optimizer.state[p] = {"momentum_buffer": torch.from_numpy(np.array(arr)).to(p.dtype)}
        start_epoch = int(r.manifest["epoch"]) + 1

    log_path = out / "train_log.jsonl"
    records: list[TrainLogRecord] = []

    def save(epoch: int, name: str) -> Path:
        path = out / name
        ckpt_io.save_model(path, student, epoch=epoch, mode=cfg.mode.value,
                           optimizer_arrays=_optimizer_arrays(student, optimizer),
                           extra={"train_config_hash": cfg.hash(),
                                  "dataset_hash": dataset.hash()})
        return path

    final_path = None
    with open(log_path, "a") as log:
        for epoch in range(start_epoch, cfg.epochs + 1):
            lr = cfg.lr_at(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = epoch_indices(len(dataset), cfg, epoch)
            for it in range(0, len(order), cfg.batch_size):
                iteration = it // cfg.batch_size
                batch = dataset.batch(order[it:it + cfg.batch_size])
                if cfg.corrupt_augment:
                    batch = _augment_batch(batch, cfg, epoch, iteration)
                try:
                    record = train_step(batch, student, teacher, cfg, optimizer,
                                        epoch=epoch, iteration=iteration)
                except NumericError as e:
                    log.write(json.dumps({"epoch": epoch, "iteration": iteration,
                                          "error": str(e)}) + "\n")
                    raise
                log.write(record.to_json() + "\n")
                if keep_records:
                    records.append(record)
            if epoch in cfg.decay_epochs and epoch != cfg.epochs:
                save(epoch, f"ckpt_epoch{epoch:03d}.zip")
        final_path = save(cfg.epochs, "ckpt_final.zip")
    return FitResult(checkpoint_path=final_path, log_path=log_path, records=records)
