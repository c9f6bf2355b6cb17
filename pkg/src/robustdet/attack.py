"""Projected gradient descent against the detection loss.

The update ascends the sign of the input gradient of L_cls + L_loc and
projects back onto the l-inf ball around the clean image, then onto the
valid pixel range [0, 1]. Iterations start at the clean image (no random
start) and the attack never mutates model parameters; normalization
statistics are frozen for every attack forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .data import ImageBatch
from .detector import NormMode
from .errors import ConfigurationError, NumericError, ShapeMismatchError

TRAIN_STEP_SIZE = 2.0 / 255.0  # small single-step size used during training
EVAL_EPSILON = 8.0 / 255.0  # standard perturbation budget for evaluation


@dataclass
class AttackConfig:
    epsilon: float = EVAL_EPSILON
    steps_k: int = 1
    step_size: float | None = None  # None: epsilon / steps_k
    norm_mode: NormMode = NormMode.MAIN

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be non-negative")
        if self.steps_k < 1:
            raise ConfigurationError("steps_k must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigurationError("step_size must be positive when set")

    @property
    def effective_step(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / self.steps_k

    @classmethod
    def training_default(cls, epsilon: float = EVAL_EPSILON,
                         norm_mode: NormMode = NormMode.MAIN) -> "AttackConfig":
        return cls(epsilon=epsilon, steps_k=1, step_size=TRAIN_STEP_SIZE, norm_mode=norm_mode)

    @classmethod
    def evaluation_default(cls, steps_k: int = 1) -> "AttackConfig":
        return cls(epsilon=EVAL_EPSILON, steps_k=steps_k, step_size=None,
                   norm_mode=NormMode.MAIN)


def pgd_step(x_t: torch.Tensor, grad: torch.Tensor, cfg: AttackConfig,
             x_clean: torch.Tensor) -> torch.Tensor:
    """One ascent step followed by projection onto the ball and [0, 1]."""
    if x_t.shape != grad.shape or x_t.shape != x_clean.shape:
        raise ShapeMismatchError(
            f"shape mismatch: x_t {tuple(x_t.shape)}, grad {tuple(grad.shape)}, "
            f"x_clean {tuple(x_clean.shape)}"
        )
    x = x_t + cfg.effective_step * torch.sign(grad)
    x = torch.max(torch.min(x, x_clean + cfg.epsilon), x_clean - cfg.epsilon)
    return x.clamp(0.0, 1.0)


def generate_adversarial(images: ImageBatch, model, cfg: AttackConfig) -> ImageBatch:
    """PGD-k adversarial batch; annotations pass through unchanged."""
    x_clean = images.pixels.detach()
    if cfg.epsilon == 0.0:
        return ImageBatch(pixels=x_clean.clone(), annotations=images.annotations)
    if cfg.norm_mode is NormMode.AUXILIARY and not model.arch.dual_norm:
        raise ConfigurationError("auxiliary attack mode requires a dual-norm detector")
    x = x_clean.clone()
    for step in range(cfg.steps_k):
        x = x.detach().requires_grad_(True)
        with torch.enable_grad():
            pyramid = model.forward(x, cfg.norm_mode, update_stats=False)
            l_cls, l_loc = model.detection_losses(pyramid, images.annotations)
            loss = l_cls + l_loc
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite attack loss at step {step}")
        (grad,) = torch.autograd.grad(loss, x)
        with torch.no_grad():
            x = pgd_step(x.detach(), grad, cfg, x_clean)
    return ImageBatch(pixels=x.detach(), annotations=images.annotations)
