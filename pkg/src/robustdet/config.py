"""YAML config files mirroring the dataclass configs.

Schema (all sections optional, defaults apply):

    dataset:                # SyntheticDatasetSpec
      seed: 0
      num_images: 800
      image_size: [64, 64]
      num_classes: 6
      objects_per_image: [1, 3]
      clutter_level: 0.3
    test_images: 200
    teacher:                # TrainConfig, mode STD
      epochs: 12
    student:                # TrainConfig
      mode: UDFA            # STD | VANILLA_AT | VANILLA_FA | UDFA | UDFA_ADVPROP
      alpha: 0.5
      beta: 1.0
      align: {lambda: 1.0, gamma_fg: 1.0, gamma_bg: 6.0, p_norm: l2}
      attack: {epsilon_num: 8, steps_k: 1, step_size_num: 2}
      epochs: 12
      lr: 0.01
      decay_epochs: [9, 12]
      repeat_factor: 3
      seed: 0
      corrupt_augment: false
      batch_size: 8
    eval:
      adv_steps: [1, 2, 4]
      epsilon_num: 8
      corruption_kinds: []  # e.g. [gaussian_noise, defocus_blur]
      severities: [1, 2, 3, 4, 5]

Attack budgets may be given as ``epsilon_num`` / ``step_size_num``
(integer numerators over 255) or as raw floats ``epsilon`` / ``step_size``.
"""
from __future__ import annotations

from pathlib import Path

import yaml

from .align import AlignConfig, FeatureNorm
from .attack import AttackConfig
from .data import SyntheticDatasetSpec
from .errors import ConfigurationError
from .experiment import EvalConfig, ExperimentConfig
from .train import TrainConfig, TrainMode


def _reject_unknown(section: str, d: dict, allowed) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in '{section}': {sorted(unknown)}")


def _tupled(v):
    return tuple(v) if isinstance(v, list) else v


def align_from_dict(d: dict) -> AlignConfig:
    d = dict(d or {})
    _reject_unknown("align", d, {"lambda", "lambda_", "gamma_fg", "gamma_bg", "p_norm"})
    kwargs = {}
    if "lambda" in d or "lambda_" in d:
        kwargs["lambda_"] = float(d.get("lambda", d.get("lambda_")))
    for k in ("gamma_fg", "gamma_bg"):
        if k in d:
            kwargs[k] = float(d[k])
    if "p_norm" in d:
        kwargs["p_norm"] = FeatureNorm(str(d["p_norm"]).lower())
    return AlignConfig(**kwargs)


def attack_from_dict(d: dict) -> AttackConfig:
    d = dict(d or {})
    _reject_unknown("attack", d, {"epsilon", "epsilon_num", "step_size", "step_size_num",
                                  "steps_k"})
    kwargs = {}
    if "epsilon_num" in d:
        kwargs["epsilon"] = float(d["epsilon_num"]) / 255.0
    elif "epsilon" in d:
        kwargs["epsilon"] = float(d["epsilon"])
    if "step_size_num" in d:
        kwargs["step_size"] = float(d["step_size_num"]) / 255.0
    elif "step_size" in d:
        kwargs["step_size"] = None if d["step_size"] is None else float(d["step_size"])
    if "steps_k" in d:
        kwargs["steps_k"] = int(d["steps_k"])
    base = AttackConfig.training_default()
    defaults = {"epsilon": base.epsilon, "step_size": base.step_size, "steps_k": base.steps_k}
    defaults.update(kwargs)
    return AttackConfig(**defaults)


_TRAIN_KEYS = {"mode", "alpha", "beta", "align", "attack", "epochs", "lr", "momentum",
               "weight_decay", "decay_epochs", "decay_factor", "seed", "repeat_factor",
               "corrupt_augment", "batch_size"}


def train_from_dict(d: dict, default_mode: str = "UDFA") -> TrainConfig:
    d = dict(d or {})
    _reject_unknown("train", d, _TRAIN_KEYS)
    kwargs = {"mode": TrainMode(str(d.pop("mode", default_mode)))}
    if "align" in d:
        kwargs["align"] = align_from_dict(d.pop("align"))
    if "attack" in d:
        kwargs["attack"] = attack_from_dict(d.pop("attack"))
    if "decay_epochs" in d:
        kwargs["decay_epochs"] = tuple(int(e) for e in d.pop("decay_epochs"))
    kwargs.update(d)
    return TrainConfig(**kwargs)


def dataset_from_dict(d: dict) -> SyntheticDatasetSpec:
    d = dict(d or {})
    _reject_unknown("dataset", d, {"seed", "num_images", "image_size", "num_classes",
                                   "objects_per_image", "clutter_level", "index_offset"})
    for k in ("image_size", "objects_per_image"):
        if k in d:
            d[k] = _tupled(d[k])
    return SyntheticDatasetSpec(**d)


def eval_from_dict(d: dict) -> EvalConfig:
    d = dict(d or {})
    _reject_unknown("eval", d, {"adv_steps", "epsilon_num", "corruption_kinds",
                                "severities", "batch_size", "seed"})
    for k in ("adv_steps", "corruption_kinds", "severities"):
        if k in d:
            d[k] = tuple(d[k] or ())
    return EvalConfig(**d)


def experiment_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d or {})
    _reject_unknown("experiment", d, {"dataset", "test_images", "teacher", "student",
                                      "eval", "teacher_checkpoint"})
    return ExperimentConfig(
        dataset=dataset_from_dict(d.get("dataset", {})),
        test_images=int(d.get("test_images", 200)),
        teacher=train_from_dict(d.get("teacher", {}), default_mode="STD"),
        student=train_from_dict(d.get("student", {}), default_mode="UDFA"),
        eval=eval_from_dict(d.get("eval", {})),
        teacher_checkpoint=d.get("teacher_checkpoint"),
    )


def _load_yaml(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"malformed YAML in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"top level of {path} must be a mapping")
    return data


def load_experiment_config(path) -> ExperimentConfig:
    return experiment_from_dict(_load_yaml(path))


def load_train_config(path) -> TrainConfig:
    return train_from_dict(_load_yaml(path))
