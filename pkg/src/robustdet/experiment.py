"""End-to-end experiment: teacher pretraining, fine-tuning, evaluation, report.

Stages write their artifacts under one output directory and are skipped
when their terminal artifact already exists, so a failed run can be
re-invoked and resumes where it stopped. The final report mirrors the
customary comparison layout: a pretrained-teacher row (PRE), a standard
fine-tuning baseline (STD) and the configured student, with per-metric
deltas against the teacher row.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

from . import checkpoint as ckpt_io
from .data import Dataset, SyntheticDatasetSpec, generate_dataset, load_dataset
from .detector import ArchConfig, build_detector
from .errors import ConfigurationError, StageError
from .metrics import ADV_STEPS, evaluate_model
from .train import TrainConfig, TrainMode, fit

METRIC_KEYS = ("AP", "AP50", "AP75")


@dataclass
class EvalConfig:
    adv_steps: tuple[int, ...] = ADV_STEPS
    epsilon_num: int = 8  # perturbation budget numerator over 255
    corruption_kinds: tuple[str, ...] = ()
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)
    batch_size: int = 16
    seed: int = 0

    @property
    def epsilon(self) -> float:
        return self.epsilon_num / 255.0


@dataclass
class ExperimentConfig:
    dataset: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    test_images: int = 200
    teacher: TrainConfig = field(default_factory=lambda: TrainConfig(mode=TrainMode.STD))
    student: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    teacher_checkpoint: str | None = None

    def __post_init__(self):
        if self.teacher.mode is not TrainMode.STD:
            raise ConfigurationError("the teacher must be trained in STD mode")
        if self.test_images < 1:
            raise ConfigurationError("test_images must be positive")

    def test_spec(self) -> SyntheticDatasetSpec:
        """Test split drawn from the same generative stream after the train images."""
        return replace(self.dataset, num_images=self.test_images,
                       index_offset=self.dataset.index_offset + self.dataset.num_images)


def load_model_from_checkpoint(path, dtype=None):
    ckpt = ckpt_io.load(path)
    arch_kwargs = {k: tuple(v) if isinstance(v, list) else v
                   for k, v in ckpt.manifest["arch"].items()}
    model = build_detector(ArchConfig(**arch_kwargs))
    ckpt_io.load_into_model(model, ckpt)
    model.eval()
    return model


def _evaluate_to_file(row: str, ckpt_path, dataset: Dataset, eval_cfg: EvalConfig,
                      out_path: Path) -> dict:
    model = load_model_from_checkpoint(ckpt_path)
    report = evaluate_model(
        model, dataset, adv_steps=eval_cfg.adv_steps, epsilon=eval_cfg.epsilon,
        corruption_kinds=eval_cfg.corruption_kinds or None,
        severities=eval_cfg.severities, seed=eval_cfg.seed,
        batch_size=eval_cfg.batch_size,
    )
    record = {"row": row, **report.to_record()}
    out_path.write_text(json.dumps(record, sort_keys=True) + "\n")
    return record


def format_report_table(records: list[dict]) -> str:
    """Comparison table with deltas against the first (teacher) row."""
    hashes = {r["dataset_hash"] for r in records}
    if len(hashes) > 1:
        raise ConfigurationError(f"refusing to compare mismatched dataset hashes: {hashes}")
    has_mpc = all("mpc" in r for r in records)
    groups = [("clean", "clean"), ("adv_avg", "adv")] + ([("mpc", "mPC")] if has_mpc else [])
    header = ["method"] + [f"{label} {k}" for _, label in groups for k in METRIC_KEYS]
    rows = [header]
    ref = records[0]
    for r in records:
        cells = [r["row"]]
        for section, _ in groups:
            for k in METRIC_KEYS:
                v = r[section][k]
                if r is ref:
                    cells.append(f"{v:.2f}")
                else:
                    cells.append(f"{v:.2f} ({v - ref[section][k]:+.1f})")
        rows.append(cells)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def write_report(records: list[dict], out_dir: Path) -> Path:
    jsonl = out_dir / "report.jsonl"
    jsonl.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    (out_dir / "report.txt").write_text(format_report_table(records))
    return out_dir


def run_experiment(cfg: ExperimentConfig, out_dir) -> Path:
    """Execute every stage; returns the report directory.

    Any stage failure is re-raised as a StageError naming the stage, with
    partial artifacts left in place.
    """
    out = Path(out_dir)
    (out / "eval").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(asdict(cfg), sort_keys=True, default=str, indent=2) + "\n")

    def stage(name, fn):
        try:
            return fn()
        except Exception as e:
            raise StageError(name, str(e)) from e

    def ensure_dataset(spec, path):
        if not (path / "manifest.json").exists():
            generate_dataset(spec, path)
        return load_dataset(path)

    train_ds = stage("generate-train", lambda: ensure_dataset(cfg.dataset, out / "data" / "train"))
    test_ds = stage("generate-test", lambda: ensure_dataset(cfg.test_spec(), out / "data" / "test"))

    def train_stage(name, train_cfg, teacher_ckpt):
        ckpt = out / name / "ckpt_final.zip"
        if not ckpt.exists():
            fit(train_ds, train_cfg, out / name, teacher_checkpoint=teacher_ckpt)
        return ckpt

    if cfg.teacher_checkpoint:
        teacher_ckpt = Path(cfg.teacher_checkpoint)
        if not teacher_ckpt.exists():
            raise StageError("teacher", f"checkpoint {teacher_ckpt} not found")
    else:
        teacher_ckpt = stage("teacher", lambda: train_stage("teacher", cfg.teacher, None))

    std_cfg = replace(cfg.student, mode=TrainMode.STD, beta=0.0)
    std_ckpt = stage("std-baseline", lambda: train_stage("std", std_cfg, teacher_ckpt))
    student_ckpt = stage("student", lambda: train_stage("student", cfg.student, teacher_ckpt))

    student_row = cfg.student.mode.value if cfg.student.mode is not TrainMode.STD else "STD-student"
    rows = [("PRE", teacher_ckpt), ("STD", std_ckpt), (student_row, student_ckpt)]
    records = []
    for row, ckpt in rows:
        path = out / "eval" / f"{row}.json"
        if path.exists():
            records.append(json.loads(path.read_text()))
        else:
            records.append(stage(f"eval-{row}", lambda r=row, c=ckpt, p=path:
                                 _evaluate_to_file(r, c, test_ds, cfg.eval, p)))
    stage("report", lambda: write_report(records, out))
    return out
