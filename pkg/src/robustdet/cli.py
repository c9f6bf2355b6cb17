"""Command-line interface.

Subcommands: generate, train, attack, evaluate, report. A single
experiment YAML (see config.py for the schema) drives them all; `report`
orchestrates the full pipeline (teacher -> baselines -> student ->
evaluation -> comparison table), skipping stages whose artifacts exist.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O.
Set ROBUSTDET_OUTPUT_ROOT to change the default output root (./runs).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .attack import AttackConfig, generate_adversarial
from .config import dataset_from_dict, load_experiment_config, load_train_config
from .data import generate_dataset, load_dataset
from .errors import ConfigurationError, DatasetIOError, NumericError, StageError
from .experiment import (format_report_table, load_model_from_checkpoint,
                         run_experiment, write_report)
from .train import fit


def _out_dir(arg: str | None, default_name: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get("ROBUSTDET_OUTPUT_ROOT", "runs")) / default_name


def _cmd_generate(args) -> int:
    if args.config:
        cfg = load_experiment_config(args.config)
        out = _out_dir(args.out, "data")
        generate_dataset(cfg.dataset, out / "train")
        generate_dataset(cfg.test_spec(), out / "test")
        print(f"wrote train/test datasets under {out}")
        return 0
    spec = dataset_from_dict({
        "seed": args.seed, "num_images": args.num_images,
        "image_size": [args.image_size, args.image_size],
        "num_classes": args.num_classes,
        "objects_per_image": [args.min_objects, args.max_objects],
        "clutter_level": args.clutter,
    })
    out = _out_dir(args.out, "dataset")
    manifest = generate_dataset(spec, out)
    print(f"wrote {spec.num_images} images; manifest at {manifest}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    dataset = load_dataset(args.dataset)
    out = _out_dir(args.out, f"train-{cfg.mode.value.lower()}")
    result = fit(dataset, cfg, out, teacher_checkpoint=args.teacher)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log:        {result.log_path}")
    return 0


def _cmd_attack(args) -> int:
    model = load_model_from_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    cfg = AttackConfig(
        epsilon=args.epsilon_num / 255.0, steps_k=args.steps,
        step_size=None if args.step_size_num is None else args.step_size_num / 255.0,
    )
    out = _out_dir(args.out, "adversarial")
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for start in range(0, len(dataset), args.batch_size):
        idx = range(start, min(start + args.batch_size, len(dataset)))
        adv = generate_adversarial(dataset.batch(idx), model, cfg)
        for j, i in enumerate(idx):
            arrays[f"img_{i:05d}"] = adv.pixels[j].numpy()
    # raw float arrays: lossless, no 8-bit re-quantization of the perturbations
    path = out / "adv_pixels.zip"
    ckpt_io.save_arrays(path, arrays, {
        "epsilon_num": args.epsilon_num, "steps": args.steps,
        "step_size_num": args.step_size_num, "dataset_hash": dataset.hash(),
        "num_images": len(dataset),
    })
    print(f"wrote {len(arrays)} adversarial images to {path}")
    return 0


def _cmd_evaluate(args) -> int:
    from .metrics import adversarial_ap, clean_ap, corruption_ap

    model = load_model_from_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    record = {"row": args.row, "dataset_hash": dataset.hash()}
    clean = clean_ap(model, dataset, batch_size=args.batch_size)
    record["clean"] = {k: round(v, 2) for k, v in clean.items()}
    if args.adv:
        steps = tuple(int(s) for s in args.steps.split(","))
        per_step, avg = adversarial_ap(model, dataset, steps=steps,
                                       epsilon=args.epsilon_num / 255.0,
                                       batch_size=args.batch_size)
        record["adv_per_step"] = {str(s): {k: round(v, 2) for k, v in m.items()}
                                  for s, m in sorted(per_step.items())}
        record["adv_avg"] = {k: round(v, 2) for k, v in avg.items()}
    if args.corruption:
        kinds = tuple(args.corruption.split(","))
        severities = tuple(int(s) for s in args.severities.split(","))
        _, summary = corruption_ap(model, dataset, kinds, severities=severities,
                                   seed=args.seed, batch_size=args.batch_size)
        record["mpc"] = {k: round(v, 2) for k, v in summary.items()}
    out = _out_dir(args.out, "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.row}.json").write_text(json.dumps(record, sort_keys=True) + "\n")
    print(json.dumps(record, sort_keys=True, indent=2))
    return 0


def _cmd_report(args) -> int:
    if args.config:
        cfg = load_experiment_config(args.config)
        out = run_experiment(cfg, _out_dir(args.out, "experiment"))
        print((out / "report.txt").read_text())
        print(f"report directory: {out}")
        return 0
    if not args.records:
        raise ConfigurationError("report needs either --config or --records")
    records = [json.loads(Path(p).read_text().splitlines()[0]) for p in args.records]
    out = _out_dir(args.out, "report")
    out.mkdir(parents=True, exist_ok=True)
    write_report(records, out)
    print(format_report_table(records))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustdet",
                                     description="adversarially fine-tuned mini detector")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic shape dataset")
    g.add_argument("--config", help="experiment YAML; generates train+test splits")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-images", type=int, default=100)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--num-classes", type=int, default=6)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=3)
    g.add_argument("--clutter", type=float, default=0.3)
    g.add_argument("--out")
    g.set_defaults(fn=_cmd_generate)

    t = sub.add_parser("train", help="train or fine-tune a detector")
    t.add_argument("--config", required=True, help="YAML mirroring the train config fields")
    t.add_argument("--dataset", required=True)
    t.add_argument("--teacher", help="teacher checkpoint (required for non-STD modes)")
    t.add_argument("--out")
    t.set_defaults(fn=_cmd_train)

    a = sub.add_parser("attack", help="write PGD adversarial images as raw float arrays")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--epsilon-num", type=int, default=8, help="epsilon numerator over 255")
    a.add_argument("--steps", type=int, default=1)
    a.add_argument("--step-size-num", type=float, default=None,
                   help="step size numerator over 255 (default: epsilon/steps)")
    a.add_argument("--batch-size", type=int, default=16)
    a.add_argument("--out")
    a.set_defaults(fn=_cmd_attack)

    e = sub.add_parser("evaluate", help="clean / adversarial / corruption metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--adv", action="store_true", help="include adversarial AP")
    e.add_argument("--steps", default="1,2,4", help="comma-separated PGD steps")
    e.add_argument("--epsilon-num", type=int, default=8)
    e.add_argument("--corruption", default="", help="comma-separated corruption kinds")
    e.add_argument("--severities", default="1,2,3,4,5")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--batch-size", type=int, default=16)
    e.add_argument("--row", default="model", help="row name used in reports")
    e.add_argument("--out")
    e.set_defaults(fn=_cmd_evaluate)

    r = sub.add_parser("report", help="run the full experiment or merge eval records")
    r.add_argument("--config", help="experiment YAML; runs missing stages")
    r.add_argument("--records", nargs="*", help="existing eval record files to merge")
    r.add_argument("--out")
    r.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageError as e:
        cause = e.__cause__
        print(f"error: {e}", file=sys.stderr)
        if isinstance(cause, ConfigurationError):
            return 2
        if isinstance(cause, NumericError):
            return 3
        if isinstance(cause, OSError):
            return 4
        return 1
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (DatasetIOError, OSError) as e:
        print(f"I/O failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
