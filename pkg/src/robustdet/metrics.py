"""Average precision, adversarial robustness and corruption metrics.

AP follows the COCO convention: greedy score-descending matching per class
(each ground-truth box used at most once, ties broken by stable sort and
first index), all-points interpolated precision-recall integration, macro
average over the classes present in the ground truth, and the headline AP
averaged over IoU thresholds 0.50:0.05:0.95. Values are percentages.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attack import AttackConfig, generate_adversarial
from .boxes import BoxSet, DetectionSet, pairwise_iou
from .corruption import CorruptionSpec, corrupt
from .detector import NormMode
from .errors import ConfigurationError

COCO_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
ADV_STEPS = (1, 2, 4)
SCORE_FLOOR = 0.01  # detections below this are discarded before matching
MAX_DETECTIONS = 100


def _interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """All-points interpolation over the cumulative PR curve."""
    if num_gt == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def _class_ap(dets: list[DetectionSet], gts: list[BoxSet], cls: int,
              thresholds) -> dict[float, float]:
    pooled_scores, pooled_img, pooled_box = [], [], []
    for img_idx, d in enumerate(dets):
        sel = np.nonzero(d.labels == cls)[0]
        for k in sel:
            pooled_scores.append(float(d.scores[k]))
            pooled_img.append(img_idx)
            pooled_box.append(d.boxes[k])
    gt_boxes = [g.boxes[g.labels == cls] for g in gts]
    num_gt = int(sum(len(b) for b in gt_boxes))
    if not pooled_scores:
        return {t: 0.0 for t in thresholds}
    order = np.argsort(-np.asarray(pooled_scores), kind="stable")
    ious = [
        pairwise_iou(np.asarray(pooled_box[i]).reshape(1, 4), gt_boxes[pooled_img[i]])[0]
        if len(gt_boxes[pooled_img[i]]) else np.zeros(0)
        for i in order
    ]
    out = {}
    for t in thresholds:
        used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
        tp = np.zeros(len(order))
        for rank, i in enumerate(order):
            cand = ious[rank].copy()
            if cand.size:
                cand[used[pooled_img[i]]] = -1.0
                best = int(np.argmax(cand))
                if cand[best] >= t:
                    tp[rank] = 1.0
                    used[pooled_img[i]][best] = True
        out[t] = _interpolated_ap(tp, num_gt)
    return out


def average_precision(dets: list[DetectionSet], gts: list[BoxSet],
                      iou_thresholds=COCO_THRESHOLDS) -> dict[str, float]:
    """{AP, AP50, AP75} in percent, macro-averaged over classes present in gts."""
    if len(dets) != len(gts):
        raise ConfigurationError("detections and ground truth must be index-aligned")
    classes = sorted({int(c) for g in gts for c in g.labels})
    if not classes:
        raise ConfigurationError("no ground-truth boxes: AP is undefined")
    per_class = {c: _class_ap(dets, gts, c, iou_thresholds) for c in classes}
    def macro(t):
        return 100.0 * float(np.mean([per_class[c][t] for c in classes]))
    ap50 = macro(0.5)
    ap75 = macro(0.75)
    ap = float(np.mean([macro(t) for t in iou_thresholds]))
    return {"AP": ap, "AP50": ap50, "AP75": ap75}


def mpc(perf: np.ndarray) -> float:
    """Mean over corruptions of the mean over severities."""
    perf = np.asarray(perf, dtype=np.float64)
    if perf.ndim != 2 or perf.size == 0:
        raise ConfigurationError("performance matrix must be non-empty [N_c, N_s]")
    if perf.min() < 0 or perf.max() > 100:
        raise ConfigurationError("AP entries must lie in [0, 100]")
    return float(perf.mean(axis=1).mean())


@dataclass
class MetricReport:
    clean: dict[str, float]
    adv_per_step: dict[int, dict[str, float]]
    adv_avg: dict[str, float]
    mpc: dict[str, float] | None = None
    dataset_hash: str = "unhashed"

    def to_record(self) -> dict:
        """JSON-ready record; percentages rounded to two decimals."""
        rec = {
            "clean": {k: round(v, 2) for k, v in self.clean.items()},
            "adv_per_step": {str(s): {k: round(v, 2) for k, v in m.items()}
                             for s, m in sorted(self.adv_per_step.items())},
            "adv_avg": {k: round(v, 2) for k, v in self.adv_avg.items()},
            "dataset_hash": self.dataset_hash,
        }
        if self.mpc is not None:
            rec["mpc"] = {k: round(v, 2) for k, v in self.mpc.items()}
        return rec


def _decode_dataset(model, pixels: torch.Tensor, batch_annotations,
                    score_threshold=SCORE_FLOOR, nms_iou=0.5) -> list[DetectionSet]:
    pyramid = model.forward(pixels, NormMode.MAIN)
    return model.decode(pyramid, score_threshold=score_threshold, nms_iou=nms_iou,
                        max_detections=MAX_DETECTIONS)


def clean_ap(model, dataset, batch_size: int = 16) -> dict[str, float]:
    model.eval()
    dets = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = dataset.batch(range(start, min(start + batch_size, len(dataset))))
            dets.extend(_decode_dataset(model, batch.pixels, batch.annotations))
    return average_precision(dets, dataset.annotations)


def adversarial_ap(model, dataset, steps=ADV_STEPS, epsilon: float = 8.0 / 255.0,
                   batch_size: int = 16):
    """Per-step and step-averaged AP under PGD-k with step size epsilon / k.

    The model must be in evaluation phase; attacks run against the main
    (inference) normalization statistics.
    """
    model.eval()
    per_step = {}
    for k in sorted(steps):
        cfg = AttackConfig(epsilon=epsilon, steps_k=k, step_size=None,
                           norm_mode=NormMode.MAIN)
        dets = []
        for start in range(0, len(dataset), batch_size):
            batch = dataset.batch(range(start, min(start + batch_size, len(dataset))))
            adv = generate_adversarial(batch, model, cfg)
            with torch.no_grad():
                dets.extend(_decode_dataset(model, adv.pixels, adv.annotations))
        per_step[k] = average_precision(dets, dataset.annotations)
    avg = {key: float(np.mean([per_step[k][key] for k in sorted(steps)]))
           for key in ("AP", "AP50", "AP75")}
    return per_step, avg


def corruption_ap(model, dataset, kinds, severities=(1, 2, 3, 4, 5),
                  seed: int = 0, batch_size: int = 16):
    """AP matrix over (corruption, severity) plus the mPC summary per metric."""
    model.eval()
    matrices = {key: np.zeros((len(kinds), len(severities))) for key in ("AP", "AP50", "AP75")}
    for ci, kind in enumerate(kinds):
        for si, severity in enumerate(severities):
            spec = CorruptionSpec(kind=kind, severity=severity)
            dets = []
            with torch.no_grad():
                for start in range(0, len(dataset), batch_size):
                    idx = range(start, min(start + batch_size, len(dataset)))
                    batch = dataset.batch(idx)
                    arr = batch.pixels.numpy()
                    for j, img_idx in enumerate(idx):
                        arr[j] = corrupt(arr[j], spec, seed=(seed, img_idx))
                    pixels = torch.from_numpy(arr)
                    dets.extend(_decode_dataset(model, pixels, batch.annotations))
            scores = average_precision(dets, dataset.annotations)
            for key in matrices:
                matrices[key][ci, si] = scores[key]
    summary = {key: mpc(matrices[key]) for key in matrices}
    return matrices, summary


def evaluate_model(model, dataset, *, adv_steps=ADV_STEPS, epsilon: float = 8.0 / 255.0,
                   corruption_kinds=None, severities=(1, 2, 3, 4, 5), seed: int = 0,
                   batch_size: int = 16) -> MetricReport:
    """Full evaluation harness: clean, adversarial and optional corruption AP."""
    clean = clean_ap(model, dataset, batch_size=batch_size)
    per_step, avg = adversarial_ap(model, dataset, steps=adv_steps, epsilon=epsilon,
                                   batch_size=batch_size)
    mpc_summary = None
    if corruption_kinds:
        _, mpc_summary = corruption_ap(model, dataset, corruption_kinds,
                                       severities=severities, seed=seed,
                                       batch_size=batch_size)
    return MetricReport(clean=clean, adv_per_step=per_step, adv_avg=avg,
                        mpc=mpc_summary, dataset_hash=dataset.hash())
