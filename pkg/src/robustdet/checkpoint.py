"""Checkpoint archives: parameter arrays keyed by hierarchical name.

A checkpoint is an uncompressed zip holding one ``.npy`` entry per array
plus a ``manifest.json`` record (architecture hash, epoch, training mode).
Entry timestamps are pinned so identical state serializes to identical
bytes, and ``.npy`` round-trips float buffers bit-exactly.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, DatasetIOError

_FIXED_DATE = (2020, 1, 1, 0, 0, 0)
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    manifest: dict


def save_arrays(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    manifest = dict(manifest)
    manifest.setdefault("format_version", FORMAT_VERSION)
    try:
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            info = zipfile.ZipInfo("manifest.json", date_time=_FIXED_DATE)
            zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=2))
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.save(buf, arrays[name])
                info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_FIXED_DATE)
                zf.writestr(info, buf.getvalue())
    except OSError as e:
        raise DatasetIOError(f"cannot write checkpoint {path}: {e}") from e


def load(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {}
            for entry in zf.namelist():
                if entry.startswith("arrays/") and entry.endswith(".npy"):
                    name = entry[len("arrays/"):-len(".npy")]
                    arrays[name] = np.load(io.BytesIO(zf.read(entry)))
    except (OSError, zipfile.BadZipFile, KeyError) as e:
        raise DatasetIOError(f"cannot read checkpoint {path}: {e}") from e
    return Checkpoint(arrays=arrays, manifest=manifest)


def save_model(path, model, *, epoch: int, mode: str,
               optimizer_arrays: dict[str, np.ndarray] | None = None,
               extra: dict | None = None) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer_arrays:
        arrays.update({f"optim/{k}": v for k, v in optimizer_arrays.items()})
    manifest = {
        "arch": json.loads(json.dumps(vars(model.arch), default=list)),
        "arch_hash": model.arch.hash(),
        "epoch": epoch,
        "mode": mode,
    }
    if extra:
        manifest.update(extra)
    save_arrays(path, arrays, manifest)


def load_into_model(model, ckpt: Checkpoint, *, strict_arch: bool = True) -> None:
    """Load parameters/buffers; auxiliary norm state falls back to main.

    A single-norm teacher checkpoint therefore initializes a dual-norm
    student with identical main and auxiliary normalization sets.
    """
    if strict_arch:
        want = {k: v for k, v in ckpt.manifest.get("arch", {}).items() if k != "dual_norm"}
        have = {k: v for k, v in json.loads(
            json.dumps(vars(model.arch), default=list)).items() if k != "dual_norm"}
        if want and want != have:
            raise ConfigurationError(
                f"architecture mismatch: checkpoint {want} vs model {have}"
            )
    state = {}
    for key, tensor in model.state_dict().items():
        if key in ckpt.arrays:
            src = ckpt.arrays[key]
        elif "aux_" in key and key.replace("aux_", "") in ckpt.arrays:
            src = ckpt.arrays[key.replace("aux_", "")]
        else:
            raise ConfigurationError(f"checkpoint missing array for '{key}'")
        state[key] = torch.from_numpy(np.array(src)).to(tensor.dtype)
    model.load_state_dict(state)
