"""Checkpoint archives: named float arrays plus a JSON metadata record.

Files are standard .npz archives written with pinned zip timestamps and
sorted member order, so two runs that compute identical parameters produce
byte-identical checkpoint files (np.savez would embed wall-clock time).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointIOError, IncompatibleCheckpointError
from .nets import GeneratorModel, ModelConfig
from .schedule import NoiseSchedule

SCHEMA_VERSION = 1
_METADATA_MEMBER = "__metadata__.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)   # minimum zip timestamp

STAGE_LABELS = ("base", "token-adapted", "lora-adapted")


def save_archive(path: str | Path, arrays: dict[str, np.ndarray],
                 metadata: dict) -> None:
    """Write arrays + metadata as a deterministic npz-compatible archive."""
    meta = dict(metadata)
    meta["schema_version"] = SCHEMA_VERSION
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo(_METADATA_MEMBER, date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    if not Path(path).exists():
        raise CheckpointIOError(f"checkpoint file {path} does not exist")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read(_METADATA_MEMBER))
            arrays = {}
            for member in zf.namelist():
                if member == _METADATA_MEMBER:
                    continue
                arrays[member[:-4]] = np.lib.format.read_array(
                    io.BytesIO(zf.read(member)))
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {exc}") from exc
    version = meta.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint schema {version!r} != supported {SCHEMA_VERSION}")
    return arrays, meta


def save_model_checkpoint(path: str | Path, model: GeneratorModel,
                          sched: NoiseSchedule, stage: str,
                          config_hash: str = "", seed: int | None = None,
                          extra: dict | None = None) -> None:
    """Full-model archive: parameters, buffers, schedule arrays, vocabulary,
    and a metadata record with the stage label."""
    if stage not in STAGE_LABELS:
        raise ValueError(f"stage must be one of {STAGE_LABELS}, got {stage!r}")
    arrays = {f"param.{name}": p.detach().cpu().numpy()
              for name, p in model.named_parameters()}
    arrays.update({f"buffer.{name}": b.detach().cpu().numpy()
                   for name, b in model.named_buffers()})
    arrays["alphas"] = sched.alphas
    arrays["sigmas"] = sched.sigmas
    meta = {
        "kind": "model",
        "stage": stage,
        "T": sched.T,
        "config": asdict(model.config),
        "vocabulary": model.vocab.words,
        "config_hash": config_hash,
        "seed": seed,
    }
    if extra:
        meta.update(extra)
    save_archive(path, arrays, meta)


def load_model_checkpoint(path: str | Path) -> tuple[GeneratorModel, NoiseSchedule, dict]:
    arrays, meta = load_archive(path)
    if meta.get("kind") != "model":
        raise IncompatibleCheckpointError(f"{path} is not a model checkpoint")
    config = ModelConfig(**meta["config"])
    model = GeneratorModel(config, seed=0)
    state = {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            state[name[len("param."):]] = torch.from_numpy(arr.copy())
        elif name.startswith("buffer."):
            state[name[len("buffer."):]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    sched = NoiseSchedule(T=int(meta["T"]), alphas=arrays["alphas"],
                          sigmas=arrays["sigmas"])
    return model, sched, meta


def save_adapter_checkpoint(path: str | Path, adapter, config_hash: str = "",
                            seed: int | None = None) -> None:
    """Adapter-only archive: arrays lora.<layer>.A / lora.<layer>.B + rank."""
    arrays = {}
    for name, layer in adapter.layers.items():
        arrays[f"lora.{name}.A"] = layer.A.detach().cpu().numpy()
        arrays[f"lora.{name}.B"] = layer.B.detach().cpu().numpy()
    meta = {"kind": "adapter", "rank": adapter.rank,
            "targets": list(adapter.targets),
            "config_hash": config_hash, "seed": seed}
    save_archive(path, arrays, meta)


def load_adapter_checkpoint(path: str | Path, model: GeneratorModel):
    """Re-attach a saved adapter to a model and load its factors."""
    from .adaptation import attach_lora

    arrays, meta = load_archive(path)
    if meta.get("kind") != "adapter":
        raise IncompatibleCheckpointError(f"{path} is not an adapter checkpoint")
    adapter = attach_lora(model, targets=meta["targets"], r=int(meta["rank"]))
    with torch.no_grad():
        for name, layer in adapter.layers.items():
            layer.A.copy_(torch.from_numpy(arrays[f"lora.{name}.A"].copy()))
            layer.B.copy_(torch.from_numpy(arrays[f"lora.{name}.B"].copy()))
    return adapter, meta
