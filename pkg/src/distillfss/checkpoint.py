"""Single-file checkpoint archives with language-neutral parameter blocks.

A checkpoint is a ZIP holding ``manifest.json`` (model kind, architecture,
ordered block names with shapes), one raw little-endian float32 file per
parameter block under ``blocks/``, an optional plain-text config snapshot and
the training metric history. Entries are stored uncompressed with a fixed
timestamp, so identical state produces byte-identical files.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone import ModelConfig, ScaleSpec
from .student import MulticlassStudent, StudentModel
from .teacher import TeacherModel

MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.txt"
HISTORY_NAME = "history.json"
FORMAT_NAME = "distillfss-checkpoint"
FORMAT_VERSION = 1
_FIXED_DATE = (2020, 1, 1, 0, 0, 0)

MODEL_KINDS = {
    "teacher": TeacherModel,
    "student": StudentModel,
    "multiclass_student": MulticlassStudent,
}


def _kind_of(model) -> str:
    for kind, cls in MODEL_KINDS.items():
        if type(model) is cls:
            return kind
    raise TypeError(f"unsupported model type {type(model).__name__}")


def _config_to_dict(config: ModelConfig) -> dict:
    return {
        "num_classes": config.num_classes,
        "in_channels": config.in_channels,
        "scale_base": config.scales.base,
        "min_level": config.scales.min_level,
        "max_level": config.scales.max_level,
        "layers_per_level": {str(k): v for k, v in config.scales.layers_per_level.items()},
        "widths": {str(k): v for k, v in config.widths.items()},
        "decoder_width": config.decoder_width,
        "seed": config.seed,
    }


def _config_from_dict(data: dict) -> ModelConfig:
    return ModelConfig(
        num_classes=data["num_classes"],
        in_channels=data["in_channels"],
        scales=ScaleSpec(
            base=data["scale_base"],
            min_level=data["min_level"],
            max_level=data["max_level"],
            layers_per_level={int(k): v for k, v in data["layers_per_level"].items()},
        ),
        widths={int(k): v for k, v in data["widths"].items()},
        decoder_width=data["decoder_width"],
        seed=data["seed"],
    )


def save_checkpoint(
    model,
    path: str | Path,
    config_text: str = "",
    history: Optional[dict] = None,
) -> Path:
    """Write the model's named parameter blocks atomically to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    blocks = []
    for name, tensor in state.items():
        blocks.append({"name": name, "shape": list(tensor.shape), "dtype": "float32"})
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "model": _kind_of(model),
        "architecture": _config_to_dict(model.config),
        "blocks": blocks,
    }

    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp_name, "w", compression=zipfile.ZIP_STORED) as zf:
            _write_entry(
                zf,
                MANIFEST_NAME,
                json.dumps(manifest, sort_keys=True, indent=1).encode(),
            )
            _write_entry(zf, CONFIG_NAME, config_text.encode())
            if history is not None:
                _write_entry(
                    zf, HISTORY_NAME, json.dumps(history, sort_keys=True).encode()
                )
            for name, tensor in state.items():
                data = (
                    tensor.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
                )
                _write_entry(zf, f"blocks/{name}.f32", data)
        os.replace(tmp_name, path)
    finally:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
    return path


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def read_manifest(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read(MANIFEST_NAME))


def read_config_text(path: str | Path) -> str:
    with zipfile.ZipFile(path) as zf:
        return zf.read(CONFIG_NAME).decode()


def read_history(path: str | Path) -> Optional[dict]:
    with zipfile.ZipFile(path) as zf:
        if HISTORY_NAME not in zf.namelist():
            return None
        return json.loads(zf.read(HISTORY_NAME))


def load_checkpoint(path: str | Path, expect: Optional[str] = None):
    """Rebuild the stored model. ``expect`` pins the model kind ("teacher",
    "student" or "multiclass_student") and fails with the missing block names
    when the archive holds a different component set."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        manifest = read_manifest(path)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} file: {path}")

    kind = manifest["model"]
    if expect is not None and kind != expect:
        _explain_kind_mismatch(path, manifest, expect)
    config = _config_from_dict(manifest["architecture"])
    model = MODEL_KINDS[kind](config)

    state = {}
    with zipfile.ZipFile(path) as zf:
        for block in manifest["blocks"]:
            name, shape = block["name"], tuple(block["shape"])
            raw = zf.read(f"blocks/{name}.f32")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            state[name] = torch.from_numpy(arr.copy())
    missing = [k for k in model.state_dict() if k not in state]
    extra = [k for k in state if k not in model.state_dict()]
    if missing or extra:
        raise ValueError(
            f"checkpoint {path} does not match a {kind} model "
            f"(missing blocks: {missing[:5]}, unexpected: {extra[:5]})"
        )
    model.load_state_dict(state)
    return model


def _explain_kind_mismatch(path: Path, manifest: dict, expect: str) -> None:
    have = {b["name"] for b in manifest["blocks"]}
    probe = MODEL_KINDS[expect](_config_from_dict(manifest["architecture"]))
    missing = sorted(k for k in probe.state_dict() if k not in have)
    detail = ", ".join(missing[:4]) + ("..." if len(missing) > 4 else "")
    raise ValueError(
        f"checkpoint {path} holds a {manifest['model']} model, not a {expect}; "
        f"missing blocks: {detail}"
    )
