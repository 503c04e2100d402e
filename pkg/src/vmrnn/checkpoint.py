"""Checkpoint archive: a zip of named parameter arrays as raw little-endian
bytes, an index describing dtype and shape per name, and a metadata record
embedding the model configuration and creation seed.  The layout is chosen
so any language with a zip reader can parse it.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import DataFormatError
from .models import ModelConfig, build_model

__all__ = ["save_checkpoint", "load_checkpoint", "read_checkpoint_meta"]

FORMAT_NAME = "vmrnn-checkpoint"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
}


def save_checkpoint(path, model: torch.nn.Module, seed: int, extra: dict | None = None):
    """Write the model's parameters and buffers plus config metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    index = {}
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": int(seed),
    }
    if extra:
        meta["extra"] = extra
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, tensor in state.items():
            code = _DTYPE_CODES.get(tensor.dtype)
            if code is None:
                raise DataFormatError(f"unsupported parameter dtype {tensor.dtype} for {name}")
            array = tensor.detach().cpu().numpy().astype(code, copy=False)
            index[name] = {"dtype": code, "shape": list(tensor.shape)}
            zf.writestr(f"params/{name}", array.tobytes(order="C"))
        zf.writestr("index.json", json.dumps(index, indent=1))
        zf.writestr("meta.json", json.dumps(meta, indent=1))
    return path


def read_checkpoint_meta(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"not a readable checkpoint archive: {path}: {exc}") from exc
    if meta.get("format") != FORMAT_NAME:
        raise DataFormatError(f"unexpected archive format {meta.get('format')!r}")
    if meta.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {meta.get('version')!r}")
    return meta


def load_checkpoint(path):
    """Rebuild the model from its embedded config and load all arrays.

    Returns ``(model, meta)``; the model is in eval mode.
    """
    meta = read_checkpoint_meta(path)
    config = ModelConfig.from_dict(meta["config"])
    model = build_model(config)
    state = {}
    with zipfile.ZipFile(path) as zf:
        index = json.loads(zf.read("index.json"))
        for name, info in index.items():
            raw = zf.read(f"params/{name}")
            array = np.frombuffer(raw, dtype=np.dtype(info["dtype"]))
            expected = int(np.prod(info["shape"])) if info["shape"] else 1
            if array.size != expected:
                raise DataFormatError(
                    f"parameter {name}: payload holds {array.size} values, index says {expected}"
                )
            state[name] = torch.from_numpy(array.reshape(info["shape"]).copy())
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, meta
