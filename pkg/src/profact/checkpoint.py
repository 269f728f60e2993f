"""Checkpoint files: a JSON header plus flat name->array binary payload.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
then the raw little-endian array bytes concatenated in header order. Writing
is deterministic (sorted keys) and atomic (temp file + rename), so identical
states produce byte-identical files and stable hashes.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"PFCKPT1\n"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                    header_extra: dict | None = None) -> None:
    names = sorted(arrays)
    table = {}
    offset = 0
    for name in names:
        arr = np.asarray(arrays[name], order="C")  # keeps 0-d shapes intact
        table[name] = {"dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
    header = {"format": FORMAT_VERSION, "arrays": table}
    if header_extra:
        header.update(header_extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for name in names:
                fh.write(np.asarray(arrays[name], order="C").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    hlen = int.from_bytes(raw[len(MAGIC):len(MAGIC) + 8], "little")
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path} has a corrupt header: {err}") from err
    data_start = start + hlen
    arrays = {}
    for name, info in header.get("arrays", {}).items():
        dtype = np.dtype(info["dtype"])
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin = data_start + info["offset"]
        end = begin + count * dtype.itemsize
        if end > len(raw):
            raise CheckpointError(f"{path}: array {name} extends past end of file")
        arrays[name] = np.frombuffer(raw[begin:end], dtype=dtype).reshape(shape).copy()
    return arrays, header


def state_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy() for name, tensor in model.state_dict().items()}


def state_hash(arrays: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], order="C")
        digest.update(name.encode("utf-8"))
        digest.update(str(arr.dtype).encode("utf-8"))
        digest.update(str(arr.shape).encode("utf-8"))
        digest.update(arr.tobytes())
    return digest.hexdigest()


def file_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def save_model(path: str | Path, model, extra: dict | None = None) -> None:
    """Write a model checkpoint carrying its configuration in the header."""
    header = {"model_config": model.cfg.to_dict()}
    if extra:
        header["meta"] = extra
    save_checkpoint(path, state_arrays(model), header)


def load_model(path: str | Path):
    """Rebuild a localizer from a checkpoint; returns (model, header)."""
    from .model import ForgeryLocalizer, ModelConfig

    arrays, header = load_checkpoint(path)
    if "model_config" not in header:
        raise CheckpointError(f"{path} lacks a model_config header")
    model = ForgeryLocalizer(ModelConfig.from_dict(header["model_config"]))
    state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model, header
