"""Binary checkpoint container.

Layout: magic ``UFIX`` | u32 version | u32 header length | UTF-8 JSON header |
raw little-endian tensor payload. The header carries the model config, an
optional training-state block, and a tensor manifest of (name, shape, dtype,
offset) entries; offsets are bytes from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .model import FixerConfig, FixerModel

MAGIC = b"UFIX"
VERSION = 1

_DTYPES = {
    np.dtype("float32"): "f4",
    np.dtype("float64"): "f8",
    np.dtype("uint8"): "u1",
    np.dtype("int64"): "i8",
}
_NUMPY_DTYPES = {code: np.dtype(code) for code in ("f4", "f8", "u1", "i8")}


def _tensor_entries(named_tensors):
    """Manifest rows plus raw little-endian payload chunks."""
    entries = []
    chunks = []
    offset = 0
    for name, tensor in named_tensors:
        arr = tensor.detach().cpu().numpy()
        if arr.dtype not in _DTYPES:
            raise ValueError(f"tensor {name} has unsupported dtype {arr.dtype}")
        code = _DTYPES[arr.dtype]
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": code,
            "offset": offset,
        })
        chunks.append(raw)
        offset += len(raw)
    return entries, chunks


def _flatten_optimizer_state(optim_state: dict):
    """Split an optimizer state_dict into JSON scalars and named tensors."""
    tensors = []
    meta = {"param_groups": optim_state["param_groups"], "state_keys": {}}
    # canonical numeric order: the JSON header is written with sorted keys, so
    # relying on dict order would string-sort param ids ("10" < "2") after one
    # save/load cycle and resumed checkpoints would stop being byte-identical
    for idx, slots in sorted(optim_state["state"].items(), key=lambda kv: int(kv[0])):
        keys = []
        for key, value in slots.items():
            if isinstance(value, torch.Tensor):
                tensors.append((f"optim.{idx}.{key}", value))
                keys.append(key)
            else:
                meta.setdefault("state_scalars", {}).setdefault(str(idx), {})[key] = value
        meta["state_keys"][str(idx)] = keys
    return meta, tensors


def save_checkpoint(path, model: FixerModel, train_state: dict | None = None) -> None:
    """Write model config + parameters (+ optional optimizer/RNG state).

    ``train_state`` as produced by training: {"step": int, "optimizer":
    optimizer state_dict, "rng": torch ByteTensor generator state}.
    """
    named = [(f"model.{k}", v) for k, v in model.state_dict().items()]
    header: dict = {"config": model.config.as_dict(), "train_state": None}
    if train_state is not None:
        meta, opt_tensors = _flatten_optimizer_state(train_state["optimizer"])
        header["train_state"] = {"step": int(train_state["step"]), "optimizer": meta}
        named.extend(opt_tensors)
        rng = train_state.get("rng")
        if rng is not None:
            named.append(("rng.loop", rng))
    entries, chunks = _tensor_entries(named)
    header["tensors"] = entries
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for chunk in chunks:
            f.write(chunk)


def _read_header(f, path):
    magic = f.read(4)
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
    fixed = f.read(8)
    if len(fixed) != 8:
        raise DataError(f"{path}: truncated checkpoint header")
    version, blob_len = struct.unpack("<II", fixed)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    blob = f.read(blob_len)
    if len(blob) != blob_len:
        raise DataError(f"{path}: truncated checkpoint header")
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint header: {exc}") from exc


def _read_tensors(f, entries, path):
    payload = f.read()
    tensors = {}
    for entry in entries:
        dtype = _NUMPY_DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataError(f"{path}: unknown tensor dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise DataError(f"{path}: truncated payload for tensor {entry['name']}")
        arr = np.frombuffer(payload[start:end], dtype=dtype.newbyteorder("<")).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(dtype, copy=True))
    return tensors


def load_checkpoint(path):
    """Read a checkpoint; returns (model, train_state or None)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: checkpoint not found")
    with open(path, "rb") as f:
        header = _read_header(f, path)
        if "config" not in header or "tensors" not in header:
            raise DataError(f"{path}: checkpoint header missing required blocks")
        tensors = _read_tensors(f, header["tensors"], path)

    try:
        config = FixerConfig(**header["config"])
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad model config in checkpoint: {exc}") from exc
    model = FixerModel(config)
    state = {}
    for key in model.state_dict():
        full = f"model.{key}"
        if full not in tensors:
            raise DataError(f"{path}: checkpoint is missing tensor {full}")
        state[key] = tensors[full]
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise DataError(f"{path}: checkpoint tensors do not fit the model: {exc}") from exc

    train_state = None
    if header.get("train_state") is not None:
        ts = header["train_state"]
        meta = ts["optimizer"]
        opt_state: dict = {"param_groups": meta["param_groups"], "state": {}}
        state_keys = sorted(meta.get("state_keys", {}).items(), key=lambda kv: int(kv[0]))
        for idx_str, keys in state_keys:
            idx = int(idx_str)
            slots = {}
            for key in keys:
                slots[key] = tensors[f"optim.{idx_str}.{key}"]
            for key, value in meta.get("state_scalars", {}).get(idx_str, {}).items():
                slots[key] = value
            opt_state["state"][idx] = slots
        train_state = {"step": int(ts["step"]), "optimizer": opt_state}
        if "rng.loop" in tensors:
            train_state["rng"] = tensors["rng.loop"].to(torch.uint8)
    return model, train_state


def read_config(path) -> FixerConfig:
    """Read just the model config block without loading tensors."""
    with open(path, "rb") as f:
        header = _read_header(f, path)
    try:
        return FixerConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad model config in checkpoint: {exc}") from exc
