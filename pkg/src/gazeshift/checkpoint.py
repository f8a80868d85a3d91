"""Common checkpoint format: JSON header + flat little-endian tensor blob.

Layout: 8-byte little-endian header length, the UTF-8 JSON header, then the
raw tensor bytes in header order. The header records parameter names, shapes,
dtypes, and a free-form metadata dict (config echo, seed, epoch).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataIntegrityError, MissingArtifactError

MAGIC = "gazeshift-ckpt/1"


def save_checkpoint(model: torch.nn.Module, path, metadata: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    header = {
        "magic": MAGIC,
        "metadata": metadata or {},
        "tensors": [
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
            for name, arr in tensors.items()
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ({name: array}, metadata)."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) < 8:
            raise DataIntegrityError(f"{path}: truncated checkpoint header")
        (hlen,) = struct.unpack("<Q", raw)
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataIntegrityError(f"{path}: malformed checkpoint header: {exc}") from exc
        if header.get("magic") != MAGIC:
            raise DataIntegrityError(f"{path}: unrecognized checkpoint format")
        tensors = {}
        for spec in header["tensors"]:
            dtype = np.dtype(spec["dtype"]).newbyteorder("<")
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            data = fh.read(count * dtype.itemsize)
            if len(data) != count * dtype.itemsize:
                raise DataIntegrityError(f"{path}: truncated tensor {spec['name']}")
            tensors[spec["name"]] = np.frombuffer(data, dtype=dtype).reshape(spec["shape"]).copy()
    return tensors, header["metadata"]


def load_into(model: torch.nn.Module, path) -> dict:
    """Load a checkpoint into an already-constructed module; returns metadata."""
    tensors, metadata = load_checkpoint(path)
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    model.load_state_dict(state)
    return metadata
