"""Tile checkpoint files.

Layout (little-endian)::

    magic      4 bytes  b"CPTF"
    version    u32
    header_len u32
    header     JSON (utf-8): {"config": ..., "video_ids": [...], "meta": {...}}
    count      u32
    count x {
        name_len u16, name (utf-8),
        ndim u8, shape u32 x ndim,
        dtype u8 (0 = float32, 1 = float64),
        data x prod(shape)
    }

Tensors are written in ``state_dict`` order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .field import TileField, TileFieldConfig

MAGIC = b"CPTF"
VERSION = 2
_DTYPES = {0: "<f4", 1: "<f8"}


def save_checkpoint(tile: TileField, path, meta: dict | None = None) -> Path:
    path = Path(path)
    header = json.dumps(
        {"config": tile.cfg.to_dict(), "video_ids": tile.video_ids, "meta": meta or {}},
        sort_keys=True,
    ).encode()
    state = tile.state_dict()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(state)))
        for name, t in state.items():
            raw = name.encode()
            code = 1 if t.dtype == torch.float64 else 0
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_DTYPES[code])
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(struct.pack("<B", code))
            fh.write(arr.tobytes())
    return path


def _read(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def load_checkpoint(path) -> tuple[TileField, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version, hlen = struct.unpack("<II", _read(fh, 8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(_read(fh, hlen))
        (count,) = struct.unpack("<I", _read(fh, 4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, nlen).decode()
            (ndim,) = struct.unpack("<B", _read(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            (code,) = struct.unpack("<B", _read(fh, 1))
            if code not in _DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code}")
            dt = np.dtype(_DTYPES[code])
            data = np.frombuffer(_read(fh, dt.itemsize * n), dtype=dt).reshape(shape)
            tensors[name] = torch.from_numpy(data.copy())
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    cfg = TileFieldConfig.from_dict(header["config"])
    n_sub = sum(1 for k in tensors if k.endswith(".centroid"))
    centroids = [tensors[f"subfields.{i}.centroid"].tolist() for i in range(n_sub)]
    tile = TileField(cfg, centroids, header["video_ids"])
    if any(t.dtype == torch.float64 for t in tensors.values()):
        tile = tile.double()
    try:
        tile.load_state_dict(tensors)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return tile, header.get("meta", {})
