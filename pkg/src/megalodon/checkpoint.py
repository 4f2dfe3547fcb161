"""MGLD checkpoint files.

Layout, all integers little-endian::

    b"MGLD" | u32 version | u64 header length | UTF-8 JSON header | payload

The header maps each tensor name to ``{"shape", "dtype", "offset"}`` where
``offset`` counts bytes from the start of the payload. Tensors are stored as
raw little-endian IEEE-754 (or int64) data, in increasing offset order. The
optional ``"__metadata__"`` entry is a flat string-to-string map.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MGLD"
VERSION = 1
METADATA_KEY = "__metadata__"

_DTYPES = {
    torch.float64: ("F64", "<f8"),
    torch.float32: ("F32", "<f4"),
    torch.int64: ("I64", "<i8"),
}
_BY_NAME = {name: (np.dtype(np_dt), torch_dt) for torch_dt, (name, np_dt) in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, torch.Tensor], metadata: dict[str, str] | None = None) -> None:
    header: dict = {}
    blobs = []
    offset = 0
    for name, t in tensors.items():
        if name == METADATA_KEY:
            raise CheckpointError(f"tensor name {METADATA_KEY!r} is reserved")
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code, np_dt = _DTYPES[t.dtype]
        raw = t.numpy().astype(np_dt, copy=False).tobytes()
        header[name] = {"shape": list(t.shape), "dtype": code, "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    payload = memoryview(data)[16 + hlen :]
    metadata = header.pop(METADATA_KEY, {})
    tensors = {}
    for name, info in header.items():
        np_dt, torch_dt = _BY_NAME[info["dtype"]]
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        start = info["offset"]
        end = start + count * np_dt.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {name} runs past end of file")
        arr = np.frombuffer(payload[start:end], dtype=np_dt).reshape(info["shape"])
        tensors[name] = torch.from_numpy(arr.copy()).to(torch_dt)
    return tensors, metadata
