"""Checkpoint directories: ``manifest.json`` plus ``tensors.bin``.

``tensors.bin`` layout (all integers little-endian)::

    magic   4 bytes  b"IDVT"
    version u32      1
    count   u32      number of records
    record * count:
        name_len u16, name (utf-8)
        dtype    u8   (see DTYPE_CODES)
        ndim     u8,  shape u64 * ndim
        nbytes   u64, raw little-endian element data (C order)

Tensor names are ``<component>.<state_dict key>``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, MissingCheckpointError

MAGIC = b"IDVT"
VERSION = 1
DTYPE_CODES = {
    torch.float32: (0, "<f4"),
    torch.float64: (1, "<f8"),
    torch.int64: (2, "<i8"),
    torch.int32: (3, "<i4"),
    torch.complex64: (4, "<c8"),
    torch.complex128: (5, "<c16"),
}
_BY_CODE = {code: (dt, np_dt) for dt, (code, np_dt) in DTYPE_CODES.items()}


def write_tensors(path, tensors: dict[str, torch.Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(tensors)))
        for name, t in tensors.items():
            t = t.detach().cpu().contiguous()
            code, np_dt = DTYPE_CODES[t.dtype]
            raw = t.numpy().astype(np_dt, copy=False).tobytes()
            key = name.encode()
            fh.write(struct.pack("<H", len(key)) + key)
            fh.write(struct.pack("<BB", code, t.ndim))
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            fh.write(struct.pack("<Q", len(raw)) + raw)


def read_tensors(path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ConfigurationError(f"{path}: not a tensor archive")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ConfigurationError(f"{path}: unsupported archive version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + n].decode()
        off += n
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", data, off)
        off += 8
        dtype, np_dt = _BY_CODE[code]
        arr = np.frombuffer(data, dtype=np_dt, count=nbytes // np.dtype(np_dt).itemsize, offset=off)
        out[name] = torch.from_numpy(arr.reshape(shape).copy())
        off += nbytes
    return out


def save_checkpoint(directory, components: dict[str, torch.nn.Module], manifest: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for comp, module in components.items():
        for key, value in module.state_dict().items():
            tensors[f"{comp}.{key}"] = value
    write_tensors(directory / "tensors.bin", tensors)
    manifest = dict(manifest, components=sorted(components))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    """Return ``(manifest, {component: state_dict})``."""
    directory = Path(directory)
    if not (directory / "manifest.json").is_file() or not (directory / "tensors.bin").is_file():
        raise MissingCheckpointError(f"missing checkpoint at {directory}")
    manifest = json.loads((directory / "manifest.json").read_text())
    states: dict[str, dict[str, torch.Tensor]] = {}
    for name, tensor in read_tensors(directory / "tensors.bin").items():
        comp, key = name.split(".", 1)
        states.setdefault(comp, {})[key] = tensor
    return manifest, states
