"""Named parameter storage and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic      4 bytes  b"OCCK"
    version    u8       1
    meta_len   u32      length of the UTF-8 JSON metadata blob
    meta       bytes    JSON object (config, model id, band, optimizer step, ...)
    count      u32      number of tensor entries
    entries    repeated:
        name_len u16, name (UTF-8 layer path),
        ndim u8, dims u32 * ndim,
        data float32 * prod(dims)  (row-major)
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor

CKPT_MAGIC = b"OCCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Flat map from layer path (``core_enc/l0/phi_hh/kernel``) to a trainable tensor."""

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._tensors: dict[str, Tensor] = {}

    def create(self, path: str, value: np.ndarray) -> Tensor:
        if path in self._tensors:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=path)
        self._tensors[path] = t
        return t

    def uniform(self, path: str, shape: tuple, bound: float) -> Tensor:
        return self.create(path, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, path: str, shape: tuple) -> Tensor:
        return self.create(path, np.zeros(shape))

    def __getitem__(self, path: str) -> Tensor:
        return self._tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._tensors) - set(state)
            if missing:
                raise CheckpointError(f"checkpoint lacks {len(missing)} parameters, e.g. {sorted(missing)[0]!r}")
        for name, arr in state.items():
            if name not in self._tensors:
                if strict:
                    raise CheckpointError(f"unexpected parameter {name!r} in checkpoint")
                continue
            t = self._tensors[name]
            if t.shape != arr.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} does not match model {t.shape}")
            t.data = np.array(arr, dtype=self.dtype)


def atomic_write(path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file and rename; never leaves a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<BI", blob, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 9
        meta = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            nbytes = 4 * size
            if pos + nbytes > len(blob):
                raise CheckpointError(f"truncated data for {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return tensors, meta


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    atomic_write(path, encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())
