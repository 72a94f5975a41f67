"""Versioned binary checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"W2VM"
    version u32      currently 1
    meta    u64 length + UTF-8 JSON: step, config, config hash, rng
            states (base64), arbitrary extras
    count   u64      number of named tensors
    per tensor:
        name   u16 length + UTF-8 bytes
        dtype  u8   4 = float32, 8 = float64
        ndim   u8, then ndim * u64 dims
        data   raw little-endian values

Saving the result of a load reproduces the file byte for byte, which is
what makes resume-bit-exactness testable.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import torch

from .config import RunConfig, config_dict, config_from_dict, config_hash

MAGIC = b"W2VM"
VERSION = 1
_DTYPE_CODES = {torch.float32: 4, torch.float64: 8}
_CODE_DTYPES = {4: torch.float32, 8: torch.float64}
_NUMPY_DTYPES = {4: "<f4", 8: "<f8"}


class CheckpointError(ValueError):
    pass


def encode_rng_state(generator: torch.Generator) -> str:
    return base64.b64encode(generator.get_state().numpy().tobytes()).decode()


def decode_rng_state(generator: torch.Generator, encoded: str) -> None:
    raw = base64.b64decode(encoded.encode())
    state = torch.frombuffer(bytearray(raw), dtype=torch.uint8).clone()
    generator.set_state(state)


def save_checkpoint(
    path: str | Path,
    step: int,
    config: RunConfig,
    tensors: dict[str, torch.Tensor],
    rng_states: dict[str, str] | None = None,
    extras: dict | None = None,
) -> None:
    meta = {
        "step": int(step),
        "config": config_dict(config),
        "config_hash": config_hash(config),
        "rng_states": rng_states or {},
        "extras": extras or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_bytes)), meta_bytes]
    names = sorted(tensors)
    parts.append(struct.pack("<Q", len(names)))
    for name in names:
        t = tensors[name].detach().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
        name_bytes = name.encode()
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BB", _DTYPE_CODES[t.dtype], t.dim()))
        for d in t.shape:
            parts.append(struct.pack("<Q", d))
        parts.append(t.numpy().astype(_NUMPY_DTYPES[_DTYPE_CODES[t.dtype]], copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


class Checkpoint:
    def __init__(self, step: int, config: RunConfig, tensors: dict[str, torch.Tensor],
                 rng_states: dict[str, str], extras: dict, config_hash_value: str):
        self.step = step
        self.config = config
        self.tensors = tensors
        self.rng_states = rng_states
        self.extras = extras
        self.config_hash = config_hash_value

    def model_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt.")}

    def optimizer_tensors(self) -> dict[str, torch.Tensor]:
        return {k[len("opt."):]: v for k, v in self.tensors.items() if k.startswith("opt.")}


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if view[:4].tobytes() != MAGIC:
        raise CheckpointError(f"{path}: bad magic {view[:4].tobytes()!r}")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 8
    (meta_len,) = struct.unpack_from("<Q", view, offset)
    offset += 8
    meta = json.loads(view[offset : offset + meta_len].tobytes().decode())
    offset += meta_len
    (count,) = struct.unpack_from("<Q", view, offset)
    offset += 8
    tensors: dict[str, torch.Tensor] = {}
    import numpy as np

    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        name = view[offset : offset + name_len].tobytes().decode()
        offset += name_len
        code, ndim = struct.unpack_from("<BB", view, offset)
        offset += 2
        dims = struct.unpack_from(f"<{ndim}Q", view, offset) if ndim else ()
        offset += 8 * ndim
        numel = 1
        for d in dims:
            numel *= d
        nbytes = numel * code
        arr = np.frombuffer(view[offset : offset + nbytes], dtype=_NUMPY_DTYPES[code]).reshape(dims)
        offset += nbytes
        tensors[name] = torch.from_numpy(arr.copy())
    config = config_from_dict(meta["config"])
    return Checkpoint(
        step=meta["step"],
        config=config,
        tensors=tensors,
        rng_states=meta.get("rng_states", {}),
        extras=meta.get("extras", {}),
        config_hash_value=meta["config_hash"],
    )
