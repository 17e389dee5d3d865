"""Single-file checkpoint container.

Layout: ``b"SGDMCKPT"``, a little-endian u64 header length, a UTF-8 JSON
header (``meta`` plus one ``{name, shape, offset}`` entry per array), then the
concatenated little-endian float32 payloads. Keys are sorted so identical
weights and metadata always produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from sgdm.errors import IntegrityError

MAGIC = b"SGDMCKPT"


def save_arrays(path, arrays: dict, meta: dict | None = None) -> Path:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = arrays[name]
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        a = np.ascontiguousarray(a, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<Q", len(header)) + header)
        for c in chunks:
            f.write(c)
    return path


def load_arrays(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise IntegrityError(f"{path} is not a checkpoint")
    (n,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + n])
    base = 16 + n
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(raw, "<f4", count, base + e["offset"]).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save_module(path, module: torch.nn.Module, meta: dict | None = None) -> Path:
    return save_arrays(path, {k: v for k, v in module.state_dict().items()}, meta)


def load_module(path, module: torch.nn.Module) -> dict:
    """Load weights into ``module`` in place; returns the header metadata."""
    arrays, meta = load_arrays(path)
    state = module.state_dict()
    missing = set(state) ^ set(arrays)
    if missing:
        raise IntegrityError(f"checkpoint/module key mismatch: {sorted(missing)[:5]}")
    module.load_state_dict({k: torch.from_numpy(arrays[k]).to(state[k].dtype) for k in state})
    return meta
