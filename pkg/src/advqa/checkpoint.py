"""Single-file binary checkpoints: versioned JSON header + float64 blob."""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

MAGIC = b"ADVQACKPT"
VERSION = 1


def vocab_hash(tokens) -> str:
    return hashlib.sha256("\n".join(tokens).encode()).hexdigest()


def save_checkpoint(path, kind: str, config: dict, vocabs: dict, state_dict):
    tensors = []
    blobs = []
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().to(torch.float64).numpy()
        tensors.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "version": VERSION,
        "kind": kind,
        "config": config,
        "vocabs": vocabs,
        "vocab_hash": {k: vocab_hash(v) for k, v in vocabs.items()},
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Returns (header dict, state_dict of float64 tensors)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not an advqa checkpoint")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len))
        if header["version"] != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
        state = {}
        for spec in header["tensors"]:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            data = np.frombuffer(f.read(n * 8), dtype=np.float64).reshape(spec["shape"])
            state[spec["name"]] = torch.from_numpy(data.copy())
    return header, state
